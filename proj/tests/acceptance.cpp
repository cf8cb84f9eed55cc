#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "s4se/ssm_nd.hpp"
#include "s4se/trainer.hpp"

using namespace s4se;
using Eigen::MatrixXcd;
using Eigen::VectorXcd;

namespace {

namespace fs = std::filesystem;

std::chrono::steady_clock::time_point t_start;
void tic() { t_start = std::chrono::steady_clock::now(); }
double toc() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
}

void report(int criterion, const char* name, bool ok) {
    std::printf("ACCEPTANCE [%2d] %-24s %s  (%.1f s)\n", criterion, name, ok ? "PASS" : "FAIL",
                toc());
    std::fflush(stdout);
    CHECK_MESSAGE(ok, name);
}

MatrixXcd random_complex(int r, int c, Rng& rng) {
    MatrixXcd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = cdouble(rng.normal(), rng.normal());
    return m;
}

// stable since Re(Lambda) < 0 and P P^H is positive semidefinite
DplrSSM random_dplr(int n, Rng& rng) {
    DplrSSM d;
    d.Lambda.resize(n);
    d.P.resize(n);
    d.B.resize(n);
    d.C.resize(n);
    for (int i = 0; i < n; ++i) {
        d.Lambda(i) = cdouble(-rng.uniform(0.05, 1.0), rng.normal());
        d.P(i) = cdouble(0.3 * rng.normal(), 0.3 * rng.normal());
        d.B(i) = cdouble(rng.normal(), rng.normal());
        d.C(i) = cdouble(rng.normal(), rng.normal());
    }
    d.delta = rng.uniform(1e-3, 1e-1);
    return d;
}

double rel_err(const VectorXcd& a, const VectorXcd& b) {
    return (a - b).norm() / std::max(b.norm(), 1e-300);
}

fs::path work_dir(const std::string& sub) {
    auto d = fs::temp_directory_path() / "s4se_acceptance" / sub;
    fs::create_directories(d);
    return d;
}

std::string make_corpus(const fs::path& dir, int clips, int len, std::uint64_t seed) {
    Rng rng(seed);
    std::ofstream man(dir / "manifest.csv");
    man << "id,clean_path,noise_path,snr_db\n";
    for (int i = 0; i < clips; ++i) {
        std::vector<double> clean(static_cast<std::size_t>(len)), noise(clean.size());
        // bin-aligned: f = k * fs / 256, exact for the 256/256/64 STFT below
        const double f = (4.0 + i) * 16000.0 / 256.0;
        for (int t = 0; t < len; ++t) {
            clean[static_cast<std::size_t>(t)] = 0.4 * std::sin(2.0 * kPi * f * t / 16000.0);
            noise[static_cast<std::size_t>(t)] = 0.3 * rng.uniform(-1.0, 1.0);
        }
        write_wav((dir / ("c" + std::to_string(i) + ".wav")).string(), clean, 16000);
        write_wav((dir / ("n" + std::to_string(i) + ".wav")).string(), noise, 16000);
        man << "utt" << i << ",c" << i << ".wav,n" << i << ".wav,0\n";
    }
    return (dir / "manifest.csv").string();
}

std::vector<unsigned char> slurp(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("criterion 1: recurrence/convolution duality") {
    tic();
    Rng rng(101);
    bool ok = true;
    for (int c = 0; c < 100 && ok; ++c) {
        const int N = 1 + static_cast<int>(rng.below(16));
        const int L = 16 + static_cast<int>(rng.below(241));
        DiscreteSSM d;
        MatrixXcd m = random_complex(N, N, rng);
        d.Abar = 0.95 * m / m.norm();  // Frobenius bound => spectral radius < 1
        d.Bbar = random_complex(N, 1, rng);
        d.C = random_complex(1, N, rng).row(0);
        d.D = cdouble(rng.normal(), rng.normal());
        d.delta = 0.01;
        VectorXcd u = random_complex(L, 1, rng);

        VectorXcd state = VectorXcd::Zero(N);
        VectorXcd via_step(L);
        for (int t = 0; t < L; ++t) via_step(t) = step(d, state, u(t));
        VectorXcd via_conv = apply_conv(materialize_kernel(d, L), u, d.D);
        ok = rel_err(via_step, via_conv) < 1e-6;
    }
    ok = ok && toc() < 10.0;
    report(1, "ssm duality", ok);
}

TEST_CASE("criterion 2: DPLR fast path vs dense kernel") {
    tic();
    Rng rng(102);
    bool ok = true;
    for (int c = 0; c < 50 && ok; ++c) {
        const int N = 2 + static_cast<int>(rng.below(31));
        const int L = 64 + static_cast<int>(rng.below(961));
        DplrSSM d = random_dplr(N, rng);
        auto fast = materialize_kernel_dplr(d, L);
        auto dense = materialize_kernel(discretize(d.dense(), d.delta), L);
        ok = rel_err(fast.taps, dense.taps) < 1e-5;
    }
    ok = ok && toc() < 30.0;
    report(2, "dplr equivalence", ok);
}

TEST_CASE("criterion 3: S4ND separability") {
    tic();
    Rng rng(103);
    bool ok = true;
    for (int c = 0; c < 50 && ok; ++c) {
        const int L1 = 8 + static_cast<int>(rng.below(57));
        const int L2 = 8 + static_cast<int>(rng.below(57));
        const int R = 1 + static_cast<int>(rng.below(4));
        Ssm2D s;
        s.axis1 = random_dplr(2 + static_cast<int>(rng.below(5)), rng);
        s.axis2 = random_dplr(2 + static_cast<int>(rng.below(5)), rng);
        for (int r = 0; r < R; ++r) {
            Ssm2D::Factor f;
            f.c1 = random_complex(s.axis1.state_dim(), 1, rng);
            f.c2 = random_complex(s.axis2.state_dim(), 1, rng);
            s.c_factors.push_back(std::move(f));
        }
        auto k = materialize_kernel_2d(s, L1, L2);
        MatrixXcd u = random_complex(L1, L2, rng);
        MatrixXcd sep = apply_conv_2d(k, u);
        MatrixXcd direct = MatrixXcd::Zero(L1, L2);
        for (int i = 0; i < L1; ++i)
            for (int j = 0; j < L2; ++j)
                for (int a = 0; a <= i; ++a)
                    for (int b = 0; b <= j; ++b) direct(i, j) += k.taps(a, b) * u(i - a, j - b);
        ok = (sep - direct).norm() / std::max(direct.norm(), 1e-300) < 1e-6;
    }
    ok = ok && toc() < 30.0;
    report(3, "s4nd separability", ok);
}

namespace {

using LossFn = std::function<Var(Tape&, std::vector<Var>&)>;

double eval_loss(const std::vector<Tensor>& params, const LossFn& f) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    return f(tape, vars).val()[0];
}

double fd_check(std::vector<Tensor> params, const LossFn& f, double step = 1e-4,
                int max_per_param = 60) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    Var loss = f(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    for (const auto& v : vars) analytic.push_back(tape.grad(v.id));

    Rng pick(999);
    double worst = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const long n = params[pi].size();
        for (long j = 0; j < n; ++j) {
            if (n > max_per_param && pick.below(static_cast<std::uint64_t>(n)) >=
                                         static_cast<std::uint64_t>(max_per_param))
                continue;
            const double keep = params[pi][j];
            params[pi][j] = keep + step;
            const double up = eval_loss(params, f);
            params[pi][j] = keep - step;
            const double dn = eval_loss(params, f);
            params[pi][j] = keep;
            const double fd = (up - dn) / (2.0 * step);
            const double a = analytic[pi][j];
            worst = std::max(worst, std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-6));
        }
    }
    return worst;
}

Tensor rand_t(std::vector<int> shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = offset + scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("criterion 4: gradient suite") {
    tic();
    using namespace ad;
    Rng rng(104);
    double worst = 0;

    // general elementwise chain
    worst = std::max(worst, fd_check({rand_t({9}, rng), rand_t({9}, rng)},
                                     [](Tape&, std::vector<Var>& v) {
                                         Var a = v[0], b = v[1];
                                         Var x = add(mul(a, b), sub(a, scale(b, 0.3)));
                                         x = mul(gelu(vtanh(x)), sigmoid(neg(add_const(a, 0.1))));
                                         return mean(mul(x, vabs(div(b, add_const(vabs(a), 2.0)))));
                                     }));
    // positive-domain chain
    worst = std::max(worst, fd_check({rand_t({8}, rng, 0.3, 2.0)},
                                     [](Tape&, std::vector<Var>& v) {
                                         Var x = clamp_min(v[0], 0.5);
                                         x = vsqrt(vexp(vlog(x)));
                                         return sum(softplus(x));
                                     }));
    // linear algebra
    worst = std::max(worst,
                     fd_check({rand_t({4, 5}, rng), rand_t({5, 3}, rng), rand_t({6, 4}, rng),
                               rand_t({6}, rng), rand_t({6}, rng, 0.2, 1.0), rand_t({6}, rng)},
                              [](Tape&, std::vector<Var>& v) {
                                  Var y = matmul(v[0], v[1]);                    // [4,3]
                                  Var z = linear_cols(v[2], y, v[3]);            // [6,3]
                                  return mean(layer_norm_cols(z, v[4], v[5]));
                              }));
    // shape plumbing and resampling
    worst = std::max(worst, fd_check({rand_t({2, 4, 6}, rng), rand_t({2, 4, 6}, rng)},
                                     [](Tape&, std::vector<Var>& v) {
                                         Var x = concat_rows(v[0], v[1]);        // [4,4,6]
                                         x = pad2d_to(x, 6, 8);
                                         x = avgpool2d(x);
                                         x = upsample2d(x);
                                         x = crop2d(x, 4, 6);
                                         Var y = reshape(slice_rows(x, 1, 2), {2, 24});
                                         y = pad1d_to(y, 28);
                                         y = avgpool1d(y, 2);
                                         y = upsample1d(y, 2);
                                         y = crop1d(y, 24);
                                         return mean(y);
                                     }));
    // fused SSM primitives
    {
        const int H = 2, N = 3, R = 2, L1 = 7, L2 = 6;
        std::vector<Tensor> ps = {rand_t({H, N}, rng, 0.2, -0.4), rand_t({H, N}, rng),
                                  rand_t({H, N}, rng, 0.3),       rand_t({H, N}, rng, 0.3),
                                  rand_t({H, N}, rng),            rand_t({H, N}, rng),
                                  rand_t({H, R, N}, rng),         rand_t({H, R, N}, rng),
                                  rand_t({H}, rng, 0.3, -2.0),    rand_t({H, L1, L2}, rng)};
        worst = std::max(worst, fd_check(ps, [&](Tape&, std::vector<Var>& v) {
            Var k1 = s4_axis_kernel(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], L1);
            Var k2 = s4_axis_kernel(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], L2);
            Var y2 = s4nd_conv(v[9], k1, k2);
            Var u1 = reshape(slice_rows(v[9], 0, 1), {H / 2, L1 * L2});
            Var k1r = slice_rows(reshape(k1, {H * R, 2 * L1}), 0, 1);
            Var y1 = conv1d_causal(crop1d(u1, L1), reshape(k1r, {1, 1, 2, L1}));
            return add(mean(y2), mean(y1));
        }));
    }
    // stft_mag
    worst = std::max(worst, fd_check({rand_t({96}, rng, 0.4)}, [](Tape&, std::vector<Var>& v) {
                         return mean(stft_mag(v[0], StftConfig(16, 12, 4)));
                     }));
    // the four losses (Eqs. 6-9)
    {
        Rng r2(40);
        std::vector<double> ref(120);
        for (auto& x : ref) x = 0.4 * r2.normal();
        MultiResStftConfig mr;
        mr.settings = {StftConfig(32, 24, 8), StftConfig(16, 12, 4)};
        worst = std::max(worst, fd_check({rand_t({120}, rng, 0.4)},
                                         [&](Tape&, std::vector<Var>& v) {
                                             return ad_stft_loss(v[0], ref, mr.settings[0]);
                                         }));
        worst = std::max(worst, fd_check({rand_t({120}, rng, 0.4)},
                                         [&](Tape&, std::vector<Var>& v) {
                                             return ad_time_domain_loss(v[0], ref, mr);
                                         }));
        MatrixXcd S = random_complex(6, 5, r2);
        worst = std::max(worst, fd_check({rand_t({6, 5}, rng, 1.0, 2.0)},
                                         [&](Tape&, std::vector<Var>& v) {
                                             return ad_mag_loss(v[0], S.cwiseAbs());
                                         }));
        worst = std::max(worst, fd_check({rand_t({6, 5}, rng), rand_t({6, 5}, rng)},
                                         [&](Tape&, std::vector<Var>& v) {
                                             return ad_complex_loss(v[0], v[1], S);
                                         }));
    }
    // full variants at tiny scale
    bool variants_ok = true;
    for (auto [v, s] : {std::pair{Variant::time_s4_unet, Scenario::complex_masking},
                        std::pair{Variant::tf_s4_unet, Scenario::mag_masking},
                        std::pair{Variant::s4nd_unet, Scenario::complex_masking}}) {
        auto rep = gradcheck(tiny_config(v, s), 42);
        variants_ok = variants_ok && rep.pass;
        for (const auto& g : rep.groups) variants_ok = variants_ok && !g.disconnected;
        worst = std::max(worst, rep.worst);
    }
    const bool ok = variants_ok && worst <= 1e-3 && toc() < 300.0;
    std::printf("  gradient suite worst rel err: %.3e\n", worst);
    report(4, "gradient suite", ok);
}

TEST_CASE("criterion 5: dsp suite") {
    tic();
    Rng rng(105);
    bool ok = true;

    for (const StftConfig cfg : {StftConfig(510, 400, 100), StftConfig(510, 255, 255)}) {
        std::vector<double> x(5000);
        for (auto& v : x) v = 0.5 * rng.uniform(-1.0, 1.0);
        auto back = istft(stft(x, cfg));
        double num = 0, den = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            num += (back[i] - x[i]) * (back[i] - x[i]);
            den += x[i] * x[i];
        }
        ok = ok && std::sqrt(num / den) <= 1e-6;
    }

    {
        // correlated magnitude features; whitening must kill the off-diagonals
        const int F = 12, T = 400;
        std::vector<ComplexSpectrogram> specs(1);
        specs[0].config = StftConfig(2 * (F - 1), 2 * (F - 1), F - 1);
        specs[0].data.resize(F, T);
        for (int t = 0; t < T; ++t) {
            const double shared = rng.normal();
            for (int f = 0; f < F; ++f)
                specs[0].data(f, t) =
                    cdouble(2.0 + shared + 0.3 * rng.normal(), 0.2 * rng.normal());
        }
        auto stats = fit_whitening(specs, 1e-9);
        Eigen::MatrixXd w = whiten_mag(specs[0].data.cwiseAbs(), stats, false);
        Eigen::VectorXd mean = w.rowwise().mean();
        Eigen::MatrixXd centered = w.colwise() - mean;
        Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(T);
        const double max_diag = cov.diagonal().maxCoeff();
        double max_off = 0;
        for (int i = 0; i < F; ++i)
            for (int j = 0; j < F; ++j)
                if (i != j) max_off = std::max(max_off, std::abs(cov(i, j)));
        ok = ok && max_off <= 1e-4 * max_diag;
    }

    {
        ComplexSpectrogram s;
        s.config = StftConfig(30, 20, 10);
        s.data = random_complex(16, 40, rng);
        auto back = amplitude_transform(amplitude_transform(s, 0.3, 0.7, false), 0.3, 0.7, true);
        ok = ok && (back.data - s.data).norm() / s.data.norm() <= 1e-9;
    }
    report(5, "dsp suite", ok);
}

TEST_CASE("criterion 6: augmentation suite") {
    tic();
    Rng rng(106);
    bool ok = true;

    for (double snr : {0.0, 5.0, 10.0, 15.0}) {
        std::vector<double> clean(3000), noise(3000);
        for (auto& v : clean) v = 0.5 * rng.uniform(-1.0, 1.0);
        for (auto& v : noise) v = 0.2 * rng.uniform(-1.0, 1.0);
        auto r = mix_at_snr(clean, noise, snr);
        double pc = 0, pn = 0;
        for (std::size_t i = 0; i < clean.size(); ++i) {
            pc += clean[i] * clean[i];
            pn += r.gain * noise[i] * r.gain * noise[i];
        }
        ok = ok && std::abs(10.0 * std::log10(pc / pn) - snr) < 1e-6;
    }

    {
        Batch b;
        for (int i = 0; i < 6; ++i) {
            Utterance u;
            u.clean.resize(500);
            u.noise.resize(500);
            for (auto& v : u.clean) v = 0.3 * rng.uniform(-1.0, 1.0);
            for (auto& v : u.noise) v = 0.3 * rng.uniform(-1.0, 1.0);
            u.noise_gain = 1.0;
            u.noisy = u.clean;
            for (std::size_t t = 0; t < 500; ++t) u.noisy[t] += u.noise[t];
            b.items.push_back(std::move(u));
        }
        std::vector<std::vector<double>> before;
        for (const auto& u : b.items) before.push_back(u.noise);
        Rng r2(7);
        remix(b, r2);
        std::vector<std::vector<double>> after;
        for (const auto& u : b.items) after.push_back(u.noise);
        std::sort(before.begin(), before.end());
        std::sort(after.begin(), after.end());
        ok = ok && before == after;
    }

    {
        StftConfig cfg(510, 400, 100);
        std::vector<double> x(4000);
        for (auto& v : x) v = 0.4 * rng.uniform(-1.0, 1.0);
        const double m0 = 0.35 * hz_to_mel(8000.0);
        auto bins = band_bins(m0, 0.2, cfg, 16000.0);
        auto energy = [&](const std::vector<double>& s) {
            auto sp = stft(s, cfg);
            double e = 0;
            for (int k : bins) e += sp.data.row(k).squaredNorm();
            return e;
        };
        auto y = bandmask_fixed(x, m0, 0.2, cfg, 16000.0);
        ok = ok && energy(y) <= 1e-3 * energy(x);
    }
    report(6, "augmentation suite", ok);
}

TEST_CASE("criterion 7: tiny overfit") {
    tic();
    const auto dir = work_dir("overfit");
    const std::string manifest = make_corpus(dir, 10, 1600, 71);

    TrainConfig tc;
    tc.model.variant = Variant::s4nd_unet;
    tc.model.scenario = Scenario::complex_masking;
    tc.model.in_channels = 2;
    tc.model.num_unet_levels = 1;
    tc.model.blocks_per_level = 2;
    tc.model.base_channels = 12;
    tc.model.state_size = 4;
    tc.model.rank = 1;
    tc.model.stft = StftConfig(256, 256, 64);
    tc.epochs = 200;
    tc.batch_size = 1;
    tc.segment_length = 1600;
    tc.remix_prob = 0.0;  // pure overfit, no augmentation
    tc.bandmask_prob = 0.0;
    tc.opt.lr = 3e-3;

    auto result = train(tc, manifest, (dir / "out").string(), 5);
    REQUIRE(result.logs.size() == 200);
    const double first_loss = result.logs.front().loss;
    const double last_loss = result.logs.back().loss;

    // SI-SDR of the raw noisy mixtures, recomputed exactly as the trainer mixes
    double base = 0;
    for (int i = 0; i < 10; ++i) {
        auto [clean, r1] = read_wav((dir / ("c" + std::to_string(i) + ".wav")).string());
        auto [noise, r2] = read_wav((dir / ("n" + std::to_string(i) + ".wav")).string());
        auto mix = mix_at_snr(clean, noise, 0.0);
        for (auto& v : clean) v *= mix.norm_scale;
        base += si_sdr(clean, mix.noisy);
    }
    base /= 10.0;
    const double gain_db = result.logs.back().si_sdr_db - base;

    std::printf("  loss %.4f -> %.4f (%.1f%% drop), si-sdr %+.2f dB over noisy (%+.2f -> %+.2f)\n",
                first_loss, last_loss, 100.0 * (1.0 - last_loss / first_loss), gain_db, base,
                result.logs.back().si_sdr_db);
    const bool ok = last_loss <= 0.1 * first_loss && gain_db >= 5.0;
    report(7, "tiny overfit", ok);
}

TEST_CASE("criterion 8: parameter budget") {
    tic();
    ModelConfig cfg;  // default small s4nd_unet
    Model m(cfg, 1);
    const long n = m.count_params();
    std::printf("  default s4nd_unet: %ld params (budget 600000..950000, paper-scale 750k)\n", n);
    report(8, "parameter budget", n >= 600000 && n <= 950000);
}

TEST_CASE("criterion 9: performance sanity") {
    tic();
    auto direct = run_bench("conv-direct", 1, 4096);
    auto fftc = run_bench("conv-fft", 1, 4096);
    auto naive = run_bench("kernel-naive", 16, 1024);
    auto dplr = run_bench("kernel-dplr", 16, 1024);
    std::printf("  %s\n  %s\n  %s\n  %s\n  %s\n", bench_csv_header(),
                direct.to_csv_line().c_str(), fftc.to_csv_line().c_str(),
                naive.to_csv_line().c_str(), dplr.to_csv_line().c_str());
    const bool ok = direct.millis >= 2.0 * fftc.millis && naive.millis >= 2.0 * dplr.millis;
    report(9, "performance sanity", ok);
}

TEST_CASE("criterion 10: training determinism") {
    tic();
    const auto dir = work_dir("determinism");
    const std::string manifest = make_corpus(dir, 4, 2000, 91);
    TrainConfig tc;
    tc.model = tiny_config(Variant::s4nd_unet, Scenario::complex_masking);
    tc.epochs = 5;
    tc.batch_size = 2;
    tc.segment_length = 1600;

    auto a = train(tc, manifest, (dir / "a").string(), 17);
    auto b = train(tc, manifest, (dir / "b").string(), 17);
    REQUIRE(a.checkpoint_paths.size() == 5);
    const bool ok = slurp(a.checkpoint_paths.back()) == slurp(b.checkpoint_paths.back());
    report(10, "determinism", ok);
}
