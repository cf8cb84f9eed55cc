#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "s4se/trainer.hpp"

using namespace s4se;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& sub) {
    auto d = fs::temp_directory_path() / "s4se_test_trainer" / sub;
    fs::create_directories(d);
    return d;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// sine-plus-noise corpus on disk; returns the manifest path
std::string make_corpus(const fs::path& dir, int clips, int len, std::uint64_t seed) {
    Rng rng(seed);
    std::ofstream man(dir / "manifest.csv");
    man << "id,clean_path,noise_path,snr_db\n";
    for (int i = 0; i < clips; ++i) {
        std::vector<double> clean(static_cast<std::size_t>(len)), noise(clean.size());
        const double f = 200.0 + 40.0 * i;
        for (int t = 0; t < len; ++t) {
            clean[static_cast<std::size_t>(t)] = 0.4 * std::sin(2.0 * kPi * f * t / 16000.0);
            noise[static_cast<std::size_t>(t)] = 0.4 * rng.uniform(-1.0, 1.0);
        }
        write_wav((dir / ("c" + std::to_string(i) + ".wav")).string(), clean, 16000);
        write_wav((dir / ("n" + std::to_string(i) + ".wav")).string(), noise, 16000);
        man << "utt" << i << ",c" << i << ".wav,n" << i << ".wav,0\n";
    }
    return (dir / "manifest.csv").string();
}

TrainConfig tiny_train_config() {
    TrainConfig tc;
    tc.model = tiny_config(Variant::s4nd_unet, Scenario::complex_masking);
    tc.epochs = 2;
    tc.batch_size = 3;
    tc.segment_length = 1600;
    tc.bandmask_prob = 0.5;
    return tc;
}

}  // namespace

TEST_CASE("adam first step has closed-form magnitude; zero grads are a no-op") {
    ParamStore ps;
    ps.add("w", Tensor({3}, 1.0));
    OptimizerState st = OptimizerState::init(ps);
    Tensor g({3});
    g[0] = 0.5;
    g[1] = -2.0;
    g[2] = 1e-3;
    adam_step(ps, {g}, st);
    // bias-corrected m^ = g, v^ = g^2 -> update = lr * sign(g) * |g| / (|g| + eps)
    for (long j = 0; j < 3; ++j) {
        const double expect =
            1.0 - 1e-3 * g[j] / (std::abs(g[j]) + 1e-8);
        CHECK(ps[0].value[j] == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(1.0 - ps[0].value[j]) <= 1e-3 + 1e-15);
    }

    ParamStore ps2;
    ps2.add("w", Tensor({4}, 0.7));
    OptimizerState st2 = OptimizerState::init(ps2);
    for (int k = 0; k < 5; ++k) adam_step(ps2, {Tensor({4})}, st2);
    for (long j = 0; j < 4; ++j) CHECK(ps2[0].value[j] == 0.7);
    CHECK(st2.step == 5);
}

TEST_CASE("adam determinism and shape guard") {
    Rng rng(1);
    ParamStore a, b;
    a.add("w", Tensor({8}, 0.1));
    b.add("w", Tensor({8}, 0.1));
    OptimizerState sa = OptimizerState::init(a), sb = OptimizerState::init(b);
    for (int k = 0; k < 10; ++k) {
        Tensor g({8});
        for (auto& v : g.data) v = rng.normal();
        adam_step(a, {g}, sa);
        adam_step(b, {g}, sb);
    }
    CHECK(a[0].value.data == b[0].value.data);

    CHECK_THROWS_AS(adam_step(a, {Tensor({7})}, sa), ShapeMismatch);
}

TEST_CASE("gradient norm clipping") {
    std::vector<Tensor> grads{Tensor({2}, 3.0), Tensor({1}, 4.0)};  // norm sqrt(9+9+16)
    const double pre = clip_grad_norm(grads, 5.0);
    CHECK(pre == doctest::Approx(std::sqrt(34.0)));
    double post = 0;
    for (const auto& g : grads)
        for (double x : g.data) post += x * x;
    CHECK(std::sqrt(post) == doctest::Approx(5.0));

    std::vector<Tensor> small{Tensor({2}, 0.1)};
    clip_grad_norm(small, 5.0);
    CHECK(small[0].data[0] == 0.1);
}

TEST_CASE("train config json round-trip and validation") {
    TrainConfig tc = tiny_train_config();
    tc.opt.lr = 5e-4;
    tc.mrstft.settings = {StftConfig(64, 48, 16)};
    TrainConfig back = TrainConfig::from_json(tc.to_json());
    CHECK(back.epochs == 2);
    CHECK(back.batch_size == 3);
    CHECK(back.segment_length == 1600);
    CHECK(back.opt.lr == 5e-4);
    CHECK(back.mrstft.settings.size() == 1);
    CHECK(back.mrstft.settings[0].n_fft == 64);
    CHECK(back.model.variant == Variant::s4nd_unet);

    CHECK_THROWS_AS(TrainConfig::from_json("{oops"), ConfigError);
    TrainConfig bad = tc;
    bad.remix_prob = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.bandmask_width = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.lr_final = 2.0 * bad.opt.lr;  // schedule may only decay
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    tc.lr_final = 1e-5;
    CHECK(TrainConfig::from_json(tc.to_json()).lr_final == 1e-5);
    bad = tc;
    bad.model = tiny_config(Variant::time_s4_unet, Scenario::complex_masking);
    bad.model.whitening = true;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoint round-trip is bit-exact; bad files are rejected") {
    Model m(tiny_config(Variant::s4nd_unet, Scenario::complex_masking), 3);
    Rng rng(4);
    Checkpoint ck;
    ck.config = m.config();
    ck.params = m.params();
    ck.opt = OptimizerState::init(m.params());
    ck.opt.step = 17;
    for (auto& t : ck.opt.m)
        for (auto& v : t.data) v = rng.normal();
    for (auto& t : ck.opt.v)
        for (auto& v : t.data) v = std::abs(rng.normal());
    WhiteningStats w;
    w.mean = Eigen::VectorXd::Random(5);
    w.transform = Eigen::MatrixXd::Random(5, 5);
    w.inverse = Eigen::MatrixXd::Random(5, 5);
    w.eps = 1e-4;
    ck.whitening = w;
    ck.rng_seed = 99;
    ck.rng_counter = 1234;
    ck.epoch = 7;

    const auto path = tmp_dir("ckpt") / "a.ckpt";
    write_checkpoint(path.string(), ck);
    Checkpoint back = read_checkpoint(path.string());
    CHECK(back.config.to_json() == ck.config.to_json());
    REQUIRE(back.params.size() == ck.params.size());
    for (int i = 0; i < ck.params.size(); ++i) {
        CHECK(back.params[i].name == ck.params[i].name);
        CHECK(back.params[i].value.data == ck.params[i].value.data);
    }
    CHECK(back.opt.step == 17);
    for (std::size_t i = 0; i < ck.opt.m.size(); ++i) {
        CHECK(back.opt.m[i].data == ck.opt.m[i].data);
        CHECK(back.opt.v[i].data == ck.opt.v[i].data);
    }
    REQUIRE(back.whitening.has_value());
    CHECK(back.whitening->mean == w.mean);
    CHECK(back.whitening->transform == w.transform);
    CHECK(back.whitening->eps == w.eps);
    CHECK(back.rng_seed == 99);
    CHECK(back.rng_counter == 1234);
    CHECK(back.epoch == 7);

    // writing the loaded checkpoint reproduces the file byte for byte
    const auto path2 = tmp_dir("ckpt") / "b.ckpt";
    write_checkpoint(path2.string(), back);
    CHECK(slurp(path) == slurp(path2));

    // version mismatch rejected, never migrated
    auto bytes = slurp(path);
    bytes[4] = 2;
    const auto bad = tmp_dir("ckpt") / "bad.ckpt";
    std::ofstream(bad, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
    CHECK_THROWS_AS(read_checkpoint(bad.string()), UnsupportedFormat);

    bytes[0] = 'X';
    std::ofstream(bad, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
    CHECK_THROWS_AS(read_checkpoint(bad.string()), CorruptHeader);
}

TEST_CASE("train: errors surface before any step") {
    const auto dir = tmp_dir("guards");
    TrainConfig tc = tiny_train_config();
    CHECK_THROWS_AS(train(tc, (dir / "missing.csv").string(), (dir / "out").string(), 1),
                    DataError);
    {
        std::ofstream man(dir / "empty.csv");
        man << "id,clean_path,noise_path,snr_db\n";
    }
    CHECK_THROWS_AS(train(tc, (dir / "empty.csv").string(), (dir / "out").string(), 1), DataError);

    const std::string manifest = make_corpus(dir, 2, 800, 5);
    tc.segment_length = 4000;  // longer than the clips
    CHECK_THROWS_AS(train(tc, manifest, (dir / "out").string(), 1), SignalTooShort);
    CHECK(!fs::exists(dir / "out" / "log.jsonl"));
}

TEST_CASE("train runs, logs, checkpoints, and is bitwise deterministic") {
    const auto dir = tmp_dir("smoke");
    const std::string manifest = make_corpus(dir, 5, 2000, 6);
    TrainConfig tc = tiny_train_config();

    auto r1 = train(tc, manifest, (dir / "run1").string(), 42);
    REQUIRE(r1.logs.size() == 2);
    REQUIRE(r1.checkpoint_paths.size() == 2);
    for (const auto& l : r1.logs) CHECK(std::isfinite(l.loss));
    CHECK(fs::exists(dir / "run1" / "log.jsonl"));

    auto r2 = train(tc, manifest, (dir / "run2").string(), 42);
    CHECK(slurp(r1.checkpoint_paths.back()) == slurp(r2.checkpoint_paths.back()));

    // different seed diverges
    auto r3 = train(tc, manifest, (dir / "run3").string(), 43);
    CHECK(slurp(r1.checkpoint_paths.back()) != slurp(r3.checkpoint_paths.back()));
}

TEST_CASE("resume reproduces the uninterrupted run exactly") {
    const auto dir = tmp_dir("resume");
    const std::string manifest = make_corpus(dir, 4, 2000, 7);
    TrainConfig tc = tiny_train_config();
    tc.epochs = 3;

    auto full = train(tc, manifest, (dir / "full").string(), 11);
    REQUIRE(full.checkpoint_paths.size() == 3);

    TrainConfig two = tc;
    two.epochs = 2;
    auto part = train(two, manifest, (dir / "part").string(), 11);
    auto resumed = train(tc, manifest, (dir / "part").string(), 11, part.checkpoint_paths.back());
    REQUIRE(resumed.checkpoint_paths.size() == 1);
    CHECK(slurp(full.checkpoint_paths.back()) == slurp(resumed.checkpoint_paths.back()));

    // config mismatch on resume is rejected
    TrainConfig other = tc;
    other.model.base_channels += 2;
    CHECK_THROWS_AS(
        train(other, manifest, (dir / "part").string(), 11, part.checkpoint_paths.back()),
        ConfigMismatch);
}

TEST_CASE("enhance: length contract, clamping, zero input for a mask model") {
    Model m(tiny_config(Variant::s4nd_unet, Scenario::complex_masking), 9);
    Rng rng(10);
    std::vector<double> noisy(1777);
    for (auto& v : noisy) v = 0.3 * rng.uniform(-1.0, 1.0);
    std::vector<double> ref = noisy;
    auto r = enhance(m, std::nullopt, noisy, &ref, "x");
    CHECK(r.samples.size() == noisy.size());
    for (double v : r.samples) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
        CHECK(std::isfinite(v));
    }
    REQUIRE(r.metrics.has_value());
    CHECK(r.metrics->id == "x");
    CHECK(std::isfinite(r.metrics->si_sdr_db));

    // mask scenario: zero in, (near-)zero out
    auto z = enhance(m, std::nullopt, std::vector<double>(1600, 0.0));
    double peak = 0;
    for (double v : z.samples) peak = std::max(peak, std::abs(v));
    CHECK(peak <= 1e-3);

    // time variant too
    Model mt(tiny_config(Variant::time_s4_unet, Scenario::complex_masking), 9);
    auto rt = enhance(mt, std::nullopt, noisy);
    CHECK(rt.samples.size() == noisy.size());
}

TEST_CASE("evaluate emits one parseable metrics record per manifest entry") {
    const auto dir = tmp_dir("eval");
    const std::string manifest = make_corpus(dir, 3, 1800, 12);
    TrainConfig tc = tiny_train_config();
    tc.epochs = 1;
    tc.segment_length = 1600;
    auto r = train(tc, manifest, (dir / "out").string(), 21);
    Checkpoint ck = read_checkpoint(r.checkpoint_paths.back());
    auto records = evaluate(ck, manifest);
    REQUIRE(records.size() == 3);
    for (const auto& rec : records) {
        CHECK(std::isfinite(rec.si_sdr_db));
        CHECK(std::isfinite(rec.lsd_db));
        CHECK(std::isfinite(rec.loss));
        CHECK(rec.to_json_line().find("utt") != std::string::npos);
    }
}

TEST_CASE("whitening path trains and round-trips through checkpoints") {
    const auto dir = tmp_dir("whiten");
    const std::string manifest = make_corpus(dir, 4, 2000, 13);
    TrainConfig tc = tiny_train_config();
    tc.epochs = 1;
    tc.model = tiny_config(Variant::tf_s4_unet, Scenario::mag_regression);
    tc.model.whitening = true;
    auto r = train(tc, manifest, (dir / "out").string(), 31);
    Checkpoint ck = read_checkpoint(r.checkpoint_paths.back());
    REQUIRE(ck.whitening.has_value());
    CHECK(ck.whitening->dim() == tc.model.stft.num_bins());
    auto records = evaluate(ck, manifest);
    CHECK(records.size() == 4);
}

TEST_CASE("bench rows and mode guard") {
    auto a = run_bench("conv-direct", 1, 256);
    auto b = run_bench("conv-fft", 1, 256);
    CHECK(a.millis > 0);
    CHECK(b.millis > 0);
    CHECK(a.to_csv_line().rfind("conv-direct,1,256,", 0) == 0);
    auto c = run_bench("kernel-naive", 4, 64);
    auto d = run_bench("kernel-dplr", 4, 64);
    CHECK(c.millis > 0);
    CHECK(d.millis > 0);
    CHECK(std::string(bench_csv_header()) == "mode,n,len,millis");
    CHECK_THROWS_AS(run_bench("nope", 4, 64), ConfigError);
    CHECK_THROWS_AS(run_bench("conv-fft", 0, 64), ConfigError);
}
