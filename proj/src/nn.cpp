#include "s4se/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "s4se/objectives.hpp"

namespace s4se {

using namespace ad;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::time_s4_unet: return "time_s4_unet";
        case Variant::tf_s4_unet: return "tf_s4_unet";
        case Variant::s4nd_unet: return "s4nd_unet";
    }
    return "?";
}

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::mag_regression: return "mag_regression";
        case Scenario::mag_masking: return "mag_masking";
        case Scenario::complex_masking: return "complex_masking";
    }
    return "?";
}

Variant variant_from_string(const std::string& s) {
    if (s == "time_s4_unet") return Variant::time_s4_unet;
    if (s == "tf_s4_unet") return Variant::tf_s4_unet;
    if (s == "s4nd_unet") return Variant::s4nd_unet;
    throw ConfigError("unknown variant: " + s);
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "mag_regression") return Scenario::mag_regression;
    if (s == "mag_masking") return Scenario::mag_masking;
    if (s == "complex_masking") return Scenario::complex_masking;
    throw ConfigError("unknown scenario: " + s);
}

void ModelConfig::validate() const {
    if (num_unet_levels < 1 || blocks_per_level < 1 || base_channels < 1 || state_size < 1 ||
        rank < 1 || rank > 4)
        throw ConfigError("ModelConfig: sizes must be positive (rank in 1..4)");
    if (variant == Variant::time_s4_unet) {
        if (in_channels != 1) throw ConfigError("time_s4_unet: in_channels must be 1");
    } else {
        stft.validate();
        const int want = scenario == Scenario::complex_masking ? 2 : 1;
        if (in_channels != want)
            throw ConfigError("tf variant: in_channels must match the scenario (1 mag / 2 complex)");
    }
}

int ModelConfig::out_channels() const {
    return scenario == Scenario::complex_masking ? 2 : 1;
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["variant"] = to_string(variant);
    j["scenario"] = to_string(scenario);
    j["in_channels"] = in_channels;
    j["num_unet_levels"] = num_unet_levels;
    j["blocks_per_level"] = blocks_per_level;
    j["base_channels"] = base_channels;
    j["state_size"] = state_size;
    j["rank"] = rank;
    j["whitening"] = whitening;
    j["stft"] = {{"n_fft", stft.n_fft},
                 {"win_length", stft.win_length},
                 {"hop_length", stft.hop_length},
                 {"center", stft.center}};
    j["sample_rate"] = sample_rate;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    ModelConfig c;
    try {
        if (j.contains("variant")) c.variant = variant_from_string(j["variant"].get<std::string>());
        if (j.contains("scenario")) c.scenario = scenario_from_string(j["scenario"].get<std::string>());
        if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
        if (j.contains("num_unet_levels")) c.num_unet_levels = j["num_unet_levels"].get<int>();
        if (j.contains("blocks_per_level")) c.blocks_per_level = j["blocks_per_level"].get<int>();
        if (j.contains("base_channels")) c.base_channels = j["base_channels"].get<int>();
        if (j.contains("state_size")) c.state_size = j["state_size"].get<int>();
        if (j.contains("rank")) c.rank = j["rank"].get<int>();
        if (j.contains("whitening")) c.whitening = j["whitening"].get<bool>();
        if (j.contains("sample_rate")) c.sample_rate = j["sample_rate"].get<double>();
        if (j.contains("stft")) {
            auto& s = j["stft"];
            if (s.contains("n_fft")) c.stft.n_fft = s["n_fft"].get<int>();
            if (s.contains("win_length")) c.stft.win_length = s["win_length"].get<int>();
            if (s.contains("hop_length")) c.stft.hop_length = s["hop_length"].get<int>();
            if (s.contains("center")) c.stft.center = s["center"].get<bool>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

int ParamStore::add(std::string name, Tensor value) {
    entries.push_back({std::move(name), std::move(value)});
    return static_cast<int>(entries.size()) - 1;
}

long ParamStore::total_scalars() const {
    long n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
}

int Model::pool_factor() const { return cfg_.variant == Variant::time_s4_unet ? 4 : 2; }

Model::AxisIdx Model::add_axis(const std::string& name, int H, Rng& rng) {
    const int N = cfg_.state_size;
    const int R = two_d() ? cfg_.rank : 1;
    Tensor lam_re({H, N}), lam_im({H, N}), p_re({H, N}), p_im({H, N}), b_re({H, N}), b_im({H, N});
    for (int h = 0; h < H; ++h)
        for (int n = 0; n < N; ++n) {
            // HiPPO-style diagonal approximation
            lam_re[static_cast<long>(h) * N + n] = -0.5;
            lam_im[static_cast<long>(h) * N + n] = kPi * n;
            p_re[static_cast<long>(h) * N + n] = std::sqrt(n + 0.5);
            b_re[static_cast<long>(h) * N + n] = std::sqrt(2.0 * n + 1.0);
        }
    Tensor c_re({H, R, N}), c_im({H, R, N});
    const double cs = 1.0 / std::sqrt(static_cast<double>(N));
    for (auto& v : c_re.data) v = cs * rng.normal();
    for (auto& v : c_im.data) v = cs * rng.normal();
    Tensor log_dt({H});
    for (auto& v : log_dt.data) v = rng.uniform(std::log(1e-3), std::log(1e-1));
    AxisIdx a;
    a.lam_re = params_.add(name + ".lam_re", std::move(lam_re));
    a.lam_im = params_.add(name + ".lam_im", std::move(lam_im));
    a.p_re = params_.add(name + ".p_re", std::move(p_re));
    a.p_im = params_.add(name + ".p_im", std::move(p_im));
    a.b_re = params_.add(name + ".b_re", std::move(b_re));
    a.b_im = params_.add(name + ".b_im", std::move(b_im));
    a.c_re = params_.add(name + ".c_re", std::move(c_re));
    a.c_im = params_.add(name + ".c_im", std::move(c_im));
    a.log_dt = params_.add(name + ".log_dt", std::move(log_dt));
    return a;
}

int Model::add_linear(const std::string& name, int out, int in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Tensor w({out, in}), b({out});
    for (auto& v : w.data) v = rng.uniform(-bound, bound);
    for (auto& v : b.data) v = rng.uniform(-bound, bound);
    const int wi = params_.add(name + ".w", std::move(w));
    params_.add(name + ".b", std::move(b));
    return wi;
}

Model::BlockIdx Model::add_block(const std::string& name, int H, Rng& rng) {
    BlockIdx b{};
    b.ln_g = params_.add(name + ".ln_g", Tensor({H}, 1.0));
    b.ln_b = params_.add(name + ".ln_b", Tensor({H}, 0.0));
    b.ax1 = add_axis(name + ".ssm1", H, rng);
    if (two_d()) b.ax2 = add_axis(name + ".ssm2", H, rng);
    b.mix_w = add_linear(name + ".mix", H, H, rng);
    b.mix_b = b.mix_w + 1;
    return b;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const int base = cfg_.base_channels;
    int stem_in = cfg_.in_channels;
    if (cfg_.variant == Variant::tf_s4_unet) stem_in = cfg_.in_channels * cfg_.stft.num_bins();
    stem_w_ = add_linear("stem", base, stem_in, rng);

    int ch = base;
    for (int l = 0; l < cfg_.num_unet_levels; ++l) {
        LevelIdx lev;
        for (int k = 0; k < cfg_.blocks_per_level; ++k)
            lev.blocks.push_back(add_block("down" + std::to_string(l) + ".blk" + std::to_string(k), ch, rng));
        lev.down_w = add_linear("down" + std::to_string(l) + ".expand", 2 * ch, ch, rng);
        lev.down_b = lev.down_w + 1;
        levels_.push_back(std::move(lev));
        ch *= 2;
    }
    for (int k = 0; k < cfg_.blocks_per_level; ++k)
        bottleneck_.push_back(add_block("mid.blk" + std::to_string(k), ch, rng));
    for (int l = cfg_.num_unet_levels - 1; l >= 0; --l) {
        LevelIdx& lev = levels_[static_cast<std::size_t>(l)];
        ch /= 2;
        lev.up_w = add_linear("up" + std::to_string(l) + ".reduce", ch, 2 * ch, rng);
        lev.up_b = lev.up_w + 1;
        lev.skip_w = add_linear("up" + std::to_string(l) + ".skip", ch, 2 * ch, rng);
        lev.skip_b = lev.skip_w + 1;
        for (int k = 0; k < cfg_.blocks_per_level; ++k)
            lev.up_blocks.push_back(add_block("up" + std::to_string(l) + ".blk" + std::to_string(k), ch, rng));
    }

    int head_out = 1;
    if (cfg_.variant == Variant::tf_s4_unet)
        head_out = cfg_.out_channels() * cfg_.stft.num_bins();
    else if (cfg_.variant == Variant::s4nd_unet)
        head_out = cfg_.out_channels();
    head_w_ = add_linear("head", head_out, base, rng);

    // masking heads start near identity (mask ~ 1), so the untrained model
    // passes the noisy input through and training can only improve on it
    if (cfg_.variant != Variant::time_s4_unet &&
        (cfg_.scenario == Scenario::mag_masking || cfg_.scenario == Scenario::complex_masking)) {
        Tensor& hw = params_.entries[static_cast<std::size_t>(head_w_)].value;
        Tensor& hb = params_.entries[static_cast<std::size_t>(head_w_ + 1)].value;
        for (auto& v : hw.data) v *= 1e-2;
        // sigmoid(3) ~ 0.95; the polar complex mask at (3, 0) has modulus
        // tanh(3) ~ 0.995 and zero phase. For complex_masking the first half
        // of the head rows is the real channel, the rest the imaginary one.
        const int open_rows = cfg_.scenario == Scenario::mag_masking ? head_out : head_out / 2;
        for (int r = 0; r < head_out; ++r) hb.data[static_cast<std::size_t>(r)] = r < open_rows ? 3.0 : 0.0;
    }
}

std::vector<Var> Model::register_params(Tape& tape, bool requires_grad) const {
    std::vector<Var> pv;
    pv.reserve(params_.entries.size());
    for (const auto& e : params_.entries) pv.push_back(tape.leaf(e.value, requires_grad));
    return pv;
}

Var Model::axis_kernel(Tape& tape, const std::vector<Var>& pv, const AxisIdx& a, int L) const {
    (void)tape;
    return s4_axis_kernel(pv[static_cast<std::size_t>(a.lam_re)], pv[static_cast<std::size_t>(a.lam_im)],
                          pv[static_cast<std::size_t>(a.p_re)], pv[static_cast<std::size_t>(a.p_im)],
                          pv[static_cast<std::size_t>(a.b_re)], pv[static_cast<std::size_t>(a.b_im)],
                          pv[static_cast<std::size_t>(a.c_re)], pv[static_cast<std::size_t>(a.c_im)],
                          pv[static_cast<std::size_t>(a.log_dt)], L);
}

Var Model::run_block(Tape& tape, const std::vector<Var>& pv, const BlockIdx& b, Var x) const {
    Var h = layer_norm_cols(x, pv[static_cast<std::size_t>(b.ln_g)], pv[static_cast<std::size_t>(b.ln_b)]);
    Var y{};
    if (two_d()) {
        const int F = h.val().dim(1), T = h.val().dim(2);
        Var k1 = axis_kernel(tape, pv, b.ax1, F);
        Var k2 = axis_kernel(tape, pv, b.ax2, T);
        y = s4nd_conv(h, k1, k2);
    } else {
        const int L = h.val().dim(1);
        Var k = axis_kernel(tape, pv, b.ax1, L);
        y = conv1d_causal(h, k);
    }
    y = gelu(y);
    y = linear_cols(pv[static_cast<std::size_t>(b.mix_w)], y, pv[static_cast<std::size_t>(b.mix_b)]);
    return add(x, y);
}

Var Model::forward(Tape& tape, const std::vector<Var>& pv, Var input) const {
    if (static_cast<int>(pv.size()) != params_.size())
        throw ShapeMismatch("forward: parameter vector does not match the model");
    const Tensor& in = input.val();
    int F = 0, T = 0, L = 0;
    Var x = input;
    if (cfg_.variant == Variant::time_s4_unet) {
        if (in.ndim() != 2 || in.dim(0) != 1) throw ShapeMismatch("time variant: need [1, L]");
        L = in.dim(1);
        int mult = 1;
        for (int l = 0; l < cfg_.num_unet_levels; ++l) mult *= pool_factor();
        const int Lp = ((L + mult - 1) / mult) * mult;
        if (Lp != L) x = pad1d_to(x, Lp);
    } else {
        if (in.ndim() != 3 || in.dim(0) != cfg_.in_channels)
            throw ShapeMismatch("tf variant: need [C, F, T] with configured C");
        F = in.dim(1);
        T = in.dim(2);
        if (cfg_.variant == Variant::tf_s4_unet && F != cfg_.stft.num_bins())
            throw ShapeMismatch("tf_s4_unet: F must equal the configured bin count");
        int mult = 1;
        for (int l = 0; l < cfg_.num_unet_levels; ++l) mult *= 2;
        if (cfg_.variant == Variant::s4nd_unet) {
            const int Fp = ((F + mult - 1) / mult) * mult;
            const int Tp = ((T + mult - 1) / mult) * mult;
            if (Fp != F || Tp != T) x = pad2d_to(x, Fp, Tp);
        } else {
            // F folds into channels; only T is pooled
            const int Tp = ((T + mult - 1) / mult) * mult;
            x = reshape(x, {cfg_.in_channels * F, T});
            if (Tp != T) x = pad1d_to(x, Tp);
        }
    }

    x = linear_cols(pv[static_cast<std::size_t>(stem_w_)], x, pv[static_cast<std::size_t>(stem_w_ + 1)]);

    std::vector<Var> skips;
    for (const auto& lev : levels_) {
        for (const auto& b : lev.blocks) x = run_block(tape, pv, b, x);
        skips.push_back(x);
        x = two_d() ? avgpool2d(x) : avgpool1d(x, pool_factor());
        x = linear_cols(pv[static_cast<std::size_t>(lev.down_w)], x, pv[static_cast<std::size_t>(lev.down_b)]);
    }
    for (const auto& b : bottleneck_) x = run_block(tape, pv, b, x);
    for (int l = cfg_.num_unet_levels - 1; l >= 0; --l) {
        const LevelIdx& lev = levels_[static_cast<std::size_t>(l)];
        x = two_d() ? upsample2d(x) : upsample1d(x, pool_factor());
        x = linear_cols(pv[static_cast<std::size_t>(lev.up_w)], x, pv[static_cast<std::size_t>(lev.up_b)]);
        x = concat_rows(skips[static_cast<std::size_t>(l)], x);
        x = linear_cols(pv[static_cast<std::size_t>(lev.skip_w)], x, pv[static_cast<std::size_t>(lev.skip_b)]);
        for (const auto& b : lev.up_blocks) x = run_block(tape, pv, b, x);
    }

    x = linear_cols(pv[static_cast<std::size_t>(head_w_)], x, pv[static_cast<std::size_t>(head_w_ + 1)]);

    // restore original extent and apply the scenario head
    if (cfg_.variant == Variant::time_s4_unet) {
        if (x.val().dim(1) != L) x = crop1d(x, L);
        return x;
    }
    const int out_c = cfg_.out_channels();
    if (cfg_.variant == Variant::tf_s4_unet) {
        if (x.val().dim(1) != T) x = crop1d(x, T);
        x = reshape(x, {out_c, F, T});
    } else {
        if (x.val().dim(1) != F || x.val().dim(2) != T) x = crop2d(x, F, T);
    }
    if (cfg_.scenario == Scenario::mag_regression) x = softplus(x);
    if (cfg_.scenario == Scenario::mag_masking) x = sigmoid(x);
    return x;
}

ComplexSpectrogram apply_scenario(const ComplexSpectrogram& noisy, const Tensor& model_out,
                                  Scenario scenario) {
    const int F = noisy.bins(), T = noisy.frames();
    const int want_c = scenario == Scenario::complex_masking ? 2 : 1;
    if (model_out.ndim() != 3 || model_out.dim(0) != want_c || model_out.dim(1) != F ||
        model_out.dim(2) != T)
        throw ShapeMismatch("apply_scenario: model output shape");
    ComplexSpectrogram out = noisy;
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) {
            const cdouble z = noisy.data(f, t);
            const long i = static_cast<long>(f) * T + t;
            switch (scenario) {
                case Scenario::mag_regression: {
                    const double m = std::abs(z);
                    const cdouble phase = m > 0 ? z / m : cdouble(1, 0);
                    out.data(f, t) = model_out[i] * phase;
                    break;
                }
                case Scenario::mag_masking:
                    out.data(f, t) = model_out[i] * z;
                    break;
                case Scenario::complex_masking: {
                    const cdouble m(model_out[i], model_out[static_cast<long>(F) * T + i]);
                    const double mm = std::abs(m);
                    const double scale = mm > 1e-12 ? std::tanh(mm) / mm : 1.0;
                    out.data(f, t) = m * scale * z;
                    break;
                }
            }
        }
    return out;
}

std::pair<Var, Var> ad_apply_complex_mask(const ComplexSpectrogram& noisy, Var model_out) {
    Tape& tape = *model_out.tape;
    const int F = noisy.bins(), T = noisy.frames();
    if (model_out.val().ndim() != 3 || model_out.val().dim(0) != 2 ||
        model_out.val().dim(1) != F || model_out.val().dim(2) != T)
        throw ShapeMismatch("ad_apply_complex_mask: model output shape");
    Tensor nre({F, T}), nim({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) {
            nre[static_cast<long>(f) * T + t] = noisy.data(f, t).real();
            nim[static_cast<long>(f) * T + t] = noisy.data(f, t).imag();
        }
    Var mre = reshape(slice_rows(model_out, 0, 1), {F, T});
    Var mim = reshape(slice_rows(model_out, 1, 1), {F, T});
    Var mm = clamp_min(vsqrt(add(mul(mre, mre), mul(mim, mim))), 1e-12);
    Var scl = div(vtanh(mm), mm);
    Var Mre = mul(mre, scl);
    Var Mim = mul(mim, scl);
    Var cre = constant(tape, nre);
    Var cim = constant(tape, nim);
    Var ere = sub(mul(Mre, cre), mul(Mim, cim));
    Var eim = add(mul(Mre, cim), mul(Mim, cre));
    return {ere, eim};
}

Var ad_apply_mag(const ComplexSpectrogram& noisy, Var model_out, Scenario scenario) {
    const int F = noisy.bins(), T = noisy.frames();
    if (model_out.val().ndim() != 3 || model_out.val().dim(0) != 1 ||
        model_out.val().dim(1) != F || model_out.val().dim(2) != T)
        throw ShapeMismatch("ad_apply_mag: model output shape");
    Var m = reshape(model_out, {F, T});
    if (scenario == Scenario::mag_regression) return m;
    if (scenario != Scenario::mag_masking) throw ConfigError("ad_apply_mag: wrong scenario");
    Tensor mag({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) mag[static_cast<long>(f) * T + t] = std::abs(noisy.data(f, t));
    return mul(m, constant(*model_out.tape, mag));
}

ModelConfig tiny_config(Variant v, Scenario s) {
    ModelConfig c;
    c.variant = v;
    c.scenario = s;
    c.num_unet_levels = 1;
    c.blocks_per_level = 1;
    c.base_channels = 6;
    c.state_size = 2;
    c.rank = 1;
    c.in_channels = v == Variant::time_s4_unet ? 1 : (s == Scenario::complex_masking ? 2 : 1);
    c.stft = StftConfig(30, 20, 10);  // 16 bins
    return c;
}

GradcheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed) {
    Model model(cfg, seed);
    return gradcheck_model(model, seed);
}

GradcheckReport gradcheck_model(Model& model, std::uint64_t seed) {
    const ModelConfig& cfg = model.config();
    Rng rng(seed + 1);
    const int F = cfg.variant == Variant::time_s4_unet ? 0 : cfg.stft.num_bins();
    const int T = 8, L = 64;

    // fixed data for the loss
    ComplexSpectrogram noisy, clean;
    std::vector<double> wave_in, wave_ref;
    Tensor input;
    if (cfg.variant == Variant::time_s4_unet) {
        input = Tensor({1, L});
        wave_ref.resize(static_cast<std::size_t>(L));
        for (auto& v : input.data) v = 0.3 * rng.normal();
        for (auto& v : wave_ref) v = 0.3 * rng.normal();
    } else {
        noisy.config = cfg.stft;
        noisy.data.resize(F, T);
        clean = noisy;
        clean.data.resize(F, T);
        for (int f = 0; f < F; ++f)
            for (int t = 0; t < T; ++t) {
                noisy.data(f, t) = cdouble(rng.normal(), rng.normal());
                clean.data(f, t) = cdouble(rng.normal(), rng.normal());
            }
        if (cfg.scenario == Scenario::complex_masking) {
            input = Tensor({2, F, T});
            for (int f = 0; f < F; ++f)
                for (int t = 0; t < T; ++t) {
                    input[static_cast<long>(f) * T + t] = noisy.data(f, t).real();
                    input[static_cast<long>(F + f) * T + t] = noisy.data(f, t).imag();
                }
        } else {
            input = Tensor({1, F, T});
            for (int f = 0; f < F; ++f)
                for (int t = 0; t < T; ++t)
                    input[static_cast<long>(f) * T + t] = std::abs(noisy.data(f, t));
        }
    }
    MultiResStftConfig tiny_mr;
    tiny_mr.settings = {StftConfig(32, 24, 8)};

    auto loss_of = [&](Tape& tape, const std::vector<Var>& pv) -> Var {
        Var out = model.forward(tape, pv, tape.leaf(input, false));
        if (cfg.variant == Variant::time_s4_unet)
            return ad_time_domain_loss(reshape(out, {L}), wave_ref, tiny_mr);
        if (cfg.scenario == Scenario::complex_masking) {
            auto [re, im] = ad_apply_complex_mask(noisy, out);
            return ad_complex_loss(re, im, clean.data);
        }
        Var enh = ad_apply_mag(noisy, out, cfg.scenario);
        return ad_mag_loss(enh, clean.data.cwiseAbs());
    };

    // analytic gradients
    Tape tape;
    std::vector<Var> pv = model.register_params(tape, true);
    Var loss = loss_of(tape, pv);
    tape.backward(loss);

    auto eval = [&]() {
        Tape t2;
        std::vector<Var> pv2 = model.register_params(t2, false);
        return loss_of(t2, pv2).val()[0];
    };

    GradcheckReport report;
    Rng pick(seed + 2);
    const double step = 1e-4;
    for (int pi = 0; pi < model.params().size(); ++pi) {
        auto& entry = model.params()[pi];
        GradcheckGroup grp;
        grp.name = entry.name;
        grp.disconnected = !tape.reached(pv[static_cast<std::size_t>(pi)].id);
        if (!grp.disconnected) {
            const Tensor& a = tape.grad(pv[static_cast<std::size_t>(pi)].id);
            const long n = entry.value.size();
            const int max_checked = 6;
            for (long j = 0; j < n; ++j) {
                if (n > max_checked &&
                    pick.below(static_cast<std::uint64_t>(n)) >= static_cast<std::uint64_t>(max_checked))
                    continue;
                const double keep = entry.value[j];
                entry.value[j] = keep + step;
                const double up = eval();
                entry.value[j] = keep - step;
                const double dn = eval();
                entry.value[j] = keep;
                const double fd = (up - dn) / (2.0 * step);
                const double rel =
                    std::abs(a[j] - fd) / std::max(std::abs(a[j]) + std::abs(fd), 1e-6);
                grp.max_rel_err = std::max(grp.max_rel_err, rel);
            }
        }
        report.worst = std::max(report.worst, grp.max_rel_err);
        report.groups.push_back(std::move(grp));
    }
    report.pass = report.worst <= 1e-3;
    return report;
}

}  // namespace s4se
