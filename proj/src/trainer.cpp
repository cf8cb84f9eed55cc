#include "s4se/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "s4se/ssm_kernel.hpp"

namespace s4se {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- optimizer

OptimizerState OptimizerState::init(const ParamStore& params, OptimizerConfig cfg) {
    OptimizerState s;
    s.cfg = cfg;
    for (int i = 0; i < params.size(); ++i) {
        s.m.push_back(Tensor::zeros_like(params[i].value));
        s.v.push_back(Tensor::zeros_like(params[i].value));
    }
    return s;
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        for (double x : g.data) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (double& x : g.data) x *= s;
    }
    return norm;
}

void adam_step(ParamStore& params, const std::vector<Tensor>& grads, OptimizerState& state) {
    if (static_cast<int>(grads.size()) != params.size() ||
        grads.size() != state.m.size())
        throw ShapeMismatch("adam_step: parameter/gradient count mismatch");
    for (int i = 0; i < params.size(); ++i)
        if (!grads[static_cast<std::size_t>(i)].same_shape(params[i].value))
            throw ShapeMismatch("adam_step: gradient shape mismatch at " + params[i].name);

    ++state.step;
    const auto& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (int i = 0; i < params.size(); ++i) {
        auto& p = params[i].value;
        const auto& g = grads[static_cast<std::size_t>(i)];
        auto& m = state.m[static_cast<std::size_t>(i)];
        auto& v = state.v[static_cast<std::size_t>(i)];
        for (long j = 0; j < p.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

// ------------------------------------------------------------- train config

void TrainConfig::validate() const {
    model.validate();
    if (epochs < 1 || batch_size < 1 || segment_length < 1)
        throw ConfigError("TrainConfig: epochs/batch_size/segment_length must be positive");
    if (remix_prob < 0 || remix_prob > 1 || bandmask_prob < 0 || bandmask_prob > 1)
        throw ConfigError("TrainConfig: probabilities must be in [0, 1]");
    if (bandmask_width <= 0 || bandmask_width >= 1)
        throw ConfigError("TrainConfig: bandmask_width must be in (0, 1)");
    if (opt.lr <= 0 || opt.eps <= 0 || opt.clip_norm <= 0 || opt.beta1 < 0 || opt.beta1 >= 1 ||
        opt.beta2 < 0 || opt.beta2 >= 1)
        throw ConfigError("TrainConfig: bad optimizer settings");
    if (lr_final < 0 || lr_final > opt.lr)
        throw ConfigError("TrainConfig: lr_final must be in [0, lr]");
    if (whitening_eps <= 0) throw ConfigError("TrainConfig: whitening_eps must be positive");
    if (model.whitening && model.variant == Variant::time_s4_unet)
        throw ConfigError("TrainConfig: whitening requires a TF variant");
    if (mrstft.settings.empty()) throw ConfigError("TrainConfig: mrstft must be nonempty");
    for (const auto& s : mrstft.settings) s.validate();
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["model"] = nlohmann::json::parse(model.to_json());
    auto& t = j["train"];
    t["epochs"] = epochs;
    t["batch_size"] = batch_size;
    t["segment_length"] = segment_length;
    t["remix_prob"] = remix_prob;
    t["bandmask_prob"] = bandmask_prob;
    t["bandmask_width"] = bandmask_width;
    t["whitening_eps"] = whitening_eps;
    t["lr"] = opt.lr;
    t["lr_final"] = lr_final;
    t["beta1"] = opt.beta1;
    t["beta2"] = opt.beta2;
    t["eps"] = opt.eps;
    t["clip_norm"] = opt.clip_norm;
    auto& mr = t["mrstft"];
    mr = nlohmann::json::array();
    for (const auto& s : mrstft.settings)
        mr.push_back({s.n_fft, s.win_length, s.hop_length});
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config parse error: ") + e.what());
    }
    TrainConfig c;
    try {
        if (j.contains("model")) c.model = ModelConfig::from_json(j["model"].dump());
        if (j.contains("train")) {
            const auto& t = j["train"];
            if (t.contains("epochs")) c.epochs = t["epochs"].get<int>();
            if (t.contains("batch_size")) c.batch_size = t["batch_size"].get<int>();
            if (t.contains("segment_length")) c.segment_length = t["segment_length"].get<int>();
            if (t.contains("remix_prob")) c.remix_prob = t["remix_prob"].get<double>();
            if (t.contains("bandmask_prob")) c.bandmask_prob = t["bandmask_prob"].get<double>();
            if (t.contains("bandmask_width")) c.bandmask_width = t["bandmask_width"].get<double>();
            if (t.contains("whitening_eps")) c.whitening_eps = t["whitening_eps"].get<double>();
            if (t.contains("lr")) c.opt.lr = t["lr"].get<double>();
            if (t.contains("lr_final")) c.lr_final = t["lr_final"].get<double>();
            if (t.contains("beta1")) c.opt.beta1 = t["beta1"].get<double>();
            if (t.contains("beta2")) c.opt.beta2 = t["beta2"].get<double>();
            if (t.contains("eps")) c.opt.eps = t["eps"].get<double>();
            if (t.contains("clip_norm")) c.opt.clip_norm = t["clip_norm"].get<double>();
            if (t.contains("mrstft")) {
                c.mrstft.settings.clear();
                for (const auto& s : t["mrstft"])
                    c.mrstft.settings.emplace_back(s.at(0).get<int>(), s.at(1).get<int>(),
                                                   s.at(2).get<int>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config field error: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

// -------------------------------------------------------------- checkpoints

namespace {

void wr_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<long>(n));
}
template <typename T>
void wr_pod(std::ostream& os, T v) {
    wr_bytes(os, &v, sizeof(T));
}
void wr_tensor(std::ostream& os, const Tensor& t) {
    wr_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape) wr_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    wr_bytes(os, t.data.data(), t.data.size() * sizeof(double));
}
void wr_string(std::ostream& os, const std::string& s) {
    wr_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    wr_bytes(os, s.data(), s.size());
}
void wr_section(std::ostream& os, const std::string& payload) {
    wr_pod<std::uint64_t>(os, payload.size());
    wr_bytes(os, payload.data(), payload.size());
}

struct ByteReader {
    const unsigned char* p;
    const unsigned char* end;
    void need(std::size_t n) const {
        if (p + n > end) throw CorruptHeader("checkpoint: truncated section");
    }
    template <typename T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, p, sizeof(T));
        p += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    Tensor tensor() {
        const auto nd = pod<std::uint32_t>();
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < nd; ++i)
            shape.push_back(static_cast<int>(pod<std::uint32_t>()));
        Tensor t(shape);
        need(t.data.size() * sizeof(double));
        std::memcpy(t.data.data(), p, t.data.size() * sizeof(double));
        p += t.data.size() * sizeof(double);
        return t;
    }
};

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    os.write("S4CK", 4);
    wr_pod<std::uint32_t>(os, Checkpoint::kVersion);

    wr_section(os, ckpt.config.to_json());

    std::ostringstream ps;
    wr_pod<std::uint32_t>(ps, static_cast<std::uint32_t>(ckpt.params.size()));
    for (int i = 0; i < ckpt.params.size(); ++i) {
        wr_string(ps, ckpt.params[i].name);
        wr_tensor(ps, ckpt.params[i].value);
    }
    wr_section(os, ps.str());

    std::ostringstream opt;
    wr_pod<double>(opt, ckpt.opt.cfg.lr);
    wr_pod<double>(opt, ckpt.opt.cfg.beta1);
    wr_pod<double>(opt, ckpt.opt.cfg.beta2);
    wr_pod<double>(opt, ckpt.opt.cfg.eps);
    wr_pod<double>(opt, ckpt.opt.cfg.clip_norm);
    wr_pod<std::uint64_t>(opt, static_cast<std::uint64_t>(ckpt.opt.step));
    wr_pod<std::uint32_t>(opt, static_cast<std::uint32_t>(ckpt.opt.m.size()));
    for (const auto& t : ckpt.opt.m) wr_tensor(opt, t);
    for (const auto& t : ckpt.opt.v) wr_tensor(opt, t);
    wr_section(os, opt.str());

    std::ostringstream wh;
    wr_pod<std::uint8_t>(wh, ckpt.whitening ? 1 : 0);
    if (ckpt.whitening) {
        const auto& w = *ckpt.whitening;
        const int F = w.dim();
        wr_pod<std::uint32_t>(wh, static_cast<std::uint32_t>(F));
        wr_bytes(wh, w.mean.data(), sizeof(double) * static_cast<std::size_t>(F));
        wr_bytes(wh, w.transform.data(), sizeof(double) * static_cast<std::size_t>(F) * F);
        wr_bytes(wh, w.inverse.data(), sizeof(double) * static_cast<std::size_t>(F) * F);
        wr_pod<double>(wh, w.eps);
    }
    wr_section(os, wh.str());

    std::ostringstream rs;
    wr_pod<std::uint64_t>(rs, ckpt.rng_seed);
    wr_pod<std::uint64_t>(rs, ckpt.rng_counter);
    wr_section(os, rs.str());

    std::ostringstream ep;
    wr_pod<std::uint64_t>(ep, static_cast<std::uint64_t>(ckpt.epoch));
    wr_section(os, ep.str());

    if (!os) throw DataError("short write to checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (raw.size() < 8 || std::memcmp(raw.data(), "S4CK", 4) != 0)
        throw CorruptHeader("not a checkpoint file: " + path);
    std::uint32_t version;
    std::memcpy(&version, raw.data() + 4, 4);
    if (version != Checkpoint::kVersion)
        throw UnsupportedFormat("checkpoint version mismatch: " + std::to_string(version));

    ByteReader top{raw.data() + 8, raw.data() + raw.size()};
    auto section = [&]() {
        const auto len = top.pod<std::uint64_t>();
        top.need(len);
        ByteReader r{top.p, top.p + len};
        top.p += len;
        return r;
    };

    Checkpoint ckpt;
    {
        ByteReader r = section();
        ckpt.config = ModelConfig::from_json(
            std::string(reinterpret_cast<const char*>(r.p), static_cast<std::size_t>(r.end - r.p)));
    }
    {
        ByteReader r = section();
        const auto count = r.pod<std::uint32_t>();
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name = r.str();
            ckpt.params.add(std::move(name), r.tensor());
        }
    }
    {
        ByteReader r = section();
        ckpt.opt.cfg.lr = r.pod<double>();
        ckpt.opt.cfg.beta1 = r.pod<double>();
        ckpt.opt.cfg.beta2 = r.pod<double>();
        ckpt.opt.cfg.eps = r.pod<double>();
        ckpt.opt.cfg.clip_norm = r.pod<double>();
        ckpt.opt.step = static_cast<long>(r.pod<std::uint64_t>());
        const auto count = r.pod<std::uint32_t>();
        for (std::uint32_t i = 0; i < count; ++i) ckpt.opt.m.push_back(r.tensor());
        for (std::uint32_t i = 0; i < count; ++i) ckpt.opt.v.push_back(r.tensor());
    }
    {
        ByteReader r = section();
        if (r.pod<std::uint8_t>()) {
            WhiteningStats w;
            const int F = static_cast<int>(r.pod<std::uint32_t>());
            w.mean.resize(F);
            w.transform.resize(F, F);
            w.inverse.resize(F, F);
            r.need(sizeof(double) * static_cast<std::size_t>(F) * (1 + 2 * F) + sizeof(double));
            std::memcpy(w.mean.data(), r.p, sizeof(double) * static_cast<std::size_t>(F));
            r.p += sizeof(double) * static_cast<std::size_t>(F);
            std::memcpy(w.transform.data(), r.p, sizeof(double) * static_cast<std::size_t>(F) * F);
            r.p += sizeof(double) * static_cast<std::size_t>(F) * F;
            std::memcpy(w.inverse.data(), r.p, sizeof(double) * static_cast<std::size_t>(F) * F);
            r.p += sizeof(double) * static_cast<std::size_t>(F) * F;
            w.eps = r.pod<double>();
            ckpt.whitening = std::move(w);
        }
    }
    {
        ByteReader r = section();
        ckpt.rng_seed = r.pod<std::uint64_t>();
        ckpt.rng_counter = r.pod<std::uint64_t>();
    }
    {
        ByteReader r = section();
        ckpt.epoch = static_cast<long>(r.pod<std::uint64_t>());
    }
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model(ckpt.config, 0);
    if (model.params().size() != ckpt.params.size())
        throw ConfigMismatch("checkpoint parameter count does not match its config");
    for (int i = 0; i < model.params().size(); ++i) {
        auto& dst = model.params()[i];
        const auto& src = ckpt.params[i];
        if (dst.name != src.name || !dst.value.same_shape(src.value))
            throw ConfigMismatch("checkpoint parameter mismatch at " + dst.name);
        dst.value = src.value;
    }
    return model;
}

// ----------------------------------------------------------------- pipeline

namespace {

Tensor tf_input_tensor(const ComplexSpectrogram& spec, const ModelConfig& mc,
                       const WhiteningStats* wh) {
    const int F = spec.bins(), T = spec.frames();
    if (mc.scenario == Scenario::complex_masking) {
        const ComplexSpectrogram s = wh ? whiten(spec, *wh, false) : spec;
        Tensor in({2, F, T});
        for (int f = 0; f < F; ++f)
            for (int t = 0; t < T; ++t) {
                in[static_cast<long>(f) * T + t] = s.data(f, t).real();
                in[static_cast<long>(F + f) * T + t] = s.data(f, t).imag();
            }
        return in;
    }
    Eigen::MatrixXd mag = spec.data.cwiseAbs();
    if (wh) mag = whiten_mag(mag, *wh, false);
    Tensor in({1, F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) in[static_cast<long>(f) * T + t] = mag(f, t);
    return in;
}

Var utterance_loss(const Model& model, Tape& tape, const std::vector<Var>& pv,
                   const Utterance& u, const TrainConfig& tc, const WhiteningStats* wh) {
    const ModelConfig& mc = tc.model;
    if (mc.variant == Variant::time_s4_unet) {
        const int L = static_cast<int>(u.noisy.size());
        Tensor in({1, L});
        std::copy(u.noisy.begin(), u.noisy.end(), in.data.begin());
        Var out = model.forward(tape, pv, tape.leaf(in, false));
        return ad_time_domain_loss(ad::reshape(out, {L}), u.clean, tc.mrstft);
    }
    const auto noisy_spec = stft(u.noisy, mc.stft, mc.sample_rate);
    const auto clean_spec = stft(u.clean, mc.stft, mc.sample_rate);
    Var out = model.forward(tape, pv, tape.leaf(tf_input_tensor(noisy_spec, mc, wh), false));
    if (mc.scenario == Scenario::complex_masking) {
        auto [re, im] = ad_apply_complex_mask(noisy_spec, out);
        return ad_complex_loss(re, im, clean_spec.data);
    }
    Var enh = ad_apply_mag(noisy_spec, out, mc.scenario);
    if (mc.scenario == Scenario::mag_regression && wh) {
        // head predicts whitened magnitudes; undo the affine whitening
        const int F = noisy_spec.bins();
        Tensor W({F, F}), b({F});
        for (int r = 0; r < F; ++r) {
            b[r] = wh->mean(r);
            for (int c = 0; c < F; ++c) W[static_cast<long>(r) * F + c] = wh->inverse(r, c);
        }
        enh = ad::linear_cols(ad::constant(tape, W), enh, ad::constant(tape, b));
    }
    return ad_mag_loss(enh, clean_spec.data.cwiseAbs());
}

double plain_utterance_loss(Model& model, const std::optional<WhiteningStats>& wh,
                            const Utterance& u, const TrainConfig& tc) {
    Tape tape;
    auto pv = model.register_params(tape, false);
    return utterance_loss(model, tape, pv, u, tc, wh ? &*wh : nullptr).val()[0];
}

}  // namespace

EnhanceResult enhance(Model& model, const std::optional<WhiteningStats>& whitening,
                      const std::vector<double>& noisy, const std::vector<double>* ref,
                      const std::string& id) {
    const ModelConfig& mc = model.config();
    const WhiteningStats* wh = whitening ? &*whitening : nullptr;
    std::vector<double> wave;
    if (mc.variant == Variant::time_s4_unet) {
        const int L = static_cast<int>(noisy.size());
        Tensor in({1, L});
        std::copy(noisy.begin(), noisy.end(), in.data.begin());
        Tape tape;
        auto pv = model.register_params(tape, false);
        Var out = model.forward(tape, pv, tape.leaf(in, false));
        wave.assign(out.val().data.begin(), out.val().data.end());
    } else {
        auto spec = stft(noisy, mc.stft, mc.sample_rate);
        Tape tape;
        auto pv = model.register_params(tape, false);
        Var out = model.forward(tape, pv, tape.leaf(tf_input_tensor(spec, mc, wh), false));
        Tensor mo = out.val();
        if (mc.scenario == Scenario::mag_regression && wh) {
            const int F = spec.bins(), T = spec.frames();
            Eigen::MatrixXd mag(F, T);
            for (int f = 0; f < F; ++f)
                for (int t = 0; t < T; ++t) mag(f, t) = mo[static_cast<long>(f) * T + t];
            mag = whiten_mag(mag, *wh, true);
            for (int f = 0; f < F; ++f)
                for (int t = 0; t < T; ++t)
                    mo[static_cast<long>(f) * T + t] = std::max(0.0, mag(f, t));
        }
        wave = istft(apply_scenario(spec, mo, mc.scenario));
    }
    if (wave.size() != noisy.size()) throw NumericalInstability("enhance: length contract broken");

    EnhanceResult res;
    res.samples.resize(wave.size());
    for (std::size_t i = 0; i < wave.size(); ++i) {
        if (!std::isfinite(wave[i])) throw NonFiniteActivation("enhance: non-finite sample");
        double v = wave[i];
        if (v > 1.0 || v < -1.0) {
            ++res.clipped;
            v = std::clamp(v, -1.0, 1.0);
        }
        res.samples[i] = v;
    }
    if (ref != nullptr) {
        if (ref->size() != noisy.size()) throw DimensionMismatch("enhance: reference length");
        MetricRecord rec;
        rec.id = id;
        rec.si_sdr_db = si_sdr(*ref, res.samples);
        rec.lsd_db = log_spectral_distance(*ref, res.samples, mc.stft);
        double l1 = 0;
        for (std::size_t i = 0; i < wave.size(); ++i) l1 += std::abs((*ref)[i] - res.samples[i]);
        rec.loss = l1 / static_cast<double>(wave.size());
        res.metrics = std::move(rec);
    }
    return res;
}

EnhanceResult enhance(const Checkpoint& ckpt, const std::vector<double>& noisy,
                      const std::vector<double>* ref, const std::string& id) {
    Model model = model_from_checkpoint(ckpt);
    return enhance(model, ckpt.whitening, noisy, ref, id);
}

// ----------------------------------------------------------------- training

namespace {

struct Corpus {
    std::vector<Utterance> utts;
};

Corpus load_corpus(const std::string& manifest_path, const TrainConfig& cfg) {
    Corpus corpus;
    for (const auto& e : read_manifest(manifest_path)) {
        auto [clean, rate_c] = read_wav(e.clean_path);
        auto [noise, rate_n] = read_wav(e.noise_path);
        if (rate_c != static_cast<int>(cfg.model.sample_rate) || rate_n != rate_c)
            throw DataError("sample rate mismatch for " + e.id);
        const std::size_t len = std::min(clean.size(), noise.size());
        if (len < static_cast<std::size_t>(cfg.segment_length))
            throw SignalTooShort("utterance shorter than segment_length: " + e.id);
        clean.resize(len);
        noise.resize(len);
        auto mix = mix_at_snr(clean, noise, e.snr_db);
        Utterance u;
        u.id = e.id;
        u.snr_db = e.snr_db;
        u.noise_gain = mix.gain;
        // keep the trio consistent under the recorded peak normalization
        u.clean.resize(len);
        u.noise.resize(len);
        for (std::size_t i = 0; i < len; ++i) {
            u.clean[i] = clean[i] * mix.norm_scale;
            u.noise[i] = noise[i] * mix.norm_scale;
        }
        u.noisy = std::move(mix.noisy);
        corpus.utts.push_back(std::move(u));
    }
    return corpus;
}

Utterance crop_segment(const Utterance& u, int seg, Rng& rng) {
    const std::size_t len = u.clean.size();
    const std::size_t span = static_cast<std::size_t>(seg);
    const std::size_t start =
        len > span ? static_cast<std::size_t>(rng.below(len - span + 1)) : 0;
    Utterance out;
    out.id = u.id;
    out.snr_db = u.snr_db;
    out.noise_gain = u.noise_gain;
    out.clean.assign(u.clean.begin() + static_cast<long>(start),
                     u.clean.begin() + static_cast<long>(start + span));
    out.noise.assign(u.noise.begin() + static_cast<long>(start),
                     u.noise.begin() + static_cast<long>(start + span));
    out.noisy.assign(u.noisy.begin() + static_cast<long>(start),
                     u.noisy.begin() + static_cast<long>(start + span));
    return out;
}

}  // namespace

std::string EpochLog::to_json_line() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["si_sdr_db"] = si_sdr_db;
    return j.dump();
}

TrainResult train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir, std::uint64_t seed,
                  const std::string& resume_path) {
    cfg.validate();
    Corpus corpus = load_corpus(manifest_path, cfg);

    Model model(cfg.model, seed);
    OptimizerState opt = OptimizerState::init(model.params(), cfg.opt);
    std::optional<WhiteningStats> wh;
    Rng rng(seed + 1);
    long start_epoch = 0;

    if (!resume_path.empty()) {
        Checkpoint ckpt = read_checkpoint(resume_path);
        if (ckpt.config.to_json() != cfg.model.to_json())
            throw ConfigMismatch("resume checkpoint config differs from the requested config");
        model = model_from_checkpoint(ckpt);
        opt = std::move(ckpt.opt);
        wh = std::move(ckpt.whitening);
        rng.restore(ckpt.rng_seed, ckpt.rng_counter);
        start_epoch = ckpt.epoch;
    } else if (cfg.model.whitening) {
        std::vector<ComplexSpectrogram> specs;
        for (const auto& u : corpus.utts)
            specs.push_back(stft(u.noisy, cfg.model.stft, cfg.model.sample_rate));
        wh = fit_whitening(specs, cfg.whitening_eps);
    }

    fs::create_directories(out_dir);
    std::ofstream log(fs::path(out_dir) / "log.jsonl",
                      resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot write log in " + out_dir);

    TrainResult result;
    const int n = static_cast<int>(corpus.utts.size());
    for (long epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        // geometric lr schedule; a function of the epoch index only, so
        // resumed runs stay bitwise-identical to uninterrupted ones
        if (cfg.lr_final > 0 && cfg.epochs > 1)
            opt.cfg.lr = cfg.opt.lr * std::pow(cfg.lr_final / cfg.opt.lr,
                                               static_cast<double>(epoch) /
                                                   static_cast<double>(cfg.epochs - 1));
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[rng.below(static_cast<std::uint64_t>(i) + 1)]);

        double loss_sum = 0;
        long batches = 0;
        for (int at = 0; at < n; at += cfg.batch_size) {
            Batch batch;
            batch.rng_seed = rng.seed();
            const int take = std::min(cfg.batch_size, n - at);
            for (int i = 0; i < take; ++i)
                batch.items.push_back(crop_segment(
                    corpus.utts[static_cast<std::size_t>(order[static_cast<std::size_t>(at + i)])],
                    cfg.segment_length, rng));
            if (rng.uniform() < cfg.remix_prob) remix(batch, rng);
            if (rng.uniform() < cfg.bandmask_prob)
                bandmask(batch, rng, cfg.model.stft, cfg.model.sample_rate, cfg.bandmask_width);

            Tape tape;
            auto pv = model.register_params(tape, true);
            Var total = utterance_loss(model, tape, pv, batch.items[0], cfg,
                                       wh ? &*wh : nullptr);
            for (std::size_t i = 1; i < batch.items.size(); ++i)
                total = ad::add(total, utterance_loss(model, tape, pv, batch.items[i], cfg,
                                                      wh ? &*wh : nullptr));
            Var loss = ad::scale(total, 1.0 / static_cast<double>(batch.items.size()));
            if (!std::isfinite(loss.val()[0]))
                throw NonFiniteActivation("train: non-finite loss");
            tape.backward(loss);

            std::vector<Tensor> grads;
            for (int pi = 0; pi < model.params().size(); ++pi) {
                const Var& p = pv[static_cast<std::size_t>(pi)];
                grads.push_back(tape.reached(p.id) ? tape.grad(p.id)
                                                   : Tensor::zeros_like(p.val()));
                if (!grads.back().all_finite())
                    throw NonFiniteActivation("train: non-finite gradient at " +
                                              model.params()[pi].name);
            }
            clip_grad_norm(grads, cfg.opt.clip_norm);
            adam_step(model.params(), grads, opt);
            loss_sum += loss.val()[0];
            ++batches;
        }

        double si = 0;
        for (const auto& u : corpus.utts) {
            auto er = enhance(model, wh, u.noisy, &u.clean, u.id);
            si += er.metrics->si_sdr_db;
        }
        si /= static_cast<double>(n);

        EpochLog el;
        el.epoch = static_cast<int>(epoch) + 1;
        el.loss = loss_sum / static_cast<double>(batches);
        el.si_sdr_db = si;
        log << el.to_json_line() << "\n";
        log.flush();
        result.logs.push_back(el);

        Checkpoint ckpt;
        ckpt.config = cfg.model;
        ckpt.params = model.params();
        ckpt.opt = opt;
        ckpt.whitening = wh;
        ckpt.rng_seed = rng.seed();
        ckpt.rng_counter = rng.counter();
        ckpt.epoch = epoch + 1;
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04ld.ckpt", epoch + 1);
        const std::string path = (fs::path(out_dir) / name).string();
        write_checkpoint(path, ckpt);
        result.checkpoint_paths.push_back(path);
    }
    return result;
}

std::vector<MetricRecord> evaluate(const Checkpoint& ckpt, const std::string& manifest_path) {
    TrainConfig tc;
    tc.model = ckpt.config;
    tc.segment_length = 1;  // no segmentation at eval time
    Corpus corpus = load_corpus(manifest_path, tc);
    Model model = model_from_checkpoint(ckpt);
    std::vector<MetricRecord> out;
    for (const auto& u : corpus.utts) {
        auto er = enhance(model, ckpt.whitening, u.noisy, &u.clean, u.id);
        auto rec = *er.metrics;
        rec.loss = plain_utterance_loss(model, ckpt.whitening, u, tc);
        out.push_back(std::move(rec));
    }
    return out;
}

// -------------------------------------------------------------------- bench

std::string BenchRow::to_csv_line() const {
    std::ostringstream ss;
    ss << mode << ',' << n << ',' << len << ',' << millis;
    return ss.str();
}

namespace {

DplrSSM bench_ssm(int n, std::uint64_t seed) {
    Rng rng(seed + 7);
    DplrSSM d;
    d.Lambda.resize(n);
    d.P.resize(n);
    d.B.resize(n);
    d.C.resize(n);
    for (int i = 0; i < n; ++i) {
        d.Lambda(i) = cdouble(-0.5, kPi * i);
        d.P(i) = cdouble(0.3 * rng.normal(), 0.3 * rng.normal());
        d.B(i) = cdouble(rng.normal(), rng.normal());
        d.C(i) = cdouble(rng.normal(), rng.normal());
    }
    d.delta = 0.005;
    return d;
}

template <typename Fn>
double time_best_millis(Fn&& fn) {
    using clock = std::chrono::steady_clock;
    fn();  // warm up
    int reps = 1;
    for (;;) {
        const auto t0 = clock::now();
        for (int r = 0; r < reps; ++r) fn();
        const double ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        if (ms >= 30.0 || reps >= (1 << 20)) break;
        reps *= 2;
    }
    double best = 1e300;
    for (int trial = 0; trial < 3; ++trial) {
        const auto t0 = clock::now();
        for (int r = 0; r < reps; ++r) fn();
        const double ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        best = std::min(best, ms / reps);
    }
    return best;
}

}  // namespace

BenchRow run_bench(const std::string& mode, int n, long len, std::uint64_t seed) {
    if (n < 1 || len < 1) throw ConfigError("bench: n and len must be positive");
    BenchRow row;
    row.mode = mode;
    row.n = n;
    row.len = len;
    const int L = static_cast<int>(len);

    if (mode == "kernel-naive" || mode == "kernel-dplr") {
        DplrSSM d = bench_ssm(n, seed);
        if (mode == "kernel-naive") {
            row.millis = time_best_millis([&] {
                auto dssm = discretize(d.dense(), d.delta);
                volatile double sink = materialize_kernel(dssm, L).taps(L - 1).real();
                (void)sink;
            });
        } else {
            row.millis = time_best_millis([&] {
                volatile double sink = materialize_kernel_dplr(d, L).taps(L - 1).real();
                (void)sink;
            });
        }
        return row;
    }
    if (mode == "conv-direct" || mode == "conv-fft") {
        Rng rng(seed + 11);
        std::vector<cdouble> k(static_cast<std::size_t>(L)), u(static_cast<std::size_t>(L));
        for (auto& v : k) v = cdouble(rng.normal(), rng.normal());
        for (auto& v : u) v = cdouble(rng.normal(), rng.normal());
        if (mode == "conv-direct") {
            row.millis = time_best_millis([&] {
                volatile double sink = causal_conv_direct(k, u).back().real();
                (void)sink;
            });
        } else {
            row.millis = time_best_millis([&] {
                volatile double sink = causal_conv_fft(k, u).back().real();
                (void)sink;
            });
        }
        return row;
    }
    throw ConfigError("bench: unknown mode '" + mode +
                      "' (kernel-naive, kernel-dplr, conv-direct, conv-fft)");
}

}  // namespace s4se
