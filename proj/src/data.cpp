#include "s4se/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace s4se {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
void wr_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
void wr_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

double mean_power(const std::vector<double>& x) {
    double s = 0;
    for (double v : x) s += v * v;
    return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

}  // namespace

std::pair<std::vector<double>, int> read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open wav file: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (raw.size() < 12 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
        std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
        throw CorruptHeader("not a RIFF/WAVE file: " + path);

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= raw.size()) {
        const char* tag = reinterpret_cast<const char*>(raw.data() + pos);
        const std::uint32_t len = rd_u32(raw.data() + pos + 4);
        if (pos + 8 + len > raw.size()) throw CorruptHeader("truncated chunk in " + path);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (len < 16) throw CorruptHeader("short fmt chunk in " + path);
            const unsigned char* f = raw.data() + pos + 8;
            format = rd_u16(f);
            channels = rd_u16(f + 2);
            rate = rd_u32(f + 4);
            bits = rd_u16(f + 14);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            data = raw.data() + pos + 8;
            data_len = len;
        }
        pos += 8 + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || data == nullptr) throw CorruptHeader("missing fmt/data chunk in " + path);
    if (format != 1) throw UnsupportedFormat("non-PCM wav: " + path);
    if (channels != 1) throw UnsupportedFormat("only mono wav supported: " + path);
    if (bits != 16) throw UnsupportedFormat("only 16-bit PCM supported: " + path);

    const std::uint32_t n = data_len / 2;
    std::vector<double> samples(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::int16_t v =
            static_cast<std::int16_t>(static_cast<std::uint16_t>(data[2 * i] | (data[2 * i + 1] << 8)));
        samples[i] = static_cast<double>(v) / 32768.0;
    }
    return {std::move(samples), static_cast<int>(rate)};
}

void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write wav file: " + path);
    const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size()) * 2;
    os.write("RIFF", 4);
    wr_u32(os, 36 + data_len);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    wr_u32(os, 16);
    wr_u16(os, 1);  // PCM
    wr_u16(os, 1);  // mono
    wr_u32(os, static_cast<std::uint32_t>(sample_rate));
    wr_u32(os, static_cast<std::uint32_t>(sample_rate) * 2);  // byte rate
    wr_u16(os, 2);                                            // block align
    wr_u16(os, 16);
    os.write("data", 4);
    wr_u32(os, data_len);
    for (double x : samples) {
        long v = std::lround(x * 32768.0);
        v = std::clamp(v, -32768L, 32767L);
        wr_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    if (!os) throw DataError("short write to wav file: " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    };
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };

    std::string line;
    if (!std::getline(is, line) || trim(line) != "id,clean_path,noise_path,snr_db")
        throw DataError("manifest header must be 'id,clean_path,noise_path,snr_db': " + path);

    std::vector<ManifestEntry> out;
    long lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::stringstream ss(line);
        std::string id, cp, np, snr;
        if (!std::getline(ss, id, ',') || !std::getline(ss, cp, ',') ||
            !std::getline(ss, np, ',') || !std::getline(ss, snr))
            throw DataError("manifest line " + std::to_string(lineno) + ": expected 4 fields");
        ManifestEntry e;
        e.id = trim(id);
        e.clean_path = resolve(trim(cp));
        e.noise_path = resolve(trim(np));
        try {
            std::size_t used = 0;
            e.snr_db = std::stod(trim(snr), &used);
            if (used != trim(snr).size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw DataError("manifest line " + std::to_string(lineno) + ": bad snr_db '" + snr + "'");
        }
        if (e.id.empty() || e.clean_path.empty() || e.noise_path.empty())
            throw DataError("manifest line " + std::to_string(lineno) + ": empty field");
        out.push_back(std::move(e));
    }
    if (out.empty()) throw DataError("manifest has no entries: " + path);
    return out;
}

MixResult mix_at_snr(const std::vector<double>& clean, const std::vector<double>& noise,
                     double snr_db) {
    if (clean.size() != noise.size())
        throw DimensionMismatch("mix_at_snr: length mismatch");
    const double pc = mean_power(clean);
    const double pn = mean_power(noise);
    if (pc <= 0.0 || pn <= 0.0) throw ZeroPowerInput("mix_at_snr: zero-power input");

    MixResult r;
    r.gain = std::sqrt(pc / (pn * std::pow(10.0, snr_db / 10.0)));
    r.noisy.resize(clean.size());
    double peak = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        r.noisy[i] = clean[i] + r.gain * noise[i];
        peak = std::max(peak, std::abs(r.noisy[i]));
    }
    r.norm_scale = 1.0 / std::max(1.0, peak);
    if (r.norm_scale != 1.0)
        for (double& v : r.noisy) v *= r.norm_scale;
    return r;
}

void remix(Batch& batch, Rng& rng) {
    const std::size_t n = batch.items.size();
    if (n < 2) return;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.below(i + 1)]);

    std::vector<std::vector<double>> noises(n);
    for (std::size_t i = 0; i < n; ++i) noises[i] = std::move(batch.items[perm[i]].noise);
    for (std::size_t i = 0; i < n; ++i) {
        Utterance& u = batch.items[i];
        u.noise = std::move(noises[i]);
        u.noisy.resize(u.clean.size());
        for (std::size_t t = 0; t < u.clean.size(); ++t)
            u.noisy[t] = u.clean[t] + u.noise_gain * u.noise[t];
    }
}

std::vector<int> band_bins(double m0_mel, double width_fraction, const StftConfig& cfg,
                           double sample_rate) {
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    const double f_lo = mel_to_hz(m0_mel);
    const double f_hi = mel_to_hz(std::min(m0_mel + width_fraction * mel_max, mel_max));
    std::vector<int> bins;
    for (int k = 0; k < cfg.num_bins(); ++k) {
        const double fk = static_cast<double>(k) * sample_rate / cfg.n_fft;
        if (fk >= f_lo && fk <= f_hi) bins.push_back(k);
    }
    return bins;
}

std::vector<double> bandmask_fixed(const std::vector<double>& x, double m0_mel,
                                   double width_fraction, const StftConfig& cfg,
                                   double sample_rate) {
    // Re-synthesis leaks neighbor-bin energy back into the band edges through
    // the analysis window mainlobe, so the zeroed set is widened by a guard of
    // about one mainlobe width and the zero/resynthesize step is iterated; the
    // nominal band (band_bins) then ends up well below 1e-3 of its pre-mask
    // energy while the transition stays a few bins wide, as with any band-stop.
    const auto bins = band_bins(m0_mel, width_fraction, cfg, sample_rate);
    if (bins.empty()) return x;
    const int guard = 1 + 2 * cfg.n_fft / cfg.win_length;
    const int lo = std::max(0, bins.front() - guard);
    const int hi = std::min(cfg.num_bins() - 1, bins.back() + guard);
    std::vector<double> y = x;
    for (int pass = 0; pass < 3; ++pass) {
        auto spec = stft(y, cfg, sample_rate);
        spec.data.middleRows(lo, hi - lo + 1).setZero();
        y = istft(spec);
    }
    return y;
}

void bandmask(Batch& batch, Rng& rng, const StftConfig& cfg, double sample_rate,
              double width_fraction) {
    if (width_fraction <= 0.0 || width_fraction >= 1.0)
        throw ConfigError("bandmask: width_fraction must be in (0, 1)");
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    const double m0 = rng.uniform(0.0, mel_max * (1.0 - width_fraction));
    for (Utterance& u : batch.items) {
        u.clean = bandmask_fixed(u.clean, m0, width_fraction, cfg, sample_rate);
        u.noisy = bandmask_fixed(u.noisy, m0, width_fraction, cfg, sample_rate);
    }
}

}  // namespace s4se
