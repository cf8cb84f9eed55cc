#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s4se/common.hpp"
#include "s4se/dsp.hpp"

namespace s4se {

struct Utterance {
    std::string id;
    std::vector<double> clean;
    std::vector<double> noise;
    std::vector<double> noisy;
    double snr_db = 0;
    double noise_gain = 1.0;  // g with noisy = clean + g * noise
};

struct Batch {
    std::vector<Utterance> items;
    std::uint64_t rng_seed = 0;
};

// PCM16 mono RIFF/WAVE only; samples scaled by 1/32768.
std::pair<std::vector<double>, int> read_wav(const std::string& path);
void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate);

struct ManifestEntry {
    std::string id;
    std::string clean_path;  // resolved relative to the manifest directory
    std::string noise_path;
    double snr_db = 0;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);

struct MixResult {
    std::vector<double> noisy;
    double gain = 1.0;        // noise gain achieving the requested SNR
    double norm_scale = 1.0;  // peak normalization 1/max(1, peak) applied to noisy
};
MixResult mix_at_snr(const std::vector<double>& clean, const std::vector<double>& noise,
                     double snr_db);

// Shuffle noises within the batch; noisy_i rebuilt as clean_i + g_i * noise_{sigma(i)}.
void remix(Batch& batch, Rng& rng);

// Zero a mel-uniform stop band (width_fraction of the mel range) in both clean
// and noisy via STFT masking; m0 drawn once per batch.
void bandmask(Batch& batch, Rng& rng, const StftConfig& cfg, double sample_rate,
              double width_fraction = 0.2);
// Deterministic core, exposed for tests: mask [mel^-1(m0), mel^-1(m0 + width*melmax)].
std::vector<double> bandmask_fixed(const std::vector<double>& x, double m0_mel,
                                   double width_fraction, const StftConfig& cfg,
                                   double sample_rate);
// Bin rows zeroed by the mask above (center frequency k*fs/n_fft inside the band).
std::vector<int> band_bins(double m0_mel, double width_fraction, const StftConfig& cfg,
                           double sample_rate);

}  // namespace s4se
