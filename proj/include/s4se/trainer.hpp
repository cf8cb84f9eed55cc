#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s4se/data.hpp"
#include "s4se/nn.hpp"
#include "s4se/objectives.hpp"

namespace s4se {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;
};

struct OptimizerState {
    OptimizerConfig cfg;
    long step = 0;
    std::vector<Tensor> m;  // first moments, shapes mirror the ParamStore
    std::vector<Tensor> v;  // second moments

    static OptimizerState init(const ParamStore& params, OptimizerConfig cfg = {});
};

// Global gradient-norm clip; returns the pre-clip norm.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);
// Standard Adam with bias correction.
void adam_step(ParamStore& params, const std::vector<Tensor>& grads, OptimizerState& state);

struct TrainConfig {
    ModelConfig model;
    int epochs = 5;
    int batch_size = 4;
    int segment_length = 32000;  // 2 s at 16 kHz
    double remix_prob = 1.0;
    double bandmask_prob = 0.5;
    double bandmask_width = 0.2;
    double whitening_eps = 1e-3;
    OptimizerConfig opt;
    double lr_final = 0;  // > 0: lr decays geometrically to this value by the last epoch
    MultiResStftConfig mrstft = MultiResStftConfig::defaults();  // time-variant loss

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_json_file(const std::string& path);
};

// Single binary file, magic "S4CK", u32 version, length-prefixed sections
// (config JSON, params, optimizer, whitening, rng, epoch). Parameters and
// moments are stored as f64 so resume is bit-exact.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    ModelConfig config;
    ParamStore params;
    OptimizerState opt;
    std::optional<WhiteningStats> whitening;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    long epoch = 0;
};
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
// Model with the checkpoint's config and parameters.
Model model_from_checkpoint(const Checkpoint& ckpt);

struct EpochLog {
    int epoch = 0;
    double loss = 0;
    double si_sdr_db = 0;
    std::string to_json_line() const;
};
struct TrainResult {
    std::vector<EpochLog> logs;
    std::vector<std::string> checkpoint_paths;
};

// Runs the loop, writing per-epoch checkpoints and a log.jsonl into out_dir.
// resume_path restarts from a saved checkpoint and reproduces the
// uninterrupted run exactly.
TrainResult train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir, std::uint64_t seed,
                  const std::string& resume_path = "");

struct EnhanceResult {
    std::vector<double> samples;  // clamped to [-1, 1], same length as the input
    long clipped = 0;
    std::optional<MetricRecord> metrics;  // filled when a reference is given
};
EnhanceResult enhance(Model& model, const std::optional<WhiteningStats>& whitening,
                      const std::vector<double>& noisy, const std::vector<double>* ref = nullptr,
                      const std::string& id = "");
EnhanceResult enhance(const Checkpoint& ckpt, const std::vector<double>& noisy,
                      const std::vector<double>* ref = nullptr, const std::string& id = "");

// Mixes each manifest entry at its stated SNR and scores the enhanced output.
std::vector<MetricRecord> evaluate(const Checkpoint& ckpt, const std::string& manifest_path);

// Timing helpers for the bench subcommand. Modes: kernel-naive, kernel-dplr,
// conv-direct, conv-fft.
struct BenchRow {
    std::string mode;
    int n = 0;
    long len = 0;
    double millis = 0;
    std::string to_csv_line() const;
};
inline const char* bench_csv_header() { return "mode,n,len,millis"; }
BenchRow run_bench(const std::string& mode, int n, long len, std::uint64_t seed = 0);

}  // namespace s4se
