#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s4se/autodiff.hpp"
#include "s4se/dsp.hpp"

namespace s4se {

enum class Variant { time_s4_unet, tf_s4_unet, s4nd_unet };
enum class Scenario { mag_regression, mag_masking, complex_masking };

std::string to_string(Variant v);
std::string to_string(Scenario s);
Variant variant_from_string(const std::string& s);
Scenario scenario_from_string(const std::string& s);

struct ModelConfig {
    Variant variant = Variant::s4nd_unet;
    Scenario scenario = Scenario::complex_masking;
    int in_channels = 2;
    int num_unet_levels = 2;
    int blocks_per_level = 4;
    int base_channels = 64;
    int state_size = 4;
    int rank = 1;
    bool whitening = false;
    StftConfig stft{510, 400, 100};
    double sample_rate = 16000.0;

    void validate() const;
    int out_channels() const;  // head channels: 2 for complex_masking, else 1
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    static ModelConfig from_json_file(const std::string& path);
};

struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
    };
    std::vector<Entry> entries;

    int add(std::string name, Tensor value);
    long total_scalars() const;
    Entry& operator[](int i) { return entries[static_cast<std::size_t>(i)]; }
    const Entry& operator[](int i) const { return entries[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(entries.size()); }
};

class Model {
  public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    long count_params() const { return params_.total_scalars(); }

    // One Var per ParamStore entry, in order.
    std::vector<Var> register_params(Tape& tape, bool requires_grad) const;
    // time variant: input [1, L] -> [1, L].
    // tf variants: input [C, F, T] -> [out_channels, F, T] (scenario head applied).
    Var forward(Tape& tape, const std::vector<Var>& pv, Var input) const;

  private:
    struct AxisIdx {
        int lam_re, lam_im, p_re, p_im, b_re, b_im, c_re, c_im, log_dt;
    };
    struct BlockIdx {
        int ln_g, ln_b;
        AxisIdx ax1;
        AxisIdx ax2;  // used only in 2-D blocks
        int mix_w, mix_b;
    };
    struct LevelIdx {
        std::vector<BlockIdx> blocks;
        int down_w = -1, down_b = -1;           // post-pool channel expansion
        int up_w = -1, up_b = -1;               // post-upsample channel reduction
        int skip_w = -1, skip_b = -1;           // mix after skip concatenation
        std::vector<BlockIdx> up_blocks;
    };

    bool two_d() const { return cfg_.variant == Variant::s4nd_unet; }
    int pool_factor() const;  // per-level 1-D pooling (time axis)
    AxisIdx add_axis(const std::string& name, int H, Rng& rng);
    BlockIdx add_block(const std::string& name, int H, Rng& rng);
    int add_linear(const std::string& name, int out, int in, Rng& rng);  // returns W index, bias follows
    Var run_block(Tape& tape, const std::vector<Var>& pv, const BlockIdx& b, Var x) const;
    Var axis_kernel(Tape& tape, const std::vector<Var>& pv, const AxisIdx& a, int L) const;

    ModelConfig cfg_;
    ParamStore params_;
    int stem_w_ = -1, head_w_ = -1;
    std::vector<LevelIdx> levels_;
    std::vector<BlockIdx> bottleneck_;
};

// Inference-path mask/regression application (non-differentiable).
// model_out layout matches Model::forward output.
ComplexSpectrogram apply_scenario(const ComplexSpectrogram& noisy, const Tensor& model_out,
                                  Scenario scenario);
// Differentiable counterparts for training:
// complex_masking -> (re, im) planes of the enhanced spectrogram.
std::pair<Var, Var> ad_apply_complex_mask(const ComplexSpectrogram& noisy, Var model_out);
// mag scenarios -> enhanced magnitude plane [F, T].
Var ad_apply_mag(const ComplexSpectrogram& noisy, Var model_out, Scenario scenario);

struct GradcheckGroup {
    std::string name;
    double max_rel_err = 0;
    bool disconnected = false;
};
struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double worst = 0;
    bool pass = false;
};
// Tiny-scale finite-difference verification of a full variant/scenario pipeline.
GradcheckReport gradcheck(const ModelConfig& cfg, std::uint64_t seed);
GradcheckReport gradcheck_model(Model& model, std::uint64_t seed);
// Convenience: build the tiny config used by `gradcheck --variant`.
ModelConfig tiny_config(Variant v, Scenario s);

}  // namespace s4se
