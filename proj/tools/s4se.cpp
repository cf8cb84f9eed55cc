#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "s4se/ssm_nd.hpp"
#include "s4se/trainer.hpp"

namespace fs = std::filesystem;
using namespace s4se;

namespace {

// exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure
constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kNumericExit = 4;

std::vector<double> read_wav_checked(const std::string& path, double expect_rate) {
    auto [samples, rate] = read_wav(path);
    if (rate != static_cast<int>(expect_rate))
        throw DataError("sample rate mismatch in " + path + ": got " + std::to_string(rate));
    return samples;
}

int cmd_train(const std::string& config, const std::string& manifest, const std::string& out,
              std::uint64_t seed, const std::string& resume) {
    TrainConfig cfg = TrainConfig::from_json_file(config);
    auto result = train(cfg, manifest, out, seed, resume);
    for (const auto& l : result.logs) std::cout << l.to_json_line() << "\n";
    if (!result.checkpoint_paths.empty())
        std::cout << "last checkpoint: " << result.checkpoint_paths.back() << "\n";
    return 0;
}

int cmd_enhance(const std::string& ckpt_path, const std::string& in, const std::string& out,
                const std::string& ref) {
    Checkpoint ckpt = read_checkpoint(ckpt_path);
    Model model = model_from_checkpoint(ckpt);
    const double rate = ckpt.config.sample_rate;

    std::vector<std::pair<std::string, std::string>> jobs;  // (in wav, out wav)
    if (fs::is_directory(in)) {
        fs::create_directories(out);
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(in))
            if (e.path().extension() == ".wav") names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        if (names.empty()) throw DataError("no .wav files in " + in);
        for (const auto& n : names) jobs.emplace_back((fs::path(in) / n).string(),
                                                      (fs::path(out) / n).string());
    } else {
        jobs.emplace_back(in, out);
    }

    for (const auto& [in_wav, out_wav] : jobs) {
        auto noisy = read_wav_checked(in_wav, rate);
        std::vector<double> ref_wave;
        const std::vector<double>* ref_ptr = nullptr;
        if (!ref.empty()) {
            const std::string ref_wav =
                fs::is_directory(ref) ? (fs::path(ref) / fs::path(in_wav).filename()).string()
                                      : ref;
            ref_wave = read_wav_checked(ref_wav, rate);
            ref_ptr = &ref_wave;
        }
        auto res = enhance(model, ckpt.whitening, noisy, ref_ptr, fs::path(in_wav).stem().string());
        write_wav(out_wav, res.samples, static_cast<int>(rate));
        if (res.metrics) {
            auto rec = *res.metrics;
            nlohmann::json j = nlohmann::json::parse(rec.to_json_line());
            j["clipped"] = res.clipped;
            std::cout << j.dump() << "\n";
        }
    }
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest) {
    Checkpoint ckpt = read_checkpoint(ckpt_path);
    for (const auto& rec : evaluate(ckpt, manifest)) std::cout << rec.to_json_line() << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& variant, const std::string& scenario, std::uint64_t seed) {
    const Variant v = variant_from_string(variant);
    Scenario s;
    if (!scenario.empty())
        s = scenario_from_string(scenario);
    else
        s = v == Variant::tf_s4_unet ? Scenario::mag_masking : Scenario::complex_masking;
    auto report = gradcheck(tiny_config(v, s), seed);
    for (const auto& g : report.groups) {
        if (g.disconnected)
            std::cout << g.name << ": DISCONNECTED\n";
        else
            std::cout << g.name << ": max rel err " << g.max_rel_err << "\n";
    }
    bool disconnected = false;
    for (const auto& g : report.groups) disconnected |= g.disconnected;
    const bool ok = report.pass && !disconnected;
    std::cout << (ok ? "PASS" : "FAIL") << " worst " << report.worst << "\n";
    return ok ? 0 : kNumericExit;
}

// HiPPO-style components matching the network initialization
DplrSSM kernel_axis(int N, double delta, Rng& rng) {
    DplrSSM d;
    d.Lambda.resize(N);
    d.P.resize(N);
    d.B.resize(N);
    d.C.resize(N);
    for (int i = 0; i < N; ++i) {
        d.Lambda(i) = cdouble(-0.5, kPi * i);
        d.P(i) = cdouble(std::sqrt(i + 0.5), 0.0);
        d.B(i) = cdouble(std::sqrt(2.0 * i + 1.0), 0.0);
        d.C(i) = cdouble(rng.normal(), rng.normal()) / std::sqrt(static_cast<double>(N));
    }
    d.delta = delta;
    return d;
}

int cmd_kernel(const std::string& config, int len, const std::string& out) {
    std::ifstream is(config);
    if (!is) throw ConfigError("cannot open config file: " + config);
    std::stringstream ss;
    ss << is.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("kernel config parse error: ") + e.what());
    }
    const std::string kind = j.value("kind", "1d");
    const std::uint64_t seed = j.value("seed", 0ULL);
    Rng rng(seed);
    if (kind == "1d") {
        DplrSSM d = kernel_axis(j.value("state_size", 4), j.value("delta", 0.01), rng);
        write_kernel(out, materialize_kernel_dplr(d, len));
        std::cout << "wrote SSMK kernel, L=" << len << " to " << out << "\n";
        return 0;
    }
    if (kind == "2d") {
        Ssm2D ssm;
        ssm.axis1 = kernel_axis(j.value("state_size1", 4), j.value("delta1", 0.01), rng);
        ssm.axis2 = kernel_axis(j.value("state_size2", 4), j.value("delta2", 0.01), rng);
        const int R = j.value("rank", 1);
        const int N1 = ssm.axis1.state_dim(), N2 = ssm.axis2.state_dim();
        for (int r = 0; r < R; ++r) {
            Ssm2D::Factor f;
            f.c1.resize(N1);
            f.c2.resize(N2);
            for (int i = 0; i < N1; ++i)
                f.c1(i) = cdouble(rng.normal(), rng.normal()) / std::sqrt(static_cast<double>(N1));
            for (int i = 0; i < N2; ++i)
                f.c2(i) = cdouble(rng.normal(), rng.normal()) / std::sqrt(static_cast<double>(N2));
            ssm.c_factors.push_back(std::move(f));
        }
        write_kernel_2d(out, materialize_kernel_2d(ssm, len, len));
        std::cout << "wrote SSK2 kernel, L1=L2=" << len << " rank=" << R << " to " << out << "\n";
        return 0;
    }
    throw ConfigError("kernel config: kind must be '1d' or '2d'");
}

int cmd_bench(const std::string& mode, int n, long len) {
    auto row = run_bench(mode, n, len);
    std::cout << bench_csv_header() << "\n" << row.to_csv_line() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"structured state-space speech enhancement toolkit"};
    app.require_subcommand(1);

    std::string config, manifest, out, resume, ckpt, in, ref, variant, scenario, mode;
    std::uint64_t seed = 0;
    int len = 0, n = 0;

    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--config", config, "train config JSON")->required();
    train_cmd->add_option("--manifest", manifest, "corpus manifest CSV")->required();
    train_cmd->add_option("--out", out, "output directory")->required();
    train_cmd->add_option("--seed", seed, "rng seed");
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");

    auto* enh_cmd = app.add_subcommand("enhance", "enhance wav file(s)");
    enh_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
    enh_cmd->add_option("--in", in, "input wav or directory")->required();
    enh_cmd->add_option("--out", out, "output wav or directory")->required();
    enh_cmd->add_option("--ref", ref, "reference wav or directory (enables metrics)");

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a manifest");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--manifest", manifest, "corpus manifest CSV")->required();

    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc_cmd->add_option("--variant", variant, "time_s4_unet | tf_s4_unet | s4nd_unet")->required();
    gc_cmd->add_option("--scenario", scenario, "mag_regression | mag_masking | complex_masking");
    gc_cmd->add_option("--seed", seed, "rng seed");

    auto* ker_cmd = app.add_subcommand("kernel", "materialize and dump an SSM kernel");
    ker_cmd->add_option("--config", config, "kernel config JSON")->required();
    ker_cmd->add_option("--len", len, "kernel length")->required();
    ker_cmd->add_option("--out", out, "output dump file")->required();

    auto* bench_cmd = app.add_subcommand("bench", "timing comparisons");
    bench_cmd
        ->add_option("--mode", mode, "kernel-naive | kernel-dplr | conv-direct | conv-fft")
        ->required();
    bench_cmd->add_option("--n", n, "state size")->required();
    bench_cmd->add_option("--len", len, "sequence length")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigExit;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(config, manifest, out, seed, resume);
        if (enh_cmd->parsed()) return cmd_enhance(ckpt, in, out, ref);
        if (eval_cmd->parsed()) return cmd_eval(ckpt, manifest);
        if (gc_cmd->parsed()) return cmd_gradcheck(variant, scenario, seed);
        if (ker_cmd->parsed()) return cmd_kernel(config, len, out);
        if (bench_cmd->parsed()) return cmd_bench(mode, n, len);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigExit;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataExit;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumericExit;
    }
    return 0;
}
