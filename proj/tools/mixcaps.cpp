// Command-line surface for the mixture-of-capsule-experts library: dataset
// generation, training, evaluation, bootstrap CIs, gate-feature correlation,
// noise sweeps, routing analysis and gradient checking. Logs and reports are
// line-delimited JSON; configs are flat key=value files overridden by flags.

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixcaps/config.hpp"
#include "mixcaps/datagen.hpp"
#include "mixcaps/em.hpp"
#include "mixcaps/train.hpp"

namespace {

using nlohmann::json;

struct OutputStream {
    std::ostream* os = &std::cout;
    std::ofstream file;

    void open(const std::string& path) {
        if (path.empty() || path == "-") return;
        file.open(path, std::ios::trunc);
        if (!file) throw mixcaps::FormatError("cannot open log file " + path);
        os = &file;
    }
    std::ostream& get() { return *os; }
};

json metrics_json(const mixcaps::Metrics& m) {
    return json{{"accuracy", m.accuracy},
                {"sensitivity", m.sensitivity},
                {"specificity", m.specificity},
                {"auc", m.auc}};
}

struct TrainFlags {
    std::string config_path;
    std::string preset;
    std::optional<int> epochs, batch_size, bootstrap_iterations, num_experts, side_features,
        threads;
    std::optional<double> learning_rate, sample_fraction, validation_fraction;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value config file");
        cmd->add_option("--preset", preset, "desk or paper")
            ->check(CLI::IsMember({"desk", "paper"}));
        cmd->add_option("--epochs", epochs);
        cmd->add_option("--batch-size", batch_size);
        cmd->add_option("--learning-rate", learning_rate);
        cmd->add_option("--seed", seed);
        cmd->add_option("--iterations", bootstrap_iterations, "bootstrap iterations");
        cmd->add_option("--sample-fraction", sample_fraction);
        cmd->add_option("--validation-fraction", validation_fraction);
        cmd->add_option("--experts", num_experts)->check(CLI::Range(2, 64));
        cmd->add_option("--side-features", side_features,
                        "side-feature length (0 or 2: volume, diameter)");
        cmd->add_option("--threads", threads);
    }

    mixcaps::TrainConfig resolve() const {
        std::optional<mixcaps::KeyValueConfig> kv;
        if (!config_path.empty()) kv = mixcaps::KeyValueConfig::from_file(config_path);
        // Effective preset (flag beats file) picks the defaults the remaining
        // keys override.
        std::string effective = "desk";
        if (kv) effective = kv->get_string("preset", effective);
        if (!preset.empty()) effective = preset;
        mixcaps::TrainConfig cfg = mixcaps::TrainConfig::make(
            effective == "paper" ? mixcaps::Preset::paper : mixcaps::Preset::desk);
        if (kv) {
            mixcaps::apply_config(*kv, cfg);
            kv->ensure_fully_consumed();
        }
        cfg.preset = effective == "paper" ? mixcaps::Preset::paper : mixcaps::Preset::desk;
        if (epochs) cfg.epochs = *epochs;
        if (batch_size) cfg.batch_size = *batch_size;
        if (learning_rate) cfg.adam.learning_rate = *learning_rate;
        if (seed) cfg.seed = *seed;
        if (bootstrap_iterations) cfg.bootstrap_iterations = *bootstrap_iterations;
        if (sample_fraction) cfg.sample_fraction = *sample_fraction;
        if (validation_fraction) cfg.validation_fraction = *validation_fraction;
        if (num_experts) cfg.num_experts = *num_experts;
        if (side_features) cfg.side_feature_len = *side_features;
        if (threads) cfg.threads = *threads;
        cfg.validate();
        return cfg;
    }
};

std::vector<double> parse_std_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw mixcaps::FormatError("--stds: '" + item + "' is not a number");
        }
    }
    if (out.empty()) throw mixcaps::FormatError("--stds: empty list");
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"mixture of capsule-network experts with a convolutional gate"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "render a synthetic nodule dataset");
    std::string gen_out;
    int gen_count = 1000;
    std::uint64_t gen_seed = 0;
    std::string gen_config;
    gen->add_option("--out", gen_out, "output dataset file")->required();
    gen->add_option("--count", gen_count)->check(CLI::NonNegativeNumber);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--config", gen_config, "key=value generator parameters");
    struct GenFlags {
        std::optional<double> p_large, texture_threshold, wobble_threshold, center_jitter;
        std::optional<std::pair<double, double>> small_diameter, large_diameter, eccentricity,
            texture_amp_low, texture_amp_high, texture_freq, wobble_low, wobble_high;
    } gen_flags;
    gen->add_option("--p-large", gen_flags.p_large, "probability of the large regime");
    gen->add_option("--texture-threshold", gen_flags.texture_threshold);
    gen->add_option("--wobble-threshold", gen_flags.wobble_threshold);
    gen->add_option("--center-jitter", gen_flags.center_jitter);
    const auto range_flag = [&](const char* name, std::optional<std::pair<double, double>>& slot,
                                const char* help) {
        gen->add_option(name, slot, help)->delimiter(',');
    };
    range_flag("--small-diameter", gen_flags.small_diameter, "lo,hi pixels");
    range_flag("--large-diameter", gen_flags.large_diameter, "lo,hi pixels");
    range_flag("--eccentricity", gen_flags.eccentricity, "lo,hi in (0,1]");
    range_flag("--texture-amp-low", gen_flags.texture_amp_low, "benign texture amplitude lo,hi");
    range_flag("--texture-amp-high", gen_flags.texture_amp_high,
               "malignant texture amplitude lo,hi");
    range_flag("--texture-freq", gen_flags.texture_freq, "texture wave frequency lo,hi (rad/px)");
    range_flag("--wobble-low", gen_flags.wobble_low, "smooth boundary wobble lo,hi");
    range_flag("--wobble-high", gen_flags.wobble_high, "irregular boundary wobble lo,hi");

    // train
    auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
    std::string tr_data, tr_out, tr_log;
    TrainFlags tr_flags;
    tr->add_option("--data", tr_data, "dataset file")->required();
    tr->add_option("--out", tr_out, "checkpoint path")->required();
    tr->add_option("--log", tr_log, "epoch log path (JSONL, default stdout)");
    tr_flags.attach(tr);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "metrics of a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_preset;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--preset", ev_preset, "verify the checkpoint matches this preset")
        ->check(CLI::IsMember({"desk", "paper"}));

    // bootstrap
    auto* bs = app.add_subcommand("bootstrap", "bootstrap training/evaluation with CIs");
    std::string bs_data, bs_log;
    TrainFlags bs_flags;
    bs->add_option("--data", bs_data)->required();
    bs->add_option("--log", bs_log, "report path (JSONL, default stdout)");
    bs_flags.attach(bs);

    // gate-corr
    auto* gc = app.add_subcommand("gate-corr", "gate weight vs side-feature correlation");
    std::string gc_ckpt, gc_data;
    gc->add_option("--checkpoint", gc_ckpt)->required();
    gc->add_option("--data", gc_data)->required();

    // noise-sweep
    auto* ns = app.add_subcommand("noise-sweep", "accuracy under input Gaussian noise");
    std::string ns_ckpt, ns_data, ns_stds = "0.01,0.1,0.5";
    std::uint64_t ns_seed = 0;
    ns->add_option("--checkpoint", ns_ckpt)->required();
    ns->add_option("--data", ns_data)->required();
    ns->add_option("--stds", ns_stds, "comma-separated noise stds (sorted)");
    ns->add_option("--noise-seed", ns_seed);

    // analyze-routing
    auto* ar = app.add_subcommand("analyze-routing",
                                  "responsibility posteriors and routing-as-gating checks");
    std::string ar_ckpt, ar_data, ar_mode = "class-matched";
    int ar_samples = 8, ar_expert = 0;
    ar->add_option("--checkpoint", ar_ckpt)->required();
    ar->add_option("--data", ar_data)->required();
    ar->add_option("--samples", ar_samples)->check(CLI::PositiveNumber);
    ar->add_option("--expert", ar_expert)->check(CLI::NonNegativeNumber);
    ar->add_option("--mode", ar_mode)->check(CLI::IsMember({"class-matched", "malignant"}));

    // gradcheck
    auto* gch = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gch_preset = "desk";
    int gch_batch = 2;
    double gch_h = 1e-5, gch_tol = 1e-4;
    std::int64_t gch_max_entries = 256;
    std::uint64_t gch_seed = 0;
    gch->add_option("--preset", gch_preset)->check(CLI::IsMember({"desk", "paper"}));
    gch->add_option("--batch", gch_batch)->check(CLI::PositiveNumber);
    gch->add_option("--step", gch_h, "finite-difference step h");
    gch->add_option("--tol", gch_tol);
    gch->add_option("--max-entries", gch_max_entries,
                    "entries checked per block (-1 for every entry)");
    gch->add_option("--seed", gch_seed);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        mixcaps::Dataset dataset;
        dataset.seed = gen_seed;
        if (!gen_config.empty()) {
            const auto kv = mixcaps::KeyValueConfig::from_file(gen_config);
            mixcaps::apply_config(kv, dataset.params);
            kv.ensure_fully_consumed();
        }
        mixcaps::GenParams& gp = dataset.params;
        if (gen_flags.p_large) gp.p_large = *gen_flags.p_large;
        if (gen_flags.texture_threshold) gp.texture_threshold = *gen_flags.texture_threshold;
        if (gen_flags.wobble_threshold) gp.wobble_threshold = *gen_flags.wobble_threshold;
        if (gen_flags.center_jitter) gp.center_jitter = *gen_flags.center_jitter;
        const auto set_range = [](const std::optional<std::pair<double, double>>& flag,
                                  mixcaps::Range& r) {
            if (flag) r = {flag->first, flag->second};
        };
        set_range(gen_flags.small_diameter, gp.small_diameter);
        set_range(gen_flags.large_diameter, gp.large_diameter);
        set_range(gen_flags.eccentricity, gp.eccentricity);
        set_range(gen_flags.texture_amp_low, gp.texture_amp_low);
        set_range(gen_flags.texture_amp_high, gp.texture_amp_high);
        set_range(gen_flags.texture_freq, gp.texture_freq);
        set_range(gen_flags.wobble_low, gp.wobble_low);
        set_range(gen_flags.wobble_high, gp.wobble_high);
        dataset.records = mixcaps::generate_dataset(gen_seed, gen_count, dataset.params);
        mixcaps::write_dataset(dataset, gen_out);
        int malignant = 0;
        for (const auto& r : dataset.records) malignant += r.label;
        std::cout << json{{"record", "generate"},
                          {"path", gen_out},
                          {"count", gen_count},
                          {"malignant", malignant},
                          {"seed", gen_seed}}
                         .dump()
                  << '\n';
        return 0;
    }

    if (tr->parsed()) {
        const mixcaps::TrainConfig cfg = tr_flags.resolve();
        const mixcaps::Dataset dataset = mixcaps::read_dataset(tr_data);
        OutputStream log;
        log.open(tr_log);
        const mixcaps::TrainResult result = mixcaps::train(dataset.records, cfg);
        for (const mixcaps::EpochLog& e : result.log) {
            log.get() << json{{"record", "epoch"},
                              {"epoch", e.epoch},
                              {"train_loss", e.train_loss},
                              {"train_accuracy", e.train_accuracy},
                              {"val_loss", e.val_loss},
                              {"val_accuracy", e.val_accuracy}}
                             .dump()
                      << '\n';
        }
        mixcaps::save_checkpoint(result.checkpoint, tr_out);
        const bool ok = result.status == mixcaps::TrainResult::Status::ok;
        log.get() << json{{"record", "train_summary"},
                          {"status", ok ? "ok" : "diverged"},
                          {"steps", result.checkpoint.step},
                          {"checkpoint", tr_out}}
                         .dump()
                  << '\n';
        if (!ok) {
            throw mixcaps::NumericError(result.divergence_message +
                                        " (last-good checkpoint written to " + tr_out + ")");
        }
        return 0;
    }

    if (ev->parsed()) {
        const mixcaps::ModelCheckpoint ckpt = mixcaps::load_checkpoint(ev_ckpt);
        if (!ev_preset.empty()) {
            mixcaps::TrainConfig expected = mixcaps::TrainConfig::make(
                ev_preset == "paper" ? mixcaps::Preset::paper : mixcaps::Preset::desk);
            expected.num_experts = ckpt.config.num_experts;
            expected.side_feature_len = ckpt.config.side_feature_len;
            mixcaps::verify_checkpoint_config(ckpt, expected);
        }
        const mixcaps::MixcapsModel model = mixcaps::model_from_checkpoint(ckpt);
        const mixcaps::Dataset dataset = mixcaps::read_dataset(ev_data);
        const mixcaps::Metrics m =
            mixcaps::evaluate(model, dataset.records, ckpt.config.side_feature_len);
        json j = metrics_json(m);
        j["record"] = "metrics";
        j["samples"] = dataset.records.size();
        std::cout << j.dump() << '\n';
        return 0;
    }

    if (bs->parsed()) {
        const mixcaps::TrainConfig cfg = bs_flags.resolve();
        const mixcaps::Dataset dataset = mixcaps::read_dataset(bs_data);
        OutputStream log;
        log.open(bs_log);
        const mixcaps::BootstrapReport report =
            mixcaps::bootstrap_evaluate(dataset.records, cfg);
        for (std::size_t i = 0; i < report.iterations.size(); ++i) {
            json j = metrics_json(report.iterations[i]);
            j["record"] = "bootstrap_iteration";
            j["iteration"] = i;
            log.get() << j.dump() << '\n';
        }
        log.get() << json{{"record", "bootstrap_summary"},
                          {"iterations", report.iterations.size()},
                          {"resampled", report.resampled_iterations},
                          {"point", metrics_json(report.point)},
                          {"ci_lo", metrics_json(report.ci_lo)},
                          {"ci_hi", metrics_json(report.ci_hi)}}
                         .dump()
                  << '\n';
        return 0;
    }

    if (gc->parsed()) {
        const mixcaps::ModelCheckpoint ckpt = mixcaps::load_checkpoint(gc_ckpt);
        const mixcaps::MixcapsModel model = mixcaps::model_from_checkpoint(ckpt);
        const mixcaps::Dataset dataset = mixcaps::read_dataset(gc_data);
        const mixcaps::GateCorrelation corr =
            mixcaps::gate_correlation(model, dataset.records, ckpt.config.side_feature_len);
        const auto emit = [&](const char* feature, const mixcaps::Pearson& p) {
            std::cout << json{{"record", "gate_correlation"},
                              {"feature", feature},
                              {"r", p.defined ? json(p.r) : json()},
                              {"defined", p.defined},
                              {"n", p.n}}
                             .dump()
                      << '\n';
        };
        emit("volume", corr.volume);
        emit("diameter", corr.diameter);
        return 0;
    }

    if (ns->parsed()) {
        const mixcaps::ModelCheckpoint ckpt = mixcaps::load_checkpoint(ns_ckpt);
        const mixcaps::MixcapsModel model = mixcaps::model_from_checkpoint(ckpt);
        const mixcaps::Dataset dataset = mixcaps::read_dataset(ns_data);
        const auto points = mixcaps::noise_sweep(model, dataset.records, parse_std_list(ns_stds),
                                                 ns_seed, ckpt.config.side_feature_len);
        for (const mixcaps::NoisePoint& p : points) {
            std::cout << json{{"record", "noise_point"},
                              {"std", p.stddev},
                              {"accuracy", p.accuracy}}
                             .dump()
                      << '\n';
        }
        return 0;
    }

    if (ar->parsed()) {
        const mixcaps::ModelCheckpoint ckpt = mixcaps::load_checkpoint(ar_ckpt);
        const mixcaps::MixcapsModel model = mixcaps::model_from_checkpoint(ckpt);
        const mixcaps::Dataset dataset = mixcaps::read_dataset(ar_data);
        if (ar_expert >= ckpt.config.num_experts) {
            throw mixcaps::ContractError("--expert " + std::to_string(ar_expert) +
                                         " out of range for " +
                                         std::to_string(ckpt.config.num_experts) + " experts");
        }
        const int n = std::min<int>(ar_samples, static_cast<int>(dataset.records.size()));
        const int hw = model.expert_config().input_hw;
        for (int i = 0; i < n; ++i) {
            const mixcaps::SampleRecord& rec = dataset.records[static_cast<std::size_t>(i)];
            mixcaps::Tensor side;
            const mixcaps::Tensor* side_p = nullptr;
            if (ckpt.config.side_feature_len > 0) {
                side = mixcaps::side_feature_vector(rec);
                side_p = &side;
            }
            const auto inf = model.infer(mixcaps::preprocess_patch(rec.patch, hw), side_p);
            const auto record = mixcaps::responsibility(
                i, rec.label, inf.g, inf.expert_lengths,
                ar_mode == "malignant" ? mixcaps::LikelihoodMode::malignant_output
                                       : mixcaps::LikelihoodMode::class_matched);
            mixcaps::write_record(std::cout, record);
            const mixcaps::RoutingState& rs = inf.routing[static_cast<std::size_t>(ar_expert)];
            mixcaps::write_report(std::cout, i, mixcaps::routing_as_moe_report(rs), rs);
        }
        return 0;
    }

    if (gch->parsed()) {
        mixcaps::TrainConfig cfg = mixcaps::TrainConfig::make(
            gch_preset == "paper" ? mixcaps::Preset::paper : mixcaps::Preset::desk);
        cfg.seed = gch_seed;
        mixcaps::MixcapsModel model(cfg.expert_config(), cfg.gate_config(),
                                    mixcaps::derive_seed(gch_seed, 0x494e4954));
        const auto batch = mixcaps::generate_dataset(gch_seed, gch_batch, mixcaps::GenParams{});
        const mixcaps::GradCheckReport report = mixcaps::model_gradient_check(
            model, batch, cfg.side_feature_len, gch_h, gch_tol, gch_max_entries);
        for (const mixcaps::BlockCheck& b : report.blocks) {
            std::cout << json{{"record", "gradcheck_block"},
                              {"block", b.name},
                              {"worst_rel_err", b.worst_rel_err},
                              {"entries_checked", b.entries_checked},
                              {"refined_entries", b.refined_entries},
                              {"pass", b.pass}}
                             .dump()
                      << '\n';
        }
        std::cout << json{{"record", "gradcheck_summary"},
                          {"pass", report.pass()},
                          {"h", report.h},
                          {"tol", report.tol},
                          {"parameters", model.parameter_count()}}
                         .dump()
                  << '\n';
        return report.pass() ? 0 : 3;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const mixcaps::DimensionError& e) {
        std::cerr << "error[dimension]: " << e.what() << '\n';
        return 2;
    } catch (const mixcaps::NumericError& e) {
        std::cerr << "error[numeric]: " << e.what() << '\n';
        return 3;
    } catch (const mixcaps::ContractError& e) {
        std::cerr << "error[contract]: " << e.what() << '\n';
        return 4;
    } catch (const mixcaps::FormatError& e) {
        std::cerr << "error[format]: " << e.what() << '\n';
        return 5;
    } catch (const mixcaps::DegenerateLikelihoodError& e) {
        std::cerr << "error[degenerate-likelihood]: " << e.what() << '\n';
        return 6;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
