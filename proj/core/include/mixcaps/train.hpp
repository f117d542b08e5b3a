#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixcaps/datagen.hpp"
#include "mixcaps/gate.hpp"
#include "mixcaps/gradcheck.hpp"
#include "mixcaps/metrics.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction. A zero gradient leaves parameters bit-identical:
// zero moments stay zero and the update is exactly zero.
class Adam {
public:
    Adam(const AdamConfig& config, const std::vector<std::pair<std::string, Tensor*>>& params);

    void step(const std::vector<std::pair<std::string, Tensor*>>& params,
              const std::vector<Tensor>& grads);

    const AdamConfig& config() const { return config_; }
    std::int64_t t() const { return t_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::int64_t t);

private:
    AdamConfig config_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

enum class Preset { desk, paper };

struct TrainConfig {
    Preset preset = Preset::desk;
    int epochs = 10;
    int batch_size = 16;
    AdamConfig adam;
    std::uint64_t seed = 0;
    int bootstrap_iterations = 20;  // paper preset: 200
    double sample_fraction = 0.8;
    double validation_fraction = 0.2;
    int num_experts = 2;
    int side_feature_len = 0;  // 0, or 2 for (volume, diameter) side features
    int threads = 0;           // 0 = hardware concurrency

    static TrainConfig make(Preset preset);

    void validate(bool allow_single_expert = false) const;
    ExpertConfig expert_config() const;
    GateConfig gate_config() const;
    int input_hw() const { return preset == Preset::desk ? 40 : 80; }
};

// 80x80 patches are average-pooled down to the configured input size.
Tensor preprocess_patch(const Tensor& patch, int target_hw);
Tensor one_hot_label(int label, int num_classes);
// (volume, diameter) scaled to unit-ish magnitudes for the side-feature path.
Tensor side_feature_vector(const SampleRecord& record);
// Renormalized malignancy score o1 / (o0 + o1); 0.5 when both lengths are 0.
double malignancy_score(const Tensor& o);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct ModelCheckpoint {
    TrainConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<Tensor> adam_m, adam_v;
    std::int64_t adam_t = 0;
    std::uint64_t step = 0;  // optimizer steps taken
    std::array<std::uint64_t, 4> rng_state{};
};

MixcapsModel model_from_checkpoint(const ModelCheckpoint& checkpoint);

// Binary checkpoint, magic "MXCK". Round trips bit-exactly, including the
// training RNG state.
void save_checkpoint(const ModelCheckpoint& checkpoint, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);
// FormatError naming the first tensor whose shape disagrees with `expected`.
void verify_checkpoint_config(const ModelCheckpoint& checkpoint, const TrainConfig& expected);

struct TrainResult {
    enum class Status { ok, diverged };
    Status status = Status::ok;
    ModelCheckpoint checkpoint;  // final, or last good epoch on divergence
    std::vector<EpochLog> log;
    std::string divergence_message;
};

// Adam over shuffled mini-batches of the margin loss on the blended output.
// A validation split (validation_fraction) is carved out of `data` first.
// Deterministic given (data, config).
TrainResult train(const std::vector<SampleRecord>& data, const TrainConfig& config);

// Metrics on a held-out set at decision threshold 0.5 on the renormalized
// malignancy score.
Metrics evaluate(const MixcapsModel& model, const std::vector<SampleRecord>& test,
                 int side_feature_len = 0);

struct BootstrapReport {
    Metrics point;  // median across iterations
    Metrics ci_lo, ci_hi;  // 2.5 / 97.5 percentiles
    std::vector<Metrics> iterations;
    int resampled_iterations = 0;  // draws redone for empty/one-class test sets
};

// Per iteration: resample sample_fraction of the data with replacement as the
// training pool, train (which internally holds out validation_fraction), and
// test on the out-of-bag remainder. Iterations run in parallel and are
// aggregated by index, so reports are bit-identical for a given seed
// regardless of thread count.
BootstrapReport bootstrap_evaluate(const std::vector<SampleRecord>& data,
                                   const TrainConfig& config);

struct GateCorrelation {
    Pearson volume;
    Pearson diameter;
};

// Pearson correlation between the first expert's gate weight and each
// ground-truth side feature.
GateCorrelation gate_correlation(const MixcapsModel& model,
                                 const std::vector<SampleRecord>& data,
                                 int side_feature_len = 0);

struct NoisePoint {
    double stddev = 0.0;
    double accuracy = 0.0;
};

// Accuracy under additive Gaussian input noise at each std, with noise drawn
// from streams derived per (std index, record index).
std::vector<NoisePoint> noise_sweep(const MixcapsModel& model,
                                    const std::vector<SampleRecord>& data,
                                    const std::vector<double>& stds, std::uint64_t noise_seed,
                                    int side_feature_len = 0);

// Finite-difference check of the full blended-loss gradient, one block per
// named parameter.
GradCheckReport model_gradient_check(MixcapsModel& model,
                                     const std::vector<SampleRecord>& batch,
                                     int side_feature_len, double h = 1e-5, double tol = 1e-4,
                                     std::int64_t max_entries_per_block = -1);

}  // namespace mixcaps
