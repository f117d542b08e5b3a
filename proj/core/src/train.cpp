#include "mixcaps/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "mixcaps/parallel.hpp"
#include "mixcaps/serialize.hpp"

namespace mixcaps {

namespace {

// Substream tags so every consumer of the run seed draws independently.
constexpr std::uint64_t kInitStream = 0x494e4954;
constexpr std::uint64_t kShuffleStream = 0x53485546;
constexpr std::uint64_t kBootDrawStream = 0x424f4f54;
constexpr std::uint64_t kBootTrainStream = 0x42545247;

}  // namespace

Adam::Adam(const AdamConfig& config, const std::vector<std::pair<std::string, Tensor*>>& params)
    : config_(config) {
    if (config_.learning_rate < 0.0 || config_.epsilon <= 0.0 || config_.beta1 < 0.0 ||
        config_.beta1 >= 1.0 || config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
        throw ContractError("adam config out of range");
    }
    for (const auto& [name, tensor] : params) {
        m_.emplace_back(tensor->shape());
        v_.emplace_back(tensor->shape());
    }
}

void Adam::step(const std::vector<std::pair<std::string, Tensor*>>& params,
                const std::vector<Tensor>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw ContractError("adam step: parameter/gradient block count mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
        Tensor& theta = *params[b].second;
        const Tensor& g = grads[b];
        if (!g.same_shape(theta)) {
            throw DimensionError("adam step: gradient shape " + g.shape_str() +
                                 " for parameter " + params[b].first + " " + theta.shape_str());
        }
        Tensor& m = m_[b];
        Tensor& v = v_[b];
        for (std::int64_t i = 0; i < theta.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
        }
    }
}

void Adam::restore(std::vector<Tensor> m, std::vector<Tensor> v, std::int64_t t) {
    if (m.size() != m_.size() || v.size() != v_.size()) {
        throw ContractError("adam restore: block count mismatch");
    }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
}

TrainConfig TrainConfig::make(Preset preset) {
    TrainConfig c;
    c.preset = preset;
    c.bootstrap_iterations = preset == Preset::desk ? 20 : 200;
    return c;
}

void TrainConfig::validate(bool allow_single_expert) const {
    if (epochs < 0) throw ContractError("epochs must be nonnegative");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (!(sample_fraction > 0.0 && sample_fraction < 1.0)) {
        throw ContractError("sample_fraction must be in (0, 1)");
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
        throw ContractError("validation_fraction must be in (0, 1)");
    }
    if (bootstrap_iterations < 1) throw ContractError("bootstrap_iterations must be >= 1");
    if (side_feature_len != 0 && side_feature_len != 2) {
        throw ContractError("side_feature_len must be 0 or 2 (volume, diameter)");
    }
    expert_config().validate();
    gate_config().validate(allow_single_expert);
}

ExpertConfig TrainConfig::expert_config() const {
    ExpertConfig c = preset == Preset::desk ? ExpertConfig::desk() : ExpertConfig::paper();
    c.side_feature_len = side_feature_len;
    return c;
}

GateConfig TrainConfig::gate_config() const {
    GateConfig c = preset == Preset::desk ? GateConfig::desk() : GateConfig::paper();
    c.num_experts = num_experts;
    return c;
}

Tensor preprocess_patch(const Tensor& patch, int target_hw) {
    if (patch.rank() != 3) {
        throw DimensionError("preprocess_patch expects [HxWxC], got " + patch.shape_str());
    }
    const int h = patch.dim(0), w = patch.dim(1), c = patch.dim(2);
    if (h == target_hw && w == target_hw) return patch;
    if (h % target_hw != 0 || w % target_hw != 0) {
        throw DimensionError("cannot pool " + patch.shape_str() + " to " +
                             std::to_string(target_hw));
    }
    const int fy = h / target_hw, fx = w / target_hw;
    Tensor out({target_hw, target_hw, c});
    const double inv = 1.0 / (fy * fx);
    for (int oy = 0; oy < target_hw; ++oy) {
        for (int ox = 0; ox < target_hw; ++ox) {
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int dy = 0; dy < fy; ++dy) {
                    for (int dx = 0; dx < fx; ++dx) {
                        acc += patch(oy * fy + dy, ox * fx + dx, ch);
                    }
                }
                out(oy, ox, ch) = acc * inv;
            }
        }
    }
    return out;
}

Tensor one_hot_label(int label, int num_classes) {
    if (label < 0 || label >= num_classes) {
        throw ContractError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
    Tensor t({num_classes});
    t[label] = 1.0;
    return t;
}

Tensor side_feature_vector(const SampleRecord& record) {
    return Tensor({2}, {record.volume / 10000.0, record.diameter / 100.0});
}

double malignancy_score(const Tensor& o) {
    if (o.rank() != 1 || o.dim(0) != 2) {
        throw DimensionError("malignancy_score expects [2], got " + o.shape_str());
    }
    const double denom = o[0] + o[1];
    if (denom <= 0.0) return 0.5;
    return o[1] / denom;
}

namespace {

struct Prepared {
    std::vector<Tensor> inputs;
    std::vector<Tensor> targets;
    std::vector<Tensor> sides;  // empty when side features are off
    std::vector<int> labels;
    int side_len = 0;
};

Prepared prepare_dataset(const std::vector<SampleRecord>& data, int input_hw, int side_len,
                         int num_classes) {
    Prepared p;
    p.side_len = side_len;
    p.inputs.reserve(data.size());
    p.targets.reserve(data.size());
    p.labels.reserve(data.size());
    for (const SampleRecord& rec : data) {
        p.inputs.push_back(preprocess_patch(rec.patch, input_hw));
        p.targets.push_back(one_hot_label(rec.label, num_classes));
        p.labels.push_back(rec.label);
        if (side_len > 0) p.sides.push_back(side_feature_vector(rec));
    }
    return p;
}

const Tensor* side_ptr(const Prepared& prep, int i) {
    return prep.side_len > 0 ? &prep.sides[static_cast<std::size_t>(i)] : nullptr;
}

ModelCheckpoint snapshot(MixcapsModel& model, const Adam& adam, const TrainConfig& config,
                         std::uint64_t step, const std::array<std::uint64_t, 4>& rng_state) {
    ModelCheckpoint ck;
    ck.config = config;
    for (auto& [name, tensor] : model.parameters()) ck.params.emplace_back(name, *tensor);
    ck.adam_m = adam.first_moments();
    ck.adam_v = adam.second_moments();
    ck.adam_t = adam.t();
    ck.step = step;
    ck.rng_state = rng_state;
    return ck;
}

struct SplitEval {
    double loss = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

SplitEval evaluate_split(const MixcapsModel& model, const Prepared& prep,
                         const std::vector<int>& indices) {
    SplitEval ev;
    if (indices.empty()) return ev;
    double loss_sum = 0.0;
    int correct = 0;
    for (const int i : indices) {
        const auto inf = model.infer(prep.inputs[static_cast<std::size_t>(i)], side_ptr(prep, i));
        loss_sum += margin_loss(inf.o, prep.targets[static_cast<std::size_t>(i)]);
        const bool malignant = malignancy_score(inf.o) >= 0.5;
        if (malignant == (prep.labels[static_cast<std::size_t>(i)] == 1)) ++correct;
    }
    ev.loss = loss_sum / static_cast<double>(indices.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
    return ev;
}

TrainResult train_prepared(const Prepared& prep, const std::vector<int>& pool,
                           const TrainConfig& config) {
    MixcapsModel model(config.expert_config(), config.gate_config(),
                       derive_seed(config.seed, kInitStream));
    auto params = model.parameters();
    Adam adam(config.adam, params);
    Rng rng(derive_seed(config.seed, kShuffleStream));

    std::vector<int> order = pool;
    shuffle(order.begin(), order.end(), rng);
    int val_n = static_cast<int>(std::lround(config.validation_fraction *
                                             static_cast<double>(order.size())));
    val_n = std::min(val_n, static_cast<int>(order.size()) - 1);
    val_n = std::max(val_n, 0);
    std::vector<int> val(order.begin(), order.begin() + val_n);
    std::vector<int> train_idx(order.begin() + val_n, order.end());

    TrainResult result;
    std::uint64_t step = 0;
    ModelCheckpoint last_good = snapshot(model, adam, config, step, rng.state());

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle(train_idx.begin(), train_idx.end(), rng);
        double loss_sum = 0.0;
        int seen = 0, correct = 0;
        try {
            for (std::size_t start = 0; start < train_idx.size();
                 start += static_cast<std::size_t>(config.batch_size)) {
                const std::size_t stop =
                    std::min(train_idx.size(), start + static_cast<std::size_t>(config.batch_size));
                Tape tape;
                auto staged = model.stage(tape);
                Var total;
                for (std::size_t k = start; k < stop; ++k) {
                    const int i = train_idx[k];
                    auto fwd = model.forward(tape, staged, prep.inputs[static_cast<std::size_t>(i)],
                                             side_ptr(prep, i));
                    Var l = margin_loss(fwd.o, prep.targets[static_cast<std::size_t>(i)]);
                    total = total.valid() ? add(total, l) : l;
                    const bool malignant = malignancy_score(fwd.o.value()) >= 0.5;
                    if (malignant == (prep.labels[static_cast<std::size_t>(i)] == 1)) ++correct;
                    loss_sum += l.value()[0];
                    ++seen;
                }
                Var mean = scale(total, 1.0 / static_cast<double>(stop - start));
                tape.backward(mean);
                std::vector<Tensor> grads;
                for (const Var& v : model.staged_vars(staged)) grads.push_back(tape.gradient(v));
                adam.step(params, grads);
                ++step;
            }
        } catch (const NumericError& e) {
            result.status = TrainResult::Status::diverged;
            result.divergence_message =
                "training diverged in epoch " + std::to_string(epoch) + ": " + e.what();
            result.checkpoint = std::move(last_good);
            return result;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = seen > 0 ? loss_sum / seen : std::numeric_limits<double>::quiet_NaN();
        log.train_accuracy =
            seen > 0 ? static_cast<double>(correct) / seen : std::numeric_limits<double>::quiet_NaN();
        try {
            const SplitEval ev = evaluate_split(model, prep, val);
            log.val_loss = ev.loss;
            log.val_accuracy = ev.accuracy;
        } catch (const NumericError& e) {
            result.status = TrainResult::Status::diverged;
            result.divergence_message =
                "validation diverged in epoch " + std::to_string(epoch) + ": " + e.what();
            result.checkpoint = std::move(last_good);
            return result;
        }
        result.log.push_back(log);
        last_good = snapshot(model, adam, config, step, rng.state());
    }
    result.checkpoint = std::move(last_good);
    return result;
}

}  // namespace

TrainResult train(const std::vector<SampleRecord>& data, const TrainConfig& config) {
    config.validate(true);
    if (data.empty()) throw ContractError("train: dataset is empty");
    const Prepared prep = prepare_dataset(data, config.input_hw(), config.side_feature_len,
                                          config.expert_config().num_classes);
    std::vector<int> pool(data.size());
    std::iota(pool.begin(), pool.end(), 0);
    return train_prepared(prep, pool, config);
}

namespace {

Metrics evaluate_prepared(const MixcapsModel& model, const Prepared& prep,
                          const std::vector<int>& indices) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(indices.size());
    for (const int i : indices) {
        const auto inf = model.infer(prep.inputs[static_cast<std::size_t>(i)], side_ptr(prep, i));
        scores.push_back(malignancy_score(inf.o));
        labels.push_back(prep.labels[static_cast<std::size_t>(i)]);
    }
    return compute_metrics(scores, labels, 0.5);
}

}  // namespace

Metrics evaluate(const MixcapsModel& model, const std::vector<SampleRecord>& test,
                 int side_feature_len) {
    if (test.empty()) throw ContractError("evaluate: test set is empty");
    const Prepared prep = prepare_dataset(test, model.expert_config().input_hw, side_feature_len,
                                          model.expert_config().num_classes);
    std::vector<int> idx(test.size());
    std::iota(idx.begin(), idx.end(), 0);
    return evaluate_prepared(model, prep, idx);
}

BootstrapReport bootstrap_evaluate(const std::vector<SampleRecord>& data,
                                   const TrainConfig& config) {
    config.validate(true);
    const int n = static_cast<int>(data.size());
    if (n < 2) throw ContractError("bootstrap needs at least two samples");
    const Prepared prep = prepare_dataset(data, config.input_hw(), config.side_feature_len,
                                          config.expert_config().num_classes);

    BootstrapReport report;
    report.iterations.assign(static_cast<std::size_t>(config.bootstrap_iterations), Metrics{});
    std::atomic<int> resampled{0};

    parallel_for(config.bootstrap_iterations, config.threads, [&](int it) {
        const int n_draw =
            std::max(1, static_cast<int>(std::lround(config.sample_fraction * n)));
        std::vector<int> pool;
        std::vector<int> oob;
        bool ok = false;
        for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
            Rng draw(derive_seed(derive_seed(config.seed, kBootDrawStream + it), attempt));
            pool.clear();
            std::vector<char> drawn(static_cast<std::size_t>(n), 0);
            for (int d = 0; d < n_draw; ++d) {
                const int i = static_cast<int>(draw.uniform_index(static_cast<std::uint64_t>(n)));
                pool.push_back(i);
                drawn[static_cast<std::size_t>(i)] = 1;
            }
            oob.clear();
            bool has_pos = false, has_neg = false;
            for (int i = 0; i < n; ++i) {
                if (!drawn[static_cast<std::size_t>(i)]) {
                    oob.push_back(i);
                    (prep.labels[static_cast<std::size_t>(i)] == 1 ? has_pos : has_neg) = true;
                }
            }
            ok = !oob.empty() && has_pos && has_neg;
            if (!ok) ++resampled;
        }
        if (!ok) {
            throw ContractError("bootstrap iteration " + std::to_string(it) +
                                ": no two-class out-of-bag set after 10 draws");
        }
        TrainConfig iter_config = config;
        iter_config.seed = derive_seed(config.seed, kBootTrainStream + it);
        iter_config.threads = 1;
        const TrainResult tr = train_prepared(prep, pool, iter_config);
        if (tr.status != TrainResult::Status::ok) {
            throw NumericError("bootstrap iteration " + std::to_string(it) + ": " +
                               tr.divergence_message);
        }
        const MixcapsModel model = model_from_checkpoint(tr.checkpoint);
        report.iterations[static_cast<std::size_t>(it)] = evaluate_prepared(model, prep, oob);
    });

    report.resampled_iterations = resampled.load();
    const auto collect = [&](auto field) {
        std::vector<double> xs;
        for (const Metrics& m : report.iterations) xs.push_back(m.*field);
        return xs;
    };
    const auto summarize = [&](auto field) {
        const std::vector<double> xs = collect(field);
        return std::array<double, 3>{percentile(xs, 0.5), percentile(xs, 0.025),
                                     percentile(xs, 0.975)};
    };
    const auto acc = summarize(&Metrics::accuracy);
    const auto sen = summarize(&Metrics::sensitivity);
    const auto spe = summarize(&Metrics::specificity);
    const auto auc = summarize(&Metrics::auc);
    report.point = {acc[0], sen[0], spe[0], auc[0]};
    report.ci_lo = {acc[1], sen[1], spe[1], auc[1]};
    report.ci_hi = {acc[2], sen[2], spe[2], auc[2]};
    return report;
}

GateCorrelation gate_correlation(const MixcapsModel& model, const std::vector<SampleRecord>& data,
                                 int side_feature_len) {
    if (data.empty()) throw ContractError("gate_correlation: dataset is empty");
    const Prepared prep = prepare_dataset(data, model.expert_config().input_hw, side_feature_len,
                                          model.expert_config().num_classes);
    std::vector<double> g1, volume, diameter;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto inf = model.infer(prep.inputs[i], side_ptr(prep, static_cast<int>(i)));
        g1.push_back(inf.g[0]);
        volume.push_back(data[i].volume);
        diameter.push_back(data[i].diameter);
    }
    GateCorrelation out;
    out.volume = pearson_correlation(g1, volume);
    out.diameter = pearson_correlation(g1, diameter);
    return out;
}

std::vector<NoisePoint> noise_sweep(const MixcapsModel& model,
                                    const std::vector<SampleRecord>& data,
                                    const std::vector<double>& stds, std::uint64_t noise_seed,
                                    int side_feature_len) {
    if (data.empty()) throw ContractError("noise_sweep: dataset is empty");
    for (std::size_t i = 0; i < stds.size(); ++i) {
        if (stds[i] < 0.0) throw ContractError("noise stds must be nonnegative");
        if (i > 0 && stds[i] < stds[i - 1]) throw ContractError("noise stds must be sorted");
    }
    const int hw = model.expert_config().input_hw;
    std::vector<NoisePoint> out;
    for (std::size_t si = 0; si < stds.size(); ++si) {
        int correct = 0;
        for (std::size_t ri = 0; ri < data.size(); ++ri) {
            Rng rng(derive_seed(noise_seed, si * 0x100000ULL + ri));
            const Tensor noisy = add_noise(data[ri].patch, stds[si], rng);
            Tensor side;
            const Tensor* side_p = nullptr;
            if (side_feature_len > 0) {
                side = side_feature_vector(data[ri]);
                side_p = &side;
            }
            const auto inf = model.infer(preprocess_patch(noisy, hw), side_p);
            const bool malignant = malignancy_score(inf.o) >= 0.5;
            if (malignant == (data[ri].label == 1)) ++correct;
        }
        out.push_back({stds[si], static_cast<double>(correct) / static_cast<double>(data.size())});
    }
    return out;
}

GradCheckReport model_gradient_check(MixcapsModel& model, const std::vector<SampleRecord>& batch,
                                     int side_feature_len, double h, double tol,
                                     std::int64_t max_entries_per_block) {
    if (batch.empty()) throw ContractError("gradient check needs a nonempty batch");
    const Prepared prep = prepare_dataset(batch, model.expert_config().input_hw, side_feature_len,
                                          model.expert_config().num_classes);

    // Couplings are routing constants on the tape, so the function probed by
    // finite differences must hold them at their base-point values too.
    std::vector<std::vector<Tensor>> frozen;
    for (std::size_t i = 0; i < prep.inputs.size(); ++i) {
        const auto inf = model.infer(prep.inputs[i], side_ptr(prep, static_cast<int>(i)));
        std::vector<Tensor> per_expert;
        for (const RoutingState& rs : inf.routing) per_expert.push_back(rs.couplings);
        frozen.push_back(std::move(per_expert));
    }

    const auto batch_loss = [&](Tape& tape, MixcapsModel::Staged& staged) {
        Var total;
        for (std::size_t i = 0; i < prep.inputs.size(); ++i) {
            auto fwd = model.forward(tape, staged, prep.inputs[i],
                                     side_ptr(prep, static_cast<int>(i)), &frozen[i]);
            Var l = margin_loss(fwd.o, prep.targets[i]);
            total = total.valid() ? add(total, l) : l;
        }
        return scale(total, 1.0 / static_cast<double>(prep.inputs.size()));
    };

    const auto loss_fn = [&]() {
        Tape tape;
        auto staged = model.stage(tape);
        return batch_loss(tape, staged).value()[0];
    };
    const auto grad_fn = [&]() {
        Tape tape;
        auto staged = model.stage(tape);
        Var loss = batch_loss(tape, staged);
        tape.backward(loss);
        std::vector<Tensor> grads;
        for (const Var& v : model.staged_vars(staged)) grads.push_back(tape.gradient(v));
        return grads;
    };
    return check_gradients(loss_fn, grad_fn, model.parameters(), h, tol, max_entries_per_block);
}

}  // namespace mixcaps
