#include "mixcaps/capsule.hpp"

#include <cmath>

namespace mixcaps {

ExpertConfig ExpertConfig::paper() { return ExpertConfig{}; }

ExpertConfig ExpertConfig::desk() {
    ExpertConfig c;
    c.input_hw = 40;
    c.conv1_filters = 8;
    c.conv2_filters = 16;
    c.kernel = 5;
    c.stride1 = 2;
    c.stride2 = 3;
    c.class_capsule_dim = 16;
    return c;
}

void ExpertConfig::validate() const {
    if (input_hw <= 0 || in_channels <= 0 || conv1_filters <= 0 || conv2_filters <= 0 ||
        kernel <= 0 || stride1 <= 0 || stride2 <= 0 || primary_capsule_dim <= 0 ||
        class_capsule_dim <= 0 || num_classes <= 0 || side_feature_len < 0) {
        throw ContractError("expert config extents must be positive");
    }
    if (conv2_filters % primary_capsule_dim != 0) {
        throw ContractError("conv2_filters (" + std::to_string(conv2_filters) +
                            ") must be divisible by primary_capsule_dim (" +
                            std::to_string(primary_capsule_dim) + ")");
    }
    if (routing_iterations < 1) throw ContractError("routing_iterations must be >= 1");
    if (kernel > input_hw) {
        throw DimensionError("kernel " + std::to_string(kernel) + " larger than input " +
                             std::to_string(input_hw));
    }
    if (conv2_out_hw() < 1) {
        throw DimensionError("conv stack reduces input below 1x1");
    }
}

std::int64_t ExpertConfig::parameter_count() const {
    std::int64_t n = 0;
    n += static_cast<std::int64_t>(kernel) * kernel * in_channels * conv1_filters + conv1_filters;
    n += static_cast<std::int64_t>(kernel) * kernel * conv1_filters * conv2_filters + conv2_filters;
    n += static_cast<std::int64_t>(num_primary_capsules()) * num_classes * primary_capsule_dim *
         class_capsule_dim;
    if (side_feature_len > 0) {
        n += static_cast<std::int64_t>(class_capsule_dim + side_feature_len) * class_capsule_dim +
             class_capsule_dim;
    }
    return n;
}

Tensor predict_parents(const Tensor& u, const Tensor& w) {
    if (u.rank() != 2 || w.rank() != 4 || u.dim(0) != w.dim(0) || u.dim(1) != w.dim(2)) {
        throw DimensionError("predict_parents shape mismatch: u " + u.shape_str() + ", W " +
                             w.shape_str());
    }
    const int n = u.dim(0), m = w.dim(1), pd = u.dim(1), cd = w.dim(3);
    Tensor out({n, m, cd});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double* opix = out.data() + (static_cast<std::size_t>(i) * m + j) * cd;
            for (int p = 0; p < pd; ++p) {
                const double uip = u(i, p);
                if (uip == 0.0) continue;
                const double* wrow = w.data() +
                                     ((static_cast<std::size_t>(i) * m + j) * pd + p) * cd;
                for (int c = 0; c < cd; ++c) opix[c] += uip * wrow[c];
            }
        }
    }
    return out;
}

Var predict_parents(Var u, Var w) {
    Tape& t = *u.tape;
    Tensor out = predict_parents(u.value(), w.value());
    const int uid = u.id, wid = w.id;
    return t.emit(std::move(out), {uid, wid}, "predict_parents", [uid, wid](Tape& tp, int self) {
        const Tensor& g = tp.grad_ref(self);
        const Tensor& uv = tp.value(uid);
        const Tensor& wv = tp.value(wid);
        Tensor& du = tp.grad_buf(uid);
        Tensor& dw = tp.grad_buf(wid);
        const int n = uv.dim(0), m = wv.dim(1), pd = uv.dim(1), cd = wv.dim(3);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < m; ++j) {
                const double* gpix = g.data() + (static_cast<std::size_t>(i) * m + j) * cd;
                for (int p = 0; p < pd; ++p) {
                    const std::size_t wbase = ((static_cast<std::size_t>(i) * m + j) * pd + p) * cd;
                    const double* wrow = wv.data() + wbase;
                    double* dwrow = dw.data() + wbase;
                    const double uip = uv(i, p);
                    double acc = 0.0;
                    for (int c = 0; c < cd; ++c) {
                        acc += gpix[c] * wrow[c];
                        dwrow[c] += uip * gpix[c];
                    }
                    du(i, p) += acc;
                }
            }
        }
    });
}

RoutingState route(const Tensor& predictions, int iterations) {
    if (predictions.rank() != 3) {
        throw DimensionError("route expects predictions [N x M x dim], got " +
                             predictions.shape_str());
    }
    if (iterations < 1) throw ContractError("route: iterations must be >= 1");
    if (!predictions.all_finite()) throw NumericError("route: predictions are not finite");
    const int n = predictions.dim(0), m = predictions.dim(1), d = predictions.dim(2);

    RoutingState state;
    state.predictions = predictions;
    Tensor b({n, m});
    for (int round = 0; round < iterations; ++round) {
        RoutingRound rec;
        rec.b_start = b;
        rec.couplings = softmax(b, 1);
        Tensor raw({m, d});
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < m; ++j) {
                const double c = rec.couplings(i, j);
                const double* upix = predictions.data() + (static_cast<std::size_t>(i) * m + j) * d;
                double* spix = raw.data() + static_cast<std::size_t>(j) * d;
                for (int e = 0; e < d; ++e) spix[e] += c * upix[e];
            }
        }
        rec.parents = squash(raw);
        if (round + 1 < iterations) {
            rec.agreements = Tensor({n, m});
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < m; ++j) {
                    const double* upix =
                        predictions.data() + (static_cast<std::size_t>(i) * m + j) * d;
                    const double* spix = rec.parents.data() + static_cast<std::size_t>(j) * d;
                    double dot = 0.0;
                    for (int e = 0; e < d; ++e) dot += spix[e] * upix[e];
                    rec.agreements(i, j) = dot;
                    b(i, j) += dot;
                }
            }
            if (!b.all_finite()) {
                throw NumericError("route: non-finite logits after round " +
                                   std::to_string(round + 1));
            }
        }
        if (!rec.parents.all_finite()) {
            throw NumericError("route: non-finite parent output in round " +
                               std::to_string(round + 1));
        }
        state.rounds.push_back(std::move(rec));
    }
    state.b = b;
    state.couplings = state.rounds.back().couplings;
    state.parents = state.rounds.back().parents;
    return state;
}

Var routing_blend(Var predictions, const Tensor& couplings) {
    Tape& t = *predictions.tape;
    const Tensor& u = predictions.value();
    if (couplings.rank() != 2 || couplings.dim(0) != u.dim(0) || couplings.dim(1) != u.dim(1)) {
        throw DimensionError("routing_blend couplings " + couplings.shape_str() +
                             " do not match predictions " + u.shape_str());
    }
    const int n = u.dim(0), m = u.dim(1), d = u.dim(2);
    Tensor out({m, d});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            const double c = couplings(i, j);
            const double* upix = u.data() + (static_cast<std::size_t>(i) * m + j) * d;
            double* opix = out.data() + static_cast<std::size_t>(j) * d;
            for (int e = 0; e < d; ++e) opix[e] += c * upix[e];
        }
    }
    const int uid = predictions.id;
    Tensor c_copy = couplings;
    return t.emit(std::move(out), {uid}, "routing_blend",
                  [uid, c_copy = std::move(c_copy)](Tape& tp, int self) {
                      const Tensor& g = tp.grad_ref(self);
                      Tensor& du = tp.grad_buf(uid);
                      const int n = du.dim(0), m = du.dim(1), d = du.dim(2);
                      for (int i = 0; i < n; ++i) {
                          for (int j = 0; j < m; ++j) {
                              const double c = c_copy(i, j);
                              double* dpix = du.data() + (static_cast<std::size_t>(i) * m + j) * d;
                              const double* gpix = g.data() + static_cast<std::size_t>(j) * d;
                              for (int e = 0; e < d; ++e) dpix[e] += c * gpix[e];
                          }
                      }
                  });
}

namespace {

void validate_margin_args(const Tensor& lengths, const Tensor& target, double m_plus,
                          double m_minus) {
    if (lengths.rank() != 1 || !target.same_shape(lengths)) {
        throw DimensionError("margin_loss wants matching vectors, got " + lengths.shape_str() +
                             " and " + target.shape_str());
    }
    double sum = 0.0;
    for (std::int64_t k = 0; k < target.size(); ++k) {
        if (target[k] != 0.0 && target[k] != 1.0) {
            throw ContractError("margin_loss target must be one-hot");
        }
        sum += target[k];
    }
    if (sum != 1.0) throw ContractError("margin_loss target must be one-hot");
    if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0)) {
        throw ContractError("margin_loss requires 0 < m_minus < m_plus < 1");
    }
}

}  // namespace

double margin_loss(const Tensor& lengths, const Tensor& target, double m_plus, double m_minus,
                   double lambda) {
    validate_margin_args(lengths, target, m_plus, m_minus);
    double loss = 0.0;
    for (std::int64_t k = 0; k < lengths.size(); ++k) {
        const double pos = std::max(0.0, m_plus - lengths[k]);
        const double neg = std::max(0.0, lengths[k] - m_minus);
        loss += target[k] * pos * pos + lambda * (1.0 - target[k]) * neg * neg;
    }
    return loss;
}

Var margin_loss(Var lengths, const Tensor& target, double m_plus, double m_minus, double lambda) {
    Tape& t = *lengths.tape;
    const double loss = margin_loss(lengths.value(), target, m_plus, m_minus, lambda);
    const int oid = lengths.id;
    Tensor target_copy = target;
    return t.emit(Tensor::scalar(loss), {oid}, "margin_loss",
                  [oid, target_copy = std::move(target_copy), m_plus, m_minus,
                   lambda](Tape& tp, int self) {
                      const double g = tp.grad_ref(self)[0];
                      const Tensor& o = tp.value(oid);
                      Tensor& dout = tp.grad_buf(oid);
                      for (std::int64_t k = 0; k < o.size(); ++k) {
                          const double pos = std::max(0.0, m_plus - o[k]);
                          const double neg = std::max(0.0, o[k] - m_minus);
                          dout[k] += g * (-2.0 * target_copy[k] * pos +
                                          2.0 * lambda * (1.0 - target_copy[k]) * neg);
                      }
                  });
}

CapsuleExpert::CapsuleExpert(const ExpertConfig& config, Rng& init_rng) : config_(config) {
    config_.validate();
    const int k = config_.kernel;
    conv1_w = Tensor({k, k, config_.in_channels, config_.conv1_filters});
    conv1_b = Tensor({config_.conv1_filters});
    conv2_w = Tensor({k, k, config_.conv1_filters, config_.conv2_filters});
    conv2_b = Tensor({config_.conv2_filters});
    w = Tensor({config_.num_primary_capsules(), config_.num_classes, config_.primary_capsule_dim,
                config_.class_capsule_dim});
    fill_fan_in_uniform(conv1_w, init_rng, static_cast<std::int64_t>(k) * k * config_.in_channels);
    fill_fan_in_uniform(conv2_w, init_rng, static_cast<std::int64_t>(k) * k * config_.conv1_filters);
    fill_fan_in_uniform(w, init_rng, config_.primary_capsule_dim);
    // Zero-padded inputs put many conv windows at exactly zero; a small
    // positive bias keeps those pre-activations off the relu kink.
    for (std::int64_t i = 0; i < conv1_b.size(); ++i) conv1_b[i] = 0.01;
    if (config_.side_feature_len > 0) {
        const int in = config_.class_capsule_dim + config_.side_feature_len;
        box_w = Tensor({in, config_.class_capsule_dim});
        box_b = Tensor({config_.class_capsule_dim});
        fill_fan_in_uniform(box_w, init_rng, in);
    }
}

std::vector<std::pair<std::string, Tensor*>> CapsuleExpert::parameters() {
    std::vector<std::pair<std::string, Tensor*>> p = {
        {"conv1_w", &conv1_w}, {"conv1_b", &conv1_b}, {"conv2_w", &conv2_w},
        {"conv2_b", &conv2_b}, {"W", &w},
    };
    if (config_.side_feature_len > 0) {
        p.emplace_back("box_w", &box_w);
        p.emplace_back("box_b", &box_b);
    }
    return p;
}

std::vector<std::pair<std::string, const Tensor*>> CapsuleExpert::parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, tensor] : const_cast<CapsuleExpert*>(this)->parameters()) {
        out.emplace_back(name, tensor);
    }
    return out;
}

CapsuleExpert::Staged CapsuleExpert::stage(Tape& tape) const {
    Staged s;
    s.conv1_w = tape.leaf(conv1_w);
    s.conv1_b = tape.leaf(conv1_b);
    s.conv2_w = tape.leaf(conv2_w);
    s.conv2_b = tape.leaf(conv2_b);
    s.w = tape.leaf(w);
    if (config_.side_feature_len > 0) {
        s.box_w = tape.leaf(box_w);
        s.box_b = tape.leaf(box_b);
    }
    return s;
}

CapsuleExpert::Output CapsuleExpert::forward(Tape& tape, const Staged& staged, const Tensor& patch,
                                             const Tensor* side_features,
                                             const Tensor* frozen_couplings) const {
    if (patch.rank() != 3 || patch.dim(0) != config_.input_hw || patch.dim(1) != config_.input_hw ||
        patch.dim(2) != config_.in_channels) {
        throw DimensionError("expert_forward: patch " + patch.shape_str() +
                             " does not match configured input [" +
                             std::to_string(config_.input_hw) + "x" +
                             std::to_string(config_.input_hw) + "x" +
                             std::to_string(config_.in_channels) + "]");
    }
    if ((side_features != nullptr) != (config_.side_feature_len > 0)) {
        throw ContractError("expert_forward: side features must be supplied exactly when "
                            "side_feature_len > 0");
    }
    if (side_features != nullptr &&
        (side_features->rank() != 1 || side_features->dim(0) != config_.side_feature_len)) {
        throw DimensionError("expert_forward: side features " + side_features->shape_str() +
                             " do not match side_feature_len " +
                             std::to_string(config_.side_feature_len));
    }

    Var x = tape.leaf(patch);
    Var h1 = relu(bias_add(conv2d(x, staged.conv1_w, config_.stride1), staged.conv1_b));
    Var h2 = bias_add(conv2d(h1, staged.conv2_w, config_.stride2), staged.conv2_b);
    Var primary = squash(reshape(h2, {config_.num_primary_capsules(), config_.primary_capsule_dim}));
    Var predictions = predict_parents(primary, staged.w);

    // Routing runs off-tape; the final couplings re-enter the graph as
    // constants, so gradients flow through the last round's predictions and
    // parent sums only.
    Output out;
    Tensor couplings;
    if (frozen_couplings != nullptr) {
        couplings = *frozen_couplings;
    } else {
        out.routing = route(predictions.value(), config_.routing_iterations);
        couplings = out.routing.couplings;
    }
    Var class_caps = squash(routing_blend(predictions, couplings));
    if (side_features != nullptr) {
        Var side = tape.leaf(*side_features);
        class_caps = bias_add(matmul(append_row_features(class_caps, side), staged.box_w),
                              staged.box_b);
    }
    out.class_caps = class_caps;
    out.lengths = row_norms(class_caps);
    return out;
}

}  // namespace mixcaps
