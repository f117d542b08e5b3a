#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mixcaps/ops.hpp"
#include "mixcaps/rng.hpp"
#include "mixcaps/tape.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

// One capsule-network expert: conv front-end, primary capsules, prediction
// transform, routing by agreement, class capsules and margin loss.
struct ExpertConfig {
    int input_hw = 80;
    int in_channels = 3;
    int conv1_filters = 256;
    int conv2_filters = 256;
    int kernel = 9;
    int stride1 = 1;
    int stride2 = 2;
    int primary_capsule_dim = 8;
    int class_capsule_dim = 32;
    int num_classes = 2;
    int routing_iterations = 3;
    int side_feature_len = 0;

    // Full-scale configuration: 80x80 input, 256-filter convs, 32-dim class
    // capsules.
    static ExpertConfig paper();
    // Small configuration for fast runs: 40x40 input, 8/16-filter convs,
    // 16-dim class capsules. Sized so a two-expert model stays under 50k
    // parameters.
    static ExpertConfig desk();

    void validate() const;
    int conv1_out_hw() const { return (input_hw - kernel) / stride1 + 1; }
    int conv2_out_hw() const { return (conv1_out_hw() - kernel) / stride2 + 1; }
    int num_primary_capsules() const {
        return conv2_out_hw() * conv2_out_hw() * conv2_filters / primary_capsule_dim;
    }
    std::int64_t parameter_count() const;
};

// Per-round routing log: logits at round start, couplings, squashed parent
// outputs, and the agreement used to update the logits (empty on the final
// round, where the update is skipped).
struct RoutingRound {
    Tensor b_start;     // [N_prim x N_parent]
    Tensor couplings;   // [N_prim x N_parent]
    Tensor parents;     // [N_parent x dim]
    Tensor agreements;  // [N_prim x N_parent] or empty
};

struct RoutingState {
    Tensor b;            // final logits
    Tensor couplings;    // final couplings c_ij
    Tensor predictions;  // [N_prim x N_parent x dim]
    Tensor parents;      // final squashed parent outputs [N_parent x dim]
    std::vector<RoutingRound> rounds;
};

// Prediction transform: out[i][j] = W[i][j] * u[i] for every
// (lower capsule i, parent capsule j) pair.
//   u [N x prim_dim], w [N x M x prim_dim x class_dim] -> [N x M x class_dim]
Tensor predict_parents(const Tensor& u, const Tensor& w);
Var predict_parents(Var u, Var w);

// Routing by agreement. Per round: couplings = softmax of logits over the
// parent axis; parents = squash of the coupling-weighted prediction sums;
// logits += parent-prediction agreement (skipped after the final round).
// Logits start at zero. Throws NumericError naming the round if an
// intermediate goes non-finite.
RoutingState route(const Tensor& predictions, int iterations);

// Coupling-weighted parent sums with fixed couplings:
// out[j] = sum_i c[i][j] * predictions[i][j]. Couplings are routing
// constants; gradients flow into the predictions only.
Var routing_blend(Var predictions, const Tensor& couplings);

// Squared-hinge margin loss over class-capsule lengths:
// sum_k T_k max(0, m_plus - o_k)^2 + lambda (1 - T_k) max(0, o_k - m_minus)^2
double margin_loss(const Tensor& lengths, const Tensor& target, double m_plus = 0.9,
                   double m_minus = 0.1, double lambda = 0.5);
Var margin_loss(Var lengths, const Tensor& target, double m_plus = 0.9, double m_minus = 0.1,
                double lambda = 0.5);

class CapsuleExpert {
public:
    CapsuleExpert(const ExpertConfig& config, Rng& init_rng);

    const ExpertConfig& config() const { return config_; }

    // Named views of every parameter block, in a stable order.
    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;

    struct Staged {
        Var conv1_w, conv1_b, conv2_w, conv2_b, w;
        Var box_w, box_b;  // valid iff side features are configured
    };
    Staged stage(Tape& tape) const;

    struct Output {
        Var lengths;     // [num_classes], each in [0, 1)
        Var class_caps;  // [num_classes x class_capsule_dim]
        RoutingState routing;
    };
    // side_features must be non-null exactly when side_feature_len > 0.
    // frozen_couplings, when given, bypass routing entirely; finite-difference
    // probes use this so the checked function matches the tape's
    // stop-gradient treatment of the couplings.
    Output forward(Tape& tape, const Staged& staged, const Tensor& patch,
                   const Tensor* side_features = nullptr,
                   const Tensor* frozen_couplings = nullptr) const;

    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor w;  // [N_prim x num_classes x prim_dim x class_dim]
    Tensor box_w, box_b;  // side-feature remap, present iff side_feature_len > 0

private:
    ExpertConfig config_;
};

}  // namespace mixcaps
