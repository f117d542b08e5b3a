#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mixcaps/capsule.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

// Analytical correspondence between the trained mixture and Bayesian model
// weighting: responsibility posteriors, the sequential multiple-model weight
// recursion, and routing-as-gating checks.

// posterior_i = g_i * L_i / sum_j g_j * L_j.
// g must lie on the simplex; likelihoods nonnegative with a positive
// weighted sum.
Tensor em_posterior(const Tensor& g, const Tensor& likelihoods);

struct MMState {
    Tensor weights;  // on the probability simplex
    int step = 0;
};

// One multiple-model step: the prior weights are replaced by the posterior
// under the newest likelihood vector.
MMState mm_update(const MMState& state, const Tensor& likelihoods);

// Which expert output feeds the likelihood slot of the posterior.
enum class LikelihoodMode {
    class_matched,     // o_i^(label): fit to the actual target class
    malignant_output,  // o_i^(1) regardless of label
};

struct ResponsibilityRecord {
    int sample_id = 0;
    int label = 0;
    Tensor g;
    Tensor likelihoods;
    Tensor posterior;
};

// Builds the per-sample responsibility record from a mixture forward pass.
ResponsibilityRecord responsibility(int sample_id, int label, const Tensor& g,
                                    const std::vector<Tensor>& expert_lengths,
                                    LikelihoodMode mode = LikelihoodMode::class_matched);

struct RoutingRoundCheck {
    int round = 0;                 // 1-based
    double row_sum_dev = 0.0;      // worst |sum_j c_ij - 1|
    double replay_dev = 0.0;       // worst |c - softmax(prior logits + agreement)|
    bool normalized = false;       // row_sum_dev < 1e-9
    bool replay_ok = true;         // replay_dev < 1e-9 (trivially true for round 1)
};

struct MoeCorrespondenceReport {
    std::vector<RoutingRoundCheck> rounds;
    bool pass = true;
};

// Verifies, per routing round, that couplings satisfy the mixture-of-experts
// sum-to-one requirement and that each round's couplings equal the softmax
// of the previous round's logits plus agreements (prior replaced by
// posterior, as in the multiple-model recursion).
MoeCorrespondenceReport routing_as_moe_report(const RoutingState& state);

// Line-delimited JSON emission for the CLI analysis surface.
void write_report(std::ostream& os, int sample_id, const MoeCorrespondenceReport& report,
                  const RoutingState& state);
void write_record(std::ostream& os, const ResponsibilityRecord& record);

}  // namespace mixcaps
