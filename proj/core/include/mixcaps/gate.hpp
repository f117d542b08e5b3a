#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mixcaps/capsule.hpp"
#include "mixcaps/ops.hpp"
#include "mixcaps/rng.hpp"
#include "mixcaps/tape.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

// Convolutional gating network: conv -> relu -> flatten -> fc1 -> relu ->
// fc2(M) -> softmax. Produces one contribution weight per expert.
struct GateConfig {
    int input_hw = 80;
    int in_channels = 3;
    int conv_filters = 16;
    int kernel = 5;
    int stride = 2;
    int fc1_units = 64;
    int num_experts = 2;

    static GateConfig paper();
    static GateConfig desk();

    // num_experts == 1 is a degenerate configuration for single-expert
    // baselines; the library allows it, the CLI does not.
    void validate(bool allow_single_expert = false) const;
    int conv_out_hw() const { return (input_hw - kernel) / stride + 1; }
    int flat_size() const { return conv_out_hw() * conv_out_hw() * conv_filters; }
    std::int64_t parameter_count() const;
};

struct GateOutput {
    Tensor g;                // contribution weights, positive, sum to 1
    Tensor pre_activations;  // logits before the softmax
};

class GateNetwork {
public:
    GateNetwork(const GateConfig& config, Rng& init_rng);

    const GateConfig& config() const { return config_; }
    std::vector<std::pair<std::string, Tensor*>> parameters();

    struct Staged {
        Var conv_w, conv_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    Staged stage(Tape& tape) const;

    struct Output {
        Var g;
        Var pre_activations;
    };
    Output forward(Tape& tape, const Staged& staged, const Tensor& patch) const;

    Tensor conv_w, conv_b;
    Tensor fc1_w, fc1_b;
    Tensor fc2_w, fc2_b;  // zero-initialized so training starts from uniform gates

private:
    GateConfig config_;
};

// Convex blend of expert output vectors: out = sum_i g[i] * outputs[i].
Tensor mix(const std::vector<Tensor>& outputs, const Tensor& g);
Var mix(const std::vector<Var>& outputs, Var g);

// The full mixture: M capsule experts plus the gating network, all fed the
// same patch; trained jointly from one margin loss over the blended output.
class MixcapsModel {
public:
    MixcapsModel(const ExpertConfig& expert_config, const GateConfig& gate_config,
                 std::uint64_t init_seed);

    int num_experts() const { return gate_.config().num_experts; }
    const ExpertConfig& expert_config() const { return experts_.front().config(); }
    const GateConfig& gate_config() const { return gate_.config(); }
    CapsuleExpert& expert(int i) { return experts_[static_cast<std::size_t>(i)]; }
    GateNetwork& gate() { return gate_; }

    // Named blocks: expert<i>/<name> and gate/<name>.
    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::int64_t parameter_count();

    struct Staged {
        std::vector<CapsuleExpert::Staged> experts;
        GateNetwork::Staged gate;
    };
    Staged stage(Tape& tape) const;
    // Leaf vars in the same order as parameters().
    std::vector<Var> staged_vars(const Staged& staged) const;

    struct ForwardResult {
        Var o;  // blended class lengths [num_classes]
        Var g;  // gate weights [M]
        std::vector<Var> expert_lengths;
        std::vector<RoutingState> routing;
    };
    // frozen_couplings: one tensor per expert, see CapsuleExpert::forward.
    ForwardResult forward(Tape& tape, const Staged& staged, const Tensor& patch,
                          const Tensor* side_features = nullptr,
                          const std::vector<Tensor>* frozen_couplings = nullptr) const;

    // Margin loss over the blended output; couples experts and gate.
    Var loss(Tape& tape, const ForwardResult& fwd, const Tensor& target) const;

    struct Inference {
        Tensor o;
        Tensor g;
        std::vector<Tensor> expert_lengths;
        std::vector<RoutingState> routing;
    };
    Inference infer(const Tensor& patch, const Tensor* side_features = nullptr) const;

private:
    std::vector<CapsuleExpert> experts_;
    GateNetwork gate_;
};

}  // namespace mixcaps
