#include "mixcaps/gate.hpp"

namespace mixcaps {

GateConfig GateConfig::paper() { return GateConfig{}; }

GateConfig GateConfig::desk() {
    GateConfig c;
    c.input_hw = 40;
    c.conv_filters = 6;
    c.kernel = 5;
    c.stride = 4;
    c.fc1_units = 24;
    return c;
}

void GateConfig::validate(bool allow_single_expert) const {
    if (input_hw <= 0 || in_channels <= 0 || conv_filters <= 0 || kernel <= 0 || stride <= 0 ||
        fc1_units <= 0) {
        throw ContractError("gate config extents must be positive");
    }
    if (num_experts < (allow_single_expert ? 1 : 2)) {
        throw ContractError("gate requires at least two experts, got " +
                            std::to_string(num_experts));
    }
    if (kernel > input_hw) {
        throw DimensionError("gate kernel " + std::to_string(kernel) + " larger than input " +
                             std::to_string(input_hw));
    }
}

std::int64_t GateConfig::parameter_count() const {
    std::int64_t n = 0;
    n += static_cast<std::int64_t>(kernel) * kernel * in_channels * conv_filters + conv_filters;
    n += static_cast<std::int64_t>(flat_size()) * fc1_units + fc1_units;
    n += static_cast<std::int64_t>(fc1_units) * num_experts + num_experts;
    return n;
}

GateNetwork::GateNetwork(const GateConfig& config, Rng& init_rng) : config_(config) {
    config_.validate(true);
    const int k = config_.kernel;
    conv_w = Tensor({k, k, config_.in_channels, config_.conv_filters});
    conv_b = Tensor({config_.conv_filters});
    fc1_w = Tensor({config_.flat_size(), config_.fc1_units});
    fc1_b = Tensor({config_.fc1_units});
    fc2_w = Tensor({config_.fc1_units, config_.num_experts});
    fc2_b = Tensor({config_.num_experts});
    fill_fan_in_uniform(conv_w, init_rng, static_cast<std::int64_t>(k) * k * config_.in_channels);
    fill_fan_in_uniform(fc1_w, init_rng, config_.flat_size());
    for (std::int64_t i = 0; i < conv_b.size(); ++i) conv_b[i] = 0.01;  // off the relu kink
    // fc2 stays zero: gates start uniform and specialize from data.
}

std::vector<std::pair<std::string, Tensor*>> GateNetwork::parameters() {
    return {{"conv_w", &conv_w}, {"conv_b", &conv_b}, {"fc1_w", &fc1_w},
            {"fc1_b", &fc1_b},   {"fc2_w", &fc2_w},   {"fc2_b", &fc2_b}};
}

GateNetwork::Staged GateNetwork::stage(Tape& tape) const {
    Staged s;
    s.conv_w = tape.leaf(conv_w);
    s.conv_b = tape.leaf(conv_b);
    s.fc1_w = tape.leaf(fc1_w);
    s.fc1_b = tape.leaf(fc1_b);
    s.fc2_w = tape.leaf(fc2_w);
    s.fc2_b = tape.leaf(fc2_b);
    return s;
}

GateNetwork::Output GateNetwork::forward(Tape& tape, const Staged& staged,
                                         const Tensor& patch) const {
    if (patch.rank() != 3 || patch.dim(0) != config_.input_hw || patch.dim(1) != config_.input_hw ||
        patch.dim(2) != config_.in_channels) {
        throw DimensionError("gate_forward: patch " + patch.shape_str() +
                             " does not match configured input [" +
                             std::to_string(config_.input_hw) + "x" +
                             std::to_string(config_.input_hw) + "x" +
                             std::to_string(config_.in_channels) + "]");
    }
    Var x = tape.leaf(patch);
    Var h = relu(bias_add(conv2d(x, staged.conv_w, config_.stride), staged.conv_b));
    Var flat = reshape(h, {config_.flat_size()});
    Var h1 = relu(linear(flat, staged.fc1_w, staged.fc1_b));
    Output out;
    out.pre_activations = linear(h1, staged.fc2_w, staged.fc2_b);
    out.g = softmax(out.pre_activations, 0);
    return out;
}

Tensor mix(const std::vector<Tensor>& outputs, const Tensor& g) {
    if (g.rank() != 1 || static_cast<int>(outputs.size()) != g.dim(0)) {
        throw DimensionError("mix: got " + std::to_string(outputs.size()) +
                             " expert outputs for gate weights " + g.shape_str());
    }
    Tensor out(outputs.front().shape());
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        if (!outputs[i].same_shape(out)) {
            throw DimensionError("mix: expert output shapes differ: " + out.shape_str() + " vs " +
                                 outputs[i].shape_str());
        }
        const double gi = g[static_cast<std::int64_t>(i)];
        for (std::int64_t k = 0; k < out.size(); ++k) out[k] += gi * outputs[i][k];
    }
    return out;
}

Var mix(const std::vector<Var>& outputs, Var g) {
    Tape& t = *g.tape;
    std::vector<Tensor> values;
    values.reserve(outputs.size());
    std::vector<int> inputs;
    inputs.push_back(g.id);
    for (const Var& o : outputs) {
        values.push_back(o.value());
        inputs.push_back(o.id);
    }
    Tensor out = mix(values, g.value());
    const int gid = g.id;
    std::vector<int> oids;
    for (const Var& o : outputs) oids.push_back(o.id);
    return t.emit(std::move(out), std::move(inputs), "mix",
                  [gid, oids = std::move(oids)](Tape& tp, int self) {
                      const Tensor& grad = tp.grad_ref(self);
                      const Tensor& gv = tp.value(gid);
                      Tensor& dg = tp.grad_buf(gid);
                      for (std::size_t i = 0; i < oids.size(); ++i) {
                          const Tensor& ov = tp.value(oids[i]);
                          Tensor& dov = tp.grad_buf(oids[i]);
                          const double gi = gv[static_cast<std::int64_t>(i)];
                          double acc = 0.0;
                          for (std::int64_t k = 0; k < grad.size(); ++k) {
                              acc += ov[k] * grad[k];
                              dov[k] += gi * grad[k];
                          }
                          dg[static_cast<std::int64_t>(i)] += acc;
                      }
                  });
}

namespace {

GateNetwork make_gate(const GateConfig& config, std::uint64_t init_seed) {
    Rng rng(derive_seed(init_seed, 0x47415445ULL));
    return GateNetwork(config, rng);
}

}  // namespace

MixcapsModel::MixcapsModel(const ExpertConfig& expert_config, const GateConfig& gate_config,
                           std::uint64_t init_seed)
    : gate_(make_gate(gate_config, init_seed)) {
    expert_config.validate();
    gate_config.validate(true);
    if (expert_config.input_hw != gate_config.input_hw ||
        expert_config.in_channels != gate_config.in_channels) {
        throw ContractError("expert and gate configs disagree on input shape");
    }
    for (int i = 0; i < gate_config.num_experts; ++i) {
        Rng rng(derive_seed(init_seed, 0x45585030ULL + static_cast<std::uint64_t>(i)));
        experts_.emplace_back(expert_config, rng);
    }
}

std::vector<std::pair<std::string, Tensor*>> MixcapsModel::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        for (auto& [name, tensor] : experts_[i].parameters()) {
            out.emplace_back("expert" + std::to_string(i) + "/" + name, tensor);
        }
    }
    for (auto& [name, tensor] : gate_.parameters()) {
        out.emplace_back("gate/" + name, tensor);
    }
    return out;
}

std::int64_t MixcapsModel::parameter_count() {
    std::int64_t n = 0;
    for (auto& [name, tensor] : parameters()) n += tensor->size();
    return n;
}

MixcapsModel::Staged MixcapsModel::stage(Tape& tape) const {
    Staged s;
    for (const auto& e : experts_) s.experts.push_back(e.stage(tape));
    s.gate = gate_.stage(tape);
    return s;
}

std::vector<Var> MixcapsModel::staged_vars(const Staged& staged) const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        const CapsuleExpert::Staged& s = staged.experts[i];
        out.insert(out.end(), {s.conv1_w, s.conv1_b, s.conv2_w, s.conv2_b, s.w});
        if (experts_[i].config().side_feature_len > 0) {
            out.push_back(s.box_w);
            out.push_back(s.box_b);
        }
    }
    const GateNetwork::Staged& g = staged.gate;
    out.insert(out.end(), {g.conv_w, g.conv_b, g.fc1_w, g.fc1_b, g.fc2_w, g.fc2_b});
    return out;
}

MixcapsModel::ForwardResult MixcapsModel::forward(Tape& tape, const Staged& staged,
                                                  const Tensor& patch, const Tensor* side_features,
                                                  const std::vector<Tensor>* frozen_couplings) const {
    if (frozen_couplings != nullptr && frozen_couplings->size() != experts_.size()) {
        throw ContractError("forward: need one frozen coupling matrix per expert");
    }
    ForwardResult r;
    std::vector<Var> lengths;
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        const Tensor* frozen = frozen_couplings ? &(*frozen_couplings)[i] : nullptr;
        auto out = experts_[i].forward(tape, staged.experts[i], patch, side_features, frozen);
        lengths.push_back(out.lengths);
        r.routing.push_back(std::move(out.routing));
    }
    r.g = gate_.forward(tape, staged.gate, patch).g;
    r.expert_lengths = lengths;
    r.o = mix(lengths, r.g);
    return r;
}

Var MixcapsModel::loss(Tape& tape, const ForwardResult& fwd, const Tensor& target) const {
    (void)tape;
    return margin_loss(fwd.o, target);
}

MixcapsModel::Inference MixcapsModel::infer(const Tensor& patch,
                                            const Tensor* side_features) const {
    Tape tape;
    Staged staged = stage(tape);
    ForwardResult fwd = forward(tape, staged, patch, side_features);
    Inference out;
    out.o = fwd.o.value();
    out.g = fwd.g.value();
    for (const Var& l : fwd.expert_lengths) out.expert_lengths.push_back(l.value());
    out.routing = std::move(fwd.routing);
    return out;
}

}  // namespace mixcaps
