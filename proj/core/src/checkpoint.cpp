#include <fstream>

#include "mixcaps/serialize.hpp"
#include "mixcaps/train.hpp"

namespace mixcaps {

namespace {

constexpr char kMagic[5] = "MXCK";
constexpr std::uint16_t kVersion = 1;

void write_config(std::ostream& os, const TrainConfig& c) {
    io::write_le<std::uint8_t>(os, c.preset == Preset::desk ? 0 : 1);
    io::write_le<std::int32_t>(os, c.epochs);
    io::write_le<std::int32_t>(os, c.batch_size);
    io::write_le<double>(os, c.adam.learning_rate);
    io::write_le<double>(os, c.adam.beta1);
    io::write_le<double>(os, c.adam.beta2);
    io::write_le<double>(os, c.adam.epsilon);
    io::write_le<std::uint64_t>(os, c.seed);
    io::write_le<std::int32_t>(os, c.bootstrap_iterations);
    io::write_le<double>(os, c.sample_fraction);
    io::write_le<double>(os, c.validation_fraction);
    io::write_le<std::int32_t>(os, c.num_experts);
    io::write_le<std::int32_t>(os, c.side_feature_len);
}

TrainConfig read_config(std::istream& is) {
    TrainConfig c;
    c.preset = io::read_le<std::uint8_t>(is) == 0 ? Preset::desk : Preset::paper;
    c.epochs = io::read_le<std::int32_t>(is);
    c.batch_size = io::read_le<std::int32_t>(is);
    c.adam.learning_rate = io::read_le<double>(is);
    c.adam.beta1 = io::read_le<double>(is);
    c.adam.beta2 = io::read_le<double>(is);
    c.adam.epsilon = io::read_le<double>(is);
    c.seed = io::read_le<std::uint64_t>(is);
    c.bootstrap_iterations = io::read_le<std::int32_t>(is);
    c.sample_fraction = io::read_le<double>(is);
    c.validation_fraction = io::read_le<double>(is);
    c.num_experts = io::read_le<std::int32_t>(is);
    c.side_feature_len = io::read_le<std::int32_t>(is);
    return c;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) io::write_le<std::int32_t>(os, t.dim(i));
    for (std::int64_t i = 0; i < t.size(); ++i) io::write_le<double>(os, t[i]);
}

Tensor read_tensor(std::istream& is) {
    const auto rank = io::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("checkpoint tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    for (auto& d : shape) d = io::read_le<std::int32_t>(is);
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = io::read_le<double>(is);
    return t;
}

// Parameter shapes implied by a config, without building (possibly huge)
// model tensors.
std::vector<std::pair<std::string, std::vector<int>>> expected_shapes(const TrainConfig& tc) {
    const ExpertConfig e = tc.expert_config();
    const GateConfig g = tc.gate_config();
    std::vector<std::pair<std::string, std::vector<int>>> out;
    for (int i = 0; i < g.num_experts; ++i) {
        const std::string p = "expert" + std::to_string(i) + "/";
        out.emplace_back(p + "conv1_w", std::vector<int>{e.kernel, e.kernel, e.in_channels,
                                                         e.conv1_filters});
        out.emplace_back(p + "conv1_b", std::vector<int>{e.conv1_filters});
        out.emplace_back(p + "conv2_w", std::vector<int>{e.kernel, e.kernel, e.conv1_filters,
                                                         e.conv2_filters});
        out.emplace_back(p + "conv2_b", std::vector<int>{e.conv2_filters});
        out.emplace_back(p + "W", std::vector<int>{e.num_primary_capsules(), e.num_classes,
                                                   e.primary_capsule_dim, e.class_capsule_dim});
        if (e.side_feature_len > 0) {
            out.emplace_back(p + "box_w", std::vector<int>{e.class_capsule_dim + e.side_feature_len,
                                                           e.class_capsule_dim});
            out.emplace_back(p + "box_b", std::vector<int>{e.class_capsule_dim});
        }
    }
    out.emplace_back("gate/conv_w",
                     std::vector<int>{g.kernel, g.kernel, g.in_channels, g.conv_filters});
    out.emplace_back("gate/conv_b", std::vector<int>{g.conv_filters});
    out.emplace_back("gate/fc1_w", std::vector<int>{g.flat_size(), g.fc1_units});
    out.emplace_back("gate/fc1_b", std::vector<int>{g.fc1_units});
    out.emplace_back("gate/fc2_w", std::vector<int>{g.fc1_units, g.num_experts});
    out.emplace_back("gate/fc2_b", std::vector<int>{g.num_experts});
    return out;
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& checkpoint, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    io::write_le<std::uint16_t>(os, kVersion);
    write_config(os, checkpoint.config);
    io::write_le<std::uint64_t>(os, checkpoint.step);
    io::write_le<std::int64_t>(os, checkpoint.adam_t);
    for (const std::uint64_t w : checkpoint.rng_state) io::write_le<std::uint64_t>(os, w);
    if (checkpoint.adam_m.size() != checkpoint.params.size() ||
        checkpoint.adam_v.size() != checkpoint.params.size()) {
        throw ContractError("checkpoint optimizer state misaligned with parameters");
    }
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(checkpoint.params.size()));
    for (std::size_t i = 0; i < checkpoint.params.size(); ++i) {
        io::write_string(os, checkpoint.params[i].first);
        write_tensor(os, checkpoint.params[i].second);
        write_tensor(os, checkpoint.adam_m[i]);
        write_tensor(os, checkpoint.adam_v[i]);
    }
    if (!os) throw FormatError("short write to " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    io::expect_magic(is, "MXCK", "checkpoint");
    const auto version = io::read_le<std::uint16_t>(is);
    if (version != kVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported");
    }
    ModelCheckpoint ck;
    ck.config = read_config(is);
    ck.step = io::read_le<std::uint64_t>(is);
    ck.adam_t = io::read_le<std::int64_t>(is);
    for (auto& w : ck.rng_state) w = io::read_le<std::uint64_t>(is);
    const auto n = io::read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = io::read_string(is);
        Tensor value = read_tensor(is);
        ck.adam_m.push_back(read_tensor(is));
        ck.adam_v.push_back(read_tensor(is));
        ck.params.emplace_back(name, std::move(value));
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw FormatError("checkpoint " + path + " has trailing bytes");
    }
    return ck;
}

void verify_checkpoint_config(const ModelCheckpoint& checkpoint, const TrainConfig& expected) {
    const auto want = expected_shapes(expected);
    if (want.size() != checkpoint.params.size()) {
        throw FormatError("checkpoint holds " + std::to_string(checkpoint.params.size()) +
                          " tensors, expected config wants " + std::to_string(want.size()));
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (checkpoint.params[i].first != want[i].first) {
            throw FormatError("checkpoint tensor '" + checkpoint.params[i].first +
                              "' where '" + want[i].first + "' was expected");
        }
        if (checkpoint.params[i].second.shape() != want[i].second) {
            throw FormatError("checkpoint tensor '" + want[i].first + "' has shape " +
                              checkpoint.params[i].second.shape_str() + ", expected " +
                              Tensor::shape_str(want[i].second));
        }
    }
}

MixcapsModel model_from_checkpoint(const ModelCheckpoint& checkpoint) {
    verify_checkpoint_config(checkpoint, checkpoint.config);
    // Every parameter is overwritten below, so the init seed is immaterial.
    MixcapsModel model(checkpoint.config.expert_config(), checkpoint.config.gate_config(),
                       checkpoint.config.seed);
    auto params = model.parameters();
    if (params.size() != checkpoint.params.size()) {
        throw FormatError("checkpoint parameter count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != checkpoint.params[i].first ||
            !params[i].second->same_shape(checkpoint.params[i].second)) {
            throw FormatError("checkpoint tensor '" + checkpoint.params[i].first +
                              "' does not match model parameter '" + params[i].first + "'");
        }
        *params[i].second = checkpoint.params[i].second;
    }
    return model;
}

}  // namespace mixcaps
