#include "mixcaps/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mixcaps {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str());
}

KeyValueConfig KeyValueConfig::from_text(const std::string& text) {
    KeyValueConfig kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config line " + std::to_string(lineno) +
                              ": expected key = value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw FormatError("config line " + std::to_string(lineno) + ": empty key");
        }
        if (kv.values_.count(key)) {
            throw FormatError("config key '" + key + "' appears twice");
        }
        kv.values_[key] = value;
    }
    return kv;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    return it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0') {
        throw FormatError("config key '" + key + "': '" + it->second + "' is not a number");
    }
    return v;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v) {
        throw FormatError("config key '" + key + "' must be an integer");
    }
    return i;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0') {
        throw FormatError("config key '" + key + "': '" + it->second +
                          "' is not an unsigned integer");
    }
    return static_cast<std::uint64_t>(v);
}

void KeyValueConfig::ensure_fully_consumed() const {
    std::string unknown;
    for (const auto& [key, value] : values_) {
        if (!consumed_.count(key)) unknown += unknown.empty() ? key : ", " + key;
    }
    if (!unknown.empty()) throw FormatError("unrecognized config keys: " + unknown);
}

void apply_config(const KeyValueConfig& kv, TrainConfig& config) {
    const std::string preset = kv.get_string("preset", config.preset == Preset::desk ? "desk"
                                                                                     : "paper");
    if (preset == "desk") {
        config.preset = Preset::desk;
    } else if (preset == "paper") {
        config.preset = Preset::paper;
    } else {
        throw FormatError("config key 'preset' must be 'desk' or 'paper', got '" + preset + "'");
    }
    config.epochs = kv.get_int("epochs", config.epochs);
    config.batch_size = kv.get_int("batch_size", config.batch_size);
    config.adam.learning_rate = kv.get_double("learning_rate", config.adam.learning_rate);
    config.adam.beta1 = kv.get_double("beta1", config.adam.beta1);
    config.adam.beta2 = kv.get_double("beta2", config.adam.beta2);
    config.adam.epsilon = kv.get_double("epsilon", config.adam.epsilon);
    config.seed = kv.get_u64("seed", config.seed);
    config.bootstrap_iterations = kv.get_int("bootstrap_iterations", config.bootstrap_iterations);
    config.sample_fraction = kv.get_double("sample_fraction", config.sample_fraction);
    config.validation_fraction =
        kv.get_double("validation_fraction", config.validation_fraction);
    config.num_experts = kv.get_int("num_experts", config.num_experts);
    config.side_feature_len = kv.get_int("side_feature_len", config.side_feature_len);
    config.threads = kv.get_int("threads", config.threads);
}

void apply_config(const KeyValueConfig& kv, GenParams& params) {
    params.p_large = kv.get_double("p_large", params.p_large);
    const auto range = [&](const char* base, Range& r) {
        r.lo = kv.get_double(std::string(base) + "_lo", r.lo);
        r.hi = kv.get_double(std::string(base) + "_hi", r.hi);
    };
    range("small_diameter", params.small_diameter);
    range("large_diameter", params.large_diameter);
    range("eccentricity", params.eccentricity);
    range("texture_amp_low", params.texture_amp_low);
    range("texture_amp_high", params.texture_amp_high);
    range("texture_freq", params.texture_freq);
    range("wobble_low", params.wobble_low);
    range("wobble_high", params.wobble_high);
    params.texture_threshold = kv.get_double("texture_threshold", params.texture_threshold);
    params.wobble_threshold = kv.get_double("wobble_threshold", params.wobble_threshold);
    params.center_jitter = kv.get_double("center_jitter", params.center_jitter);
}

}  // namespace mixcaps
