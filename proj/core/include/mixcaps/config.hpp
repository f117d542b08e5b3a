#pragma once

#include <map>
#include <set>
#include <string>

#include "mixcaps/datagen.hpp"
#include "mixcaps/train.hpp"

namespace mixcaps {

// Flat key=value config text: one `key = value` pair per line, '#' comments,
// blank lines ignored. Typed getters throw FormatError naming the offending
// key; keys nobody consumed are reported so typos fail loudly.
class KeyValueConfig {
public:
    static KeyValueConfig from_file(const std::string& path);
    static KeyValueConfig from_text(const std::string& text);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

    // Throws FormatError listing keys that no getter ever touched.
    void ensure_fully_consumed() const;

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

// Applies recognized keys onto defaults already in `config`.
void apply_config(const KeyValueConfig& kv, TrainConfig& config);
void apply_config(const KeyValueConfig& kv, GenParams& params);

}  // namespace mixcaps
