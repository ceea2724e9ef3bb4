#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace rot {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key=value configuration with layered precedence:
// defaults < config file < command-line overrides. Fully resolved before any
// module runs and serialized next to every run's outputs.
class RunConfig {
public:
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_str(const std::string& key) const;  // throws when missing
    std::string get_str(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key) const;
    long long get_int(const std::string& key, long long fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;  // true/false/1/0
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key) const;  // comma-separated

    // "key=value" lines; '#' starts a comment; blank lines ignored
    void load_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);
    void merge_from(const RunConfig& higher);  // higher precedence wins
    void save(const std::string& path) const;
    std::string to_text() const;  // sorted, round-trippable

    const std::map<std::string, std::string>& items() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// output root: ROT_RUN_DIR env var when set, else the given fallback
std::string run_dir_root(const std::string& fallback);

}  // namespace rot
