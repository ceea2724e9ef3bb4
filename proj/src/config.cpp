#include "rot/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace rot {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("config: empty key");
    kv_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string RunConfig::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("config: missing key '" + key + "'");
    return it->second;
}

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

long long RunConfig::get_int(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t used = 0;
        long long r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' is not an integer: " + v);
    }
}

long long RunConfig::get_int(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string v = get_str(key);
    try {
        size_t used = 0;
        double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' is not a number: " + v);
    }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string v = get_str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: '" + key + "' is not a boolean: " + v);
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    const std::string v = get_str(key);
    std::vector<int> out;
    std::stringstream ss(v);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (cell.empty()) continue;
        try {
            out.push_back(std::stoi(cell));
        } catch (const std::exception&) {
            throw ConfigError("config: '" + key + "' has a non-integer entry: " + cell);
        }
    }
    if (out.empty()) throw ConfigError("config: '" + key + "' is an empty list");
    return out;
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("config: line " + std::to_string(lineno) + " has an empty key");
        cfg.set(key, trim(line.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    merge_from(parse_text(ss.str()));
}

void RunConfig::merge_from(const RunConfig& higher) {
    for (const auto& [k, v] : higher.kv_) kv_[k] = v;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
    return out;
}

void RunConfig::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ConfigError("config: cannot write " + path);
    f << to_text();
}

std::string run_dir_root(const std::string& fallback) {
    const char* env = std::getenv("ROT_RUN_DIR");
    return env && *env ? std::string(env) : fallback;
}

}  // namespace rot
