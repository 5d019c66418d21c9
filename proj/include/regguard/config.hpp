#pragma once

// Flat key=value configuration files: one `key=value` pair per line,
// '#' comments and blank lines ignored.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace regguard::config {

class KV {
public:
    static KV parse_file(const std::string& path);
    static KV parse_string(const std::string& text);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_str(const std::string& key, const std::string& fallback = "") const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    // Comma-separated list.
    std::vector<std::string> get_list(const std::string& key) const;

    std::string serialize() const;
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace regguard::config
