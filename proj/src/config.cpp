#include "regguard/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace regguard::config {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

KV KV::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
}

KV KV::parse_string(const std::string& text) {
    KV kv;
    std::istringstream in(text);
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) + ": missing '='");
        kv.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

std::string KV::get_str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KV::get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': not a number: " + it->second);
    }
}

int KV::get_int(const std::string& key, int fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': not an integer: " + it->second);
    }
}

bool KV::get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "1" || it->second == "true" || it->second == "yes") return true;
    if (it->second == "0" || it->second == "false" || it->second == "no") return false;
    throw std::runtime_error("config key '" + key + "': not a boolean: " + it->second);
}

std::uint64_t KV::get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': not an unsigned integer: " + it->second);
    }
}

std::vector<std::string> KV::get_list(const std::string& key) const {
    std::vector<std::string> out;
    const std::string raw = get_str(key);
    size_t pos = 0;
    while (pos <= raw.size() && !raw.empty()) {
        size_t comma = raw.find(',', pos);
        if (comma == std::string::npos) comma = raw.size();
        const std::string item = trim(raw.substr(pos, comma - pos));
        if (!item.empty()) out.push_back(item);
        pos = comma + 1;
    }
    return out;
}

std::string KV::serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << "=" << v << "\n";
    return out.str();
}

}  // namespace regguard::config
