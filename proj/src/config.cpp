#include "nctta/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace nctta {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

} // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str(), path);
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config cfg;
    cfg.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                              "' appears before any [section]");
        if (cfg.values_[section].count(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "' in [" + section + "]");
        cfg.values_[section][key] = value;
        cfg.lines_[section][key] = lineno;
    }
    return cfg;
}

bool Config::has(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    return s != values_.end() && s->second.count(key) > 0;
}

const std::string& Config::raw(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    if (s == values_.end() || !s->second.count(key))
        throw ConfigError(origin_ + ": missing required key '" + key + "' in [" + section + "]");
    return s->second.at(key);
}

void Config::fail(const std::string& section, const std::string& key,
                  const std::string& why) const {
    int line = 0;
    const auto s = lines_.find(section);
    if (s != lines_.end()) {
        const auto k = s->second.find(key);
        if (k != s->second.end()) line = k->second;
    }
    throw ConfigError(origin_ + ":" + std::to_string(line) + ": key '" + key + "' in [" + section +
                      "]: " + why);
}

std::string Config::get_string(const std::string& section, const std::string& key) const {
    return raw(section, key);
}

std::string Config::get_string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    return has(section, key) ? raw(section, key) : fallback;
}

double Config::get_double(const std::string& section, const std::string& key) const {
    const std::string& v = raw(section, key);
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) fail(section, key, "trailing characters in number '" + v + "'");
        return d;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(section, key, "cannot parse '" + v + "' as a number");
    }
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

int Config::get_int(const std::string& section, const std::string& key) const {
    const std::string& v = raw(section, key);
    try {
        size_t used = 0;
        const long n = std::stol(v, &used);
        if (used != v.size()) fail(section, key, "trailing characters in integer '" + v + "'");
        return static_cast<int>(n);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(section, key, "cannot parse '" + v + "' as an integer");
    }
}

int Config::get_int(const std::string& section, const std::string& key, int fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

uint64_t Config::get_u64(const std::string& section, const std::string& key,
                         uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = raw(section, key);
    try {
        size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) fail(section, key, "trailing characters in integer '" + v + "'");
        return static_cast<uint64_t>(n);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        fail(section, key, "cannot parse '" + v + "' as an unsigned integer");
    }
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    std::string v = raw(section, key);
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(section, key, "expected a boolean, got '" + raw(section, key) + "'");
}

std::vector<int> Config::get_int_list(const std::string& section, const std::string& key) const {
    const std::string& v = raw(section, key);
    std::vector<int> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty()) fail(section, key, "empty list element in '" + v + "'");
        try {
            size_t used = 0;
            out.push_back(static_cast<int>(std::stol(item, &used)));
            if (used != item.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            fail(section, key, "cannot parse list element '" + item + "' as an integer");
        }
    }
    if (out.empty()) fail(section, key, "empty list");
    return out;
}

void Config::expect_keys(const std::string& section,
                         const std::vector<std::string>& allowed) const {
    const auto s = values_.find(section);
    if (s == values_.end()) return;
    for (const auto& [key, _] : s->second) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            int line = lines_.at(section).at(key);
            throw ConfigError(origin_ + ":" + std::to_string(line) + ": unknown key '" + key +
                              "' in [" + section + "]");
        }
    }
}

} // namespace nctta
