#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nctta/errors.hpp"

namespace nctta {

// Flat key-value configuration with [section] headers, '#' comments and
// one 'key = value' per line. Lookups throw ConfigError naming the key
// (and line, when known). Values are parsed on access.
class Config {
  public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& section, const std::string& key) const;

    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int get_int(const std::string& section, const std::string& key) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& section, const std::string& key) const;

    // Rejects keys outside `allowed` in `section`, naming the stray key and
    // its line. A missing section is fine.
    void expect_keys(const std::string& section, const std::vector<std::string>& allowed) const;

    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return values_;
    }

  private:
    struct Entry {
        std::string value;
        int line{0};
    };
    std::map<std::string, std::map<std::string, std::string>> values_;
    std::map<std::string, std::map<std::string, int>> lines_;
    std::string origin_;

    const std::string& raw(const std::string& section, const std::string& key) const;
    [[noreturn]] void fail(const std::string& section, const std::string& key,
                           const std::string& why) const;
};

} // namespace nctta
