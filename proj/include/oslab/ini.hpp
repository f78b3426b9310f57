#pragma once

// Flat INI-style configuration: [section] headers, key = value lines, '#'
// comments. Repeated keys are preserved in order (used for probe lists).
// Values are written back verbatim so a parsed file round-trips.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oslab/common.hpp"

namespace oslab::ini {

struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
};

class Config {
  public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text);

    void write_file(const std::string& path) const;
    std::string to_string() const;

    bool has(const std::string& section, const std::string& key) const;
    std::optional<std::string> find(const std::string& section, const std::string& key) const;

    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    long get_long(const std::string& section, const std::string& key) const;
    long get_long(const std::string& section, const std::string& key, long fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& section, const std::string& key) const;
    std::vector<int> get_ints(const std::string& section, const std::string& key) const;

    // All values recorded under a repeated key, in file order.
    std::vector<std::string> get_all(const std::string& section, const std::string& key) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    void append(const std::string& section, const std::string& key, const std::string& value);

    const std::vector<Section>& sections() const { return sections_; }

  private:
    Section* find_section(const std::string& name);
    const Section* find_section(const std::string& name) const;
    std::vector<Section> sections_;
};

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);

}  // namespace oslab::ini
