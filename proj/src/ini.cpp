#include "oslab/ini.hpp"

#include <fstream>
#include <sstream>

namespace oslab::ini {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    if (!s.empty() && s.back() == sep) out.push_back("");
    return out;
}

Config Config::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

Config Config::parse_string(const std::string& text) {
    Config cfg;
    std::stringstream ss(text);
    std::string line, section;
    long lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw config_error("bad section header at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            if (!cfg.find_section(section)) cfg.sections_.push_back({section, {}});
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error("expected key = value at line " + std::to_string(lineno));
        cfg.append(section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

std::string Config::to_string() const {
    std::stringstream out;
    for (std::size_t i = 0; i < sections_.size(); ++i) {
        if (i > 0) out << "\n";
        out << '[' << sections_[i].name << "]\n";
        for (const auto& [k, v] : sections_[i].entries) out << k << " = " << v << "\n";
    }
    return out.str();
}

void Config::write_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw config_error("cannot write config file " + path);
    out << to_string();
}

Section* Config::find_section(const std::string& name) {
    for (auto& s : sections_)
        if (s.name == name) return &s;
    return nullptr;
}

const Section* Config::find_section(const std::string& name) const {
    for (const auto& s : sections_)
        if (s.name == name) return &s;
    return nullptr;
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key).has_value();
}

std::optional<std::string> Config::find(const std::string& section, const std::string& key) const {
    const Section* s = find_section(section);
    if (!s) return std::nullopt;
    for (const auto& [k, v] : s->entries)
        if (k == key) return v;
    return std::nullopt;
}

std::string Config::get_string(const std::string& section, const std::string& key) const {
    auto v = find(section, key);
    if (!v) throw config_error("missing config key [" + section + "] " + key);
    return *v;
}

std::string Config::get_string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    return find(section, key).value_or(fallback);
}

double Config::get_double(const std::string& section, const std::string& key) const {
    return parse_double(get_string(section, key));
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
    auto v = find(section, key);
    return v ? parse_double(*v) : fallback;
}

long Config::get_long(const std::string& section, const std::string& key) const {
    return parse_long(get_string(section, key));
}

long Config::get_long(const std::string& section, const std::string& key, long fallback) const {
    auto v = find(section, key);
    return v ? parse_long(*v) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    auto v = find(section, key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw config_error("expected boolean for [" + section + "] " + key);
}

std::vector<double> Config::get_doubles(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split(get_string(section, key), ','))
        out.push_back(parse_double(item));
    return out;
}

std::vector<int> Config::get_ints(const std::string& section, const std::string& key) const {
    std::vector<int> out;
    for (const auto& item : split(get_string(section, key), ','))
        out.push_back(static_cast<int>(parse_long(item)));
    return out;
}

std::vector<std::string> Config::get_all(const std::string& section,
                                         const std::string& key) const {
    std::vector<std::string> out;
    const Section* s = find_section(section);
    if (!s) return out;
    for (const auto& [k, v] : s->entries)
        if (k == key) out.push_back(v);
    return out;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    Section* s = find_section(section);
    if (!s) {
        sections_.push_back({section, {}});
        s = &sections_.back();
    }
    for (auto& [k, v] : s->entries) {
        if (k == key) {
            v = value;
            return;
        }
    }
    s->entries.emplace_back(key, value);
}

void Config::append(const std::string& section, const std::string& key,
                    const std::string& value) {
    Section* s = find_section(section);
    if (!s) {
        sections_.push_back({section, {}});
        s = &sections_.back();
    }
    s->entries.emplace_back(key, value);
}

}  // namespace oslab::ini
