#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "phenotyper/common.hpp"

namespace phenotyper {

// Minimal TOML subset sufficient for the pipeline configs: one-level
// [sections], bare keys, strings, integers, floats, booleans and flat arrays.
// No TOML library ships with this toolchain, so the subset is parsed here.

struct TomlValue {
    std::variant<bool, std::int64_t, double, std::string, std::vector<TomlValue>> data;

    bool is_string() const { return std::holds_alternative<std::string>(data); }

    double as_double() const {
        if (auto* d = std::get_if<double>(&data)) return *d;
        if (auto* i = std::get_if<std::int64_t>(&data)) return static_cast<double>(*i);
        throw ConfigError("toml: expected a number");
    }
    std::int64_t as_int() const {
        if (auto* i = std::get_if<std::int64_t>(&data)) return *i;
        throw ConfigError("toml: expected an integer");
    }
    bool as_bool() const {
        if (auto* b = std::get_if<bool>(&data)) return *b;
        throw ConfigError("toml: expected a boolean");
    }
    const std::string& as_string() const {
        if (auto* s = std::get_if<std::string>(&data)) return *s;
        throw ConfigError("toml: expected a string");
    }
    const std::vector<TomlValue>& as_array() const {
        if (auto* a = std::get_if<std::vector<TomlValue>>(&data)) return *a;
        throw ConfigError("toml: expected an array");
    }
};

class TomlTable {
  public:
    using Section = std::map<std::string, TomlValue>;

    bool has(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    const TomlValue& at(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        if (s == sections_.end() || !s->second.count(key))
            throw ConfigError("toml: missing key [" + section + "] " + key);
        return s->second.at(key);
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        return has(section, key) ? at(section, key).as_double() : fallback;
    }
    std::int64_t get_int(const std::string& section, const std::string& key,
                         std::int64_t fallback) const {
        return has(section, key) ? at(section, key).as_int() : fallback;
    }
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        return has(section, key) ? at(section, key).as_bool() : fallback;
    }
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        return has(section, key) ? at(section, key).as_string() : fallback;
    }

    void set(const std::string& section, const std::string& key, TomlValue value) {
        sections_[section][key] = std::move(value);
    }

    const std::map<std::string, Section>& sections() const { return sections_; }

  private:
    std::map<std::string, Section> sections_;
};

namespace detail {

inline TomlValue parse_toml_scalar(const std::string& raw, std::size_t line_no) {
    const std::string s = trim(raw);
    if (s.empty()) throw ConfigError("toml line " + std::to_string(line_no) + ": empty value");
    if (s == "true") return {true};
    if (s == "false") return {false};
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw ConfigError("toml line " + std::to_string(line_no) + ": unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            if (s[i] == '\\' && i + 2 < s.size()) {
                ++i;
                switch (s[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default:
                        throw ConfigError("toml line " + std::to_string(line_no) +
                                          ": unsupported escape");
                }
            } else {
                out += s[i];
            }
        }
        return {out};
    }
    if (s.front() == '[') {
        if (s.back() != ']')
            throw ConfigError("toml line " + std::to_string(line_no) + ": unterminated array");
        std::vector<TomlValue> items;
        const std::string inner = trim(s.substr(1, s.size() - 2));
        if (!inner.empty())
            for (const auto& piece : split(inner, ','))
                items.push_back(parse_toml_scalar(piece, line_no));
        return {items};
    }
    // number: integer when it parses fully without '.', 'e' or 'E'
    const bool looks_float = s.find_first_of(".eE") != std::string::npos;
    try {
        if (!looks_float) return {static_cast<std::int64_t>(parse_int(s))};
        return {parse_double(s)};
    } catch (const Error&) {
        throw ConfigError("toml line " + std::to_string(line_no) + ": cannot parse value '" +
                          s + "'");
    }
}

inline std::string strip_toml_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

}  // namespace detail

inline TomlTable parse_toml(const std::string& text) {
    TomlTable table;
    std::string section;
    const auto lines = split(text, '\n');
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const std::string line = trim(detail::strip_toml_comment(lines[ln]));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("toml line " + std::to_string(ln + 1) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("toml line " + std::to_string(ln + 1) + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml line " + std::to_string(ln + 1) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("toml line " + std::to_string(ln + 1) + ": empty key");
        table.set(section, key, detail::parse_toml_scalar(line.substr(eq + 1), ln + 1));
    }
    return table;
}

inline TomlTable parse_toml_file(const std::filesystem::path& path) {
    return parse_toml(read_file(path));
}

inline std::string toml_value_to_string(const TomlValue& v) {
    if (auto* b = std::get_if<bool>(&v.data)) return *b ? "true" : "false";
    if (auto* i = std::get_if<std::int64_t>(&v.data)) return std::to_string(*i);
    if (auto* d = std::get_if<double>(&v.data)) {
        std::string s = format_double(*d);
        // a float must stay a float on re-parse
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        return s;
    }
    if (auto* s = std::get_if<std::string>(&v.data)) {
        std::string out = "\"";
        for (char c : *s) {
            if (c == '"' || c == '\\') out += '\\';
            out += c;
        }
        return out + "\"";
    }
    const auto& arr = std::get<std::vector<TomlValue>>(v.data);
    std::string out = "[";
    for (std::size_t i = 0; i < arr.size(); ++i) {
        if (i) out += ", ";
        out += toml_value_to_string(arr[i]);
    }
    return out + "]";
}

inline std::string to_toml(const TomlTable& table) {
    std::string out;
    // unsectioned keys first
    const auto emit = [&](const TomlTable::Section& section) {
        for (const auto& [key, value] : section)
            out += key + " = " + toml_value_to_string(value) + "\n";
    };
    if (table.sections().count("")) emit(table.sections().at(""));
    for (const auto& [name, section] : table.sections()) {
        if (name.empty()) continue;
        if (!out.empty()) out += "\n";
        out += "[" + name + "]\n";
        emit(section);
    }
    return out;
}

}  // namespace phenotyper
