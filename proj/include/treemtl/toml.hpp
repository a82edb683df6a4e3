#pragma once

// Reader for the TOML subset used by run configs: comments, [tables],
// [[arrays.of.tables]], dotted headers, and key = value pairs whose values are
// strings, integers, floats, booleans or single-line arrays of those.
// The document is returned as JSON.

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/errors.hpp"

namespace treemtl::toml {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

inline std::vector<std::string> split_key(const std::string& key, long lineno) {
    std::vector<std::string> parts;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
        part = trim(part);
        if (part.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key segment in '" + key + "'");
        for (char c : part)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
                throw ConfigError("line " + std::to_string(lineno) + ": invalid key '" + key + "'");
        parts.push_back(part);
    }
    if (parts.empty()) throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    return parts;
}

class ValueParser {
public:
    ValueParser(const std::string& text, long lineno) : s_(text), line_(lineno) {}

    nlohmann::json parse_all() {
        nlohmann::json v = parse();
        skip_ws();
        if (pos_ != s_.size()) fail("unexpected trailing characters");
        return v;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("line " + std::to_string(line_) + ": " + what + " in value '" + s_ + "'");
    }

    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    nlohmann::json parse() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '"') return parse_string();
        if (c == '[') return parse_array();
        if (s_.compare(pos_, 4, "true") == 0) {
            pos_ += 4;
            return true;
        }
        if (s_.compare(pos_, 5, "false") == 0) {
            pos_ += 5;
            return false;
        }
        return parse_number();
    }

    nlohmann::json parse_string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("dangling escape");
                const char e = s_[pos_++];
                switch (e) {
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    case '\\': c = '\\'; break;
                    case '"': c = '"'; break;
                    default: fail(std::string("unsupported escape \\") + e);
                }
            }
            out += c;
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return out;
    }

    nlohmann::json parse_array() {
        ++pos_;
        nlohmann::json arr = nlohmann::json::array();
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return arr;
        }
        while (true) {
            arr.push_back(parse());
            skip_ws();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ',') {
                ++pos_;
                skip_ws();
                if (pos_ < s_.size() && s_[pos_] == ']') {
                    ++pos_;
                    return arr;
                }
                continue;
            }
            if (s_[pos_] == ']') {
                ++pos_;
                return arr;
            }
            fail("expected ',' or ']'");
        }
    }

    nlohmann::json parse_number() {
        std::size_t end = pos_;
        while (end < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[end])) || s_[end] == '+' || s_[end] == '-' ||
                                   s_[end] == '.' || s_[end] == '_'))
            ++end;
        std::string tok;
        for (std::size_t i = pos_; i < end; ++i)
            if (s_[i] != '_') tok += s_[i];
        if (tok.empty()) fail("expected a value");
        const bool is_float = tok.find_first_of(".eE") != std::string::npos && tok.find("0x") == std::string::npos;
        if (!is_float) {
            long long v = 0;
            const char* b = tok.data() + (tok[0] == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), v);
            if (ec != std::errc() || p != tok.data() + tok.size()) fail("malformed integer");
            pos_ = end;
            return v;
        }
        double d = 0;
        try {
            std::size_t used = 0;
            d = std::stod(tok, &used);
            if (used != tok.size()) fail("malformed float");
        } catch (const std::logic_error&) {
            fail("malformed float");
        }
        pos_ = end;
        return d;
    }

    std::string s_;
    long line_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses a single value (the right-hand side of `key = value`).
inline nlohmann::json parse_value(const std::string& text, long lineno = 0) {
    return detail::ValueParser(detail::trim(text), lineno).parse_all();
}

inline nlohmann::json parse(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    std::istringstream in(text);
    std::string raw;
    long lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.rfind("[[", 0) == 0) {
            if (line.size() < 4 || line.substr(line.size() - 2) != "]]")
                throw ConfigError("line " + std::to_string(lineno) + ": malformed array-of-tables header");
            const auto path = detail::split_key(line.substr(2, line.size() - 4), lineno);
            nlohmann::json* t = &root;
            for (std::size_t i = 0; i + 1 < path.size(); ++i) {
                t = &(*t)[path[i]];
                if (t->is_array()) t = &t->back();
            }
            auto& arr = (*t)[path.back()];
            if (arr.is_null()) arr = nlohmann::json::array();
            if (!arr.is_array()) throw ConfigError("line " + std::to_string(lineno) + ": '" + path.back() + "' is not an array of tables");
            arr.push_back(nlohmann::json::object());
            table = &arr.back();
        } else if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed table header");
            const auto path = detail::split_key(line.substr(1, line.size() - 2), lineno);
            nlohmann::json* t = &root;
            for (const auto& p : path) {
                t = &(*t)[p];
                if (t->is_null()) *t = nlohmann::json::object();
                if (t->is_array()) t = &t->back();
                if (!t->is_object()) throw ConfigError("line " + std::to_string(lineno) + ": '" + p + "' is not a table");
            }
            table = t;
        } else {
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            const auto path = detail::split_key(line.substr(0, eq), lineno);
            nlohmann::json* t = table;
            for (std::size_t i = 0; i + 1 < path.size(); ++i) t = &(*t)[path[i]];
            if (t->contains(path.back())) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + path.back() + "'");
            (*t)[path.back()] = parse_value(line.substr(eq + 1), lineno);
        }
    }
    return root;
}

inline nlohmann::json parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config file not found: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

}  // namespace treemtl::toml
