#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace karma {

inline std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline bool contains(std::string_view haystack, std::string_view needle) {
    return haystack.find(needle) != std::string_view::npos;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        out.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

inline size_t word_count(std::string_view s) {
    return split_words(s).size();
}

// First `limit` whitespace-separated words, single-space joined.
inline std::string truncate_words(std::string_view s, size_t limit) {
    auto words = split_words(s);
    if (words.size() <= limit) return trim(s);
    std::string out;
    for (size_t i = 0; i < limit; ++i) {
        if (i) out.push_back(' ');
        out += words[i];
    }
    return out;
}

// Relation names are stored lowercase with underscores instead of whitespace.
inline std::string normalize_relation_name(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool last_space = false;
    for (char c : trim(raw)) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!last_space && !out.empty()) out.push_back('_');
            last_space = true;
        } else {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            last_space = false;
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

// Scores are serialized with at most 6 decimal places, trailing zeros trimmed.
inline std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    std::string s(buf);
    size_t dot = s.find('.');
    size_t last = s.find_last_not_of('0');
    if (last == dot) last = dot + 1;  // keep one digit after the dot
    s.erase(last + 1);
    return s;
}

// JSON string literal with escapes; UTF-8 payload bytes pass through.
inline std::string json_quote(std::string_view s) {
    std::string out = "\"";
    for (unsigned char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\b': out += "\\b"; break;
            case '\f': out += "\\f"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (c < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out.push_back(static_cast<char>(c));
                }
        }
    }
    out.push_back('"');
    return out;
}

namespace detail {

// Greek letters and common typographic symbols from scientific text, mapped to
// ASCII or minimal LaTeX markup. Unmapped non-ASCII codepoints become '?'.
inline const std::unordered_map<uint32_t, std::string>& translit_map() {
    static const std::unordered_map<uint32_t, std::string> map = {
        {0x03B1, "\\alpha"},   {0x03B2, "\\beta"},    {0x03B3, "\\gamma"},
        {0x03B4, "\\delta"},   {0x03B5, "\\epsilon"}, {0x03B6, "\\zeta"},
        {0x03B7, "\\eta"},     {0x03B8, "\\theta"},   {0x03B9, "\\iota"},
        {0x03BA, "\\kappa"},   {0x03BB, "\\lambda"},  {0x03BC, "\\mu"},
        {0x03BD, "\\nu"},      {0x03BE, "\\xi"},      {0x03C0, "\\pi"},
        {0x03C1, "\\rho"},     {0x03C3, "\\sigma"},   {0x03C4, "\\tau"},
        {0x03C5, "\\upsilon"}, {0x03C6, "\\phi"},     {0x03C7, "\\chi"},
        {0x03C8, "\\psi"},     {0x03C9, "\\omega"},   {0x0393, "\\Gamma"},
        {0x0394, "\\Delta"},   {0x0398, "\\Theta"},   {0x039B, "\\Lambda"},
        {0x03A3, "\\Sigma"},   {0x03A6, "\\Phi"},     {0x03A8, "\\Psi"},
        {0x03A9, "\\Omega"},   {0x00B5, "\\mu"},      {0x2013, "-"},
        {0x2014, "--"},        {0x2018, "'"},         {0x2019, "'"},
        {0x201C, "\""},        {0x201D, "\""},        {0x2026, "..."},
        {0x00D7, "\\times"},   {0x00B1, "\\pm"},      {0x2264, "<="},
        {0x2265, ">="},        {0x2192, "->"},        {0x2190, "<-"},
        {0x00B0, " deg"},      {0x00A0, " "},
    };
    return map;
}

// Decodes one UTF-8 codepoint at s[i]; advances i. Invalid bytes yield
// 0xFFFD and advance by one.
inline uint32_t utf8_next(std::string_view s, size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
        ++i;
        return c;
    }
    int len = 0;
    uint32_t cp = 0;
    if ((c & 0xE0) == 0xC0) {
        len = 2;
        cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
        len = 3;
        cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
        len = 4;
        cp = c & 0x07;
    } else {
        ++i;
        return 0xFFFD;
    }
    if (i + len > s.size()) {
        ++i;
        return 0xFFFD;
    }
    for (int k = 1; k < len; ++k) {
        unsigned char cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) {
            ++i;
            return 0xFFFD;
        }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

}  // namespace detail

// Non-ASCII characters become ASCII or minimal LaTeX markup ("\alpha");
// anything outside the map becomes '?'.
inline std::string transliterate(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    size_t i = 0;
    while (i < text.size()) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
            ++i;
            continue;
        }
        uint32_t cp = detail::utf8_next(text, i);
        auto it = detail::translit_map().find(cp);
        if (it != detail::translit_map().end()) {
            out += it->second;
        } else {
            out.push_back('?');
        }
    }
    return out;
}

// Collapses runs of spaces/tabs, trims line edges, and squeezes runs of blank
// lines down to a single blank line so paragraph boundaries survive.
inline std::string normalize_whitespace(std::string_view text) {
    std::vector<std::string> lines;
    std::string cur;
    for (char c : text) {
        if (c == '\r') continue;
        if (c == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    lines.push_back(cur);

    std::string out;
    bool pending_blank = false;
    bool wrote_any = false;
    for (auto& line : lines) {
        std::string collapsed;
        bool in_space = false;
        for (char c : line) {
            if (c == ' ' || c == '\t') {
                in_space = true;
            } else {
                if (in_space && !collapsed.empty()) collapsed.push_back(' ');
                in_space = false;
                collapsed.push_back(c);
            }
        }
        if (collapsed.empty()) {
            if (wrote_any) pending_blank = true;
            continue;
        }
        if (wrote_any) out += pending_blank ? "\n\n" : "\n";
        pending_blank = false;
        out += collapsed;
        wrote_any = true;
    }
    return out;
}

}  // namespace karma
