#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kbforge::text {

inline char ascii_lower(char c) noexcept {
    return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

// Word bytes are ASCII alphanumerics plus anything >= 0x80, so multi-byte
// UTF-8 sequences survive intact. Every other byte separates tokens.
inline bool is_word_byte(unsigned char c) noexcept {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

inline bool is_ascii_space(unsigned char c) noexcept {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_ascii_punct(unsigned char c) noexcept {
    return c < 0x80 && c > ' ' && !is_word_byte(c);
}

// Lowercased word tokens: maximal runs of word bytes.
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (is_word_byte(static_cast<unsigned char>(ch))) {
            cur.push_back(ascii_lower(ch));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

// Canonical form used for every phrase-identity test in the toolkit:
// lowercase, strip leading/trailing punctuation and whitespace, collapse
// internal whitespace runs to a single space. Internal punctuation stays.
inline std::string normalize_phrase(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    auto trimmable = [](unsigned char c) { return is_ascii_space(c) || is_ascii_punct(c); };
    while (b < e && trimmable(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && trimmable(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    std::string out;
    out.reserve(e - b);
    bool pending_space = false;
    for (std::size_t i = b; i < e; ++i) {
        const char ch = s[i];
        if (is_ascii_space(static_cast<unsigned char>(ch))) {
            pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(ascii_lower(ch));
    }
    return out;
}

inline std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) {
            out.append(sep);
        }
        out.append(tokens[i]);
    }
    return out;
}

}  // namespace kbforge::text
