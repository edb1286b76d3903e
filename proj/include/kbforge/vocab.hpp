#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kbforge/errors.hpp"
#include "kbforge/text.hpp"

namespace kbforge {

using TokenId = int;

struct Special {
    static constexpr TokenId Pad = 0;
    static constexpr TokenId Unk = 1;
    static constexpr TokenId Mask = 2;
    static constexpr TokenId Bos = 3;
    static constexpr TokenId Eos = 4;
    static constexpr TokenId KpSep = 5;
    static constexpr std::size_t count = 6;

    static const std::array<std::string_view, count>& names() {
        static const std::array<std::string_view, count> n = {
            "<pad>", "<unk>", "<mask>", "<bos>", "<eos>", "<kp_sep>",
        };
        return n;
    }
};

// Word-level vocabulary. Ids are dense, specials pinned to 0..5. The
// special names contain '<'/'>' so whitespace-and-punctuation splitting of
// natural text can never produce them.
class Vocabulary {
public:
    Vocabulary() {
        for (auto name : Special::names()) {
            add_(std::string(name));
        }
    }

    // min_freq >= 1; max_size caps the total table, specials included.
    template <class DocRange>
    static Vocabulary build(const DocRange& docs, std::size_t min_freq, std::size_t max_size) {
        if (min_freq < 1) {
            throw UsageError("build_vocab: min_freq must be >= 1");
        }
        std::unordered_map<std::string, std::size_t> freq;
        for (const auto& doc : docs) {
            for (auto& tok : text::tokenize(doc.title)) {
                ++freq[std::move(tok)];
            }
            for (auto& tok : text::tokenize(doc.abstract_text)) {
                ++freq[std::move(tok)];
            }
        }
        std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
        std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) {
                return a.second > b.second;
            }
            return a.first < b.first;
        });
        Vocabulary v;
        for (auto& [tok, f] : items) {
            if (f < min_freq || v.size() >= max_size) {
                break;
            }
            v.add_(tok);
        }
        return v;
    }

    std::size_t size() const noexcept { return id_to_token_.size(); }

    // Unk for out-of-vocabulary tokens.
    TokenId id(std::string_view token) const {
        auto it = token_to_id_.find(std::string(token));
        return it == token_to_id_.end() ? Special::Unk : it->second;
    }

    bool contains(std::string_view token) const {
        return token_to_id_.count(std::string(token)) > 0;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
            throw DataError("decode: token id " + std::to_string(id) + " out of range (size " +
                            std::to_string(id_to_token_.size()) + ")");
        }
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    std::vector<TokenId> encode(std::string_view s) const {
        std::vector<TokenId> out;
        for (const auto& tok : text::tokenize(s)) {
            out.push_back(id(tok));
        }
        return out;
    }

    std::string decode(const std::vector<TokenId>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) {
                out.push_back(' ');
            }
            out += token(ids[i]);
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) {
            throw DataError("cannot open vocabulary file for writing: " + path);
        }
        for (const auto& tok : id_to_token_) {
            f << tok << '\n';
        }
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) {
            throw DataError("cannot open vocabulary file: " + path);
        }
        Vocabulary v;
        std::string line;
        std::size_t k = 0;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (k < Special::count) {
                if (line != Special::names()[k]) {
                    throw DataError("vocabulary file " + path + ": line " + std::to_string(k + 1) +
                                    " must be the special token " +
                                    std::string(Special::names()[k]));
                }
            } else {
                if (line.empty() || v.token_to_id_.count(line)) {
                    throw DataError("vocabulary file " + path + ": empty or duplicate token at line " +
                                    std::to_string(k + 1));
                }
                v.add_(line);
            }
            ++k;
        }
        if (k < Special::count) {
            throw DataError("vocabulary file " + path + ": missing special tokens");
        }
        return v;
    }

private:
    void add_(std::string tok) {
        token_to_id_.emplace(tok, static_cast<TokenId>(id_to_token_.size()));
        id_to_token_.push_back(std::move(tok));
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
};

}  // namespace kbforge
