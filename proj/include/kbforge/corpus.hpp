#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kbforge/errors.hpp"
#include "kbforge/rng.hpp"
#include "kbforge/text.hpp"
#include "kbforge/vocab.hpp"

namespace kbforge {

struct Document {
    std::string id;
    std::string title;
    std::string abstract_text;
    std::vector<std::string> keyphrases;

    std::string full_text() const { return title + " " + abstract_text; }
};

struct KeyphraseSpan {
    std::size_t start = 0;      // token index, inclusive
    std::size_t end = 0;        // token index, exclusive
    std::string surface;        // normalized keyphrase string
    std::size_t source_index = 0;

    std::size_t length() const noexcept { return end - start; }
};

struct AlignedDocument {
    Document doc;
    std::vector<TokenId> tokens;  // encode(title + " " + abstract)
    std::vector<KeyphraseSpan> present_spans;        // start-ordered, non-overlapping
    std::vector<std::string> absent_keyphrases;      // source order
    std::size_t dropped_empty_keyphrases = 0;
};

struct CorpusLineError {
    std::size_t line = 0;  // 1-based
    std::string message;
};

struct CorpusLoad {
    std::vector<Document> docs;
    std::vector<CorpusLineError> errors;  // populated only in lenient mode
};

namespace detail {

inline Document parse_corpus_line(const std::string& line, std::size_t line_no) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw DataError("line " + std::to_string(line_no) + ": not a JSON object");
    }
    static const char* const required[] = {"id", "title", "abstract", "keywords"};
    for (const char* key : required) {
        if (!j.contains(key)) {
            throw DataError("line " + std::to_string(line_no) + ": missing key \"" +
                            key + "\"");
        }
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "id" && it.key() != "title" && it.key() != "abstract" &&
            it.key() != "keywords") {
            throw DataError("line " + std::to_string(line_no) + ": unexpected key \"" +
                            it.key() + "\"");
        }
    }
    if (!j["id"].is_string() || !j["title"].is_string() || !j["abstract"].is_string()) {
        throw DataError("line " + std::to_string(line_no) +
                        ": \"id\", \"title\", \"abstract\" must be strings");
    }
    if (!j["keywords"].is_array()) {
        throw DataError("line " + std::to_string(line_no) +
                        ": \"keywords\" must be an array of strings");
    }
    Document d;
    d.id = j["id"].get<std::string>();
    if (d.id.empty()) {
        throw DataError("line " + std::to_string(line_no) + ": \"id\" must be non-empty");
    }
    d.title = j["title"].get<std::string>();
    d.abstract_text = j["abstract"].get<std::string>();
    for (const auto& kw : j["keywords"]) {
        if (!kw.is_string()) {
            throw DataError("line " + std::to_string(line_no) +
                            ": \"keywords\" must be an array of strings");
        }
        d.keyphrases.push_back(kw.get<std::string>());
    }
    return d;
}

}  // namespace detail

// JSONL, one document per line. In lenient mode malformed lines become error
// records and are skipped; otherwise the first bad line is fatal.
inline CorpusLoad load_corpus(const std::string& path, bool lenient = false,
                              std::optional<std::size_t> limit = std::nullopt) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw DataError("cannot open corpus file: " + path);
    }
    CorpusLoad out;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (limit && out.docs.size() >= *limit) {
            break;
        }
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        bool blank = true;
        for (char c : line) {
            if (!text::is_ascii_space(static_cast<unsigned char>(c))) {
                blank = false;
                break;
            }
        }
        if (blank) {
            continue;
        }
        try {
            Document d = detail::parse_corpus_line(line, line_no);
            if (!seen_ids.insert(d.id).second) {
                throw DataError("line " + std::to_string(line_no) + ": duplicate id \"" +
                                d.id + "\"");
            }
            out.docs.push_back(std::move(d));
        } catch (const DataError& e) {
            if (!lenient) {
                throw;
            }
            out.errors.push_back({line_no, e.what()});
        }
    }
    return out;
}

// Greedy leftmost-longest, case-insensitive token-subsequence matching of each
// keyphrase against the token stream. Overlaps resolve to the earlier-starting,
// then longer span; unmatched keyphrases land in absent_keyphrases.
inline AlignedDocument align_keyphrases(Document doc, const Vocabulary& vocab) {
    AlignedDocument out;
    out.tokens = vocab.encode(doc.full_text());

    struct Candidate {
        std::size_t start, end, source_index;
        std::string surface;
    };
    std::vector<Candidate> candidates;
    std::vector<int> status(doc.keyphrases.size(), 0);  // 0 absent, 1 present, 2 dropped
    std::vector<std::string> normalized(doc.keyphrases.size());

    for (std::size_t k = 0; k < doc.keyphrases.size(); ++k) {
        normalized[k] = text::normalize_phrase(doc.keyphrases[k]);
        if (normalized[k].empty()) {
            status[k] = 2;
            ++out.dropped_empty_keyphrases;
            continue;
        }
        std::vector<TokenId> needle = vocab.encode(normalized[k]);
        // A phrase with an out-of-vocabulary word cannot satisfy the
        // decode-equals-surface soundness rule; treat it as absent.
        bool has_unk = std::any_of(needle.begin(), needle.end(),
                                   [](TokenId t) { return t == Special::Unk; });
        if (needle.empty() || has_unk || needle.size() > out.tokens.size()) {
            continue;
        }
        for (std::size_t s = 0; s + needle.size() <= out.tokens.size(); ++s) {
            if (std::equal(needle.begin(), needle.end(), out.tokens.begin() + s)) {
                candidates.push_back({s, s + needle.size(), k, normalized[k]});
            }
        }
    }

    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.start != b.start) {
            return a.start < b.start;
        }
        if (a.end != b.end) {
            return a.end > b.end;  // longer first
        }
        return a.source_index < b.source_index;
    });

    std::size_t claimed_end = 0;
    for (const auto& c : candidates) {
        if (c.start >= claimed_end) {
            out.present_spans.push_back({c.start, c.end, c.surface, c.source_index});
            status[c.source_index] = 1;
            claimed_end = c.end;
        }
    }
    for (std::size_t k = 0; k < doc.keyphrases.size(); ++k) {
        if (status[k] == 0) {
            out.absent_keyphrases.push_back(normalized[k]);
        }
    }
    out.doc = std::move(doc);
    return out;
}

struct KeyphraseUniverse {
    std::vector<std::string> phrases;         // normalized, unique
    std::vector<std::size_t> token_lengths;   // word-token count per phrase
    std::size_t cap = 500000;

    std::size_t size() const noexcept { return phrases.size(); }
    bool empty() const noexcept { return phrases.empty(); }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) {
            throw DataError("cannot open universe file for writing: " + path);
        }
        for (const auto& p : phrases) {
            f << p << '\n';
        }
    }

    static KeyphraseUniverse load(const std::string& path, std::size_t cap = 500000) {
        std::ifstream f(path, std::ios::binary);
        if (!f) {
            throw DataError("cannot open universe file: " + path);
        }
        KeyphraseUniverse u;
        u.cap = cap;
        std::unordered_set<std::string> seen;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (line.empty()) {
                continue;
            }
            std::size_t len = text::tokenize(line).size();
            if (len == 0 || !seen.insert(line).second) {
                throw DataError("universe file " + path + ": line " +
                                std::to_string(line_no) + " is duplicate or tokenizes empty");
            }
            u.phrases.push_back(line);
            u.token_lengths.push_back(len);
        }
        if (u.phrases.size() > u.cap) {
            throw DataError("universe file " + path + " exceeds cap " + std::to_string(cap));
        }
        return u;
    }
};

// Unique normalized keyphrases over the stream, shuffled under seed, capped.
template <class AlignedRange>
inline KeyphraseUniverse build_universe(const AlignedRange& docs, std::size_t cap,
                                        std::uint64_t seed) {
    if (cap < 1) {
        throw UsageError("build_universe: cap must be >= 1");
    }
    KeyphraseUniverse u;
    u.cap = cap;
    std::unordered_set<std::string> seen;
    auto consider = [&](const std::string& phrase) {
        if (phrase.empty() || !seen.insert(phrase).second) {
            return;
        }
        u.phrases.push_back(phrase);
    };
    for (const auto& ad : docs) {
        for (const auto& span : ad.present_spans) {
            consider(span.surface);
        }
        for (const auto& a : ad.absent_keyphrases) {
            consider(a);
        }
    }
    SplitMix64 rng(seed);
    rng.shuffle(u.phrases);
    if (u.phrases.size() > cap) {
        u.phrases.resize(cap);
    }
    u.token_lengths.reserve(u.phrases.size());
    for (const auto& p : u.phrases) {
        u.token_lengths.push_back(text::tokenize(p).size());
    }
    return u;
}

// Uniform over phrases with token length <= max_tokens and surface != original.
// Bounded rejection sampling, then a cyclic linear scan from a random start.
inline std::optional<std::string> sample_replacement(const KeyphraseUniverse& universe,
                                                     const std::string& original,
                                                     SplitMix64& rng,
                                                     std::size_t max_tokens) {
    const std::size_t n = universe.phrases.size();
    if (n == 0) {
        return std::nullopt;
    }
    auto eligible = [&](std::size_t i) {
        return universe.token_lengths[i] <= max_tokens && universe.phrases[i] != original;
    };
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::size_t i = static_cast<std::size_t>(rng.below(n));
        if (eligible(i)) {
            return universe.phrases[i];
        }
    }
    std::size_t start = static_cast<std::size_t>(rng.below(n));
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t i = (start + k) % n;
        if (eligible(i)) {
            return universe.phrases[i];
        }
    }
    return std::nullopt;
}

}  // namespace kbforge
