#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kbforge/corpus.hpp"
#include "kbforge/errors.hpp"
#include "kbforge/rng.hpp"
#include "kbforge/vocab.hpp"

namespace kbforge {

struct PerturbationConfig {
    double p_mlm = 0.05;
    double p_kp_mask = 0.2;
    double p_kp_replace = 0.4;     // applied among non-masked spans
    std::size_t max_infill_span = 10;
    std::size_t max_replacements = 20;
    std::size_t max_seq_len = 512;
    std::uint64_t seed = 0;

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(p_mlm) || !prob(p_kp_mask) || !prob(p_kp_replace) ||
            p_kp_mask + p_kp_replace > 1.0) {
            throw UsageError("perturb: probabilities must lie in [0,1] with "
                             "p_kp_mask + p_kp_replace <= 1");
        }
        if (max_infill_span < 1) {
            throw UsageError("perturb: max_infill_span must be >= 1");
        }
        if (max_seq_len < 1) {
            throw UsageError("perturb: max_seq_len must be >= 1");
        }
    }
};

struct MlmRecord {
    std::size_t position = 0;  // index into the perturbed sequence
    TokenId original_id = 0;
};

struct InfillRecord {
    std::size_t mask_position = 0;   // index in the perturbed sequence
    std::size_t left_boundary = 0;   // mask_position - 1
    std::size_t right_boundary = 0;  // mask_position + 1
    std::vector<TokenId> original_tokens;
    std::size_t true_length = 0;     // z_m = |original_tokens|
    std::size_t original_start = 0;  // indices in the original sequence
    std::size_t original_end = 0;
};

struct KrcRecord {
    std::size_t span_start = 0;  // indices in the perturbed sequence
    std::size_t span_end = 0;
    int label = 0;  // 0 = original, 1 = replaced
    std::string original_surface;
    std::optional<std::string> replacement_surface;
};

struct KbirExample {
    std::vector<TokenId> perturbed;
    std::vector<MlmRecord> mlm;
    std::vector<InfillRecord> infill;
    std::vector<KrcRecord> krc;
    std::size_t replacement_unavailable = 0;  // replace marks demoted to label 0
    std::size_t krc_edge_dropped = 0;         // label-0 spans touching a sequence edge
    std::size_t records_truncated = 0;        // records dropped by max_seq_len
};

struct KeyBartExample {
    std::vector<TokenId> perturbed_input;
    std::vector<TokenId> target;  // BOS ... EOS, no MASK
};

// Per-document tallies feeding perturb_stats; all counts are pre-truncation.
struct PerturbCounts {
    std::size_t nonspan_tokens = 0;
    std::size_t mlm_marks = 0;
    std::size_t mask_eligible_spans = 0;  // interior spans with length <= max_infill_span
    std::size_t masked_spans = 0;
    std::size_t replace_eligible_spans = 0;  // interior spans of any length
    std::size_t replaced_spans = 0;
    std::size_t max_masked_span_tokens = 0;
    std::size_t replacement_unavailable = 0;
};

// Deterministic corruption of one aligned document. The generator is derived
// from (seed, doc.id) alone, so documents may be processed in any order or on
// any number of workers without changing the result. Draw order within a
// document: one uniform per present span (document order), then one phrase
// sample per surviving replace mark (document order), then one uniform per
// non-keyphrase token (position order).
inline KbirExample perturb_kbir_counted(const AlignedDocument& doc,
                                        const PerturbationConfig& cfg,
                                        const KeyphraseUniverse& universe,
                                        const Vocabulary& vocab,
                                        PerturbCounts* counts) {
    cfg.validate();
    SplitMix64 rng = document_rng(cfg.seed, doc.doc.id);
    const std::vector<TokenId>& toks = doc.tokens;
    const std::size_t n = toks.size();
    const std::size_t n_spans = doc.present_spans.size();

    KbirExample ex;
    PerturbCounts local;

    enum class Act { none, mask_span, replace };
    std::vector<Act> act(n_spans, Act::none);

    // Spans touching either sequence edge have no boundary token on that side,
    // so neither the infill nor the replacement-classification supervision can
    // reference them; they are left untouched.
    for (std::size_t i = 0; i < n_spans; ++i) {
        const KeyphraseSpan& sp = doc.present_spans[i];
        const bool interior = sp.start >= 1 && sp.end <= n - 1;
        const bool can_mask = interior && sp.length() <= cfg.max_infill_span;
        const double u = rng.uniform();
        if (can_mask) {
            ++local.mask_eligible_spans;
            if (u < cfg.p_kp_mask) {
                act[i] = Act::mask_span;
            } else if (u < cfg.p_kp_mask + cfg.p_kp_replace) {
                act[i] = Act::replace;
            }
        } else if (interior) {
            if (u < cfg.p_kp_replace) {
                act[i] = Act::replace;
            }
        }
        if (interior) {
            ++local.replace_eligible_spans;
        }
    }

    std::size_t replace_marks = 0;
    for (std::size_t i = 0; i < n_spans; ++i) {
        if (act[i] == Act::replace) {
            if (replace_marks < cfg.max_replacements) {
                ++replace_marks;
            } else {
                act[i] = Act::none;
            }
        }
    }

    std::vector<std::string> replacement(n_spans);
    for (std::size_t i = 0; i < n_spans; ++i) {
        if (act[i] != Act::replace) {
            continue;
        }
        auto r = sample_replacement(universe, doc.present_spans[i].surface, rng,
                                    cfg.max_infill_span);
        if (r) {
            replacement[i] = std::move(*r);
        } else {
            act[i] = Act::none;
            ++ex.replacement_unavailable;
            ++local.replacement_unavailable;
        }
    }

    std::vector<bool> in_span(n, false);
    for (const KeyphraseSpan& sp : doc.present_spans) {
        for (std::size_t p = sp.start; p < sp.end; ++p) {
            in_span[p] = true;
        }
    }
    std::vector<std::size_t> mlm_positions;
    for (std::size_t p = 0; p < n; ++p) {
        if (in_span[p]) {
            continue;
        }
        ++local.nonspan_tokens;
        if (rng.uniform() < cfg.p_mlm) {
            mlm_positions.push_back(p);
        }
    }
    local.mlm_marks = mlm_positions.size();

    // One left-to-right rebuild applies every edit and yields the perturbed
    // coordinate of each record as a side effect.
    struct Seg {
        std::size_t start, end;
        bool is_span;
        std::size_t idx;  // span index, unused for mlm segments
    };
    std::vector<Seg> segs;
    segs.reserve(n_spans + mlm_positions.size());
    for (std::size_t i = 0; i < n_spans; ++i) {
        segs.push_back({doc.present_spans[i].start, doc.present_spans[i].end, true, i});
    }
    for (std::size_t p : mlm_positions) {
        segs.push_back({p, p + 1, false, 0});
    }
    std::sort(segs.begin(), segs.end(),
              [](const Seg& a, const Seg& b) { return a.start < b.start; });

    std::vector<TokenId>& out = ex.perturbed;
    out.reserve(n + 4);
    std::size_t cursor = 0;
    for (const Seg& sg : segs) {
        out.insert(out.end(), toks.begin() + cursor, toks.begin() + sg.start);
        if (!sg.is_span) {
            ex.mlm.push_back({out.size(), toks[sg.start]});
            out.push_back(Special::Mask);
        } else {
            const KeyphraseSpan& sp = doc.present_spans[sg.idx];
            switch (act[sg.idx]) {
                case Act::mask_span: {
                    InfillRecord rec;
                    rec.mask_position = out.size();
                    rec.left_boundary = rec.mask_position - 1;
                    rec.right_boundary = rec.mask_position + 1;
                    rec.original_tokens.assign(toks.begin() + sp.start, toks.begin() + sp.end);
                    rec.true_length = sp.length();
                    rec.original_start = sp.start;
                    rec.original_end = sp.end;
                    out.push_back(Special::Mask);
                    ++local.masked_spans;
                    local.max_masked_span_tokens =
                        std::max(local.max_masked_span_tokens, rec.true_length);
                    ex.infill.push_back(std::move(rec));
                    break;
                }
                case Act::replace: {
                    KrcRecord rec;
                    rec.span_start = out.size();
                    std::vector<TokenId> ids = vocab.encode(replacement[sg.idx]);
                    out.insert(out.end(), ids.begin(), ids.end());
                    rec.span_end = out.size();
                    rec.label = 1;
                    rec.original_surface = sp.surface;
                    rec.replacement_surface = replacement[sg.idx];
                    ++local.replaced_spans;
                    ex.krc.push_back(std::move(rec));
                    break;
                }
                case Act::none: {
                    const std::size_t s = out.size();
                    out.insert(out.end(), toks.begin() + sp.start, toks.begin() + sp.end);
                    if (sp.start == 0 || sp.end == n) {
                        ++ex.krc_edge_dropped;
                    } else {
                        ex.krc.push_back({s, out.size(), 0, sp.surface, std::nullopt});
                    }
                    break;
                }
            }
        }
        cursor = sg.end;
    }
    out.insert(out.end(), toks.begin() + cursor, toks.end());

    if (out.size() > cfg.max_seq_len) {
        out.resize(cfg.max_seq_len);
        const std::size_t keep = cfg.max_seq_len;
        auto drop_count = ex.records_truncated;
        std::vector<MlmRecord> mlm_kept;
        for (auto& r : ex.mlm) {
            if (r.position < keep) {
                mlm_kept.push_back(r);
            } else {
                ++drop_count;
            }
        }
        ex.mlm = std::move(mlm_kept);
        std::vector<InfillRecord> inf_kept;
        for (auto& r : ex.infill) {
            if (r.right_boundary < keep) {
                inf_kept.push_back(std::move(r));
            } else {
                ++drop_count;
            }
        }
        ex.infill = std::move(inf_kept);
        std::vector<KrcRecord> krc_kept;
        for (auto& r : ex.krc) {
            if (r.span_end < keep) {  // boundary token at span_end must survive
                krc_kept.push_back(std::move(r));
            } else {
                ++drop_count;
            }
        }
        ex.krc = std::move(krc_kept);
        ex.records_truncated = drop_count;
    }

    if (counts) {
        *counts = local;
    }
    return ex;
}

inline KbirExample perturb_kbir(const AlignedDocument& doc, const PerturbationConfig& cfg,
                                const KeyphraseUniverse& universe, const Vocabulary& vocab) {
    return perturb_kbir_counted(doc, cfg, universe, vocab, nullptr);
}

enum class CatSeqOrdering { occurrence, presabs };

// Dedup preserving first occurrence; presabs lists present phrases first,
// then absent ones; phrases joined with KP_SEP, wrapped in BOS/EOS.
inline std::vector<TokenId> build_catseq(const std::vector<std::string>& phrases,
                                         CatSeqOrdering ordering,
                                         const std::vector<bool>& present_flags,
                                         const Vocabulary& vocab) {
    std::vector<const std::string*> ordered;
    ordered.reserve(phrases.size());
    if (ordering == CatSeqOrdering::presabs) {
        if (present_flags.size() != phrases.size()) {
            throw UsageError("build_catseq: presabs ordering needs one flag per phrase");
        }
        for (std::size_t i = 0; i < phrases.size(); ++i) {
            if (present_flags[i]) {
                ordered.push_back(&phrases[i]);
            }
        }
        for (std::size_t i = 0; i < phrases.size(); ++i) {
            if (!present_flags[i]) {
                ordered.push_back(&phrases[i]);
            }
        }
    } else {
        for (const auto& p : phrases) {
            ordered.push_back(&p);
        }
    }
    std::vector<TokenId> out;
    out.push_back(Special::Bos);
    std::unordered_set<std::string> seen;
    bool first = true;
    for (const std::string* p : ordered) {
        if (p->empty() || !seen.insert(*p).second) {
            continue;
        }
        std::vector<TokenId> ids = vocab.encode(*p);
        if (ids.empty()) {
            continue;
        }
        if (!first) {
            out.push_back(Special::KpSep);
        }
        out.insert(out.end(), ids.begin(), ids.end());
        first = false;
    }
    out.push_back(Special::Eos);
    return out;
}

enum class KeyBartMode { keyphrases, document };

// Input corrupted exactly as perturb_kbir (same generator derivation, records
// discarded); target is the CatSeq of present keyphrases in occurrence order,
// or the original document for denoising mode.
inline KeyBartExample perturb_keybart_pair(const AlignedDocument& doc,
                                           const PerturbationConfig& cfg,
                                           const KeyphraseUniverse& universe,
                                           const Vocabulary& vocab, KeyBartMode mode) {
    KbirExample kb = perturb_kbir(doc, cfg, universe, vocab);
    KeyBartExample ex;
    ex.perturbed_input = std::move(kb.perturbed);
    if (mode == KeyBartMode::keyphrases) {
        std::vector<std::string> phrases;
        phrases.reserve(doc.present_spans.size());
        for (const KeyphraseSpan& sp : doc.present_spans) {
            phrases.push_back(sp.surface);
        }
        std::vector<bool> flags(phrases.size(), true);
        ex.target = build_catseq(phrases, CatSeqOrdering::occurrence, flags, vocab);
    } else {
        ex.target.push_back(Special::Bos);
        std::size_t keep = doc.tokens.size();
        if (cfg.max_seq_len >= 2) {
            keep = std::min(keep, cfg.max_seq_len - 2);
        }
        ex.target.insert(ex.target.end(), doc.tokens.begin(), doc.tokens.begin() + keep);
        ex.target.push_back(Special::Eos);
    }
    return ex;
}

// Inverse of perturb_kbir for untruncated examples: reinsert the recorded
// originals at every edit site.
inline std::vector<TokenId> reconstruct_original(const KbirExample& ex,
                                                 const Vocabulary& vocab) {
    struct Inverse {
        std::size_t start, end;
        std::vector<TokenId> payload;
    };
    const std::size_t len = ex.perturbed.size();
    std::vector<Inverse> invs;
    for (const MlmRecord& r : ex.mlm) {
        if (r.position >= len || ex.perturbed[r.position] != Special::Mask) {
            throw DataError("reconstruction mismatch: token-mask record does not point at a mask");
        }
        invs.push_back({r.position, r.position + 1, {r.original_id}});
    }
    for (const InfillRecord& r : ex.infill) {
        if (r.mask_position >= len || ex.perturbed[r.mask_position] != Special::Mask ||
            r.original_tokens.size() != r.true_length || r.true_length == 0) {
            throw DataError("reconstruction mismatch: span-infill record inconsistent");
        }
        invs.push_back({r.mask_position, r.mask_position + 1, r.original_tokens});
    }
    for (const KrcRecord& r : ex.krc) {
        if (r.label == 0) {
            continue;
        }
        if (!r.replacement_surface || r.span_start >= r.span_end || r.span_end > len) {
            throw DataError("reconstruction mismatch: replacement record inconsistent");
        }
        invs.push_back({r.span_start, r.span_end, vocab.encode(r.original_surface)});
    }
    std::sort(invs.begin(), invs.end(),
              [](const Inverse& a, const Inverse& b) { return a.start < b.start; });
    std::vector<TokenId> out;
    out.reserve(len);
    std::size_t cursor = 0;
    for (const Inverse& iv : invs) {
        if (iv.start < cursor) {
            throw DataError("reconstruction mismatch: overlapping records");
        }
        out.insert(out.end(), ex.perturbed.begin() + cursor, ex.perturbed.begin() + iv.start);
        out.insert(out.end(), iv.payload.begin(), iv.payload.end());
        cursor = iv.end;
    }
    out.insert(out.end(), ex.perturbed.begin() + cursor, ex.perturbed.end());
    return out;
}

struct PerturbStats {
    double mlm_rate = 0.0;          // masked fraction of non-keyphrase tokens
    double kp_mask_rate = 0.0;      // masked fraction of mask-eligible spans
    double kp_replace_rate = 0.0;   // replaced fraction of eligible (interior) spans
    std::size_t max_masked_span_tokens = 0;
    std::size_t max_replacements_per_doc = 0;
    std::size_t documents = 0;
    std::size_t replacement_unavailable = 0;
};

template <class AlignedRange>
inline PerturbStats perturb_stats(const AlignedRange& docs, const PerturbationConfig& cfg,
                                  const KeyphraseUniverse& universe, const Vocabulary& vocab) {
    PerturbStats st;
    std::size_t nonspan = 0, mlm = 0, mask_elig = 0, masked = 0, repl_elig = 0, replaced = 0;
    for (const auto& ad : docs) {
        PerturbCounts c;
        (void)perturb_kbir_counted(ad, cfg, universe, vocab, &c);
        nonspan += c.nonspan_tokens;
        mlm += c.mlm_marks;
        mask_elig += c.mask_eligible_spans;
        masked += c.masked_spans;
        repl_elig += c.replace_eligible_spans;
        replaced += c.replaced_spans;
        st.max_masked_span_tokens = std::max(st.max_masked_span_tokens, c.max_masked_span_tokens);
        st.max_replacements_per_doc = std::max(st.max_replacements_per_doc, c.replaced_spans);
        st.replacement_unavailable += c.replacement_unavailable;
        ++st.documents;
    }
    if (st.documents == 0) {
        throw UsageError("perturb_stats: need at least one document");
    }
    st.mlm_rate = nonspan ? static_cast<double>(mlm) / static_cast<double>(nonspan) : 0.0;
    st.kp_mask_rate = mask_elig ? static_cast<double>(masked) / static_cast<double>(mask_elig) : 0.0;
    st.kp_replace_rate =
        repl_elig ? static_cast<double>(replaced) / static_cast<double>(repl_elig) : 0.0;
    return st;
}

inline nlohmann::json kbir_example_to_json(const KbirExample& ex) {
    nlohmann::json j;
    j["perturbed"] = ex.perturbed;
    j["mlm"] = nlohmann::json::array();
    for (const auto& r : ex.mlm) {
        j["mlm"].push_back({{"position", r.position}, {"original_id", r.original_id}});
    }
    j["infill"] = nlohmann::json::array();
    for (const auto& r : ex.infill) {
        j["infill"].push_back({{"mask_position", r.mask_position},
                               {"left_boundary", r.left_boundary},
                               {"right_boundary", r.right_boundary},
                               {"original_tokens", r.original_tokens},
                               {"true_length", r.true_length},
                               {"original_start", r.original_start},
                               {"original_end", r.original_end}});
    }
    j["krc"] = nlohmann::json::array();
    for (const auto& r : ex.krc) {
        nlohmann::json k = {{"span_start", r.span_start},
                            {"span_end", r.span_end},
                            {"label", r.label},
                            {"original_surface", r.original_surface}};
        if (r.replacement_surface) {
            k["replacement_surface"] = *r.replacement_surface;
        } else {
            k["replacement_surface"] = nullptr;
        }
        j["krc"].push_back(std::move(k));
    }
    return j;
}

inline nlohmann::json keybart_example_to_json(const KeyBartExample& ex) {
    return nlohmann::json{{"input", ex.perturbed_input}, {"target", ex.target}};
}

}  // namespace kbforge
