#pragma once

// Greedy and beam-search generation plus toy-scale evaluation metrics.
//
// Generation is method-agnostic: a primer forward builds the initial past
// (for the three-stage pipeline this runs encode and re-encode exactly once
// per source sentence, shared read-only by every hypothesis), then the loop
// feeds one token at a time. Beam scores are length-normalized log
// probability; argmax ties break toward the lowest token id so decoding is
// deterministic.

#include <algorithm>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "msp/training.hpp"

namespace msp {

// Inference bundle: a frozen backbone plus the baked prompt object for the
// method being decoded.
struct TranslationModel {
    const Lm* lm = nullptr;
    Method method = Method::msp;
    StagePrompts stage_prompts;  // msp / msp-shared (baked)
    Tensor prefix;               // prefix / prefix-double
    Tensor eprompt;              // prompt
};

struct GenState {
    PastSequence past;  // everything generated tokens may attend to
    Tensor g;           // hidden state scoring the next token
    int next_pos = 0;   // position id for the next fed token
};

// Run the method's source-side forward once and return the state from which
// target tokens are generated.
inline GenState prepare_generation(const TranslationModel& model, const std::vector<int>& x) {
    const Lm& lm = *model.lm;
    GenState st;
    switch (model.method) {
        case Method::msp:
        case Method::msp_shared: {
            const SeqResult enc = msp_encode(lm, x, model.stage_prompts);
            const SeqResult renc = msp_reencode(lm, x, model.stage_prompts, enc.chunk);
            st.past = prompt_past(model.stage_prompts.decode, lm.cfg());
            st.past.append(renc.chunk);
            const SeqResult first = lm.step(lm.embed(kBos, 0), st.past);
            PastChunk bos_chunk = first.chunk;
            st.past.append(std::move(bos_chunk));
            st.g = first.g;
            st.next_pos = 1;
            break;
        }
        case Method::prefix:
        case Method::prefix_double: {
            std::vector<int> primer = x;
            if (model.method == Method::prefix_double) {
                primer.push_back(kSep1);
                primer.insert(primer.end(), x.begin(), x.end());
                primer.push_back(kSep2);
            } else {
                primer.push_back(kSep);
            }
            st.past = prompt_past(model.prefix, lm.cfg());
            const SeqResult r = lm.forward_seq(primer, st.past, 0);
            st.past.append(r.chunk);
            st.g = slice_rows(r.g, r.g.rows() - 1, r.g.rows());
            st.next_pos = static_cast<int>(primer.size());
            break;
        }
        case Method::prompt: {
            std::vector<int> primer = x;
            primer.push_back(kSep);
            const SeqResult r = prompt_tuning_forward(lm, primer, model.eprompt);
            st.past.append(r.chunk);
            st.g = slice_rows(r.g, r.g.rows() - 1, r.g.rows());
            st.next_pos = (model.eprompt.defined() ? model.eprompt.rows() : 0) +
                          static_cast<int>(primer.size());
            break;
        }
    }
    return st;
}

// Log probabilities over the vocabulary for the next token.
inline std::vector<double> next_log_probs(const Lm& lm, const Tensor& g) {
    const Tensor logits = lm.logits(g);
    const int v = logits.cols();
    const float* row = logits.data().data();
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) out[static_cast<size_t>(j)] = row[j] - lse;
    return out;
}

inline int default_max_len(int source_len) { return 2 * source_len + 8; }

struct Translation {
    std::vector<int> tokens;  // without BOS/EOS
    double score = 0.0;       // logprob / length over emitted tokens incl. EOS
    bool truncated = false;   // hit max_len before EOS
};

// A decode session yields next-token log probabilities and can be advanced
// by one emitted token. Sessions are cheap to copy (hypotheses share the
// source-side cache and own only their generated suffix).
struct LmSession {
    const Lm* lm = nullptr;
    PastSequence past;
    Tensor g;
    int next_pos = 0;

    std::vector<double> log_probs() const { return next_log_probs(*lm, g); }

    LmSession advanced(int token) const {
        LmSession s;
        s.lm = lm;
        s.past = past;
        const SeqResult r = lm->step(lm->embed(token, next_pos), s.past);
        s.past.append(r.chunk);
        s.g = r.g;
        s.next_pos = next_pos + 1;
        return s;
    }
};

// Argmax decoding; ties break toward the lowest token id.
template <class Session>
Translation greedy_core(const Session& initial, int max_len) {
    Session st = initial;
    Translation out;
    double logp = 0.0;
    int emitted = 0;
    while (true) {
        const std::vector<double> lp = st.log_probs();
        int best = 0;
        for (int j = 1; j < static_cast<int>(lp.size()); ++j)
            if (lp[static_cast<size_t>(j)] > lp[static_cast<size_t>(best)]) best = j;
        logp += lp[static_cast<size_t>(best)];
        ++emitted;
        if (best == kEos) break;
        out.tokens.push_back(best);
        if (emitted >= max_len) {
            out.truncated = true;
            break;
        }
        st = st.advanced(best);
    }
    out.score = logp / static_cast<double>(emitted);
    return out;
}

// Standard length-normalized beam search (score = logprob / emitted length).
template <class Session>
Translation beam_core(const Session& initial, int k, int max_len) {
    if (k < 1) throw std::invalid_argument("beam_search: beam size must be >= 1");

    struct Hyp {
        std::vector<int> tokens;
        double logp = 0.0;
        Session session;
    };
    std::vector<Hyp> live(1);
    live[0].session = initial;

    struct Finished {
        std::vector<int> tokens;
        double norm_score;
        bool truncated;
    };
    std::vector<Finished> finished;

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        struct Cand {
            int hyp;
            int token;
            double logp;
        };
        std::vector<Cand> cands;
        for (size_t h = 0; h < live.size(); ++h) {
            const std::vector<double> lp = live[h].session.log_probs();
            for (int j = 0; j < static_cast<int>(lp.size()); ++j)
                cands.push_back({static_cast<int>(h), j, live[h].logp + lp[static_cast<size_t>(j)]});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            if (a.token != b.token) return a.token < b.token;
            return a.hyp < b.hyp;
        });

        // Top-k candidates overall; an EOS candidate retires to the finished
        // set and still consumes its beam slot (this is what makes k=1
        // coincide with greedy decoding).
        std::vector<Hyp> next;
        int slots = 0;
        for (const Cand& c : cands) {
            if (slots >= k) break;
            ++slots;
            const Hyp& parent = live[static_cast<size_t>(c.hyp)];
            const int emitted = static_cast<int>(parent.tokens.size()) + 1;
            if (c.token == kEos) {
                finished.push_back({parent.tokens, c.logp / static_cast<double>(emitted), false});
                continue;
            }
            Hyp h;
            h.tokens = parent.tokens;
            h.tokens.push_back(c.token);
            h.logp = c.logp;
            h.session = parent.session.advanced(c.token);
            next.push_back(std::move(h));
        }
        live = std::move(next);
    }

    // any hypothesis still alive at max_len is a truncated candidate
    for (const Hyp& h : live) {
        if (h.tokens.empty()) continue;
        finished.push_back({h.tokens, h.logp / static_cast<double>(h.tokens.size()), true});
    }
    if (finished.empty()) return {{}, -1e300, true};

    const Finished* best = &finished[0];
    for (const auto& f : finished)
        if (f.norm_score > best->norm_score) best = &f;
    Translation out;
    out.tokens = best->tokens;
    out.score = best->norm_score;
    out.truncated = best->truncated;
    return out;
}

inline LmSession source_session(const TranslationModel& model, const std::vector<int>& x) {
    const GenState st = prepare_generation(model, x);
    LmSession s;
    s.lm = model.lm;
    s.past = st.past;
    s.g = st.g;
    s.next_pos = st.next_pos;
    return s;
}

inline Translation translate_greedy(const TranslationModel& model, const std::vector<int>& x,
                                    int max_len = -1) {
    if (max_len < 0) max_len = default_max_len(static_cast<int>(x.size()));
    return greedy_core(source_session(model, x), max_len);
}

// The source-side forward runs exactly once per sentence; every hypothesis
// shares it read-only.
inline Translation beam_search(const TranslationModel& model, const std::vector<int>& x, int k,
                               int max_len = -1) {
    if (max_len < 0) max_len = default_max_len(static_cast<int>(x.size()));
    return beam_core(source_session(model, x), k, max_len);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// Corpus-level BLEU-4 with exponential smoothing on zero n-gram matches and
// the usual brevity penalty. Tokens are the task's own token ids. A corpus
// with no unigram matches at all scores zero; smoothing only ever fills in
// higher-order gaps.
inline double bleu(const std::vector<std::vector<int>>& candidates,
                   const std::vector<std::vector<int>>& references) {
    if (candidates.empty() || candidates.size() != references.size())
        throw DataError("bleu: corpus empty or candidate/reference counts differ");
    constexpr int kMaxOrder = 4;
    std::vector<long> match(kMaxOrder, 0), total(kMaxOrder, 0);
    long cand_len = 0, ref_len = 0;

    auto ngram_counts = [](const std::vector<int>& seq, int n) {
        std::vector<std::vector<int>> grams;
        for (size_t i = 0; i + n <= seq.size(); ++i)
            grams.emplace_back(seq.begin() + static_cast<long>(i),
                               seq.begin() + static_cast<long>(i) + n);
        std::sort(grams.begin(), grams.end());
        return grams;
    };

    for (size_t s = 0; s < candidates.size(); ++s) {
        const auto& c = candidates[s];
        const auto& r = references[s];
        cand_len += static_cast<long>(c.size());
        ref_len += static_cast<long>(r.size());
        for (int n = 1; n <= kMaxOrder; ++n) {
            auto cg = ngram_counts(c, n);
            auto rg = ngram_counts(r, n);
            total[n - 1] += static_cast<long>(cg.size());
            std::vector<std::vector<int>> clipped;
            std::set_intersection(cg.begin(), cg.end(), rg.begin(), rg.end(),
                                  std::back_inserter(clipped));
            match[n - 1] += static_cast<long>(clipped.size());
        }
    }

    double log_prec_sum = 0.0;
    double smooth = 1.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (total[n] == 0) return 0.0;  // no candidate n-grams at this order
        double p;
        if (match[n] > 0) {
            p = static_cast<double>(match[n]) / static_cast<double>(total[n]);
        } else {
            smooth *= 2.0;
            p = 1.0 / (smooth * static_cast<double>(total[n]));
        }
        log_prec_sum += std::log(p);
    }
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return 100.0 * bp * std::exp(log_prec_sum / kMaxOrder);
}

struct EvalReport {
    double bleu = 0.0;           // [0, 100]
    double seq_accuracy = 0.0;   // [0, 1]
    double token_accuracy = 0.0; // [0, 1]
    long n_examples = 0;
    double mean_score = 0.0;     // mean length-normalized model score

    std::string to_json() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "{\"bleu\": %.4f, \"seq_accuracy\": %.6f, \"token_accuracy\": %.6f, "
                      "\"n_examples\": %ld, \"mean_score\": %.6f}\n",
                      bleu, seq_accuracy, token_accuracy, n_examples, mean_score);
        return buf;
    }
};

// Decode every source with beam width k and score against references.
// Sentences may be decoded concurrently; the backbone and prompts are shared
// read-only and each sentence owns its activation caches.
inline EvalReport evaluate(const TranslationModel& model, const ParallelCorpus& corpus, int k,
                           int threads = 1) {
    if (corpus.pairs.empty()) throw DataError("evaluate: empty corpus");
    const size_t n = corpus.pairs.size();
    std::vector<Translation> outs(n);
    auto worker = [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i)
            outs[i] = beam_search(model, corpus.pairs[i].first, k);
    };
    if (threads <= 1) {
        worker(0, n);
    } else {
        std::vector<std::thread> pool;
        const size_t per = (n + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
        for (int t = 0; t < threads; ++t) {
            const size_t b = static_cast<size_t>(t) * per;
            if (b >= n) break;
            pool.emplace_back(worker, b, std::min(n, b + per));
        }
        for (auto& th : pool) th.join();
    }

    EvalReport rep;
    rep.n_examples = static_cast<long>(n);
    std::vector<std::vector<int>> cands, refs;
    long tok_match = 0, tok_total = 0;
    double score_sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const auto& ref = corpus.pairs[i].second;
        const auto& hyp = outs[i].tokens;
        cands.push_back(hyp);
        refs.push_back(ref);
        if (hyp == ref) rep.seq_accuracy += 1.0;
        for (size_t j = 0; j < ref.size(); ++j)
            if (j < hyp.size() && hyp[j] == ref[j]) ++tok_match;
        tok_total += static_cast<long>(ref.size());
        score_sum += outs[i].score;
    }
    rep.seq_accuracy /= static_cast<double>(n);
    rep.token_accuracy = tok_total ? static_cast<double>(tok_match) / tok_total : 0.0;
    rep.bleu = bleu(cands, refs);
    rep.mean_score = score_sum / static_cast<double>(n);
    return rep;
}

}  // namespace msp
