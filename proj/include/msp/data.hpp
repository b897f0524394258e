#pragma once

// Synthetic transduction tasks, the character vocabulary, templated inputs
// for prefix/prompt tuning, and corpus file I/O.

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msp/rng.hpp"
#include "msp/tensor.hpp"

namespace msp {

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Special token ids are fixed; content symbols start at kNumSpecials.
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kSep = 3;   // <S>
constexpr int kSep1 = 4;  // <S1>
constexpr int kSep2 = 5;  // <S2>
constexpr int kNumSpecials = 6;

class Vocab {
public:
    Vocab() = default;

    // Content symbols are the first `alphabet_size` lowercase letters.
    static Vocab for_alphabet(int alphabet_size) {
        if (alphabet_size < 2) throw DataError("alphabet must have at least 2 symbols");
        if (alphabet_size > 26) throw DataError("alphabet limited to 26 letters");
        Vocab v;
        v.alphabet_size_ = alphabet_size;
        return v;
    }

    int size() const { return kNumSpecials + alphabet_size_; }
    int alphabet_size() const { return alphabet_size_; }

    int char_id(char c) const {
        const int k = c - 'a';
        if (k < 0 || k >= alphabet_size_) throw DataError(std::string("unknown character '") + c + "'");
        return kNumSpecials + k;
    }

    char id_char(int id) const { return static_cast<char>('a' + (id - kNumSpecials)); }

    bool is_special(int id) const { return id < kNumSpecials; }

    std::string symbol(int id) const {
        if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
        switch (id) {
            case kPad: return "<pad>";
            case kBos: return "<s>";
            case kEos: return "</s>";
            case kSep: return "<S>";
            case kSep1: return "<S1>";
            case kSep2: return "<S2>";
            default: return std::string(1, id_char(id));
        }
    }

    // Greedy scan: special markers in angle brackets, otherwise one character
    // per token. Unknown characters are an error.
    std::vector<int> tokenize(const std::string& text) const {
        static const std::pair<const char*, int> specials[] = {
            {"<pad>", kPad}, {"<s>", kBos}, {"</s>", kEos},
            {"<S1>", kSep1}, {"<S2>", kSep2}, {"<S>", kSep},
        };
        std::vector<int> ids;
        size_t i = 0;
        while (i < text.size()) {
            bool matched = false;
            if (text[i] == '<') {
                for (const auto& [s, id] : specials) {
                    const size_t n = std::strlen(s);
                    if (text.compare(i, n, s) == 0) {
                        ids.push_back(id);
                        i += n;
                        matched = true;
                        break;
                    }
                }
            }
            if (!matched) {
                ids.push_back(char_id(text[i]));
                ++i;
            }
        }
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) out += symbol(id);
        return out;
    }

private:
    int alphabet_size_ = 0;
};

// ---------------------------------------------------------------------------
// tasks
// ---------------------------------------------------------------------------

enum class TaskKind { reverse, cipher, copy, sort };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::reverse: return "reverse";
        case TaskKind::cipher: return "cipher";
        case TaskKind::copy: return "copy";
        case TaskKind::sort: return "sort";
    }
    return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "reverse") return TaskKind::reverse;
    if (s == "cipher") return TaskKind::cipher;
    if (s == "copy") return TaskKind::copy;
    if (s == "sort") return TaskKind::sort;
    throw DataError("unknown task kind: " + s);
}

struct TaskSpec {
    TaskKind kind = TaskKind::reverse;
    int alphabet_size = 12;
    int len_min = 3;
    int len_max = 10;
    uint64_t seed = 1;

    void validate() const {
        if (alphabet_size < 2) throw DataError("alphabet must have at least 2 symbols");
        if (len_min < 1 || len_max < len_min) throw DataError("bad length range");
    }
};

// Every task target is a pure function of the source.
inline std::string task_apply(const TaskSpec& spec, const std::string& src) {
    std::string tgt = src;
    switch (spec.kind) {
        case TaskKind::reverse:
            std::reverse(tgt.begin(), tgt.end());
            break;
        case TaskKind::cipher:  // shift each symbol by one, wrapping in the alphabet
            for (char& c : tgt) c = static_cast<char>('a' + ((c - 'a') + 1) % spec.alphabet_size);
            break;
        case TaskKind::copy:
            break;
        case TaskKind::sort:
            std::sort(tgt.begin(), tgt.end());
            break;
    }
    return tgt;
}

struct ParallelCorpus {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;

    size_t size() const { return pairs.size(); }
};

inline std::string random_string(Rng& rng, int alphabet_size, int len_min, int len_max) {
    const int len = len_min + rng.uniform_int(len_max - len_min + 1);
    std::string s(static_cast<size_t>(len), 'a');
    for (char& c : s) c = static_cast<char>('a' + rng.uniform_int(alphabet_size));
    return s;
}

inline ParallelCorpus gen_corpus(const TaskSpec& spec, int n) {
    spec.validate();
    if (n < 1) throw DataError("corpus size must be at least 1");
    const Vocab vocab = Vocab::for_alphabet(spec.alphabet_size);
    Rng rng(spec.seed);
    ParallelCorpus corpus;
    corpus.pairs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::string src = random_string(rng, spec.alphabet_size, spec.len_min, spec.len_max);
        corpus.pairs.emplace_back(vocab.tokenize(src), vocab.tokenize(task_apply(spec, src)));
    }
    return corpus;
}

struct CorpusSplits {
    ParallelCorpus train, dev, test;
};

// Draws pairs from the seeded generator and assigns them so that no source
// string appears in more than one split.
inline CorpusSplits gen_splits(const TaskSpec& spec, int n_train, int n_dev, int n_test) {
    spec.validate();
    const Vocab vocab = Vocab::for_alphabet(spec.alphabet_size);
    Rng rng(spec.seed);
    CorpusSplits splits;
    std::set<std::string> train_srcs, dev_srcs, test_srcs;
    const int total = n_train + n_dev + n_test;
    int guard = 0;
    while (static_cast<int>(splits.train.size() + splits.dev.size() + splits.test.size()) < total) {
        if (++guard > 100 * total)
            throw DataError("task space too small for disjoint splits of this size");
        const std::string src = random_string(rng, spec.alphabet_size, spec.len_min, spec.len_max);
        const std::string tgt = task_apply(spec, src);
        auto push = [&](ParallelCorpus& c) {
            c.pairs.emplace_back(vocab.tokenize(src), vocab.tokenize(tgt));
        };
        if (static_cast<int>(splits.train.size()) < n_train) {
            if (dev_srcs.count(src) || test_srcs.count(src)) continue;
            train_srcs.insert(src);
            push(splits.train);
        } else if (static_cast<int>(splits.dev.size()) < n_dev) {
            if (train_srcs.count(src) || test_srcs.count(src) || dev_srcs.count(src)) continue;
            dev_srcs.insert(src);
            push(splits.dev);
        } else {
            if (train_srcs.count(src) || dev_srcs.count(src) || test_srcs.count(src)) continue;
            test_srcs.insert(src);
            push(splits.test);
        }
    }
    return splits;
}

// Monolingual sentences for LM pretraining. A mixture of pattern families
// gives the toy model latent structure that prompt training can later
// exploit: plain first-order Markov strings, doubled words, mirrored words,
// and alphabet-shift echoes.
inline std::vector<std::string> gen_monolingual(int alphabet_size, int len_min, int len_max,
                                                int n, uint64_t seed) {
    if (alphabet_size < 2) throw DataError("alphabet must have at least 2 symbols");
    Rng rng(seed);

    // seeded random transition preferences for the Markov family
    std::vector<int> hop(static_cast<size_t>(alphabet_size));
    for (auto& h : hop) h = 1 + rng.uniform_int(alphabet_size - 1);

    std::vector<std::string> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::string w = random_string(rng, alphabet_size, len_min, len_max);
        const int family = rng.uniform_int(4);
        std::string s;
        switch (family) {
            case 0: {  // Markov walk: next char follows the preferred hop 3 of 4 times
                s.push_back(static_cast<char>('a' + rng.uniform_int(alphabet_size)));
                const int len = static_cast<int>(w.size()) * 2;
                while (static_cast<int>(s.size()) < len) {
                    const int prev = s.back() - 'a';
                    int next = (rng.uniform_int(4) != 0)
                                   ? (prev + hop[static_cast<size_t>(prev)]) % alphabet_size
                                   : rng.uniform_int(alphabet_size);
                    s.push_back(static_cast<char>('a' + next));
                }
                break;
            }
            case 1:  // doubled word
                s = w + w;
                break;
            case 2: {  // mirrored word
                std::string r = w;
                std::reverse(r.begin(), r.end());
                s = w + r;
                break;
            }
            case 3: {  // shift echo
                std::string t = w;
                for (char& c : t) c = static_cast<char>('a' + ((c - 'a') + 1) % alphabet_size);
                s = w + t;
                break;
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// templates for prefix/prompt tuning
// ---------------------------------------------------------------------------

enum class TemplateKind { single, double_source };

struct TemplatedPair {
    std::vector<int> ids;
    std::vector<bool> loss_mask;  // true exactly on target and EOS positions
};

// single:        x <S> y </s>
// double_source: x <S1> x <S2> y </s>
inline TemplatedPair build_template(const std::vector<int>& x, const std::vector<int>& y,
                                    TemplateKind kind) {
    TemplatedPair t;
    auto append = [&](const std::vector<int>& ids, bool in_loss) {
        for (int id : ids) {
            t.ids.push_back(id);
            t.loss_mask.push_back(in_loss);
        }
    };
    if (kind == TemplateKind::single) {
        append(x, false);
        append({kSep}, false);
    } else {
        append(x, false);
        append({kSep1}, false);
        append(x, false);
        append({kSep2}, false);
    }
    append(y, true);
    append({kEos}, true);
    return t;
}

// ---------------------------------------------------------------------------
// corpus files: one "source\ttarget" pair per line, UTF-8, no header
// ---------------------------------------------------------------------------

inline void write_corpus(const std::string& path, const ParallelCorpus& corpus,
                         const Vocab& vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& [src, tgt] : corpus.pairs)
        out << vocab.detokenize(src) << '\t' << vocab.detokenize(tgt) << '\n';
    if (!out) throw DataError("write failed: " + path);
}

inline ParallelCorpus read_corpus(const std::string& path, const Vocab& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus: " + path);
    ParallelCorpus corpus;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": missing tab separator");
        const std::string src = line.substr(0, tab);
        const std::string tgt = line.substr(tab + 1);
        if (src.empty() || tgt.empty())
            throw DataError(path + ":" + std::to_string(lineno) + ": empty source or target");
        corpus.pairs.emplace_back(vocab.tokenize(src), vocab.tokenize(tgt));
    }
    if (corpus.pairs.empty()) throw DataError(path + ": empty corpus");
    return corpus;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

}  // namespace msp
