#pragma once

// GPT-style decoder-only transformer operating over an explicit cache of
// past activations. One activation is the per-layer projected key/value
// pair for a single timestep, so prepended prompts and cached source
// activations enter the computation only through attention.
//
// Blocks are pre-norm residual with learned absolute position embeddings
// and a GELU MLP of width 4d. Input and output embeddings are tied: the
// output distribution is softmax(E . g). Position ids belong to input
// embeddings only; cached activations carry no positions, which is what
// makes restarting position ids per pipeline stage well-defined.

#include <atomic>
#include <string>
#include <vector>

#include "msp/checkpoint.hpp"
#include "msp/tensor.hpp"

namespace msp {

struct LmConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int alphabet_size = 12;
    int max_positions = 64;
    int prompt_length = 16;

    int vocab_size() const { return kNumSpecialsForVocab + alphabet_size; }
    static constexpr int kNumSpecialsForVocab = 6;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || max_positions < 1 || prompt_length < 1)
            throw ShapeError("lm config: all counts must be >= 1");
        if (d_model % n_heads != 0) throw ShapeError("lm config: d_model not divisible by n_heads");
        if (alphabet_size < 2) throw ShapeError("lm config: alphabet too small");
    }

    int head_dim() const { return d_model / n_heads; }
    int activation_width() const { return 2 * n_layers * d_model; }

    bool operator==(const LmConfig& o) const {
        return n_layers == o.n_layers && d_model == o.d_model && n_heads == o.n_heads &&
               alphabet_size == o.alphabet_size && max_positions == o.max_positions &&
               prompt_length == o.prompt_length;
    }
};

struct LmLayer {
    Tensor ln1_g, ln1_b;
    Tensor w_qkv, b_qkv;          // d x 3d, 1 x 3d
    Tensor w_attn_out, b_attn_out;
    Tensor ln2_g, ln2_b;
    Tensor w_mlp_in, b_mlp_in;    // d x 4d
    Tensor w_mlp_out, b_mlp_out;  // 4d x d
};

// Frozen transformer weights theta. `frozen` is a training-time contract:
// once set, no optimizer step may touch these tensors.
struct LmParams {
    LmConfig config;
    Tensor token_embedding;     // V x d, tied with the output head
    Tensor position_embedding;  // max_positions x d
    std::vector<LmLayer> layers;
    Tensor ln_f_g, ln_f_b;
    bool frozen = false;

    static LmParams init(const LmConfig& cfg, Rng& rng, double stddev = 0.02) {
        cfg.validate();
        LmParams p;
        p.config = cfg;
        const int d = cfg.d_model;
        p.token_embedding = Tensor::randn({cfg.vocab_size(), d}, rng, stddev);
        p.position_embedding = Tensor::randn({cfg.max_positions, d}, rng, stddev);
        for (int l = 0; l < cfg.n_layers; ++l) {
            LmLayer layer;
            layer.ln1_g = Tensor::full({1, d}, 1.0f);
            layer.ln1_b = Tensor::zeros({1, d});
            layer.w_qkv = Tensor::randn({d, 3 * d}, rng, stddev);
            layer.b_qkv = Tensor::zeros({1, 3 * d});
            layer.w_attn_out = Tensor::randn({d, d}, rng, stddev);
            layer.b_attn_out = Tensor::zeros({1, d});
            layer.ln2_g = Tensor::full({1, d}, 1.0f);
            layer.ln2_b = Tensor::zeros({1, d});
            layer.w_mlp_in = Tensor::randn({d, 4 * d}, rng, stddev);
            layer.b_mlp_in = Tensor::zeros({1, 4 * d});
            layer.w_mlp_out = Tensor::randn({4 * d, d}, rng, stddev);
            layer.b_mlp_out = Tensor::zeros({1, d});
            p.layers.push_back(std::move(layer));
        }
        p.ln_f_g = Tensor::full({1, d}, 1.0f);
        p.ln_f_b = Tensor::zeros({1, d});
        return p;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("lm.token_embedding", token_embedding);
        out.emplace_back("lm.position_embedding", position_embedding);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "lm.layer" + std::to_string(l) + ".";
            auto& L = layers[l];
            out.emplace_back(p + "ln1.g", L.ln1_g);
            out.emplace_back(p + "ln1.b", L.ln1_b);
            out.emplace_back(p + "attn.w_qkv", L.w_qkv);
            out.emplace_back(p + "attn.b_qkv", L.b_qkv);
            out.emplace_back(p + "attn.w_out", L.w_attn_out);
            out.emplace_back(p + "attn.b_out", L.b_attn_out);
            out.emplace_back(p + "ln2.g", L.ln2_g);
            out.emplace_back(p + "ln2.b", L.ln2_b);
            out.emplace_back(p + "mlp.w_in", L.w_mlp_in);
            out.emplace_back(p + "mlp.b_in", L.b_mlp_in);
            out.emplace_back(p + "mlp.w_out", L.w_mlp_out);
            out.emplace_back(p + "mlp.b_out", L.b_mlp_out);
        }
        out.emplace_back("lm.ln_f.g", ln_f_g);
        out.emplace_back("lm.ln_f.b", ln_f_b);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : named_params()) t.impl()->requires_grad = trainable;
        if (trainable) frozen = false;
    }

    void freeze() {
        set_trainable(false);
        frozen = true;
    }

    // Byte image of all weights, used to assert the frozen contract.
    std::vector<float> flatten() {
        std::vector<float> all;
        for (auto& [name, t] : named_params())
            all.insert(all.end(), t.data().begin(), t.data().end());
        return all;
    }
};

enum class SourceTag : uint8_t { prompt, encoded, reencoded, decoded };

// One timestep's key/value pairs across all layers (width 2Nd when
// flattened). Used only at module boundaries and in tests; the cache itself
// stores contiguous chunks.
struct Activation {
    std::vector<std::vector<float>> keys;    // n_layers entries of width d
    std::vector<std::vector<float>> values;  // n_layers entries of width d
};

// Contiguous run of timesteps sharing one source tag. k[l] and v[l] are
// len x d tensors for layer l; they may be graph nodes so that gradients
// flow from later stages into the pass that produced them.
struct PastChunk {
    std::vector<Tensor> k;
    std::vector<Tensor> v;
    int len = 0;
    SourceTag tag = SourceTag::decoded;
};

struct PastSequence {
    std::vector<PastChunk> chunks;

    int length() const {
        int n = 0;
        for (const auto& c : chunks) n += c.len;
        return n;
    }

    void append(PastChunk chunk) {
        if (chunk.len > 0) chunks.push_back(std::move(chunk));
    }

    PastSequence concat(const PastSequence& tail) const {
        PastSequence out = *this;
        for (const auto& c : tail.chunks) out.chunks.push_back(c);
        return out;
    }

    // Materialize one timestep's activation (for inspection and tests).
    Activation at(int index, int n_layers) const {
        int base = 0;
        for (const auto& c : chunks) {
            if (index < base + c.len) {
                const int r = index - base;
                Activation a;
                for (int l = 0; l < n_layers; ++l) {
                    const int d = c.k[l].cols();
                    a.keys.emplace_back(c.k[l].data().begin() + static_cast<size_t>(r) * d,
                                        c.k[l].data().begin() + static_cast<size_t>(r + 1) * d);
                    a.values.emplace_back(c.v[l].data().begin() + static_cast<size_t>(r) * d,
                                          c.v[l].data().begin() + static_cast<size_t>(r + 1) * d);
                }
                return a;
            }
            base += c.len;
        }
        throw ShapeError("past sequence index out of range");
    }
};

struct SeqResult {
    Tensor g;         // S x d final hidden states
    PastChunk chunk;  // the S new activations
};

// The model: weights plus lightweight instrumentation used by tests
// (position probe for the position-reset property, forward counters for the
// compute-once property of beam search).
struct Lm {
    LmParams p;

    std::vector<int>* position_probe = nullptr;
    mutable std::atomic<long> seq_forward_calls{0};
    mutable std::atomic<long> step_forward_calls{0};

    Lm() = default;
    explicit Lm(LmParams params) : p(std::move(params)) {}
    Lm(const Lm& o) : p(o.p) {}
    Lm& operator=(const Lm& o) {
        p = o.p;
        return *this;
    }

    const LmConfig& cfg() const { return p.config; }

    // Token embedding plus position embedding for one input position.
    Tensor embed(int token_id, int position) const {
        if (token_id < 0 || token_id >= cfg().vocab_size())
            throw ShapeError("embed: token id out of range");
        if (position < 0 || position >= cfg().max_positions)
            throw ShapeError("embed: position out of range");
        if (position_probe) position_probe->push_back(position);
        const Tensor tok = embedding_lookup(p.token_embedding, {token_id});
        const Tensor pos = embedding_lookup(p.position_embedding, {position});
        return add(tok, pos);
    }

    Tensor embed_sequence(const std::vector<int>& tokens, int position_offset) const {
        if (tokens.empty()) throw ShapeError("embed_sequence: empty token sequence");
        if (position_offset < 0 ||
            position_offset + static_cast<int>(tokens.size()) > cfg().max_positions)
            throw ShapeError("position overflow: sequence does not fit in max_positions");
        std::vector<int> positions(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i)
            positions[i] = position_offset + static_cast<int>(i);
        if (position_probe)
            position_probe->insert(position_probe->end(), positions.begin(), positions.end());
        for (int t : tokens)
            if (t < 0 || t >= cfg().vocab_size()) throw ShapeError("embed: token id out of range");
        const Tensor tok = embedding_lookup(p.token_embedding, tokens);
        const Tensor pos = embedding_lookup(p.position_embedding, positions);
        return add(tok, pos);
    }

    // Transformer body over already-embedded inputs. Rows of x are the new
    // positions; they attend to the whole past plus the causal prefix of
    // themselves. Returns final-layer-norm outputs and the new activations.
    SeqResult forward_embedded(const Tensor& x_in, const PastSequence& past) const {
        const int d = cfg().d_model;
        const int s = x_in.rows();
        const int n_heads = cfg().n_heads;
        const int hd = cfg().head_dim();
        if (x_in.cols() != d) throw ShapeError("forward: input width != d_model");
        for (const auto& c : past.chunks)
            for (const auto& k : c.k)
                if (k.cols() != d) throw ShapeError("forward: past activation width != d_model");
        const int p_len = past.length();
        const int total = p_len + s;

        // causal mask over [past | new block]; the past is fully visible
        Tensor mask = Tensor::zeros({s, total});
        for (int i = 0; i < s; ++i)
            for (int j = i + 1; j < s; ++j)
                mask.data()[static_cast<size_t>(i) * total + p_len + j] = -1e9f;

        Tensor x = x_in;
        SeqResult result;
        result.chunk.len = s;
        for (int l = 0; l < cfg().n_layers; ++l) {
            const LmLayer& L = p.layers[l];
            const Tensor h = layernorm(x, L.ln1_g, L.ln1_b);
            const Tensor qkv = add(matmul(h, L.w_qkv), L.b_qkv);
            const Tensor q = slice_cols(qkv, 0, d);
            const Tensor k_new = slice_cols(qkv, d, 2 * d);
            const Tensor v_new = slice_cols(qkv, 2 * d, 3 * d);

            std::vector<Tensor> k_parts, v_parts;
            for (const auto& c : past.chunks) {
                k_parts.push_back(c.k[l]);
                v_parts.push_back(c.v[l]);
            }
            k_parts.push_back(k_new);
            v_parts.push_back(v_new);
            const Tensor k_all = k_parts.size() == 1 ? k_parts[0] : concat_axis(k_parts, 0);
            const Tensor v_all = v_parts.size() == 1 ? v_parts[0] : concat_axis(v_parts, 0);

            std::vector<Tensor> head_ctx;
            for (int hidx = 0; hidx < n_heads; ++hidx) {
                const int c0 = hidx * hd, c1 = (hidx + 1) * hd;
                const Tensor qh = slice_cols(q, c0, c1);
                const Tensor kh = slice_cols(k_all, c0, c1);
                const Tensor vh = slice_cols(v_all, c0, c1);
                Tensor scores = scale(matmul(qh, transpose(kh)),
                                      1.0f / std::sqrt(static_cast<float>(hd)));
                scores = add(scores, mask);
                const Tensor probs = softmax_lastdim(scores);
                head_ctx.push_back(matmul(probs, vh));
            }
            const Tensor ctx = n_heads == 1 ? head_ctx[0] : concat_axis(head_ctx, 1);
            const Tensor attn_out = add(matmul(ctx, L.w_attn_out), L.b_attn_out);
            x = add(x, attn_out);

            const Tensor h2 = layernorm(x, L.ln2_g, L.ln2_b);
            const Tensor mlp = add(
                matmul(gelu(add(matmul(h2, L.w_mlp_in), L.b_mlp_in)), L.w_mlp_out), L.b_mlp_out);
            x = add(x, mlp);

            result.chunk.k.push_back(k_new);
            result.chunk.v.push_back(v_new);
        }
        result.g = layernorm(x, p.ln_f_g, p.ln_f_b);
        return result;
    }

    // Repeated application of the single-step model over a token sequence.
    // Token i attends to `past` plus tokens 0..i of this call.
    SeqResult forward_seq(const std::vector<int>& tokens, const PastSequence& past,
                          int position_offset) const {
        ++seq_forward_calls;
        return forward_embedded(embed_sequence(tokens, position_offset), past);
    }

    // One decoding step: input embedding for a single position against a
    // fixed past. Returns the final hidden state (1 x d) and one activation.
    SeqResult step(const Tensor& input_1xd, const PastSequence& past) const {
        ++step_forward_calls;
        if (input_1xd.numel() != static_cast<size_t>(cfg().d_model))
            throw ShapeError("step: input width != d_model");
        SeqResult r = forward_embedded(input_1xd, past);
        r.chunk.tag = SourceTag::decoded;
        return r;
    }

    // Tied-softmax output distribution over the vocabulary.
    Tensor output_distribution(const Tensor& g) const {
        if (g.cols() != cfg().d_model) throw ShapeError("output_distribution: width != d_model");
        return softmax_lastdim(logits(g));
    }

    Tensor logits(const Tensor& g) const { return matmul(g, transpose(p.token_embedding)); }

    void reset_counters() const {
        seq_forward_calls = 0;
        step_forward_calls = 0;
    }
};

// ---------------------------------------------------------------------------
// checkpoint adapters
// ---------------------------------------------------------------------------

inline void lm_to_checkpoint(Lm& lm, Checkpoint& ck) {
    for (auto& [name, t] : lm.p.named_params()) ck.put(name, t);
}

inline LmParams lm_from_checkpoint(const Checkpoint& ck, const LmConfig& cfg) {
    cfg.validate();
    Rng rng(0);
    LmParams p = LmParams::init(cfg, rng, 0.0);
    for (auto& [name, t] : p.named_params()) {
        const Tensor& stored = ck.get(name);
        if (stored.shape() != t.shape() && stored.numel() != t.numel())
            throw IoError("checkpoint entry shape mismatch: " + name);
        t.data() = stored.data();
    }
    return p;
}

}  // namespace msp
