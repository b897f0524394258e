#pragma once

// Continuous prompts and the three-stage pipeline.
//
// A prompt is a sequence of L activation-shaped vectors (width 2Nd, laid out
// as [k0 | v0 | k1 | v1 | ...]) prepended to the activation cache. The
// trainable form is a compact bundle of three L x d blocks pushed through a
// shared two-layer tanh network (W1: d x d, W2: d x 2Nd); after training the
// stage prompts are precomputed once and the network is dropped.
//
// Pipeline position ids restart at 0 in every stage. The re-encoding pass
// sees the encoding pass's activations as past, which gives every source
// position effective bidirectional context; the decoding pass sees only the
// re-encoded source (plus its stage prompt).

#include <string>
#include <vector>

#include "msp/data.hpp"
#include "msp/lm.hpp"

namespace msp {

// Convert an L x 2Nd prompt matrix into per-layer key/value cache tensors.
// The slices stay on the graph, so prompt gradients flow out of attention.
inline PastChunk prompt_as_past(const Tensor& prompt, const LmConfig& cfg) {
    if (prompt.cols() != cfg.activation_width())
        throw ShapeError("prompt width != 2 * n_layers * d_model");
    PastChunk chunk;
    chunk.len = prompt.rows();
    chunk.tag = SourceTag::prompt;
    const int d = cfg.d_model;
    for (int l = 0; l < cfg.n_layers; ++l) {
        chunk.k.push_back(slice_cols(prompt, 2 * l * d, 2 * l * d + d));
        chunk.v.push_back(slice_cols(prompt, (2 * l + 1) * d, (2 * l + 1) * d + d));
    }
    return chunk;
}

inline PastSequence prompt_past(const Tensor& prompt, const LmConfig& cfg) {
    PastSequence past;
    if (prompt.defined() && prompt.rows() > 0) past.append(prompt_as_past(prompt, cfg));
    return past;
}

// Fixed per-stage prompts used at inference time (and, as graph nodes,
// during training).
struct StagePrompts {
    Tensor encode;
    Tensor reencode;
    Tensor decode;
};

// Trainable reparameterization bundle. In shared mode a single L x d block
// feeds all three stages through the same network and the gradient of the
// block is the sum over its three uses.
struct PromptParams {
    Tensor p_encode;    // L x d
    Tensor p_reencode;  // L x d (undefined in shared mode)
    Tensor p_decode;    // L x d (undefined in shared mode)
    Tensor w1;          // d x d
    Tensor w2;          // d x 2Nd
    bool shared = false;

    static PromptParams init(const LmConfig& cfg, int prompt_length, Rng& rng, bool shared = false,
                             double stddev = 0.02) {
        PromptParams pp;
        pp.shared = shared;
        const int d = cfg.d_model;
        pp.p_encode = Tensor::randn({prompt_length, d}, rng, stddev, true);
        if (!shared) {
            pp.p_reencode = Tensor::randn({prompt_length, d}, rng, stddev, true);
            pp.p_decode = Tensor::randn({prompt_length, d}, rng, stddev, true);
        }
        pp.w1 = Tensor::randn({d, d}, rng, stddev, true);
        pp.w2 = Tensor::randn({d, cfg.activation_width()}, rng, stddev, true);
        return pp;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        if (shared) {
            out.emplace_back("reparam.p_shared", p_encode);
        } else {
            out.emplace_back("reparam.p_encode", p_encode);
            out.emplace_back("reparam.p_reencode", p_reencode);
            out.emplace_back("reparam.p_decode", p_decode);
        }
        out.emplace_back("reparam.w1", w1);
        out.emplace_back("reparam.w2", w2);
        return out;
    }

    long param_count() const {
        long n = static_cast<long>(p_encode.numel()) + static_cast<long>(w1.numel()) +
                 static_cast<long>(w2.numel());
        if (!shared)
            n += static_cast<long>(p_reencode.numel()) + static_cast<long>(p_decode.numel());
        return n;
    }
};

// Stack the stage blocks, multiply by W1, tanh, multiply by W2, split back.
inline StagePrompts reparameterize(const PromptParams& params) {
    const int L = params.p_encode.rows();
    StagePrompts sp;
    if (params.shared) {
        const Tensor full = matmul(tanh(matmul(params.p_encode, params.w1)), params.w2);
        sp.encode = full;
        sp.reencode = full;
        sp.decode = full;
    } else {
        const Tensor stacked =
            concat_axis({params.p_encode, params.p_reencode, params.p_decode}, 0);
        const Tensor full = matmul(tanh(matmul(stacked, params.w1)), params.w2);
        sp.encode = slice_rows(full, 0, L);
        sp.reencode = slice_rows(full, L, 2 * L);
        sp.decode = slice_rows(full, 2 * L, 3 * L);
    }
    return sp;
}

// Single prompt for all stages: encode == reencode == decode.
inline StagePrompts share_single_prompt(const PromptParams& params) {
    if (!params.shared) {
        PromptParams one = params;
        one.shared = true;
        return reparameterize(one);
    }
    return reparameterize(params);
}

// Precompute the stage prompts and detach them from the reparameterization
// network. After baking, inference needs only the returned tensors.
inline StagePrompts bake(const PromptParams& params) {
    const StagePrompts sp = reparameterize(params);
    StagePrompts baked;
    baked.encode = sp.encode.detached();
    baked.reencode = sp.reencode.detached();
    baked.decode = sp.decode.detached();
    return baked;
}

// ---------------------------------------------------------------------------
// the three stages
// ---------------------------------------------------------------------------

// Encoding: source past is just the encode prompt; positions restart at 0.
inline SeqResult msp_encode(const Lm& lm, const std::vector<int>& x, const StagePrompts& prompts) {
    SeqResult r = lm.forward_seq(x, prompt_past(prompts.encode, lm.cfg()), 0);
    r.chunk.tag = SourceTag::encoded;
    return r;
}

// Re-encoding: the source again, now with the first pass's activations as
// past, so each position conditions on every source word. Positions restart.
// An empty activation set is allowed as the degenerate no-context case.
inline SeqResult msp_reencode(const Lm& lm, const std::vector<int>& x, const StagePrompts& prompts,
                              const PastChunk& encoded) {
    if (encoded.len != 0 && encoded.len != static_cast<int>(x.size()))
        throw ShapeError("re-encode: encoded activation count != source length");
    PastSequence past = prompt_past(prompts.reencode, lm.cfg());
    past.append(encoded);
    SeqResult r = lm.forward_seq(x, past, 0);
    r.chunk.tag = SourceTag::reencoded;
    return r;
}

// Decoding: hidden states for the target tokens given only the decode prompt
// and the re-encoded source. y must begin with BOS; G[t] scores y[t+1].
inline SeqResult msp_decode_hidden(const Lm& lm, const std::vector<int>& y,
                                   const StagePrompts& prompts, const PastChunk& reencoded) {
    if (y.empty() || y[0] != kBos) throw ShapeError("decode: target must begin with BOS");
    PastSequence past = prompt_past(prompts.decode, lm.cfg());
    past.append(reencoded);
    SeqResult r = lm.forward_seq(y, past, 0);
    r.chunk.tag = SourceTag::decoded;
    return r;
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

// Prefix-tuning: one prompt prepended to the past for the whole templated
// sequence, positions 0..len-1 with no reset.
inline SeqResult prefix_forward(const Lm& lm, const std::vector<int>& template_ids,
                                const Tensor& prompt) {
    return lm.forward_seq(template_ids, prompt_past(prompt, lm.cfg()), 0);
}

// Prompt tuning: L trainable d-vectors enter at the embedding layer as
// pseudo-tokens occupying positions 0..L-1; the template is shifted by L.
// Returns hidden states for all L + len(template) rows.
inline SeqResult prompt_tuning_forward(const Lm& lm, const std::vector<int>& template_ids,
                                       const Tensor& eprompt) {
    const int L = eprompt.defined() ? eprompt.rows() : 0;
    if (L == 0) return lm.forward_seq(template_ids, {}, 0);
    if (eprompt.cols() != lm.cfg().d_model)
        throw ShapeError("embedding prompt width != d_model");
    const int len = static_cast<int>(template_ids.size());
    if (L + len > lm.cfg().max_positions)
        throw ShapeError("position overflow: embedding prompt plus template too long");
    std::vector<int> positions(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) positions[static_cast<size_t>(i)] = i;
    if (lm.position_probe)
        lm.position_probe->insert(lm.position_probe->end(), positions.begin(), positions.end());
    const Tensor pseudo = add(eprompt, embedding_lookup(lm.p.position_embedding, positions));
    const Tensor x = concat_axis({pseudo, lm.embed_sequence(template_ids, L)}, 0);
    ++lm.seq_forward_calls;
    return lm.forward_embedded(x, {});
}

// ---------------------------------------------------------------------------
// checkpoint adapters
// ---------------------------------------------------------------------------

inline void prompts_to_checkpoint(const StagePrompts& baked, Checkpoint& ck) {
    ck.put("prompt.encode", baked.encode);
    ck.put("prompt.reencode", baked.reencode);
    ck.put("prompt.decode", baked.decode);
}

inline StagePrompts prompts_from_checkpoint(const Checkpoint& ck) {
    StagePrompts sp;
    sp.encode = ck.get("prompt.encode").detached();
    sp.reencode = ck.get("prompt.reencode").detached();
    sp.decode = ck.get("prompt.decode").detached();
    return sp;
}

inline void reparam_to_checkpoint(PromptParams& params, Checkpoint& ck) {
    for (auto& [name, t] : params.named_params()) ck.put(name, t);
}

inline PromptParams reparam_from_checkpoint(const Checkpoint& ck) {
    PromptParams pp;
    pp.shared = ck.has("reparam.p_shared");
    if (pp.shared) {
        pp.p_encode = ck.get("reparam.p_shared").detached(true);
    } else {
        pp.p_encode = ck.get("reparam.p_encode").detached(true);
        pp.p_reencode = ck.get("reparam.p_reencode").detached(true);
        pp.p_decode = ck.get("reparam.p_decode").detached(true);
    }
    pp.w1 = ck.get("reparam.w1").detached(true);
    pp.w2 = ck.get("reparam.w2").detached(true);
    return pp;
}

}  // namespace msp
