#pragma once

// Frozen-backbone prompt optimization and toy LM pretraining. The trainer
// owns only the prompt-side parameters; transformer weights are frozen and
// never appear in the optimizer. Cross-entropy is negative log-likelihood
// summed over target tokens (including EOS), with a mean-per-token variant
// for reporting.

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "msp/data.hpp"
#include "msp/lm.hpp"
#include "msp/prompting.hpp"

namespace msp {

enum class Method { msp, msp_shared, prefix, prefix_double, prompt };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::msp: return "msp";
        case Method::msp_shared: return "msp-shared";
        case Method::prefix: return "prefix";
        case Method::prefix_double: return "prefix-double";
        case Method::prompt: return "prompt";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "msp") return Method::msp;
    if (s == "msp-shared") return Method::msp_shared;
    if (s == "prefix") return Method::prefix;
    if (s == "prefix-double") return Method::prefix_double;
    if (s == "prompt") return Method::prompt;
    throw DataError("unknown method: " + s + " (expected msp, msp-shared, prefix, prefix-double, prompt)");
}

struct TrainConfig {
    Method method = Method::msp;
    int prompt_length = 16;
    int steps = 2000;
    int tokens_per_batch = 2048;
    float learning_rate = 7e-4f;
    int warmup_steps = 400;
    float grad_clip = 1.0f;
    uint64_t seed = 1;
    int log_interval = 50;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

struct AdamSlot {
    std::vector<float> m, v;
};

struct AdamState {
    std::vector<AdamSlot> slots;
    long step = 0;
    AdamConfig cfg;

    static AdamState init(const std::vector<Tensor>& params, AdamConfig cfg = {}) {
        AdamState st;
        st.cfg = cfg;
        for (const auto& p : params) {
            AdamSlot s;
            s.m.assign(p.numel(), 0.0f);
            s.v.assign(p.numel(), 0.0f);
            st.slots.push_back(std::move(s));
        }
        return st;
    }
};

// Bias-corrected Adam step on one parameter tensor.
inline void adam_update(Tensor& param, const std::vector<float>& grad, AdamSlot& slot, long step,
                        double lr, const AdamConfig& cfg = {}) {
    if (grad.size() != param.numel() || slot.m.size() != param.numel())
        throw ShapeError("adam_update: gradient/state shape mismatch");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (size_t i = 0; i < grad.size(); ++i) {
        const double g = grad[i];
        const double m = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        slot.m[i] = static_cast<float>(m);
        slot.v[i] = static_cast<float>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        param.data()[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
}

// Linear warmup to base_lr, then inverse-sqrt decay.
inline double lr_schedule(long step, long warmup, double base_lr) {
    if (step < 1) throw std::invalid_argument("lr_schedule: step starts at 1");
    if (warmup < 1) warmup = 1;
    if (step <= warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    return base_lr * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

// ---------------------------------------------------------------------------
// method bundle
// ---------------------------------------------------------------------------

// The trainable inference-time object for one adaptation method.
struct PromptModel {
    Method method = Method::msp;
    PromptParams reparam;  // msp / msp-shared
    Tensor prefix;         // prefix / prefix-double: L x 2Nd
    Tensor eprompt;        // prompt: L x d

    static PromptModel init(Method method, const LmConfig& cfg, int prompt_length, Rng& rng,
                            double stddev = 0.02) {
        PromptModel m;
        m.method = method;
        switch (method) {
            case Method::msp:
                m.reparam = PromptParams::init(cfg, prompt_length, rng, false, stddev);
                break;
            case Method::msp_shared:
                m.reparam = PromptParams::init(cfg, prompt_length, rng, true, stddev);
                break;
            case Method::prefix:
            case Method::prefix_double:
                m.prefix =
                    Tensor::randn({prompt_length, cfg.activation_width()}, rng, stddev, true);
                break;
            case Method::prompt:
                m.eprompt = Tensor::randn({prompt_length, cfg.d_model}, rng, stddev, true);
                break;
        }
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        switch (method) {
            case Method::msp:
            case Method::msp_shared: return reparam.named_params();
            case Method::prefix:
            case Method::prefix_double: return {{"prompt.prefix", prefix}};
            case Method::prompt: return {{"prompt.embedding", eprompt}};
        }
        return {};
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    long param_count() {
        long n = 0;
        for (auto& t : params()) n += static_cast<long>(t.numel());
        return n;
    }
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct LossParts {
    Tensor loss;       // scalar, sum of per-token NLL
    long token_count;  // number of scored positions
};

// Teacher-forced NLL of y given x through the three-stage pipeline. The
// stage prompts may come from reparameterize() (training, gradients flow)
// or from bake() (inference-path evaluation).
inline LossParts msp_pair_loss(const Lm& lm, const StagePrompts& sp, const std::vector<int>& x,
                               const std::vector<int>& y) {
    const SeqResult enc = msp_encode(lm, x, sp);
    const SeqResult renc = msp_reencode(lm, x, sp, enc.chunk);
    std::vector<int> y_in;
    y_in.reserve(y.size() + 1);
    y_in.push_back(kBos);
    y_in.insert(y_in.end(), y.begin(), y.end());
    const SeqResult dec = msp_decode_hidden(lm, y_in, sp, renc.chunk);
    std::vector<int> targets(y.begin(), y.end());
    targets.push_back(kEos);
    const Tensor total = cross_entropy_logits_sum(lm.logits(dec.g), targets, {});
    return {total, static_cast<long>(targets.size())};
}

// Template-based NLL for the prefix and prompt-tuning baselines. Only the
// target-plus-EOS block of the template is scored; those positions are a
// contiguous suffix, so the predictor rows form one slice.
inline LossParts template_pair_loss(const Lm& lm, const PromptModel& model,
                                    const std::vector<int>& x, const std::vector<int>& y) {
    const TemplateKind tk =
        model.method == Method::prefix_double ? TemplateKind::double_source : TemplateKind::single;
    const TemplatedPair tp = build_template(x, y, tk);
    const int len = static_cast<int>(tp.ids.size());
    int start = len;
    while (start > 0 && tp.loss_mask[static_cast<size_t>(start) - 1]) --start;

    SeqResult r;
    int row_offset = 0;
    if (model.method == Method::prompt) {
        r = prompt_tuning_forward(lm, tp.ids, model.eprompt);
        row_offset = model.eprompt.defined() ? model.eprompt.rows() : 0;
    } else {
        r = prefix_forward(lm, tp.ids, model.prefix);
    }
    const Tensor g_sel = slice_rows(r.g, row_offset + start - 1, row_offset + len - 1);
    std::vector<int> targets(tp.ids.begin() + start, tp.ids.end());
    const Tensor total = cross_entropy_logits_sum(lm.logits(g_sel), targets, {});
    return {total, static_cast<long>(targets.size())};
}

// Sum of per-token NLL for one pair under the model's forward. `sp` must be
// the reparameterized prompts for msp methods (pass {} for baselines).
inline LossParts nll_loss(const Lm& lm, const PromptModel& model, const StagePrompts& sp,
                          const std::vector<int>& x, const std::vector<int>& y) {
    if (x.empty() || y.empty()) throw DataError("nll_loss: empty source or target");
    switch (model.method) {
        case Method::msp:
        case Method::msp_shared: return msp_pair_loss(lm, sp, x, y);
        default: return template_pair_loss(lm, model, x, y);
    }
}

struct BatchLoss {
    Tensor loss;  // scalar sum over the batch
    long token_count = 0;
};

inline BatchLoss batch_loss(const Lm& lm, PromptModel& model,
                            const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
    StagePrompts sp;
    if (model.method == Method::msp || model.method == Method::msp_shared)
        sp = reparameterize(model.reparam);
    BatchLoss out;
    std::vector<Tensor> losses;
    for (const auto& [x, y] : pairs) {
        LossParts lp = nll_loss(lm, model, sp, x, y);
        losses.push_back(lp.loss);
        out.token_count += lp.token_count;
    }
    Tensor total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    out.loss = total;
    return out;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// One JSON record per logging interval.
class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open metrics file: " + path);
        open_ = true;
    }

    void log(long step, double loss, double lr, long tokens) {
        if (!open_) return;
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "{\"step\": %ld, \"loss\": %.6f, \"lr\": %.8g, \"tokens\": %ld}\n", step,
                      loss, lr, tokens);
        out_ << buf;
    }

private:
    std::ofstream out_;
    bool open_ = false;
};

// ---------------------------------------------------------------------------
// prompt training
// ---------------------------------------------------------------------------

inline void clip_gradients(std::vector<Tensor>& params, double max_norm) {
    if (max_norm <= 0) return;
    const double norm = grad_l2_norm(params);
    if (norm <= max_norm) return;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params)
        for (float& g : p.grad()) g *= s;
}

// One optimization step on a batch of pairs. Only prompt parameters move;
// the frozen transformer is never touched. Gradients are zeroed after use.
inline double train_step(const Lm& lm, PromptModel& model, AdamState& opt,
                         const std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch,
                         const TrainConfig& cfg) {
    if (!lm.p.frozen) throw std::logic_error("train_step: backbone must be frozen");
    auto params = model.params();
    for (auto& p : params) p.zero_grad();

    BatchLoss bl = batch_loss(lm, model, batch);
    const double mean_loss = bl.loss.item_f64() / static_cast<double>(bl.token_count);
    const Tensor objective = scale(bl.loss, 1.0f / static_cast<float>(bl.token_count));
    backward(objective);
    clip_gradients(params, cfg.grad_clip);

    ++opt.step;
    const double lr = lr_schedule(opt.step, cfg.warmup_steps, cfg.learning_rate);
    for (size_t i = 0; i < params.size(); ++i) {
        adam_update(params[i], params[i].grad(), opt.slots[i], opt.step, lr, opt.cfg);
        params[i].zero_grad();
    }
    return mean_loss;
}

// Draws batches i.i.d. by index until the token budget is filled.
inline std::vector<std::pair<std::vector<int>, std::vector<int>>> sample_batch(
    const ParallelCorpus& corpus, Rng& rng, int tokens_per_batch) {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
    long tokens = 0;
    while (tokens < tokens_per_batch) {
        const auto& pair = corpus.pairs[static_cast<size_t>(rng.uniform_int(
            static_cast<int>(corpus.pairs.size())))];
        batch.push_back(pair);
        tokens += static_cast<long>(pair.first.size() + pair.second.size() + 2);
    }
    return batch;
}

struct TrainRunResult {
    std::vector<double> loss_curve;  // mean per-token loss at every step
};

inline TrainRunResult train_prompts(const Lm& lm, PromptModel& model, const ParallelCorpus& corpus,
                                    const TrainConfig& cfg, MetricsWriter* metrics = nullptr) {
    if (corpus.pairs.empty()) throw DataError("training corpus is empty");
    auto params = model.params();
    AdamState opt = AdamState::init(params);
    Rng rng(cfg.seed);
    TrainRunResult result;
    long tokens_seen = 0;
    for (int step = 1; step <= cfg.steps; ++step) {
        const auto batch = sample_batch(corpus, rng, cfg.tokens_per_batch);
        for (const auto& b : batch)
            tokens_seen += static_cast<long>(b.first.size() + b.second.size() + 2);
        const double loss = train_step(lm, model, opt, batch, cfg);
        result.loss_curve.push_back(loss);
        if (metrics && step % cfg.log_interval == 0)
            metrics->log(step, loss, lr_schedule(step, cfg.warmup_steps, cfg.learning_rate),
                         tokens_seen);
    }
    return result;
}

// ---------------------------------------------------------------------------
// toy LM pretraining (the stand-in for a large pretrained backbone)
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int steps = 1500;
    int tokens_per_batch = 2048;
    float learning_rate = 1e-3f;
    int warmup_steps = 200;
    float grad_clip = 1.0f;
    uint64_t seed = 7;
    int log_interval = 50;
};

// Sum NLL of one sentence (BOS w1..wn EOS) under the plain LM.
inline LossParts lm_sentence_loss(const Lm& lm, const std::vector<int>& sentence) {
    std::vector<int> ids;
    ids.reserve(sentence.size() + 2);
    ids.push_back(kBos);
    ids.insert(ids.end(), sentence.begin(), sentence.end());
    ids.push_back(kEos);
    const SeqResult r = lm.forward_seq(ids, {}, 0);
    const int n = static_cast<int>(ids.size());
    const Tensor g = slice_rows(r.g, 0, n - 1);
    std::vector<int> targets(ids.begin() + 1, ids.end());
    const Tensor total = cross_entropy_logits_sum(lm.logits(g), targets, {});
    return {total, n - 1};
}

inline double lm_corpus_mean_loss(const Lm& lm, const std::vector<std::vector<int>>& sentences) {
    double total = 0.0;
    long tokens = 0;
    for (const auto& s : sentences) {
        LossParts lp = lm_sentence_loss(lm, s);
        total += lp.loss.item_f64();
        tokens += lp.token_count;
    }
    return total / static_cast<double>(tokens);
}

// Next-token pretraining of all transformer weights; the returned model is
// frozen and ready to serve as the backbone for prompt training.
inline Lm pretrain_lm(const LmConfig& cfg, const std::vector<std::vector<int>>& sentences,
                      const PretrainConfig& pcfg, MetricsWriter* metrics = nullptr) {
    if (sentences.empty()) throw DataError("pretraining corpus is empty");
    for (const auto& s : sentences)
        for (int id : s)
            if (id < 0 || id >= cfg.vocab_size()) throw DataError("pretraining token id out of range");

    Rng init_rng(pcfg.seed);
    Lm lm(LmParams::init(cfg, init_rng));
    lm.p.set_trainable(true);
    std::vector<Tensor> params;
    for (auto& [name, t] : lm.p.named_params()) params.push_back(t);
    AdamState opt = AdamState::init(params);
    Rng rng(pcfg.seed + 1);

    long tokens_seen = 0;
    for (int step = 1; step <= pcfg.steps; ++step) {
        for (auto& p : params) p.zero_grad();
        std::vector<Tensor> losses;
        long batch_tokens = 0;
        while (batch_tokens < pcfg.tokens_per_batch) {
            const auto& s = sentences[static_cast<size_t>(
                rng.uniform_int(static_cast<int>(sentences.size())))];
            LossParts lp = lm_sentence_loss(lm, s);
            losses.push_back(lp.loss);
            batch_tokens += lp.token_count;
        }
        Tensor total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        tokens_seen += batch_tokens;
        const double mean_loss = total.item_f64() / static_cast<double>(batch_tokens);
        const Tensor objective = scale(total, 1.0f / static_cast<float>(batch_tokens));
        backward(objective);
        clip_gradients(params, pcfg.grad_clip);
        ++opt.step;
        const double lr = lr_schedule(opt.step, pcfg.warmup_steps, pcfg.learning_rate);
        for (size_t i = 0; i < params.size(); ++i) {
            adam_update(params[i], params[i].grad(), opt.slots[i], opt.step, lr, opt.cfg);
            params[i].zero_grad();
        }
        if (metrics && step % pcfg.log_interval == 0) metrics->log(step, mean_loss, lr, tokens_seen);
    }
    lm.p.freeze();
    return lm;
}

}  // namespace msp
