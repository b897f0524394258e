#pragma once

// End-to-end gradient verification: analytic gradients of the three-stage
// loss w.r.t. every prompt parameter group against central finite
// differences. Runs on a small randomly-initialized frozen backbone with
// healthy-scale weights (tiny default init scales would push many gradient
// coordinates below the f32 noise floor and make relative error
// meaningless, without exercising backward any less).
//
// Error measure: per group, the max over coordinates of |analytic - numeric|
// relative to the group's gradient scale (max |analytic| + 1e-8). A
// per-coordinate denominator is hopeless in f32; individual coordinates can
// be arbitrarily close to zero while the finite-difference quotient carries
// a noise floor of about 1e-4, and a genuinely wrong backward shows up at
// the gradient's own scale anyway.

#include <string>
#include <vector>

#include "msp/training.hpp"

namespace msp {

struct GradCheckConfig {
    int n_layers = 2;
    int d_model = 16;
    int n_heads = 4;
    int alphabet_size = 14;  // vocab 20
    int prompt_length = 4;
    int source_len = 5;
    int target_len = 5;
    uint64_t seed = 17;
    double eps = 1e-2;
    double tolerance = 1e-2;
    double lm_stddev = 0.25;
    double prompt_stddev = 0.4;
    bool corrupt_analytic = false;  // negative-control hook: break one gradient
};

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    long coords = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst = 0.0;
    double tolerance = 0.0;
    bool passed = false;

    std::string to_json() const {
        std::string s = "{\"tolerance\": " + std::to_string(tolerance) +
                        ", \"passed\": " + (passed ? "true" : "false") + ", \"groups\": [";
        for (size_t i = 0; i < groups.size(); ++i) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%s{\"name\": \"%s\", \"max_rel_err\": %.6g}",
                          i ? ", " : "", groups[i].name.c_str(), groups[i].max_rel_err);
            s += buf;
        }
        s += "]}\n";
        return s;
    }
};

inline GradCheckReport msp_gradcheck(const GradCheckConfig& gc) {
    LmConfig cfg;
    cfg.n_layers = gc.n_layers;
    cfg.d_model = gc.d_model;
    cfg.n_heads = gc.n_heads;
    cfg.alphabet_size = gc.alphabet_size;
    cfg.max_positions = 2 * (gc.source_len + gc.target_len) + 8;
    cfg.prompt_length = gc.prompt_length;

    Rng rng(gc.seed);
    Lm lm(LmParams::init(cfg, rng, gc.lm_stddev));
    lm.p.freeze();

    PromptParams params = PromptParams::init(cfg, gc.prompt_length, rng, false, gc.prompt_stddev);
    std::vector<int> x(static_cast<size_t>(gc.source_len));
    for (auto& t : x) t = kNumSpecials + rng.uniform_int(cfg.alphabet_size);
    std::vector<int> y(static_cast<size_t>(gc.target_len));
    for (auto& t : y) t = kNumSpecials + rng.uniform_int(cfg.alphabet_size);

    auto loss_value = [&]() {
        const StagePrompts sp = reparameterize(params);
        return msp_pair_loss(lm, sp, x, y).loss;
    };

    GradCheckReport report;
    report.tolerance = gc.tolerance;

    // one backward pass for all groups
    for (auto& [name, t] : params.named_params()) t.zero_grad();
    backward(loss_value());

    for (auto& [name, t] : params.named_params()) {
        std::vector<float> analytic = t.grad();
        if (gc.corrupt_analytic && !analytic.empty()) analytic[0] += 0.5f;

        double scale = 0.0;
        for (float a : analytic) scale = std::max(scale, static_cast<double>(std::abs(a)));

        GradCheckGroup group;
        group.name = name;
        group.coords = static_cast<long>(analytic.size());
        double worst_abs = 0.0;
        for (size_t i = 0; i < t.numel(); ++i) {
            const float orig = t.data()[i];
            t.data()[i] = static_cast<float>(orig + gc.eps);
            const double fp = loss_value().item_f64();
            t.data()[i] = static_cast<float>(orig - gc.eps);
            const double fm = loss_value().item_f64();
            t.data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * gc.eps);
            worst_abs = std::max(worst_abs, std::abs(analytic[i] - numeric));
        }
        group.max_rel_err = worst_abs / (scale + 1e-8);
        report.worst = std::max(report.worst, group.max_rel_err);
        report.groups.push_back(std::move(group));
    }
    report.passed = report.worst <= gc.tolerance;
    return report;
}

}  // namespace msp
