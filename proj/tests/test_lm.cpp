#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "msp/lm.hpp"
#include "support/reference_lm.hpp"

using namespace msp;

namespace {

LmConfig tiny_config() {
    LmConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.alphabet_size = 6;
    cfg.max_positions = 24;
    cfg.prompt_length = 3;
    return cfg;
}

Lm random_lm(uint64_t seed, LmConfig cfg = tiny_config(), double stddev = 0.2) {
    Rng rng(seed);
    Lm lm(LmParams::init(cfg, rng, stddev));
    return lm;
}

std::vector<int> random_tokens(Rng& rng, const LmConfig& cfg, int len) {
    std::vector<int> t(static_cast<size_t>(len));
    for (auto& id : t) id = rng.uniform_int(cfg.vocab_size());
    return t;
}

PastChunk random_past_chunk(Rng& rng, const LmConfig& cfg, int len) {
    PastChunk c;
    c.len = len;
    for (int l = 0; l < cfg.n_layers; ++l) {
        c.k.push_back(Tensor::randn({len, cfg.d_model}, rng, 0.5));
        c.v.push_back(Tensor::randn({len, cfg.d_model}, rng, 0.5));
    }
    return c;
}

}  // namespace

TEST_CASE("embed is the sum of token and position rows") {
    Lm lm = random_lm(1);
    const int d = lm.cfg().d_model;

    SECTION("zero position table gives the token row exactly") {
        for (float& v : lm.p.position_embedding.data()) v = 0.0f;
        const Tensor e = lm.embed(7, 0);
        for (int j = 0; j < d; ++j) REQUIRE(e.data()[j] == lm.p.token_embedding.at(7, j));
    }

    SECTION("additive decomposition across positions") {
        const Tensor e_p = lm.embed(3, 5);
        const Tensor e_0 = lm.embed(3, 0);
        for (int j = 0; j < d; ++j)
            REQUIRE(e_p.data()[j] - e_0.data()[j] ==
                    Catch::Approx(lm.p.position_embedding.at(5, j) -
                                  lm.p.position_embedding.at(0, j))
                        .margin(1e-6));
    }

    SECTION("out-of-range ids and positions are errors") {
        REQUIRE_THROWS_AS(lm.embed(lm.cfg().vocab_size(), 0), ShapeError);
        REQUIRE_THROWS_AS(lm.embed(0, lm.cfg().max_positions), ShapeError);
    }
}

TEST_CASE("single-token sequence equals one step") {
    Lm lm = random_lm(2);
    Rng rng(3);
    const PastChunk past_chunk = random_past_chunk(rng, lm.cfg(), 4);
    PastSequence past;
    past.append(past_chunk);

    const SeqResult seq = lm.forward_seq({5}, past, 0);
    const SeqResult step = lm.step(lm.embed(5, 0), past);
    for (size_t i = 0; i < seq.g.numel(); ++i)
        REQUIRE(seq.g.data()[i] == Catch::Approx(step.g.data()[i]).margin(1e-6));
    REQUIRE(seq.chunk.len == 1);
    for (int l = 0; l < lm.cfg().n_layers; ++l) {
        REQUIRE(seq.chunk.k[l].rows() == 1);
        REQUIRE(seq.chunk.v[l].rows() == 1);
    }
}

TEST_CASE("incremental steps match the full-sequence forward") {
    // cache equivalence over random models and token sequences
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Lm lm = random_lm(100 + seed);
        Rng rng(200 + seed);
        const int len = 2 + rng.uniform_int(11);
        const std::vector<int> tokens = random_tokens(rng, lm.cfg(), len);

        PastSequence past;
        if (seed % 2 == 1) past.append(random_past_chunk(rng, lm.cfg(), 3));

        const SeqResult full = lm.forward_seq(tokens, past, 0);

        PastSequence incremental = past;
        for (int t = 0; t < len; ++t) {
            const SeqResult r = lm.step(lm.embed(tokens[static_cast<size_t>(t)], t), incremental);
            incremental.append(r.chunk);
            for (int j = 0; j < lm.cfg().d_model; ++j)
                REQUIRE(std::abs(r.g.data()[static_cast<size_t>(j)] - full.g.at(t, j)) <= 1e-5);
        }
    }
}

TEST_CASE("full-matrix forward matches the reference mask oracle") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        Lm lm = random_lm(300 + seed);
        Rng rng(400 + seed);
        const std::vector<int> tokens = random_tokens(rng, lm.cfg(), 6);

        reforacle::RefPast ref_past = reforacle::RefPast::empty(lm.cfg().n_layers);
        PastSequence past;
        if (seed % 2 == 0) {
            const PastChunk chunk = random_past_chunk(rng, lm.cfg(), 4);
            past.append(chunk);
            for (int l = 0; l < lm.cfg().n_layers; ++l)
                for (int r = 0; r < chunk.len; ++r) {
                    ref_past.k[l].push_back(reforacle::row_of(chunk.k[l], r));
                    ref_past.v[l].push_back(reforacle::row_of(chunk.v[l], r));
                }
        }

        const SeqResult got = lm.forward_seq(tokens, past, 2);
        const reforacle::RefResult want = reforacle::ref_forward(lm.p, tokens, ref_past, 2);
        REQUIRE(reforacle::max_abs_diff(got.g, want.g) <= 1e-5);
        REQUIRE(reforacle::max_abs_diff_past(got.chunk, want.produced) <= 1e-5);
    }
}

TEST_CASE("causality: token j only influences positions at or after j") {
    Lm lm = random_lm(5);
    Rng rng(6);
    const int len = 8;
    const std::vector<int> tokens = random_tokens(rng, lm.cfg(), len);
    const SeqResult base = lm.forward_seq(tokens, {}, 0);

    for (int j = 0; j < len; ++j) {
        std::vector<int> mutated = tokens;
        mutated[static_cast<size_t>(j)] = (mutated[static_cast<size_t>(j)] + 1) % lm.cfg().vocab_size();
        const SeqResult alt = lm.forward_seq(mutated, {}, 0);
        for (int i = 0; i < len; ++i) {
            double diff = 0.0;
            for (int c = 0; c < lm.cfg().d_model; ++c)
                diff = std::max(diff, std::abs(static_cast<double>(alt.g.at(i, c)) - base.g.at(i, c)));
            if (i < j) {
                REQUIRE(diff == 0.0);  // strictly causal
            } else if (i == j) {
                REQUIRE(diff > 1e-8);
            }
        }
    }
}

TEST_CASE("with zeroed attention output projections the past is invisible") {
    Lm lm = random_lm(7);
    for (auto& layer : lm.p.layers) {
        for (float& v : layer.w_attn_out.data()) v = 0.0f;
        for (float& v : layer.b_attn_out.data()) v = 0.0f;
    }
    Rng rng(8);
    const std::vector<int> tokens = random_tokens(rng, lm.cfg(), 5);

    const SeqResult without = lm.forward_seq(tokens, {}, 0);
    PastSequence past;
    past.append(random_past_chunk(rng, lm.cfg(), 6));
    const SeqResult with = lm.forward_seq(tokens, past, 0);

    REQUIRE(without.g.data() == with.g.data());
}

TEST_CASE("output distribution is the tied softmax") {
    Lm lm = random_lm(9);
    const int v = lm.cfg().vocab_size();

    SECTION("zero hidden state gives the uniform distribution") {
        const Tensor dist = lm.output_distribution(Tensor::zeros({1, lm.cfg().d_model}));
        for (int j = 0; j < v; ++j)
            REQUIRE(dist.data()[static_cast<size_t>(j)] == Catch::Approx(1.0 / v).margin(1e-6));
    }

    SECTION("rows sum to one") {
        Rng rng(10);
        const Tensor g = Tensor::randn({3, lm.cfg().d_model}, rng, 1.0);
        const Tensor dist = lm.output_distribution(g);
        for (int i = 0; i < 3; ++i) {
            double sum = 0.0;
            for (int j = 0; j < v; ++j) sum += dist.at(i, j);
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }

    SECTION("matches the closed form computed by hand") {
        // d = 2 model; probabilities depend only on e_i . g
        LmConfig cfg = tiny_config();
        cfg.d_model = 2;
        cfg.n_heads = 1;
        cfg.alphabet_size = 2;  // V = 8
        Lm small = random_lm(11, cfg);
        const Tensor g = Tensor::from_data({1, 2}, {0.3f, -0.7f});
        const Tensor dist = small.output_distribution(g);
        double denom = 0.0;
        std::vector<double> num(static_cast<size_t>(cfg.vocab_size()));
        for (int i = 0; i < cfg.vocab_size(); ++i) {
            const double dot = small.p.token_embedding.at(i, 0) * 0.3 +
                               small.p.token_embedding.at(i, 1) * -0.7;
            num[static_cast<size_t>(i)] = std::exp(dot);
            denom += num[static_cast<size_t>(i)];
        }
        for (int i = 0; i < cfg.vocab_size(); ++i)
            REQUIRE(dist.data()[static_cast<size_t>(i)] ==
                    Catch::Approx(num[static_cast<size_t>(i)] / denom).margin(1e-6));
    }
}

TEST_CASE("position overflow is reported") {
    Lm lm = random_lm(12);
    std::vector<int> tokens(static_cast<size_t>(lm.cfg().max_positions) + 1, 6);
    REQUIRE_THROWS_AS(lm.forward_seq(tokens, {}, 0), ShapeError);
    REQUIRE_THROWS_AS(lm.forward_seq({6, 7}, {}, lm.cfg().max_positions - 1), ShapeError);
}

TEST_CASE("lm weights survive a checkpoint round trip") {
    Lm lm = random_lm(13);
    Checkpoint ck;
    lm_to_checkpoint(lm, ck);
    const std::string path = "lm_test_ck.mspc";
    ck.save(path);

    const Checkpoint loaded = Checkpoint::load(path);
    LmParams back = lm_from_checkpoint(loaded, lm.cfg());
    REQUIRE(back.token_embedding.data() == lm.p.token_embedding.data());
    for (int l = 0; l < lm.cfg().n_layers; ++l)
        REQUIRE(back.layers[l].w_qkv.data() == lm.p.layers[l].w_qkv.data());
    std::remove(path.c_str());
}

TEST_CASE("activation accessor exposes per-layer key value pairs") {
    Lm lm = random_lm(14);
    Rng rng(15);
    PastSequence past;
    past.append(random_past_chunk(rng, lm.cfg(), 2));
    past.append(random_past_chunk(rng, lm.cfg(), 3));
    REQUIRE(past.length() == 5);

    const Activation a = past.at(3, lm.cfg().n_layers);
    REQUIRE(a.keys.size() == static_cast<size_t>(lm.cfg().n_layers));
    REQUIRE(a.values.size() == static_cast<size_t>(lm.cfg().n_layers));
    for (const auto& k : a.keys) REQUIRE(k.size() == static_cast<size_t>(lm.cfg().d_model));
    // row 3 lives in the second chunk at offset 1
    const float expect = past.chunks[1].k[0].at(1, 0);
    REQUIRE(a.keys[0][0] == expect);
    REQUIRE_THROWS_AS(past.at(5, lm.cfg().n_layers), ShapeError);
}
