#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "seqkv/kernels.hpp"
#include "seqkv/model.hpp"

using namespace seqkv;

namespace {

ModelConfig small_cfg(std::uint32_t vocab = 8) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    return cfg;
}

}  // namespace

TEST_CASE("same seed builds bit-identical weights, different seed does not") {
    ModelConfig cfg = small_cfg();
    cfg.seed = 42;
    const Model a = Model::build(cfg);
    const Model b = Model::build(cfg);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.weights().embed == b.weights().embed);

    cfg.seed = 43;
    const Model c = Model::build(cfg);
    CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("degenerate configs are rejected") {
    ModelConfig cfg = small_cfg();
    cfg.vocab_size = 1;
    CHECK_THROWS_AS(Model::build(cfg), std::invalid_argument);
    cfg = small_cfg();
    cfg.layers = 0;
    CHECK_THROWS_AS(Model::build(cfg), std::invalid_argument);
}

TEST_CASE("default embedding matrix has full column rank") {
    const Model m = Model::build(small_cfg());
    CHECK(m.embedding_rank() == m.config().model_dim());
    CHECK(m.min_pairwise_embedding_distance() > 0.0);
    CHECK(m.embedding_diameter() > 0.0);
}

TEST_CASE("forward is deterministic and prefix-stable") {
    const Model m = Model::build(small_cfg());
    const TokenSeq s = {3, 1, 4, 1};
    const ForwardResult r1 = m.forward(s);
    const ForwardResult r2 = m.forward(s);
    CHECK(r1.kv.bit_identical(r2.kv));

    TokenSeq ext = s;
    ext.push_back(5);
    const ForwardResult r3 = m.forward(ext);
    for (std::size_t pos = 0; pos < s.size(); ++pos) {
        CHECK(std::memcmp(r1.kv.position_vector(pos).data(),
                          r3.kv.position_vector(pos).data(),
                          r1.kv.position_dim() * sizeof(double)) == 0);
    }
    CHECK(r1.dists.size() == s.size() + 1);
    for (const auto& d : r1.dists) CHECK(d.normalized(1e-12));
}

TEST_CASE("forward validates its input") {
    const Model m = Model::build(small_cfg());
    CHECK_THROWS_AS(m.forward({}), std::invalid_argument);
    CHECK_THROWS_AS(m.forward({0, 1, 2, 3, 4, 5, 6, 7, 0}), std::invalid_argument);
    CHECK_THROWS_AS(m.forward({8}), std::invalid_argument);
}

TEST_CASE("incremental forward matches the batch forward bit for bit") {
    const Model m = Model::build(small_cfg());
    const TokenSeq s = {7, 0, 2, 6, 5};
    const ForwardResult r = m.forward(s);
    IncrementalForward fwd(m);
    for (std::size_t i = 0; i < s.size(); ++i) {
        // probe then push must agree with the committed state
        std::vector<double> probe(m.config().position_dim());
        fwd.probe_kv(s[i], probe);
        fwd.push(s[i]);
        CHECK(std::memcmp(probe.data(), fwd.position_kv(i).data(),
                          probe.size() * sizeof(double)) == 0);
    }
    CHECK(fwd.kv_tensor().bit_identical(r.kv));

    // pop restores the previous state exactly
    const NextTokenDist before = fwd.dists()[3];
    fwd.pop();
    fwd.pop();
    CHECK(fwd.size() == 3);
    CHECK(fwd.dist().probs == before.probs);
}

TEST_CASE("sequence probabilities follow the chain rule and sum to one") {
    ModelConfig cfg = small_cfg(4);
    const Model m = Model::build(cfg);

    CHECK(m.sequence_prob({}) == 1.0);

    const TokenSeq s = {2, 1};
    const NextTokenDist d = m.next_dist(s);
    for (std::uint32_t t = 0; t < 4; ++t) {
        TokenSeq ext = s;
        ext.push_back(static_cast<TokenId>(t));
        CHECK(m.sequence_prob(ext) ==
              doctest::Approx(m.sequence_prob(s) * d.probs[t]).epsilon(1e-12));
    }

    // exhaustive: probabilities of all length-3 sequences sum to 1
    double total = 0.0;
    for (std::uint32_t a = 0; a < 4; ++a)
        for (std::uint32_t b = 0; b < 4; ++b)
            for (std::uint32_t c = 0; c < 4; ++c)
                total += m.sequence_prob({static_cast<TokenId>(a),
                                          static_cast<TokenId>(b),
                                          static_cast<TokenId>(c)});
    CHECK(std::fabs(total - 1.0) <= 1e-9);
}

TEST_CASE("surprisal trace matches the distributions it came from") {
    const Model m = Model::build(small_cfg());
    const TokenSeq s = {1, 6, 3};
    const ForwardResult r = m.forward(s);
    const SurprisalTrace tr = m.surprisal_trace(s);
    REQUIRE(tr.surprisal_bits.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(tr.surprisal_bits[i] ==
              doctest::Approx(-std::log2(r.dists[i].probs[s[i]])).epsilon(1e-15));
        CHECK(tr.entropy_bits[i] ==
              doctest::Approx(r.dists[i].entropy_bits()).epsilon(1e-15));
        CHECK(tr.surprisal_bits[i] >= 0.0);
        CHECK(tr.entropy_bits[i] <= std::log2(8.0) + 1e-12);
    }
}

TEST_CASE("entropy helpers: uniform and point-mass distributions") {
    NextTokenDist uniform;
    uniform.probs.assign(8, 1.0 / 8.0);
    CHECK(uniform.entropy_bits() == doctest::Approx(3.0).epsilon(1e-15));

    NextTokenDist point;
    point.probs.assign(8, 0.0);
    point.probs[5] = 1.0;
    CHECK(point.entropy_bits() == 0.0);
    CHECK(-std::log2(point.probs[5]) == 0.0);
}

TEST_CASE("mean realized surprisal equals probability-weighted entropy") {
    // enumeration identity E[h_i] = H(t_i | t_<i) at position 2
    const Model m = Model::build(small_cfg());
    const std::uint32_t V = m.vocab_size();
    double e_h = 0.0, e_H = 0.0;
    IncrementalForward fwd(m);
    const NextTokenDist root = fwd.dist();
    for (std::uint32_t a = 0; a < V; ++a) {
        fwd.push(static_cast<TokenId>(a));
        const NextTokenDist d = fwd.dist();
        e_H += root.probs[a] * d.entropy_bits();
        for (std::uint32_t b = 0; b < V; ++b) {
            e_h += root.probs[a] * d.probs[b] * -std::log2(d.probs[b]);
        }
        fwd.pop();
    }
    CHECK(std::fabs(e_h - e_H) <= 1e-9);
}

TEST_CASE("layer-1 keys separate every token pair in every short context") {
    const Model m = Model::build(small_cfg());
    const std::uint32_t V = m.vocab_size();
    const std::size_t md = m.config().model_dim();
    enumerate_contexts(m, 2, [&](const IncrementalForward& fwd) {
        std::vector<std::vector<double>> keys(V);
        for (std::uint32_t t = 0; t < V; ++t) {
            auto p = fwd.probe(static_cast<TokenId>(t));
            keys[t].assign(p.kv.begin(), p.kv.begin() + md);
        }
        for (std::uint32_t a = 0; a < V; ++a) {
            for (std::uint32_t b = a + 1; b < V; ++b) {
                CHECK(std::memcmp(keys[a].data(), keys[b].data(),
                                  md * sizeof(double)) != 0);
            }
        }
    });
}

TEST_CASE("lipschitz estimate on a linearized model matches direct arithmetic") {
    // zero the attention output and mlp projections: the residual stream then
    // carries the embedding through unchanged and every kv vector is exactly
    // W_kv (E(t) + pe); the estimate must reduce to the projection ratios
    ModelConfig cfg = small_cfg();
    Model seeded = Model::build(cfg);
    ModelWeights w = seeded.weights();
    for (auto& lw : w.layers) {
        std::fill(lw.wq.begin(), lw.wq.end(), 0.0);
        std::fill(lw.wo.begin(), lw.wo.end(), 0.0);
        std::fill(lw.w1.begin(), lw.w1.end(), 0.0);
        std::fill(lw.w2.begin(), lw.w2.end(), 0.0);
    }
    const Model m(cfg, w);
    const LipschitzEstimate est = m.lipschitz_estimate(2);

    const std::size_t md = cfg.model_dim();
    const std::size_t L = cfg.layers;
    auto matvec = [&](const std::vector<double>& mat, const std::vector<double>& x) {
        std::vector<double> y(md);
        for (std::size_t r = 0; r < md; ++r)
            y[r] = kern::dot(mat.data() + r * md, x.data(), md);
        return y;
    };

    double expect_kappa = 1.0;
    std::vector<double> expect_layer(L, 1.0);
    for (std::uint32_t a = 0; a < cfg.vocab_size; ++a) {
        for (std::uint32_t b = a + 1; b < cfg.vocab_size; ++b) {
            std::vector<double> de(md);
            kern::sub(m.token_embedding(static_cast<TokenId>(a)).data(),
                      m.token_embedding(static_cast<TokenId>(b)).data(), de.data(), md);
            const double nde = std::sqrt(kern::dot(de.data(), de.data(), md));
            double full_sq = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                const auto dk = matvec(w.layers[l].wk, de);
                const auto dv = matvec(w.layers[l].wv, de);
                const double dkv_sq = kern::dot(dk.data(), dk.data(), md) +
                                      kern::dot(dv.data(), dv.data(), md);
                full_sq += dkv_sq;
                const double r_kv = std::sqrt(dkv_sq) / nde;
                expect_layer[l] = std::max(expect_layer[l], std::max(1.0, r_kv));
                expect_kappa = std::max(
                    expect_kappa, std::pow(std::sqrt(dkv_sq) / nde,
                                           1.0 / static_cast<double>(l + 1)));
            }
            expect_kappa = std::max(
                expect_kappa,
                std::pow(std::sqrt(full_sq) / nde, 1.0 / static_cast<double>(L)));
        }
    }
    for (std::size_t l = 0; l < L; ++l) {
        CHECK(est.per_layer[l] == doctest::Approx(expect_layer[l]).epsilon(1e-9));
    }
    CHECK(est.global_kappa == doctest::Approx(expect_kappa).epsilon(1e-9));
    CHECK(est.global_kappa >= 1.0);
    CHECK(est.f_lip(cfg.layers) >= est.full_map);
}

TEST_CASE("lipschitz chain inequality holds over enumerated substitutions") {
    const Model m = Model::build(small_cfg());
    const LipschitzEstimate est = m.lipschitz_estimate(2);
    const std::size_t md = m.config().model_dim();
    const std::size_t L = m.config().layers;

    enumerate_contexts(m, 2, [&](const IncrementalForward& fwd) {
        std::vector<IncrementalForward::Probe> probes;
        for (std::uint32_t t = 0; t < m.vocab_size(); ++t)
            probes.push_back(fwd.probe(static_cast<TokenId>(t)));
        for (std::uint32_t a = 0; a < m.vocab_size(); ++a) {
            for (std::uint32_t b = a + 1; b < m.vocab_size(); ++b) {
                const double de = std::sqrt(kern::sum_sq_diff(
                    m.token_embedding(static_cast<TokenId>(a)).data(),
                    m.token_embedding(static_cast<TokenId>(b)).data(), md));
                for (std::size_t l = 0; l < L; ++l) {
                    const double dkv = std::sqrt(kern::sum_sq_diff(
                        probes[a].kv.data() + l * 2 * md,
                        probes[b].kv.data() + l * 2 * md, 2 * md));
                    const double bound =
                        std::pow(est.global_kappa, static_cast<double>(l + 1)) * de;
                    CHECK(dkv <= bound * (1.0 + 1e-12));
                }
            }
        }
    });
}

TEST_CASE("config round-trips through the key=value map") {
    ModelConfig cfg = small_cfg(6);
    cfg.seed = 99;
    cfg.max_context = 12;
    const ModelConfig back = ModelConfig::from_map(cfg.to_map());
    CHECK(back.vocab_size == cfg.vocab_size);
    CHECK(back.seed == cfg.seed);
    CHECK(back.max_context == cfg.max_context);
}
