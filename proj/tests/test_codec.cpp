#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "seqkv/codec.hpp"
#include "seqkv/kernels.hpp"
#include "seqkv/model.hpp"
#include "seqkv/trie.hpp"

using namespace seqkv;

namespace {

Model default_model(std::uint32_t max_context = 8) {
    ModelConfig cfg;
    cfg.max_context = max_context;
    return Model::build(cfg);
}

std::vector<double> random_residual(std::size_t n, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

}  // namespace

TEST_CASE("adaptive depth follows max(1, floor(b0 h / hbar))") {
    const double hbar = 2.5;
    CHECK(adaptive_depth(0.0, 3, hbar) == 1);
    CHECK(adaptive_depth(hbar, 3, hbar) == 3);
    CHECK(adaptive_depth(2.0 * hbar + 1e-9, 3, hbar) == 6);
    CHECK(adaptive_depth(0.4 * hbar, 3, hbar) == 1);
    CHECK_THROWS_AS(adaptive_depth(1.0, 3, 0.0), std::invalid_argument);
}

TEST_CASE("waterfill rate is zero at or below the distortion target") {
    CHECK(waterfill_rate(1.0, 1.0, 4).per_component == 0);
    CHECK(waterfill_rate(1.0, 1.0, 4).rate_bits_total == 0.0);
    CHECK(waterfill_rate(0.0, 1.0, 4).per_component == 0);
    const WaterfillRate r = waterfill_rate(4.0, 1.0, 4);
    CHECK(r.rate_bits_total == doctest::Approx(4.0));
    CHECK(r.per_component == 1);
    CHECK(waterfill_rate(5.0, 1.0, 4).per_component == 2);  // ceil(1.16) per comp
    CHECK_THROWS_AS(waterfill_rate(1.0, 0.0, 4), std::invalid_argument);
}

TEST_CASE("encode/decode honors the per-component error bound") {
    for (std::uint32_t depth : {1u, 2u, 4u, 8u, 16u}) {
        const auto x = random_residual(32, depth, 0.37);
        const EncodedPosition rec = encode_residual(x, depth);
        CHECK(rec.clamped == 0);  // round-up scale policy never clamps
        CHECK(static_cast<double>(rec.scale) >=
              kern::max_abs(x.data(), x.size()));
        const auto back = decode_residual(rec, x.size());
        const double bound = decode_error_bound(rec);
        CHECK(bound == std::ldexp(static_cast<double>(rec.scale),
                                  -static_cast<int>(depth)));
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(std::fabs(x[i] - back[i]) <= bound);
        }
    }
}

TEST_CASE("depth-0 records decode to the zero residual") {
    const auto x = random_residual(32, 9, 1.0);
    const EncodedPosition rec = encode_residual(x, 0);
    CHECK(rec.codes.empty());
    const auto back = decode_residual(rec, x.size());
    for (double v : back) CHECK(v == 0.0);
    CHECK(std::isinf(decode_error_bound(rec)));
    CHECK(rec.record_bits(32) == 8 + 32);
}

TEST_CASE("raw32 records round-trip through f32") {
    const auto x = random_residual(32, 10, 2.0);
    const EncodedPosition rec = encode_residual(x, 32);
    const auto back = decode_residual(rec, x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(back[i] == static_cast<double>(static_cast<float>(x[i])));
        CHECK(std::fabs(x[i] - back[i]) <= decode_error_bound(rec));
    }
}

TEST_CASE("zero and non-finite residuals") {
    const std::vector<double> zeros(16, 0.0);
    const EncodedPosition rec = encode_residual(zeros, 4);
    CHECK(rec.scale == 0.0f);
    for (double v : decode_residual(rec, 16)) CHECK(v == 0.0);

    std::vector<double> bad(4, 0.0);
    bad[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(encode_residual(bad, 4), std::invalid_argument);
    CHECK_THROWS_AS(encode_residual(zeros, 17), std::invalid_argument);
}

TEST_CASE("container bytes follow the documented little-endian layout") {
    const Model m = default_model();
    CompressedCache cache;
    cache.model_fingerprint = m.fingerprint();
    cache.config_echo = m.config().to_map();
    cache.config_echo["centroid_id"] = "9";
    cache.centroid_id = 9;
    cache.centroid_tokens = {1, 2};
    cache.centroid_kv.assign(2 * m.config().position_dim(), 0.25f);

    MemberSection mem;
    mem.session_id = 4;
    mem.centroid_id = 9;
    mem.divergence_position = 1;
    mem.tail_tokens = {3};
    mem.tail.push_back(encode_residual(random_residual(
        m.config().position_dim(), 3, 0.1), 3));
    cache.members.push_back(mem);

    const auto bytes = serialize(cache);
    CHECK(bytes[0] == 'S');
    CHECK(bytes[1] == 'K');
    CHECK(bytes[2] == 'V');
    CHECK(bytes[3] == 'C');
    CHECK(bytes[4] == 1);  // version u16 le
    CHECK(bytes[5] == 0);
    std::uint64_t fp = 0;
    for (int i = 0; i < 8; ++i) fp |= static_cast<std::uint64_t>(bytes[6 + i]) << (8 * i);
    CHECK(fp == m.fingerprint());

    std::size_t offset = 0;
    const CompressedCache back = parse_container(bytes, offset);
    CHECK(offset == bytes.size());
    CHECK(back.total_bits == 8 * bytes.size());
    CHECK(back.centroid_id == 9);
    CHECK(back.centroid_tokens == cache.centroid_tokens);
    CHECK(back.centroid_kv == cache.centroid_kv);
    REQUIRE(back.members.size() == 1);
    CHECK(back.members[0].session_id == 4);
    CHECK(back.members[0].divergence_position == 1);
    CHECK(back.members[0].tail_tokens == mem.tail_tokens);
    CHECK(back.members[0].tail[0].depth == 3);
    CHECK(back.members[0].tail[0].codes == mem.tail[0].codes);

    // serialization is its own inverse on the parsed struct
    CHECK(serialize(back) == bytes);

    // truncation is detected
    auto cut = bytes;
    cut.resize(bytes.size() - 3);
    std::size_t off2 = 0;
    CHECK_THROWS_AS(parse_container(cut, off2), std::runtime_error);
}

TEST_CASE("compress stores the shared prefix for free and decode is bounded") {
    const Model m = default_model();
    // two sessions sharing a 3-token prefix
    std::vector<TokenSeq> sessions = {{1, 2, 3, 4, 5}, {1, 2, 3, 6, 0}};
    const auto records = cluster_sessions(m, sessions, 1.0);
    REQUIRE(records.size() == 1);
    REQUIRE(records[0].members.size() == 2);

    CodecConfig cfg;
    cfg.mode = QuantMode::uniform;
    cfg.base_depth = 4;
    const CompressedCache cache = compress_cluster(m, sessions, records[0], cfg);
    CHECK(cache.total_bits == 8 * serialize(cache).size());
    REQUIRE(cache.members.size() == 1);
    const MemberSection& mem = cache.members[0];
    CHECK(mem.divergence_position == 3);
    CHECK(mem.tail.size() == 2);
    for (std::size_t p = 1; p <= 3; ++p) {
        CHECK(mem.payload_bits_at(p, m.config().position_dim()) == 0);
    }
    CHECK(mem.payload_bits_at(4, m.config().position_dim()) > 0);

    const auto decoded = decompress(cache, m);
    REQUIRE(decoded.size() == 2);
    for (const auto& ds : decoded) {
        const ForwardResult direct = m.forward(ds.tokens);
        const std::size_t dbar =
            ds.session_id == cache.centroid_id ? ds.tokens.size() : 3;
        for (std::size_t pos = 0; pos < ds.tokens.size(); ++pos) {
            const auto a = direct.kv.position_vector(pos);
            const auto b = ds.kv.position_vector(pos);
            if (pos < dbar) {
                for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
            } else {
                const EncodedPosition& rec = mem.tail[pos - dbar];
                const double bound = decode_error_bound(rec);
                for (std::size_t i = 0; i < a.size(); ++i) {
                    CHECK(std::fabs(a[i] - b[i]) <= bound);
                }
            }
        }
    }

    // byte-reproducible encoding
    const CompressedCache again = compress_cluster(m, sessions, records[0], cfg);
    CHECK(serialize(again) == serialize(cache));
}

TEST_CASE("decompress rejects a mismatched model") {
    const Model m = default_model();
    std::vector<TokenSeq> sessions = {{1, 2, 3}};
    const auto records = cluster_sessions(m, sessions, 1.0);
    CodecConfig cfg;
    const CompressedCache cache = compress_cluster(m, sessions, records[0], cfg);

    ModelConfig other_cfg = m.config();
    other_cfg.seed = 43;
    const Model other = Model::build(other_cfg);
    CHECK_THROWS_AS(decompress(cache, other), std::runtime_error);
}

TEST_CASE("centroid-delta tails reconstruct against the centroid cache") {
    const Model m = default_model();
    std::vector<TokenSeq> sessions = {{1, 2, 3, 4, 5}, {1, 2, 3, 6, 0}};
    const auto records = cluster_sessions(m, sessions, 1.0);
    CodecConfig cfg;
    cfg.mode = QuantMode::uniform;
    cfg.base_depth = 8;
    cfg.centroid_delta = true;
    const CompressedCache cache = compress_cluster(m, sessions, records[0], cfg);
    const auto decoded = decompress(cache, m);
    for (const auto& ds : decoded) {
        const ForwardResult direct = m.forward(ds.tokens);
        for (std::size_t pos = 0; pos < ds.tokens.size(); ++pos) {
            const auto a = direct.kv.position_vector(pos);
            const auto b = ds.kv.position_vector(pos);
            for (std::size_t i = 0; i < a.size(); ++i) {
                CHECK(std::fabs(a[i] - b[i]) <= 1e-2);
            }
        }
    }
}

TEST_CASE("headline ratio arithmetic reproduces the reference constants") {
    const RatioReport r = theoretical_ratio(80, 64, 128, 3, 4.3, 1.0);
    CHECK(r.bits_per_token == doctest::Approx(3932160.0));
    CHECK(round_sig(r.bits_per_token, 3) == 3.93e6);
    CHECK(round_sig(r.ratio_vs_floor, 3) == 914000.0);
    CHECK(round_sig(r.ratio_fp16_vs_floor, 2) == 4.9e6);

    const RatioReport r16 = theoretical_ratio(80, 64, 128, 16, 4.3, 1.0);
    CHECK(r16.bits_per_token == doctest::Approx(20971520.0));
    CHECK(round_sig(r16.ratio_vs_floor, 2) == 4.9e6);

    const RatioReport r1000 = theoretical_ratio(80, 64, 128, 3, 4.3, 1000.0);
    CHECK(round_sig(r1000.ratio_vs_floor, 3) == 914.0);

    CHECK_THROWS_AS(theoretical_ratio(0, 64, 128, 3, 4.3, 1.0),
                    std::invalid_argument);
}
