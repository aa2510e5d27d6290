#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqkv/config.hpp"
#include "seqkv/model.hpp"
#include "seqkv/predictor.hpp"
#include "seqkv/trie.hpp"

namespace seqkv {

enum class QuantMode {
    uniform,    // fixed depth b0 for every tail position
    adaptive,   // depth = max(1, floor(b0 * h_i / hbar))
    waterfill,  // depth from the rate-distortion allocation at distortion D
    raw32,      // f32 passthrough: tail positions at full-cache precision,
                // used to measure the prefix-dedup layer in isolation
};

const char* quant_mode_name(QuantMode m);
QuantMode quant_mode_from_name(const std::string& name);

struct CodecConfig {
    QuantMode mode = QuantMode::adaptive;
    std::uint32_t base_depth = 3;    // b0 in [1, 16]
    double target_distortion = 0.0;  // D (per component, squared units); waterfill
    double mean_surprisal = 0.0;     // hbar; 0 means calibrate from the workload
    PredictionMethod prediction = PredictionMethod::exact;
    std::uint32_t topk_k = 4;
    // subtract the centroid's tail kv instead of the model prediction
    bool centroid_delta = false;

    void validate() const;
    KvMap to_map() const;
    static CodecConfig from_map(const KvMap& kv);
};

// ------------------------------------------------------------- layer 3

std::uint32_t adaptive_depth(double h_bits, std::uint32_t b0, double hbar_bits);

struct WaterfillRate {
    double rate_bits_total = 0.0;     // (dim/2) * max(0, log2(sigma2 / D))
    std::uint32_t per_component = 0;  // ceil(rate / dim), floored at zero
};
WaterfillRate waterfill_rate(double sigma2, double distortion, std::uint32_t dim);

// One encoded tail position. depth in [0,16] selects the offset-binary
// midrise quantizer over [-scale, +scale]; depth 0 stores scale-only metadata
// and decodes to the zero residual; depth 32 is the raw f32 passthrough.
struct EncodedPosition {
    std::uint8_t depth = 0;
    float scale = 0.0f;  // >= max |component| by the round-up scale policy
    std::vector<std::uint32_t> codes;
    std::size_t clamped = 0;  // encode-side clamps (not serialized)

    // serialized record size in bits: depth u8 + scale f32 + padded codes
    std::size_t record_bits(std::size_t dim) const;
};

EncodedPosition encode_residual(std::span<const double> residual, std::uint32_t depth);
std::vector<double> decode_residual(const EncodedPosition& rec, std::size_t dim);

// guaranteed max-abs per-component decode error: scale / 2^depth for the
// midrise depths, scale * 2^-24 for raw f32, +inf for depth 0
double decode_error_bound(const EncodedPosition& rec);

// ------------------------------------------------------------- container

struct MemberSection {
    std::uint32_t session_id = 0;
    std::uint32_t centroid_id = 0;
    std::uint16_t divergence_position = 0;  // shared prefix length with centroid
    TokenSeq tail_tokens;                   // positions divergence+1 .. n
    std::vector<EncodedPosition> tail;

    std::size_t section_bits(std::size_t dim) const;
    // payload bits attributable to 1-based position p (0 for the shared prefix)
    std::size_t payload_bits_at(std::size_t position, std::size_t dim) const;
};

// On-disk container, one per cluster. Byte layout (all integers little
// endian): magic "SKVC", version u16, model fingerprint u64, config block
// (u32 length + key=value text, which echoes the model/codec config and the
// centroid session id), centroid section (token count u16, tokens u16 each,
// kv payload f32), member count u16, then per member: session id u32,
// centroid id u32, divergence position u16, position count u16, tail tokens
// u16 each, and per position depth u8 + scale f32 + codes packed LSB-first
// and padded to a byte boundary.
struct CompressedCache {
    std::uint16_t version = 1;
    std::uint64_t model_fingerprint = 0;
    KvMap config_echo;
    std::uint32_t centroid_id = 0;
    TokenSeq centroid_tokens;
    std::vector<float> centroid_kv;  // n_positions x position_dim, f32
    std::vector<MemberSection> members;
    std::uint64_t total_bits = 0;  // exact serialized length in bits

    std::size_t position_dim() const;
    std::size_t centroid_section_bits() const;
};

std::vector<std::uint8_t> serialize(const CompressedCache& cache);
// parses one container starting at data[offset]; advances offset
CompressedCache parse_container(std::span<const std::uint8_t> data, std::size_t& offset);

void write_containers(const std::string& path, const std::vector<CompressedCache>& caches);
std::vector<CompressedCache> read_containers(const std::string& path);

// ------------------------------------------------------------- pipeline

// Three-layer encode of one cluster: the centroid is stored in full, every
// other member keeps zero payload for the shared prefix and an encoded
// residual stream for its tail.
CompressedCache compress_cluster(const Model& m, const std::vector<TokenSeq>& sessions,
                                 const ClusterRecord& rec, const CodecConfig& cfg);

std::vector<CompressedCache> compress_workload(const Model& m,
                                               const std::vector<TokenSeq>& sessions,
                                               const std::vector<ClusterRecord>& records,
                                               const CodecConfig& cfg);

struct DecodedSession {
    std::uint32_t session_id = 0;
    TokenSeq tokens;
    KvTensor kv;
};

// Reconstructs every session in the container. Prefix positions are copied
// from the centroid cache, which is itself recomputed from the stored tokens
// (bit-identical by determinism); tail positions decode the residual stream
// and add back the recomputed prediction.
std::vector<DecodedSession> decompress(const CompressedCache& cache, const Model& m);

// decode one member section against an f64 centroid cache
KvTensor decode_member(const CompressedCache& cache, const MemberSection& mem,
                       const KvTensor& centroid_kv, const Model& m);

// ------------------------------------------------------------- ratio arithmetic

struct RatioReport {
    double bits_per_token = 0.0;       // B_b = 2 L H d b
    double bits_per_token_fp16 = 0.0;  // B_fp16 = 2 L H d 16
    double ratio_vs_floor = 0.0;       // B_b / (hbar * overhead_factor)
    double ratio_fp16_vs_floor = 0.0;  // B_fp16 / hbar
};
RatioReport theoretical_ratio(double layers, double heads, double head_dim,
                              double depth_bits, double hbar,
                              double overhead_factor);

// round to 3 significant figures, for report formatting and checks
double round_sig(double v, int digits);
std::string format_sig(double v, int digits);

}  // namespace seqkv
