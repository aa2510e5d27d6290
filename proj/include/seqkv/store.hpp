#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "seqkv/codec.hpp"

namespace seqkv {

struct CentroidCache {
    std::uint32_t session_id = 0;
    TokenSeq tokens;
    KvTensor kv;  // f64; forward on the stored tokens reproduces it bit-identically
    std::uint64_t model_fingerprint = 0;
};

// Sparse delta cache of one cluster member: zero payload for the shared
// prefix, an encoded residual stream for the tail.
struct DeltaCache {
    std::uint32_t session_id = 0;
    std::uint32_t centroid_id = 0;
    std::uint32_t divergence_position = 0;
    std::uint64_t stored_bits = 0;  // exact serialized member-section size
    const MemberSection* section = nullptr;

    // payload bits attributable to 1-based position p; exactly 0 for p <= dbar
    std::size_t payload_bits_at(std::size_t position, std::size_t dim) const;
};

struct StorageReport {
    std::size_t sessions = 0;
    std::size_t clustered_sessions = 0;  // members of clusters with >= 2 sessions
    double f = 0.0;                      // clustered fraction (centroids included)
    double lbar_over_n = 0.0;            // mean tail fraction over delta caches
    std::uint64_t stored_bits = 0;
    std::uint64_t baseline_bits = 0;     // every session as its own full cache
    double measured_relative_cost = 0.0;
    double predicted_relative_cost = 0.0;  // 1 - f (1 - lbar/n)
    // additive decomposition through the dedup-only intermediate: layer 1 is
    // the prefix-zeroing saving, layer 2 the residual-coding saving on tails
    std::uint64_t intermediate_bits = 0;
    std::int64_t layer1_saved_bits = 0;
    std::int64_t layer2_saved_bits = 0;
    std::int64_t total_saved_bits = 0;
    double bits_per_token = 0.0;

    std::string table() const;    // aligned text
    std::string records() const;  // line-delimited key=value
};

// Cluster-relative storage: centroids in full, members as sparse deltas.
// Single writer, many readers; reconstruct is const and concurrent-safe.
class DedupStore {
  public:
    DedupStore(const Model& m, CodecConfig cfg);

    void store_cluster(const std::vector<TokenSeq>& sessions, const ClusterRecord& rec);
    void store_workload(const std::vector<TokenSeq>& sessions,
                        const std::vector<ClusterRecord>& records);

    KvTensor reconstruct(std::uint32_t session_id) const;

    const CentroidCache* centroid_of(std::uint32_t session_id) const;
    std::optional<DeltaCache> delta_of(std::uint32_t session_id) const;
    std::vector<std::uint32_t> session_ids() const;
    const std::vector<CompressedCache>& containers() const { return containers_; }
    const CodecConfig& codec_config() const { return cfg_; }

    StorageReport storage_report() const;

  private:
    const Model& model_;
    CodecConfig cfg_;
    std::vector<CompressedCache> containers_;
    std::vector<CentroidCache> centroids_;                 // parallel to containers_
    std::map<std::uint32_t, TokenSeq> sessions_;           // every stored session
    std::map<std::uint32_t, std::size_t> centroid_index_;  // centroid id -> container
    struct MemberRef {
        std::size_t container = 0;
        std::size_t member = 0;
    };
    std::map<std::uint32_t, MemberRef> member_index_;
};

// bits of a one-session full cache (centroid-only container) at this config
std::uint64_t full_cache_bits(const Model& m, const TokenSeq& session,
                              const CodecConfig& cfg);

}  // namespace seqkv
