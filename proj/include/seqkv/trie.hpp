#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "seqkv/model.hpp"

namespace seqkv {

std::size_t common_prefix_length(const TokenSeq& a, const TokenSeq& b);

// Shared-prefix description length: -log2 P(a ^ b) where a ^ b is the longest
// common prefix. Zero when the first tokens already differ (empty prefix has
// probability one). Note d(s, s) = -log2 P(s), which is not generally zero.
double trie_metric(const LanguageModel& m, const TokenSeq& a, const TokenSeq& b);

// Direction of the clustering criterion. Long shared prefixes make
// -log2 P(lcp) grow, so grouping "close" sessions means requiring *at least*
// delta bits of shared information; the literal at-most reading is kept as a
// switch for comparison runs.
enum class ClusterCriterion {
    shared_info_at_least,
    paper_metric_at_most,
};

struct ClusterMember {
    std::uint32_t session_id = 0;
    // first index at which member and centroid tokens differ == length of
    // their common prefix; equals the full length for the centroid itself
    std::uint32_t divergence_position = 0;
    double metric_bits = 0.0;  // -log2 P(lcp(member, centroid))
};

struct ClusterRecord {
    std::uint32_t cluster_id = 0;
    std::uint32_t centroid_id = 0;
    std::vector<ClusterMember> members;  // sorted by session id, centroid included
    double delta_bits = 0.0;
    std::uint64_t model_fingerprint = 0;

    const ClusterMember& member(std::uint32_t session_id) const;
    bool is_singleton() const { return members.size() == 1; }
};

struct ClusterOptions {
    ClusterCriterion criterion = ClusterCriterion::shared_info_at_least;
};

// Greedy maximal clustering: sessions ordered by descending model probability
// (ties by lower id); each unassigned session seeds a cluster and absorbs the
// remaining sessions that satisfy the pairwise criterion against every member
// collected so far. Deterministic for fixed inputs. Session ids are the
// indices into `sessions`.
std::vector<ClusterRecord> cluster_sessions(const LanguageModel& m,
                                            const std::vector<TokenSeq>& sessions,
                                            double delta_bits,
                                            const ClusterOptions& opts = {});

// (session_id, cluster_id, centroid_id, divergence_position, metric_bits)
std::string cluster_table(const std::vector<ClusterRecord>& records);

struct BestMatch {
    std::uint32_t session_id = 0;
    std::size_t shared_prefix_length = 0;
    double metric_bits = 0.0;
};

// Probabilistic language trie over stored session prefixes. Edge weights are
// the model's conditional probabilities, cached on the nodes when a path is
// first inserted, so lookups never touch the model. Concurrency contract:
// any number of concurrent readers (best_match, counts) or one exclusive
// writer (insert, evict); enforced internally with a shared mutex.
class PrefixIndex {
  public:
    explicit PrefixIndex(const LanguageModel& m, double epsilon = 1e-9);

    // adds the session path; throws std::invalid_argument on duplicate id
    void insert(std::uint32_t session_id, const TokenSeq& seq);

    // removes the marker and prunes ancestors that no longer carry or lead to
    // any stored session; throws std::invalid_argument on unknown id
    void evict(std::uint32_t session_id);

    // stored session maximizing -log2 P(lcp(query, session)); ties broken by
    // longer common prefix, then lowest session id; nullopt iff empty
    std::optional<BestMatch> best_match(const TokenSeq& query) const;

    std::size_t session_count() const;
    std::size_t node_count() const;  // excluding the root
    double epsilon() const { return epsilon_; }
    std::optional<TokenSeq> session_tokens(std::uint32_t session_id) const;

    void check_invariants() const;  // throws std::logic_error on violation

  private:
    struct Node {
        double log2_edge = 0.0;    // log2 P(token | parent prefix)
        double log2_prefix = 0.0;  // log2 P(prefix)
        std::map<TokenId, std::unique_ptr<Node>> children;
        std::vector<std::uint32_t> markers;  // sorted
        std::size_t subtree_markers = 0;
    };

    static std::uint32_t min_marker_excluding(const Node& node, const Node* skip);
    static void check_node(const Node& node, double parent_log2);
    static std::size_t count_nodes(const Node& node);

    const LanguageModel& model_;
    double epsilon_;
    Node root_;
    std::map<std::uint32_t, TokenSeq> registry_;
    mutable std::shared_mutex mu_;
};

}  // namespace seqkv
