#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqkv/model.hpp"
#include "seqkv/predictor.hpp"
#include "seqkv/store.hpp"
#include "seqkv/trie.hpp"

namespace seqkv {

// Exhaustive-enumeration laboratory. Everything in here is exact at desk
// scale: probabilities come from the chain rule, kv grouping uses bitwise
// equality of the deterministic forward outputs, and no statistic is
// estimated from samples. Enumerations refuse to run past `budget` forward
// extensions rather than silently subsampling.

// ------------------------------------------------------------ entropy bound

struct EnumerationReport {
    std::uint32_t max_len = 0;
    std::vector<double> token_entropy_bits;  // H(t_i | t_<i), index i-1
    std::vector<double> kv_entropy_bits;     // H(KV_i | KV_<i)
    double max_abs_gap = 0.0;
    double log2_perplexity = 0.0;  // mean over positions of H(t_i | t_<i)
    bool injectivity_ok = true;
    std::string injectivity_note;
};

EnumerationReport verify_sequential_bound(const Model& m, std::uint32_t max_len,
                                          std::uint64_t budget = 10'000'000);

struct InjectivityReport {
    bool ok = true;
    std::uint64_t contexts_checked = 0;
    std::string note;  // offending seed/context/tokens when violated
};

// pairwise-distinct layer-1 keys over every context up to max_context_len
InjectivityReport verify_layer1_injectivity(const Model& m,
                                            std::uint32_t max_context_len,
                                            std::uint64_t budget = 10'000'000);

// ------------------------------------------------------------ residual bounds

struct ResidualBoundsReport {
    std::uint32_t max_context_len = 0;
    std::uint64_t contexts = 0;
    double max_identity_gap = 0.0;         // |E||R||^2 - Var[F]|
    double min_expected_norm_margin = 0.0;  // bound - E||R||, worst case
    double min_popoviciu_margin = 0.0;      // C_E^2/4 - Var[E]
    double min_coupling_margin = 0.0;       // C_E^2 H ln2 - Var[E]
    double max_mean_residual_norm = 0.0;    // ||E[R]||
    double c_e = 0.0;
    double f_lip = 0.0;  // kappa^L from the same-depth exhaustive estimate
    LipschitzEstimate lipschitz;

    bool all_pass(double identity_tol = 1e-10) const;
};

ResidualBoundsReport verify_residual_bounds(const Model& m,
                                            std::uint32_t max_context_len,
                                            std::uint64_t budget = 10'000'000);

// ------------------------------------------------------------ duality

struct DualityReport {
    std::uint32_t k = 0;
    std::uint64_t contexts = 0;
    double max_acceptance_gap = 0.0;   // |acceptance - Z_k|
    double max_full_k_gap = 0.0;       // |Z_V - 1| (only when k == vocab)
    double min_variance_margin = 0.0;  // Lip^2 C_E^2 / 4 - Var[F | top-k]
};

std::vector<DualityReport> verify_duality(const Model& m,
                                          const std::vector<std::uint32_t>& ks,
                                          std::uint32_t max_context_len,
                                          std::uint64_t budget = 10'000'000);

// ------------------------------------------------------------ asymptotics

// Hand-set time-inhomogeneous source over a closed vocabulary: the position-i
// conditional distribution is built to hit a target entropy, independent of
// the realized tokens. Bypasses the transformer entirely.
class MarkovSource : public LanguageModel {
  public:
    MarkovSource(std::uint32_t vocab, std::vector<double> target_entropy_bits);

    std::uint32_t vocab_size() const override { return vocab_; }
    NextTokenDist next_dist(const TokenSeq& context) const override;

    const std::vector<double>& entropies() const { return entropy_bits_; }

    // H_i = max(0, h0 - slope * i), i = 1..n
    static std::vector<double> decaying_schedule(std::uint32_t n, double h0 = 3.0,
                                                 double slope = 0.5);

  private:
    std::uint32_t vocab_;
    std::vector<double> entropy_bits_;
    std::vector<NextTokenDist> dists_;
};

std::vector<double> running_average(const std::vector<double>& v);

struct AsymptoticReport {
    std::vector<double> synthetic_entropy_bits;
    std::vector<double> synthetic_running_avg;
    bool synthetic_monotone = false;  // running average non-increasing
    std::vector<double> toy_entropy_bits;  // exact H(t_i | t_<i); reported only
    std::vector<double> toy_running_avg;
};

AsymptoticReport verify_asymptotic(const Model& m, std::uint32_t synthetic_n,
                                   std::uint32_t toy_n,
                                   std::uint64_t budget = 10'000'000);

// ------------------------------------------------------------ trie structure

// Counts, over every triple of enumerated sequences, how often the reverse
// inequality d(s,s'') >= min(d(s,s'), d(s',s'')) and the ultrametric reading
// d(s,s'') <= max(...) hold for -log2 P(lcp). Reported, not asserted.
struct TrieMetricStructureReport {
    std::uint64_t triples = 0;
    std::uint64_t reverse_min_holds = 0;
    std::uint64_t paper_max_holds = 0;
};

TrieMetricStructureReport verify_trie_metric_structure(const Model& m,
                                                       std::uint32_t seq_len);

// brute-force best-match oracle: scan the registry with trie_metric and the
// same tie-breaks (max metric, then longer lcp, then lowest id)
BestMatch best_match_bruteforce(const LanguageModel& m,
                                const std::vector<std::pair<std::uint32_t, TokenSeq>>& registry,
                                const TokenSeq& query);

// ------------------------------------------------------------ workloads

struct WorkloadSpec {
    std::size_t sessions = 100;
    double cluster_fraction = 0.5;  // f
    double tail_ratio = 0.2;        // lbar / n
    std::uint32_t length = 0;       // n; 0 means model max_context
    double temperature = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Workload {
    std::vector<TokenSeq> sessions;
    std::uint32_t length = 0;
    double achieved_f = 0.0;
    double achieved_tail_ratio = 0.0;
    TokenSeq shared_prefix;
    double suggested_delta_bits = 0.0;
};

// f*m sessions share one sampled prefix of length n(1 - tail_ratio) and then
// diverge: the first clustered session continues greedily (making it the
// maximum-probability member, hence the centroid), the rest sample their
// tails with the centroid's first tail token excluded so the divergence
// position is exact. Remaining sessions are sampled independently.
Workload generate_workload(const Model& m, const WorkloadSpec& spec);

// ------------------------------------------------------------ roundtrip check

struct RoundtripCheck {
    std::uint64_t positions = 0;
    std::uint64_t depth0_positions = 0;
    bool tokens_match = true;
    bool prefix_bit_identical = true;
    double max_error = 0.0;
    double min_bound_margin = 0.0;  // decode bound - observed error, worst case
    double max_depth0_mse = 0.0;    // per-component MSE at depth-0 positions
};

RoundtripCheck check_roundtrip(const Model& m, const std::vector<TokenSeq>& sessions,
                               const std::vector<CompressedCache>& caches);

// ------------------------------------------------------------ claim matrix

struct ClaimRow {
    std::string id;
    bool required = true;
    bool pass = false;
    double margin = 0.0;
    std::string detail;
};

struct ClaimMatrix {
    std::vector<ClaimRow> rows;

    bool all_required_pass() const;
    std::string table() const;
    std::string records() const;
};

struct VerifyOptions {
    std::uint32_t entropy_max_len = 5;
    std::uint32_t injectivity_context_len = 4;
    std::uint32_t residual_context_len = 4;
    std::uint32_t duality_context_len = 4;
    std::uint32_t synthetic_n = 64;
    std::uint32_t toy_trace_n = 8;
    std::uint32_t workload_sessions = 400;
    std::uint32_t workload_length = 80;
    std::uint64_t budget = 10'000'000;
};

// one row per verified claim; drives `seqkv verify`
ClaimMatrix run_claim_matrix(const Model& m, const VerifyOptions& opts);

}  // namespace seqkv
