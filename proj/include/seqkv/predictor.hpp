#pragma once

#include <cstdint>
#include <vector>

#include "seqkv/model.hpp"

namespace seqkv {

enum class PredictionMethod { exact, top_k, linear };

const char* prediction_method_name(PredictionMethod m);
PredictionMethod prediction_method_from_name(const std::string& name);

// Probability-weighted mean of the kv outcomes of every candidate next token
// (or of the renormalized top-k / linear-fit approximations of it).
struct PredictedKv {
    std::vector<double> flat;  // 2 * layers * model_dim
    PredictionMethod method = PredictionMethod::exact;
    std::uint32_t k = 0;       // top_k only
    double mass = 1.0;         // Z_k: probability mass covered (1 for exact)
    bool fell_back_to_exact = false;
};

struct TopK {
    std::vector<TokenId> tokens;  // by descending probability, ties to lower id
    double mass = 0.0;            // Z_k
};
TopK top_k_tokens(const NextTokenDist& d, std::uint32_t k);

PredictedKv predict_exact(const Model& m, const TokenSeq& context);
PredictedKv predict_topk(const Model& m, const TokenSeq& context, std::uint32_t k);
PredictedKv predict_linear(const Model& m, const TokenSeq& context);

// same computation against a live forward state (no context re-run)
PredictedKv predict_at(const IncrementalForward& fwd, PredictionMethod method,
                       std::uint32_t k = 0);

// Per-layer least-squares fit kv^(l)(context, t) ~ c^(l) + A^(l) E(t) over all
// vocabulary candidates. The design matrix is shared across layers; a rank-
// deficient design (vocab_size < model_dim + 1) is reported and makes the
// linear predictor fall back to the exact one.
struct LinearFit {
    // layer -> (2*model_dim) x (model_dim+1) row-major; column 0 holds c
    std::vector<std::vector<double>> coeff;
    std::vector<double> rms_residual;  // per layer fitting residual
    bool rank_deficient = false;
};
LinearFit fit_linear(const IncrementalForward& fwd);

struct Residual {
    std::vector<double> flat;  // KV_i - predicted KV_i
    double norm = 0.0;
    double surprisal_bits = 0.0;  // h_i of the realized token
    double entropy_bits = 0.0;    // H_i of the position's distribution
};
// position is 1-based per the storage convention: 1 <= position <= |seq|
Residual residual(const Model& m, const TokenSeq& seq, std::size_t position,
                  PredictionMethod method, std::uint32_t k = 4);

// Exact next-token kv variance at a context, by enumeration over the
// vocabulary. `total` uses the pairwise Koenig-Huygens route, which is the
// independent check against the mean-subtraction route in e_norm_sq.
struct VarianceReport {
    double total = 0.0;             // Var[F] summed over all components
    std::vector<double> per_layer;  // per-layer contributions (K-H route)
    double entropy_bits = 0.0;      // H_i of the context distribution
    double e_norm_sq = 0.0;         // E ||R||^2, mean-subtraction route
    double e_norm = 0.0;            // E ||R||
    double mean_residual_norm = 0.0;  // || E[R] ||, ~0 by construction
    double embedding_variance = 0.0;  // Var[E(t)] under the same distribution
};
VarianceReport residual_variance(const Model& m, const TokenSeq& context);
VarianceReport residual_variance_at(const Model& m, const IncrementalForward& fwd);

// Analytic speculative-decoding acceptance rate of the renormalized top-k
// draft: sum over tokens of min(P_draft, P). Equals Z_k.
double speculative_acceptance_rate(const NextTokenDist& d, std::uint32_t k);

// Var[F(ctx, t) | t in top-k] under the renormalized top-k distribution.
double topk_conditional_variance(const Model& m, const IncrementalForward& fwd,
                                 std::uint32_t k);

}  // namespace seqkv
