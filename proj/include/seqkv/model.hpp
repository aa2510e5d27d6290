#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace seqkv {

using TokenId = std::uint16_t;
using TokenSeq = std::vector<TokenId>;

// The default seed is screened: the build-time injectivity gate plus the
// exhaustive residual-bound margins must hold (a minority of seeds violate
// the embedding-variance clause, which is not a theorem for vocabularies
// larger than two; see the verification reports).
struct ModelConfig {
    std::uint32_t vocab_size = 8;
    std::uint32_t layers = 2;
    std::uint32_t heads = 2;
    std::uint32_t head_dim = 4;
    std::uint64_t seed = 6;
    std::uint32_t max_context = 8;

    std::uint32_t model_dim() const { return heads * head_dim; }
    std::uint32_t hidden_dim() const { return 4 * model_dim(); }
    // key+value across all layers at one position
    std::uint32_t position_dim() const { return 2 * layers * model_dim(); }

    void validate() const;  // throws std::invalid_argument

    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

struct NextTokenDist {
    std::vector<double> probs;

    double entropy_bits() const;
    double max_prob() const;
    bool normalized(double tol = 1e-12) const;
};

// Realized surprisal h_i and conditional entropy H_i per position, in bits.
struct SurprisalTrace {
    std::vector<double> surprisal_bits;
    std::vector<double> entropy_bits;

    double mean_surprisal() const;
    double mean_entropy() const;
};

// Per-position, per-layer key/value vectors. Layout per position:
// [layer 0 key][layer 0 value][layer 1 key][layer 1 value]... contiguous,
// so position_vector() is the full 2*L*model_dim slice the codec consumes.
class KvTensor {
  public:
    KvTensor() = default;
    KvTensor(std::size_t n_positions, std::size_t layers, std::size_t model_dim);

    std::size_t n_positions() const { return n_; }
    std::size_t layers() const { return layers_; }
    std::size_t model_dim() const { return md_; }
    std::size_t position_dim() const { return 2 * layers_ * md_; }

    std::span<const double> key(std::size_t pos, std::size_t layer) const;
    std::span<const double> value(std::size_t pos, std::size_t layer) const;
    std::span<const double> position_vector(std::size_t pos) const;
    std::span<double> position_vector(std::size_t pos);

    // exact byte image of one position, for bitwise grouping
    std::string position_bytes(std::size_t pos) const;
    bool bit_identical(const KvTensor& other) const;

    const std::vector<double>& data() const { return data_; }

  private:
    std::size_t n_ = 0;
    std::size_t layers_ = 0;
    std::size_t md_ = 0;
    std::vector<double> data_;
};

// Anything that assigns conditional next-token probabilities. The toy
// transformer, test stubs and the synthetic entropy sources all implement
// this; the trie and the clustering only ever see this interface.
class LanguageModel {
  public:
    virtual ~LanguageModel() = default;
    virtual std::uint32_t vocab_size() const = 0;
    virtual NextTokenDist next_dist(const TokenSeq& context) const = 0;

    virtual double sequence_log2_prob(const TokenSeq& seq) const;
    double sequence_prob(const TokenSeq& seq) const;
    // cumulative log2 probabilities: out[j] = log2 P(seq[0..j)), out[0] = 0
    virtual std::vector<double> prefix_log2_probs(const TokenSeq& seq) const;
};

struct LayerWeights {
    std::vector<double> wq, wk, wv, wo;  // model_dim x model_dim, row-major
    std::vector<double> w1;              // hidden_dim x model_dim
    std::vector<double> w2;              // model_dim x hidden_dim
};

struct ModelWeights {
    std::vector<double> embed;    // (vocab_size + 1) x model_dim; last row = BOS
    std::vector<LayerWeights> layers;
    std::vector<double> lm_head;  // vocab_size x model_dim
};

struct ForwardResult {
    KvTensor kv;
    // dists[i] conditions on the first i tokens; dists[0] is the
    // empty-context distribution, dists[n] predicts the next token.
    std::vector<NextTokenDist> dists;
};

// Empirical per-layer Lipschitz data measured exhaustively over all contexts
// up to context_len and all token-pair substitutions at the next position.
struct LipschitzEstimate {
    std::vector<double> per_layer;  // max activation/kv ratio per layer, >= 1
    double global_kappa = 1.0;      // kappa-hat, >= 1
    double full_map = 1.0;          // max |dF| / |dE| over the full kv vector
    std::uint32_t context_len = 0;

    // Lipschitz constant of the full kv map, operationalized as kappa^L.
    // By construction global_kappa^layers >= full_map.
    double f_lip(std::uint32_t layers) const;
};

class Model;

// Incremental forward state over a growing context. Holds the residual
// stream and kv vectors for every processed position (plus the internal
// BOS position), so extending by one token costs O(context) instead of a
// full re-run. Results are bit-identical to Model::forward by construction:
// forward() is implemented on top of this class.
class IncrementalForward {
  public:
    explicit IncrementalForward(const Model& m);

    const Model& model() const { return m_; }
    std::size_t size() const { return tokens_.size(); }
    const TokenSeq& tokens() const { return tokens_; }

    void push(TokenId t);
    void pop();

    // distribution over the next token given the current context
    const NextTokenDist& dist() const { return dists_.back(); }
    const std::vector<NextTokenDist>& dists() const { return dists_; }

    // kv vector (2*L*model_dim) of real token position pos, 0-based
    std::span<const double> position_kv(std::size_t pos) const;
    KvTensor kv_tensor() const;

    // evaluate appending t without committing: kv vector at the new position
    void probe_kv(TokenId t, std::span<double> out) const;

    struct Probe {
        std::vector<double> kv;           // 2*L*model_dim
        std::vector<double> activations;  // (L+1) x model_dim residual stream
        NextTokenDist dist;               // next-token dist after the extension
    };
    Probe probe(TokenId t, bool want_dist = false) const;

  private:
    void compute_position(TokenId t, std::size_t pos, double* acts, double* keys,
                          double* values) const;
    NextTokenDist dist_from_state(const double* top_act) const;

    const Model& m_;
    TokenSeq tokens_;
    // acts_[l]: residual stream entering layer l (l = 0..L), per padded position
    std::vector<std::vector<double>> acts_;
    std::vector<std::vector<double>> keys_;    // per layer, per padded position
    std::vector<std::vector<double>> values_;  // per layer, per padded position
    std::vector<double> kv_flat_;              // real positions, KvTensor layout
    std::vector<NextTokenDist> dists_;
};

// Deterministic seeded decoder-only transformer. Weights are fully
// determined by the seed; the forward pass is pure, so repeated calls are
// bit-identical and prefixes of a longer sequence reproduce exactly.
class Model : public LanguageModel {
  public:
    static Model build(const ModelConfig& cfg);
    Model(const ModelConfig& cfg, ModelWeights weights);

    const ModelConfig& config() const { return cfg_; }
    const ModelWeights& weights() const { return w_; }
    std::uint64_t fingerprint() const { return fingerprint_; }

    std::uint32_t vocab_size() const override { return cfg_.vocab_size; }
    NextTokenDist next_dist(const TokenSeq& context) const override;
    double sequence_log2_prob(const TokenSeq& seq) const override;
    std::vector<double> prefix_log2_probs(const TokenSeq& seq) const override;

    ForwardResult forward(const TokenSeq& seq) const;
    SurprisalTrace surprisal_trace(const TokenSeq& seq) const;

    std::span<const double> token_embedding(TokenId t) const;  // no position term
    std::span<const double> bos_embedding() const;
    void positional_encoding(std::size_t pos, std::span<double> out) const;

    double embedding_diameter() const;      // C_E, max pairwise distance
    std::uint32_t embedding_rank() const;   // rank of the vocab x model_dim matrix
    double min_pairwise_embedding_distance() const;

    // Distinct tokens must yield distinct layer-1 keys in any context
    // (the keys depend on the token embedding only). Violations abort the
    // build with the offending seed, rather than silently breaking the
    // entropy accounting downstream.
    void check_layer1_injectivity() const;

    LipschitzEstimate lipschitz_estimate(std::uint32_t max_context_len = 3) const;

  private:
    friend class IncrementalForward;
    void validate_sequence(const TokenSeq& seq) const;

    ModelConfig cfg_;
    ModelWeights w_;
    std::uint64_t fingerprint_ = 0;
};

// Visits every context of length 0..max_depth (inclusive) in depth-first
// token order; fn sees the live forward state at each node.
template <typename Fn>
void enumerate_contexts(const Model& m, std::uint32_t max_depth, Fn&& fn) {
    IncrementalForward fwd(m);
    auto rec = [&](auto&& self) -> void {
        fn(fwd);
        if (fwd.size() >= max_depth) return;
        for (std::uint32_t t = 0; t < m.vocab_size(); ++t) {
            fwd.push(static_cast<TokenId>(t));
            self(self);
            fwd.pop();
        }
    };
    rec(rec);
}

std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 14695981039346656037ull);

}  // namespace seqkv
