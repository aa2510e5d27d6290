#include "seqkv/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "seqkv/kernels.hpp"

namespace seqkv {

namespace {

constexpr double kLog2e = std::numbers::log2e;

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic gaussian stream (splitmix64 + Box-Muller); independent of
// any standard-library distribution so fingerprints are portable.
class GaussianStream {
  public:
    explicit GaussianStream(std::uint64_t seed) : state_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 =
            (static_cast<double>(splitmix64(state_) >> 11) + 1.0) * 0x1p-53;
        const double u2 = static_cast<double>(splitmix64(state_) >> 11) * 0x1p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    void fill(std::vector<double>& v, std::size_t count, double sigma) {
        v.resize(count);
        for (std::size_t i = 0; i < count; ++i) v[i] = sigma * next();
    }

  private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// y = W x for row-major W (rows x cols)
inline void matvec(const std::vector<double>& w, const double* x,
                   std::size_t rows, std::size_t cols, double* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        y[r] = kern::dot(w.data() + r * cols, x, cols);
    }
}

inline void softmax_inplace(std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

void hash_doubles(std::uint64_t& h, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xFFu;
            h *= 1099511628211ull;
        }
    }
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
    std::uint64_t h = seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (layers < 1) throw std::invalid_argument("layers must be >= 1");
    if (heads < 1 || head_dim < 1)
        throw std::invalid_argument("heads and head_dim must be >= 1");
    if (max_context < 1) throw std::invalid_argument("max_context must be >= 1");
    if (vocab_size > 65535) throw std::invalid_argument("vocab_size too large");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
    return {
        {"vocab_size", std::to_string(vocab_size)},
        {"layers", std::to_string(layers)},
        {"heads", std::to_string(heads)},
        {"head_dim", std::to_string(head_dim)},
        {"seed", std::to_string(seed)},
        {"max_context", std::to_string(max_context)},
    };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    auto get_u32 = [&](const char* key, std::uint32_t& out) {
        auto it = kv.find(key);
        if (it != kv.end()) out = static_cast<std::uint32_t>(std::stoul(it->second));
    };
    get_u32("vocab_size", cfg.vocab_size);
    get_u32("layers", cfg.layers);
    get_u32("heads", cfg.heads);
    get_u32("head_dim", cfg.head_dim);
    get_u32("max_context", cfg.max_context);
    if (auto it = kv.find("seed"); it != kv.end()) cfg.seed = std::stoull(it->second);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- dists

double NextTokenDist::entropy_bits() const {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

double NextTokenDist::max_prob() const {
    double m = 0.0;
    for (double p : probs) m = std::max(m, p);
    return m;
}

bool NextTokenDist::normalized(double tol) const {
    double s = 0.0;
    for (double p : probs) {
        if (p < 0.0 || p > 1.0) return false;
        s += p;
    }
    return std::fabs(s - 1.0) <= tol;
}

double SurprisalTrace::mean_surprisal() const {
    double s = 0.0;
    for (double h : surprisal_bits) s += h;
    return surprisal_bits.empty() ? 0.0 : s / static_cast<double>(surprisal_bits.size());
}

double SurprisalTrace::mean_entropy() const {
    double s = 0.0;
    for (double h : entropy_bits) s += h;
    return entropy_bits.empty() ? 0.0 : s / static_cast<double>(entropy_bits.size());
}

// ---------------------------------------------------------------- kv tensor

KvTensor::KvTensor(std::size_t n_positions, std::size_t layers, std::size_t model_dim)
    : n_(n_positions),
      layers_(layers),
      md_(model_dim),
      data_(n_positions * 2 * layers * model_dim, 0.0) {}

std::span<const double> KvTensor::key(std::size_t pos, std::size_t layer) const {
    return {data_.data() + pos * position_dim() + layer * 2 * md_, md_};
}

std::span<const double> KvTensor::value(std::size_t pos, std::size_t layer) const {
    return {data_.data() + pos * position_dim() + layer * 2 * md_ + md_, md_};
}

std::span<const double> KvTensor::position_vector(std::size_t pos) const {
    return {data_.data() + pos * position_dim(), position_dim()};
}

std::span<double> KvTensor::position_vector(std::size_t pos) {
    return {data_.data() + pos * position_dim(), position_dim()};
}

std::string KvTensor::position_bytes(std::size_t pos) const {
    const auto v = position_vector(pos);
    std::string out(v.size() * sizeof(double), '\0');
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

bool KvTensor::bit_identical(const KvTensor& other) const {
    return n_ == other.n_ && layers_ == other.layers_ && md_ == other.md_ &&
           std::memcmp(data_.data(), other.data_.data(),
                       data_.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------- language model

double LanguageModel::sequence_log2_prob(const TokenSeq& seq) const {
    double lp = 0.0;
    TokenSeq prefix;
    prefix.reserve(seq.size());
    for (TokenId t : seq) {
        const NextTokenDist d = next_dist(prefix);
        lp += std::log2(d.probs.at(t));
        prefix.push_back(t);
    }
    return lp;
}

double LanguageModel::sequence_prob(const TokenSeq& seq) const {
    return std::exp2(sequence_log2_prob(seq));
}

std::vector<double> LanguageModel::prefix_log2_probs(const TokenSeq& seq) const {
    std::vector<double> out(seq.size() + 1, 0.0);
    TokenSeq prefix;
    prefix.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const NextTokenDist d = next_dist(prefix);
        out[i + 1] = out[i] + std::log2(d.probs.at(seq[i]));
        prefix.push_back(seq[i]);
    }
    return out;
}

// ---------------------------------------------------------------- model build

Model Model::build(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t md = cfg.model_dim();
    const std::size_t hid = cfg.hidden_dim();
    const double sigma = 0.5 / std::sqrt(static_cast<double>(md));

    GaussianStream g(cfg.seed);
    ModelWeights w;
    g.fill(w.embed, (cfg.vocab_size + 1) * md, sigma);
    w.layers.resize(cfg.layers);
    for (auto& lw : w.layers) {
        g.fill(lw.wq, md * md, sigma);
        g.fill(lw.wk, md * md, sigma);
        g.fill(lw.wv, md * md, sigma);
        g.fill(lw.wo, md * md, sigma);
        g.fill(lw.w1, hid * md, sigma);
        g.fill(lw.w2, md * hid, sigma);
    }
    g.fill(w.lm_head, cfg.vocab_size * md, sigma);

    return Model(cfg, std::move(w));
}

Model::Model(const ModelConfig& cfg, ModelWeights weights)
    : cfg_(cfg), w_(std::move(weights)) {
    cfg_.validate();
    const std::size_t md = cfg_.model_dim();
    const std::size_t hid = cfg_.hidden_dim();
    if (w_.embed.size() != (cfg_.vocab_size + 1) * md ||
        w_.layers.size() != cfg_.layers ||
        w_.lm_head.size() != cfg_.vocab_size * md) {
        throw std::invalid_argument("model weights do not match config dimensions");
    }
    for (const auto& lw : w_.layers) {
        if (lw.wq.size() != md * md || lw.wk.size() != md * md ||
            lw.wv.size() != md * md || lw.wo.size() != md * md ||
            lw.w1.size() != hid * md || lw.w2.size() != md * hid) {
            throw std::invalid_argument("layer weights do not match config dimensions");
        }
    }

    std::uint64_t h = 14695981039346656037ull;
    hash_doubles(h, w_.embed);
    for (const auto& lw : w_.layers) {
        hash_doubles(h, lw.wq);
        hash_doubles(h, lw.wk);
        hash_doubles(h, lw.wv);
        hash_doubles(h, lw.wo);
        hash_doubles(h, lw.w1);
        hash_doubles(h, lw.w2);
    }
    hash_doubles(h, w_.lm_head);
    fingerprint_ = h;

    check_layer1_injectivity();
}

std::span<const double> Model::token_embedding(TokenId t) const {
    const std::size_t md = cfg_.model_dim();
    return {w_.embed.data() + static_cast<std::size_t>(t) * md, md};
}

std::span<const double> Model::bos_embedding() const {
    const std::size_t md = cfg_.model_dim();
    return {w_.embed.data() + static_cast<std::size_t>(cfg_.vocab_size) * md, md};
}

void Model::positional_encoding(std::size_t pos, std::span<double> out) const {
    const std::size_t md = cfg_.model_dim();
    const double p = static_cast<double>(pos);
    for (std::size_t k = 0; 2 * k < md; ++k) {
        const double omega =
            std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(md));
        out[2 * k] = std::sin(p * omega);
        if (2 * k + 1 < md) out[2 * k + 1] = std::cos(p * omega);
    }
}

double Model::embedding_diameter() const {
    const std::size_t md = cfg_.model_dim();
    double best = 0.0;
    for (std::uint32_t a = 0; a < cfg_.vocab_size; ++a) {
        for (std::uint32_t b = a + 1; b < cfg_.vocab_size; ++b) {
            const double d2 = kern::sum_sq_diff(w_.embed.data() + a * md,
                                                w_.embed.data() + b * md, md);
            best = std::max(best, d2);
        }
    }
    return std::sqrt(best);
}

double Model::min_pairwise_embedding_distance() const {
    const std::size_t md = cfg_.model_dim();
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t a = 0; a < cfg_.vocab_size; ++a) {
        for (std::uint32_t b = a + 1; b < cfg_.vocab_size; ++b) {
            const double d2 = kern::sum_sq_diff(w_.embed.data() + a * md,
                                                w_.embed.data() + b * md, md);
            best = std::min(best, d2);
        }
    }
    return std::sqrt(best);
}

std::uint32_t Model::embedding_rank() const {
    // gaussian elimination with partial pivoting on the vocab x model_dim block
    const std::size_t rows = cfg_.vocab_size;
    const std::size_t cols = cfg_.model_dim();
    std::vector<double> a(w_.embed.begin(), w_.embed.begin() + rows * cols);
    double maxabs = kern::max_abs(a.data(), a.size());
    const double tol = maxabs * 1e-12 + 1e-300;
    std::uint32_t rank = 0;
    std::size_t row = 0;
    for (std::size_t col = 0; col < cols && row < rows; ++col) {
        std::size_t piv = row;
        for (std::size_t r = row + 1; r < rows; ++r) {
            if (std::fabs(a[r * cols + col]) > std::fabs(a[piv * cols + col])) piv = r;
        }
        if (std::fabs(a[piv * cols + col]) <= tol) continue;
        if (piv != row) {
            for (std::size_t c = 0; c < cols; ++c)
                std::swap(a[piv * cols + c], a[row * cols + c]);
        }
        for (std::size_t r = row + 1; r < rows; ++r) {
            const double f = a[r * cols + col] / a[row * cols + col];
            for (std::size_t c = col; c < cols; ++c) a[r * cols + c] -= f * a[row * cols + c];
        }
        ++rank;
        ++row;
    }
    return rank;
}

void Model::check_layer1_injectivity() const {
    const std::size_t md = cfg_.model_dim();
    const auto& wk = w_.layers[0].wk;
    std::vector<double> diff(md), kdiff(md);
    for (std::uint32_t a = 0; a < cfg_.vocab_size; ++a) {
        for (std::uint32_t b = a + 1; b < cfg_.vocab_size; ++b) {
            kern::sub(w_.embed.data() + a * md, w_.embed.data() + b * md, diff.data(), md);
            if (kern::max_abs(diff.data(), md) == 0.0) {
                throw std::runtime_error(
                    "layer-1 injectivity violated for seed " + std::to_string(cfg_.seed) +
                    ": tokens " + std::to_string(a) + " and " + std::to_string(b) +
                    " have identical embeddings; refuse this seed");
            }
            matvec(wk, diff.data(), md, md, kdiff.data());
            if (kern::max_abs(kdiff.data(), md) == 0.0) {
                throw std::runtime_error(
                    "layer-1 injectivity violated for seed " + std::to_string(cfg_.seed) +
                    ": embedding difference of tokens " + std::to_string(a) + " and " +
                    std::to_string(b) + " lies in the kernel of W_K; refuse this seed");
            }
        }
    }
}

void Model::validate_sequence(const TokenSeq& seq) const {
    if (seq.size() > cfg_.max_context) {
        throw std::invalid_argument("sequence longer than max_context");
    }
    for (TokenId t : seq) {
        if (t >= cfg_.vocab_size) throw std::invalid_argument("token id out of range");
    }
}

// ---------------------------------------------------------------- incremental forward

IncrementalForward::IncrementalForward(const Model& m) : m_(m) {
    const ModelConfig& cfg = m.config();
    const std::size_t md = cfg.model_dim();
    acts_.resize(cfg.layers + 1);
    keys_.resize(cfg.layers);
    values_.resize(cfg.layers);

    // BOS occupies padded position 0; its kv participate in attention but are
    // not part of the cache payload (they carry no token information).
    std::vector<double> acts((cfg.layers + 1) * md);
    std::vector<double> ks(cfg.layers * md), vs(cfg.layers * md);
    compute_position(static_cast<TokenId>(cfg.vocab_size), 0, acts.data(), ks.data(),
                     vs.data());
    for (std::size_t l = 0; l <= cfg.layers; ++l) {
        acts_[l].insert(acts_[l].end(), acts.begin() + l * md, acts.begin() + (l + 1) * md);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        keys_[l].insert(keys_[l].end(), ks.begin() + l * md, ks.begin() + (l + 1) * md);
        values_[l].insert(values_[l].end(), vs.begin() + l * md, vs.begin() + (l + 1) * md);
    }
    dists_.push_back(dist_from_state(acts.data() + cfg.layers * md));
}

void IncrementalForward::compute_position(TokenId t, std::size_t pos, double* acts,
                                          double* keys, double* values) const {
    const ModelConfig& cfg = m_.config();
    const ModelWeights& w = m_.weights();
    const std::size_t md = cfg.model_dim();
    const std::size_t hid = cfg.hidden_dim();
    const std::size_t heads = cfg.heads;
    const std::size_t dh = cfg.head_dim;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // embedding + positional encoding
    {
        const double* e = w.embed.data() + static_cast<std::size_t>(t) * md;
        std::vector<double> pe(md);
        m_.positional_encoding(pos, pe);
        for (std::size_t i = 0; i < md; ++i) acts[i] = e[i] + pe[i];
    }

    std::vector<double> q(md), attn(md), proj(md), h1(hid);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const double* x = acts + l * md;
        double* k = keys + l * md;
        double* v = values + l * md;
        const LayerWeights& lw = w.layers[l];
        matvec(lw.wq, x, md, md, q.data());
        matvec(lw.wk, x, md, md, k);
        matvec(lw.wv, x, md, md, v);

        // causal attention: prior positions from the committed state plus self
        const std::size_t n_prior = keys_[l].size() / md;  // == pos for pushes/probes
        std::vector<double> scores(n_prior + 1);
        std::fill(attn.begin(), attn.end(), 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t j = 0; j < n_prior; ++j) {
                scores[j] =
                    kern::dot(q.data() + off, keys_[l].data() + j * md + off, dh) *
                    inv_sqrt_dh;
            }
            scores[n_prior] = kern::dot(q.data() + off, k + off, dh) * inv_sqrt_dh;

            double mx = scores[0];
            for (std::size_t j = 1; j <= n_prior; ++j) mx = std::max(mx, scores[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j <= n_prior; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            for (std::size_t j = 0; j < n_prior; ++j) {
                kern::axpy(scores[j] / sum, values_[l].data() + j * md + off,
                           attn.data() + off, dh);
            }
            kern::axpy(scores[n_prior] / sum, v + off, attn.data() + off, dh);
        }

        // residual add of attention projection, then the mlp block
        double* out = acts + (l + 1) * md;
        matvec(lw.wo, attn.data(), md, md, proj.data());
        for (std::size_t i = 0; i < md; ++i) out[i] = x[i] + proj[i];
        matvec(lw.w1, out, hid, md, h1.data());
        for (std::size_t i = 0; i < hid; ++i) h1[i] = std::tanh(h1[i]);
        matvec(lw.w2, h1.data(), md, hid, proj.data());
        for (std::size_t i = 0; i < md; ++i) out[i] += proj[i];
    }
}

NextTokenDist IncrementalForward::dist_from_state(const double* top_act) const {
    const ModelConfig& cfg = m_.config();
    NextTokenDist d;
    d.probs.resize(cfg.vocab_size);
    matvec(m_.weights().lm_head, top_act, cfg.vocab_size, cfg.model_dim(),
           d.probs.data());
    softmax_inplace(d.probs);
    return d;
}

void IncrementalForward::push(TokenId t) {
    const ModelConfig& cfg = m_.config();
    if (tokens_.size() >= cfg.max_context)
        throw std::invalid_argument("sequence longer than max_context");
    if (t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
    const std::size_t md = cfg.model_dim();

    std::vector<double> acts((cfg.layers + 1) * md);
    std::vector<double> ks(cfg.layers * md), vs(cfg.layers * md);
    compute_position(t, tokens_.size() + 1, acts.data(), ks.data(), vs.data());

    for (std::size_t l = 0; l <= cfg.layers; ++l) {
        acts_[l].insert(acts_[l].end(), acts.begin() + l * md, acts.begin() + (l + 1) * md);
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        keys_[l].insert(keys_[l].end(), ks.begin() + l * md, ks.begin() + (l + 1) * md);
        values_[l].insert(values_[l].end(), vs.begin() + l * md, vs.begin() + (l + 1) * md);
    }
    kv_flat_.resize(kv_flat_.size() + 2 * cfg.layers * md);
    double* dst = kv_flat_.data() + kv_flat_.size() - 2 * cfg.layers * md;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::memcpy(dst + l * 2 * md, ks.data() + l * md, md * sizeof(double));
        std::memcpy(dst + l * 2 * md + md, vs.data() + l * md, md * sizeof(double));
    }
    tokens_.push_back(t);
    dists_.push_back(dist_from_state(acts.data() + cfg.layers * md));
}

void IncrementalForward::pop() {
    if (tokens_.empty()) throw std::logic_error("pop on empty context");
    const ModelConfig& cfg = m_.config();
    const std::size_t md = cfg.model_dim();
    tokens_.pop_back();
    dists_.pop_back();
    for (std::size_t l = 0; l <= cfg.layers; ++l) acts_[l].resize(acts_[l].size() - md);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        keys_[l].resize(keys_[l].size() - md);
        values_[l].resize(values_[l].size() - md);
    }
    kv_flat_.resize(kv_flat_.size() - 2 * cfg.layers * md);
}

std::span<const double> IncrementalForward::position_kv(std::size_t pos) const {
    const std::size_t pd = m_.config().position_dim();
    return {kv_flat_.data() + pos * pd, pd};
}

KvTensor IncrementalForward::kv_tensor() const {
    const ModelConfig& cfg = m_.config();
    KvTensor kv(tokens_.size(), cfg.layers, cfg.model_dim());
    if (!kv_flat_.empty()) {
        std::memcpy(kv.position_vector(0).data(), kv_flat_.data(),
                    kv_flat_.size() * sizeof(double));
    }
    return kv;
}

void IncrementalForward::probe_kv(TokenId t, std::span<double> out) const {
    const ModelConfig& cfg = m_.config();
    if (tokens_.size() >= cfg.max_context)
        throw std::invalid_argument("sequence longer than max_context");
    if (t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
    const std::size_t md = cfg.model_dim();
    std::vector<double> acts((cfg.layers + 1) * md);
    std::vector<double> ks(cfg.layers * md), vs(cfg.layers * md);
    compute_position(t, tokens_.size() + 1, acts.data(), ks.data(), vs.data());
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::memcpy(out.data() + l * 2 * md, ks.data() + l * md, md * sizeof(double));
        std::memcpy(out.data() + l * 2 * md + md, vs.data() + l * md,
                    md * sizeof(double));
    }
}

IncrementalForward::Probe IncrementalForward::probe(TokenId t, bool want_dist) const {
    const ModelConfig& cfg = m_.config();
    if (tokens_.size() >= cfg.max_context)
        throw std::invalid_argument("sequence longer than max_context");
    if (t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
    const std::size_t md = cfg.model_dim();
    Probe p;
    p.activations.resize((cfg.layers + 1) * md);
    std::vector<double> ks(cfg.layers * md), vs(cfg.layers * md);
    compute_position(t, tokens_.size() + 1, p.activations.data(), ks.data(), vs.data());
    p.kv.resize(2 * cfg.layers * md);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        std::memcpy(p.kv.data() + l * 2 * md, ks.data() + l * md, md * sizeof(double));
        std::memcpy(p.kv.data() + l * 2 * md + md, vs.data() + l * md,
                    md * sizeof(double));
    }
    if (want_dist) p.dist = dist_from_state(p.activations.data() + cfg.layers * md);
    return p;
}

// ---------------------------------------------------------------- model ops

NextTokenDist Model::next_dist(const TokenSeq& context) const {
    validate_sequence(context);
    IncrementalForward fwd(*this);
    for (TokenId t : context) fwd.push(t);
    return fwd.dist();
}

ForwardResult Model::forward(const TokenSeq& seq) const {
    if (seq.empty()) throw std::invalid_argument("forward requires a nonempty sequence");
    validate_sequence(seq);
    IncrementalForward fwd(*this);
    for (TokenId t : seq) fwd.push(t);
    return {fwd.kv_tensor(), fwd.dists()};
}

double Model::sequence_log2_prob(const TokenSeq& seq) const {
    return prefix_log2_probs(seq).back();
}

std::vector<double> Model::prefix_log2_probs(const TokenSeq& seq) const {
    validate_sequence(seq);
    std::vector<double> out(seq.size() + 1, 0.0);
    IncrementalForward fwd(*this);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        out[i + 1] = out[i] + std::log2(fwd.dist().probs.at(seq[i]));
        fwd.push(seq[i]);
    }
    return out;
}

SurprisalTrace Model::surprisal_trace(const TokenSeq& seq) const {
    const ForwardResult r = forward(seq);
    SurprisalTrace trace;
    trace.surprisal_bits.resize(seq.size());
    trace.entropy_bits.resize(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
        trace.surprisal_bits[i] = -std::log2(r.dists[i].probs[seq[i]]);
        trace.entropy_bits[i] = r.dists[i].entropy_bits();
    }
    return trace;
}

double LipschitzEstimate::f_lip(std::uint32_t layers) const {
    // kappa^L dominates the direct full-map ratio by construction; the max
    // guards against pow() losing the last ulp of that dominance
    return std::max(std::pow(global_kappa, static_cast<double>(layers)), full_map);
}

LipschitzEstimate Model::lipschitz_estimate(std::uint32_t max_context_len) const {
    const std::size_t md = cfg_.model_dim();
    const std::size_t L = cfg_.layers;
    const std::uint32_t V = cfg_.vocab_size;

    LipschitzEstimate est;
    est.per_layer.assign(L, 1.0);
    est.context_len = max_context_len;
    double kappa = 1.0;
    double full = 1.0;

    std::vector<IncrementalForward::Probe> probes(V);
    enumerate_contexts(*this, max_context_len, [&](const IncrementalForward& fwd) {
        for (std::uint32_t t = 0; t < V; ++t) {
            probes[t] = fwd.probe(static_cast<TokenId>(t));
        }
        for (std::uint32_t a = 0; a < V; ++a) {
            for (std::uint32_t b = a + 1; b < V; ++b) {
                const auto& pa = probes[a];
                const auto& pb = probes[b];
                // stream difference norms per level; level 0 difference equals
                // the embedding difference (positional terms cancel)
                std::vector<double> da(L + 1);
                for (std::size_t l = 0; l <= L; ++l) {
                    da[l] = std::sqrt(kern::sum_sq_diff(pa.activations.data() + l * md,
                                                        pb.activations.data() + l * md,
                                                        md));
                }
                const double de = da[0];
                if (de < 1e-300) continue;
                const double dfull = std::sqrt(
                    kern::sum_sq_diff(pa.kv.data(), pb.kv.data(), pa.kv.size()));
                full = std::max(full, dfull / de);
                kappa = std::max(kappa,
                                 std::pow(dfull / de, 1.0 / static_cast<double>(L)));
                for (std::size_t l = 0; l < L; ++l) {
                    const double dkv = std::sqrt(kern::sum_sq_diff(
                        pa.kv.data() + l * 2 * md, pb.kv.data() + l * 2 * md, 2 * md));
                    if (da[l] >= 1e-300) {
                        const double r_stream = da[l + 1] / da[l];
                        const double r_kv = dkv / da[l];
                        est.per_layer[l] =
                            std::max(est.per_layer[l], std::max(r_stream, r_kv));
                    }
                    // chain requirement: kappa^(l+1) must dominate |dKV_l| / |dE|
                    kappa = std::max(
                        kappa, std::pow(dkv / de, 1.0 / static_cast<double>(l + 1)));
                }
            }
        }
    });

    for (double& k : est.per_layer) kappa = std::max(kappa, k);
    est.global_kappa = kappa;
    est.full_map = full;
    return est;
}

}  // namespace seqkv
