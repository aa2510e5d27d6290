#include "seqkv/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "seqkv/kernels.hpp"

namespace seqkv {

namespace {

// kv outcome of every candidate token: row t holds F(context, t)
std::vector<double> probe_all(const IncrementalForward& fwd, std::size_t dim) {
    const std::uint32_t vocab = fwd.model().vocab_size();
    std::vector<double> f(static_cast<std::size_t>(vocab) * dim);
    for (std::uint32_t t = 0; t < vocab; ++t) {
        fwd.probe_kv(static_cast<TokenId>(t),
                     std::span<double>(f.data() + t * dim, dim));
    }
    return f;
}

}  // namespace

const char* prediction_method_name(PredictionMethod m) {
    switch (m) {
        case PredictionMethod::exact: return "exact";
        case PredictionMethod::top_k: return "topk";
        case PredictionMethod::linear: return "linear";
    }
    return "exact";
}

PredictionMethod prediction_method_from_name(const std::string& name) {
    if (name == "exact") return PredictionMethod::exact;
    if (name == "topk") return PredictionMethod::top_k;
    if (name == "linear") return PredictionMethod::linear;
    throw std::invalid_argument("unknown prediction method: " + name);
}

TopK top_k_tokens(const NextTokenDist& d, std::uint32_t k) {
    const std::uint32_t vocab = static_cast<std::uint32_t>(d.probs.size());
    if (k < 1 || k > vocab) throw std::invalid_argument("top-k k out of range");
    std::vector<TokenId> ids(vocab);
    std::iota(ids.begin(), ids.end(), static_cast<TokenId>(0));
    std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
        if (d.probs[a] != d.probs[b]) return d.probs[a] > d.probs[b];
        return a < b;
    });
    TopK out;
    out.tokens.assign(ids.begin(), ids.begin() + k);
    for (TokenId t : out.tokens) out.mass += d.probs[t];
    return out;
}

PredictedKv predict_at(const IncrementalForward& fwd, PredictionMethod method,
                       std::uint32_t k) {
    const Model& m = fwd.model();
    const std::size_t dim = m.config().position_dim();
    const NextTokenDist& d = fwd.dist();

    if (method == PredictionMethod::linear) {
        PredictedKv out;
        out.method = PredictionMethod::linear;
        const LinearFit fit = fit_linear(fwd);
        if (fit.rank_deficient) {
            out = predict_at(fwd, PredictionMethod::exact);
            out.method = PredictionMethod::linear;
            out.fell_back_to_exact = true;
            return out;
        }
        const std::size_t md = m.config().model_dim();
        std::vector<double> ebar(md, 0.0);
        for (std::uint32_t t = 0; t < m.vocab_size(); ++t) {
            kern::axpy(d.probs[t], m.token_embedding(static_cast<TokenId>(t)).data(),
                       ebar.data(), md);
        }
        std::vector<double> design(md + 1);
        design[0] = 1.0;
        std::copy(ebar.begin(), ebar.end(), design.begin() + 1);
        out.flat.resize(dim);
        for (std::size_t l = 0; l < m.config().layers; ++l) {
            const std::vector<double>& c = fit.coeff[l];
            for (std::size_t r = 0; r < 2 * md; ++r) {
                out.flat[l * 2 * md + r] =
                    kern::dot(c.data() + r * (md + 1), design.data(), md + 1);
            }
        }
        return out;
    }

    PredictedKv out;
    out.method = method;
    out.flat.assign(dim, 0.0);

    std::vector<TokenId> tokens;
    double mass = 1.0;
    if (method == PredictionMethod::top_k) {
        const TopK tk = top_k_tokens(d, k);
        tokens = tk.tokens;
        mass = tk.mass;
        out.k = k;
    } else {
        tokens.resize(m.vocab_size());
        std::iota(tokens.begin(), tokens.end(), static_cast<TokenId>(0));
    }

    std::vector<double> probe(dim);
    for (TokenId t : tokens) {
        fwd.probe_kv(t, probe);
        kern::axpy(d.probs[t] / mass, probe.data(), out.flat.data(), dim);
    }
    out.mass = mass;
    return out;
}

PredictedKv predict_exact(const Model& m, const TokenSeq& context) {
    IncrementalForward fwd(m);
    for (TokenId t : context) fwd.push(t);
    return predict_at(fwd, PredictionMethod::exact);
}

PredictedKv predict_topk(const Model& m, const TokenSeq& context, std::uint32_t k) {
    IncrementalForward fwd(m);
    for (TokenId t : context) fwd.push(t);
    return predict_at(fwd, PredictionMethod::top_k, k);
}

PredictedKv predict_linear(const Model& m, const TokenSeq& context) {
    IncrementalForward fwd(m);
    for (TokenId t : context) fwd.push(t);
    return predict_at(fwd, PredictionMethod::linear);
}

LinearFit fit_linear(const IncrementalForward& fwd) {
    const Model& m = fwd.model();
    const std::uint32_t vocab = m.vocab_size();
    const std::size_t md = m.config().model_dim();
    const std::size_t layers = m.config().layers;
    const std::size_t dim = m.config().position_dim();

    const std::vector<double> f = probe_all(fwd, dim);

    Eigen::MatrixXd x(vocab, md + 1);
    for (std::uint32_t t = 0; t < vocab; ++t) {
        x(t, 0) = 1.0;
        const auto e = m.token_embedding(static_cast<TokenId>(t));
        for (std::size_t j = 0; j < md; ++j) x(t, j + 1) = e[j];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);

    LinearFit fit;
    fit.rank_deficient = qr.rank() < static_cast<Eigen::Index>(md + 1);
    fit.coeff.resize(layers);
    fit.rms_residual.assign(layers, 0.0);
    if (fit.rank_deficient) return fit;

    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd y(vocab, 2 * md);
        for (std::uint32_t t = 0; t < vocab; ++t) {
            const double* row = f.data() + t * dim + l * 2 * md;
            for (std::size_t j = 0; j < 2 * md; ++j) y(t, j) = row[j];
        }
        const Eigen::MatrixXd beta = qr.solve(y);  // (md+1) x (2*md)
        const double frob = (x * beta - y).norm();
        fit.rms_residual[l] =
            frob / std::sqrt(static_cast<double>(vocab) * static_cast<double>(2 * md));
        // store row-major per output component: row r = [c_r | A_r]
        std::vector<double>& c = fit.coeff[l];
        c.resize(2 * md * (md + 1));
        for (std::size_t r = 0; r < 2 * md; ++r) {
            for (std::size_t j = 0; j < md + 1; ++j) {
                c[r * (md + 1) + j] = beta(static_cast<Eigen::Index>(j),
                                           static_cast<Eigen::Index>(r));
            }
        }
    }
    return fit;
}

Residual residual(const Model& m, const TokenSeq& seq, std::size_t position,
                  PredictionMethod method, std::uint32_t k) {
    if (position < 1 || position > seq.size()) {
        throw std::invalid_argument("residual position out of range");
    }
    IncrementalForward fwd(m);
    for (std::size_t i = 0; i + 1 < position; ++i) fwd.push(seq[i]);

    const PredictedKv pred = predict_at(fwd, method, k);
    const double h_bits = -std::log2(fwd.dist().probs[seq[position - 1]]);
    const double H_bits = fwd.dist().entropy_bits();

    const std::size_t dim = m.config().position_dim();
    std::vector<double> actual(dim);
    fwd.probe_kv(seq[position - 1], actual);

    Residual r;
    r.flat.resize(dim);
    kern::sub(actual.data(), pred.flat.data(), r.flat.data(), dim);
    r.norm = std::sqrt(kern::dot(r.flat.data(), r.flat.data(), dim));
    r.surprisal_bits = h_bits;
    r.entropy_bits = H_bits;
    return r;
}

VarianceReport residual_variance_at(const Model& m, const IncrementalForward& fwd) {
    const std::uint32_t vocab = m.vocab_size();
    const std::size_t dim = m.config().position_dim();
    const std::size_t md = m.config().model_dim();
    const std::size_t layers = m.config().layers;
    const NextTokenDist& d = fwd.dist();

    const std::vector<double> f = probe_all(fwd, dim);

    VarianceReport rep;
    rep.entropy_bits = d.entropy_bits();
    rep.per_layer.assign(layers, 0.0);

    // pairwise Koenig-Huygens route: Var = 1/2 sum_ab p_a p_b |F_a - F_b|^2
    for (std::uint32_t a = 0; a < vocab; ++a) {
        for (std::uint32_t b = a + 1; b < vocab; ++b) {
            const double w = d.probs[a] * d.probs[b];
            rep.total += w * kern::sum_sq_diff(f.data() + a * dim, f.data() + b * dim, dim);
            for (std::size_t l = 0; l < layers; ++l) {
                rep.per_layer[l] += w * kern::sum_sq_diff(f.data() + a * dim + l * 2 * md,
                                                          f.data() + b * dim + l * 2 * md,
                                                          2 * md);
            }
        }
    }

    // mean-subtraction route
    std::vector<double> mean(dim, 0.0);
    for (std::uint32_t t = 0; t < vocab; ++t) {
        kern::axpy(d.probs[t], f.data() + t * dim, mean.data(), dim);
    }
    std::vector<double> mean_residual(dim, 0.0);
    std::vector<double> r(dim);
    for (std::uint32_t t = 0; t < vocab; ++t) {
        kern::sub(f.data() + t * dim, mean.data(), r.data(), dim);
        const double n2 = kern::dot(r.data(), r.data(), dim);
        rep.e_norm_sq += d.probs[t] * n2;
        rep.e_norm += d.probs[t] * std::sqrt(n2);
        kern::axpy(d.probs[t], r.data(), mean_residual.data(), dim);
    }
    rep.mean_residual_norm =
        std::sqrt(kern::dot(mean_residual.data(), mean_residual.data(), dim));

    // embedding variance under the same distribution (K-H route)
    const std::size_t emd = m.config().model_dim();
    for (std::uint32_t a = 0; a < vocab; ++a) {
        for (std::uint32_t b = a + 1; b < vocab; ++b) {
            rep.embedding_variance +=
                d.probs[a] * d.probs[b] *
                kern::sum_sq_diff(m.token_embedding(static_cast<TokenId>(a)).data(),
                                  m.token_embedding(static_cast<TokenId>(b)).data(), emd);
        }
    }
    return rep;
}

VarianceReport residual_variance(const Model& m, const TokenSeq& context) {
    IncrementalForward fwd(m);
    for (TokenId t : context) fwd.push(t);
    return residual_variance_at(m, fwd);
}

double speculative_acceptance_rate(const NextTokenDist& d, std::uint32_t k) {
    const TopK tk = top_k_tokens(d, k);
    // draft proposes t with P(t)/Z_k; accepted with min(1, P/P_draft) = Z_k
    double rate = 0.0;
    for (TokenId t : tk.tokens) {
        const double p_draft = d.probs[t] / tk.mass;
        rate += p_draft * std::min(1.0, d.probs[t] / p_draft);
    }
    return rate;
}

double topk_conditional_variance(const Model& m, const IncrementalForward& fwd,
                                 std::uint32_t k) {
    const std::size_t dim = m.config().position_dim();
    const NextTokenDist& d = fwd.dist();
    const TopK tk = top_k_tokens(d, k);

    std::vector<double> f(tk.tokens.size() * dim);
    for (std::size_t i = 0; i < tk.tokens.size(); ++i) {
        fwd.probe_kv(tk.tokens[i], std::span<double>(f.data() + i * dim, dim));
    }
    double var = 0.0;
    for (std::size_t a = 0; a < tk.tokens.size(); ++a) {
        for (std::size_t b = a + 1; b < tk.tokens.size(); ++b) {
            const double w = (d.probs[tk.tokens[a]] / tk.mass) *
                             (d.probs[tk.tokens[b]] / tk.mass);
            var += w * kern::sum_sq_diff(f.data() + a * dim, f.data() + b * dim, dim);
        }
    }
    return var;
}

}  // namespace seqkv
