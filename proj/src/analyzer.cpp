#include "seqkv/analyzer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "seqkv/kernels.hpp"

namespace seqkv {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string bytes_of(std::span<const double> v) {
    std::string out(v.size() * sizeof(double), '\0');
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

std::uint64_t pow_sat(std::uint64_t base, std::uint32_t exp) {
    std::uint64_t r = 1;
    for (std::uint32_t i = 0; i < exp; ++i) {
        if (r > UINT64_MAX / base) return UINT64_MAX;
        r *= base;
    }
    return r;
}

// number of enumerated prefixes of length 1..max_len
std::uint64_t enumeration_cost(std::uint32_t vocab, std::uint32_t max_len) {
    std::uint64_t total = 0;
    for (std::uint32_t j = 1; j <= max_len; ++j) {
        const std::uint64_t p = pow_sat(vocab, j);
        if (p == UINT64_MAX || total > UINT64_MAX - p) return UINT64_MAX;
        total += p;
    }
    return total;
}

void check_budget(std::uint32_t vocab, std::uint32_t max_len, std::uint64_t budget) {
    if (enumeration_cost(vocab, max_len) > budget) {
        throw std::runtime_error(
            "enumeration budget exceeded: vocab^" + std::to_string(max_len) +
            " states would need more than " + std::to_string(budget) +
            " forward extensions; refusing to subsample");
    }
}

// Deterministic fan-out over the first token: worker results land in slots
// indexed by token, so the merge order never depends on scheduling.
template <typename R, typename Fn>
std::vector<R> parallel_by_first_token(const Model& m, Fn&& fn) {
    const std::uint32_t v = m.vocab_size();
    std::vector<R> results(v);
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    const unsigned nt = std::min<unsigned>(hw, v);
    if (nt <= 1) {
        for (std::uint32_t t = 0; t < v; ++t) results[t] = fn(static_cast<TokenId>(t));
        return results;
    }
    std::atomic<std::uint32_t> next{0};
    std::vector<std::exception_ptr> errors(nt);
    std::vector<std::thread> threads;
    threads.reserve(nt);
    for (unsigned w = 0; w < nt; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (;;) {
                    const std::uint32_t t = next.fetch_add(1);
                    if (t >= v) break;
                    results[t] = fn(static_cast<TokenId>(t));
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

// visit every context of length 1..max_len in the subtree rooted at t1
template <typename Fn>
void dfs_subtree(const Model& m, TokenId t1, std::uint32_t max_len, Fn&& fn) {
    IncrementalForward fwd(m);
    fwd.push(t1);
    auto rec = [&](auto&& self) -> void {
        fn(fwd);
        if (fwd.size() >= max_len) return;
        for (std::uint32_t t = 0; t < m.vocab_size(); ++t) {
            fwd.push(static_cast<TokenId>(t));
            self(self);
            fwd.pop();
        }
    };
    rec(rec);
}

std::uint64_t rng_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double rng_unit(std::uint64_t& state) {
    return static_cast<double>(rng_next(state) >> 11) * 0x1p-53;
}

TokenId sample_token(const NextTokenDist& d, double temperature, std::uint64_t& rng,
                     int excluded = -1) {
    std::vector<double> w(d.probs.size());
    double total = 0.0;
    for (std::size_t t = 0; t < w.size(); ++t) {
        if (static_cast<int>(t) == excluded) {
            w[t] = 0.0;
            continue;
        }
        w[t] = temperature == 1.0 ? d.probs[t]
                                  : std::pow(d.probs[t], 1.0 / temperature);
        total += w[t];
    }
    const double u = rng_unit(rng) * total;
    double acc = 0.0;
    for (std::size_t t = 0; t < w.size(); ++t) {
        acc += w[t];
        if (u < acc) return static_cast<TokenId>(t);
    }
    for (std::size_t t = w.size(); t-- > 0;) {
        if (w[t] > 0.0) return static_cast<TokenId>(t);
    }
    throw std::logic_error("sample_token: empty distribution");
}

TokenId greedy_token(const NextTokenDist& d) {
    TokenId best = 0;
    for (std::size_t t = 1; t < d.probs.size(); ++t) {
        if (d.probs[t] > d.probs[best]) best = static_cast<TokenId>(t);
    }
    return best;
}

}  // namespace

// ------------------------------------------------------------ entropy bound

EnumerationReport verify_sequential_bound(const Model& m, std::uint32_t max_len,
                                          std::uint64_t budget) {
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (max_len > m.config().max_context)
        throw std::invalid_argument("max_len exceeds model max_context");
    check_budget(m.vocab_size(), max_len, budget);
    const std::uint32_t V = m.vocab_size();

    // groups[i-1]: exact-byte partition (KV_<i bytes) -> (KV_i bytes) -> prob
    struct Worker {
        std::vector<std::map<std::string, std::map<std::string, double>>> groups;
        std::vector<double> token_entropy;
    };

    const NextTokenDist root_dist = IncrementalForward(m).dist();

    auto workers = parallel_by_first_token<Worker>(m, [&](TokenId t1) {
        Worker w;
        w.groups.resize(max_len);
        w.token_entropy.assign(max_len, 0.0);
        IncrementalForward fwd(m);
        fwd.push(t1);
        auto rec = [&](auto&& self, double prob, const std::string& key_prefix) -> void {
            const std::size_t j = fwd.size();
            const std::string kv_j = bytes_of(fwd.position_kv(j - 1));
            w.groups[j - 1][key_prefix][kv_j] += prob;
            if (j >= max_len) return;
            // copy: push() may reallocate the distribution storage
            const NextTokenDist d = fwd.dist();
            w.token_entropy[j] += prob * d.entropy_bits();
            const std::string next_key = key_prefix + kv_j;
            for (std::uint32_t t = 0; t < V; ++t) {
                const double p2 = prob * d.probs[t];
                fwd.push(static_cast<TokenId>(t));
                self(self, p2, next_key);
                fwd.pop();
            }
        };
        rec(rec, root_dist.probs[t1], std::string());
        return w;
    });

    EnumerationReport rep;
    rep.max_len = max_len;
    rep.token_entropy_bits.assign(max_len, 0.0);
    rep.kv_entropy_bits.assign(max_len, 0.0);
    rep.token_entropy_bits[0] = root_dist.entropy_bits();
    for (std::uint32_t i = 1; i < max_len; ++i) {
        for (const auto& w : workers) rep.token_entropy_bits[i] += w.token_entropy[i];
    }

    for (std::uint32_t i = 0; i < max_len; ++i) {
        std::map<std::string, std::map<std::string, double>> merged;
        for (const auto& w : workers) {
            for (const auto& [key, inner] : w.groups[i]) {
                auto& dst = merged[key];
                for (const auto& [kv, p] : inner) dst[kv] += p;
            }
        }
        // injectivity accounting: with distinct kv images each prefix forms
        // its own group with exactly V distinct extensions
        std::uint64_t inner_total = 0;
        double h_cond = 0.0;
        for (const auto& [key, inner] : merged) {
            inner_total += inner.size();
            double q_group = 0.0;
            for (const auto& [kv, p] : inner) q_group += p;
            double h_group = 0.0;
            for (const auto& [kv, p] : inner) {
                const double c = p / q_group;
                if (c > 0.0) h_group -= c * std::log2(c);
            }
            h_cond += q_group * h_group;
        }
        rep.kv_entropy_bits[i] = h_cond;

        const std::uint64_t expected_groups = pow_sat(V, i);
        const std::uint64_t expected_inner = pow_sat(V, i + 1);
        if (merged.size() != expected_groups || inner_total != expected_inner) {
            rep.injectivity_ok = false;
            char buf[160];
            std::snprintf(buf, sizeof(buf),
                          "position %u: %zu kv-prefix groups (expected %llu), %llu "
                          "distinct extensions (expected %llu); ",
                          i + 1, merged.size(),
                          static_cast<unsigned long long>(expected_groups),
                          static_cast<unsigned long long>(inner_total),
                          static_cast<unsigned long long>(expected_inner));
            rep.injectivity_note += buf;
        }
    }

    for (std::uint32_t i = 0; i < max_len; ++i) {
        rep.max_abs_gap = std::max(
            rep.max_abs_gap,
            std::fabs(rep.kv_entropy_bits[i] - rep.token_entropy_bits[i]));
        rep.log2_perplexity += rep.token_entropy_bits[i];
    }
    rep.log2_perplexity /= static_cast<double>(max_len);
    return rep;
}

InjectivityReport verify_layer1_injectivity(const Model& m,
                                            std::uint32_t max_context_len,
                                            std::uint64_t budget) {
    check_budget(m.vocab_size(), max_context_len, budget);
    const std::uint32_t V = m.vocab_size();
    const std::size_t md = m.config().model_dim();
    const std::size_t dim = m.config().position_dim();

    struct Worker {
        bool ok = true;
        std::uint64_t contexts = 0;
        std::string note;
    };

    auto check_context = [&](const IncrementalForward& fwd, Worker& w) {
        std::vector<double> keys(static_cast<std::size_t>(V) * md);
        std::vector<double> probe(dim);
        for (std::uint32_t t = 0; t < V; ++t) {
            fwd.probe_kv(static_cast<TokenId>(t), probe);
            std::memcpy(keys.data() + t * md, probe.data(), md * sizeof(double));
        }
        for (std::uint32_t a = 0; a < V && w.ok; ++a) {
            for (std::uint32_t b = a + 1; b < V; ++b) {
                if (std::memcmp(keys.data() + a * md, keys.data() + b * md,
                                md * sizeof(double)) == 0) {
                    w.ok = false;
                    char buf[200];
                    std::snprintf(buf, sizeof(buf),
                                  "seed %llu: tokens %u and %u give identical layer-1 "
                                  "keys after a context of length %zu",
                                  static_cast<unsigned long long>(m.config().seed), a,
                                  b, fwd.size());
                    w.note = buf;
                    break;
                }
            }
        }
        w.contexts += 1;
    };

    Worker root;
    {
        IncrementalForward fwd(m);
        check_context(fwd, root);
    }
    std::vector<Worker> workers;
    if (max_context_len > 0) {
        workers = parallel_by_first_token<Worker>(m, [&](TokenId t1) {
            Worker w;
            dfs_subtree(m, t1, max_context_len,
                        [&](const IncrementalForward& fwd) { check_context(fwd, w); });
            return w;
        });
    }

    InjectivityReport rep;
    rep.ok = root.ok;
    rep.contexts_checked = root.contexts;
    rep.note = root.note;
    for (const auto& w : workers) {
        rep.contexts_checked += w.contexts;
        if (!w.ok && rep.ok) {
            rep.ok = false;
            rep.note = w.note;
        }
    }
    return rep;
}

// ------------------------------------------------------------ residual bounds

bool ResidualBoundsReport::all_pass(double identity_tol) const {
    return max_identity_gap <= identity_tol && min_expected_norm_margin >= 0.0 &&
           min_popoviciu_margin >= 0.0 && min_coupling_margin >= 0.0;
}

ResidualBoundsReport verify_residual_bounds(const Model& m,
                                            std::uint32_t max_context_len,
                                            std::uint64_t budget) {
    check_budget(m.vocab_size(), max_context_len, budget);

    ResidualBoundsReport rep;
    rep.max_context_len = max_context_len;
    rep.lipschitz = m.lipschitz_estimate(max_context_len);
    rep.c_e = m.embedding_diameter();
    rep.f_lip = rep.lipschitz.f_lip(m.config().layers);
    rep.min_expected_norm_margin = kInf;
    rep.min_popoviciu_margin = kInf;
    rep.min_coupling_margin = kInf;

    const double ce2 = rep.c_e * rep.c_e;
    const double ln2 = std::numbers::ln2;

    struct Worker {
        double max_identity_gap = 0.0;
        double min_norm_margin = kInf;
        double min_popoviciu = kInf;
        double min_coupling = kInf;
        double max_mean_residual = 0.0;
        std::uint64_t contexts = 0;
    };

    auto visit = [&](const IncrementalForward& fwd, Worker& w) {
        const VarianceReport vr = residual_variance_at(m, fwd);
        w.max_identity_gap =
            std::max(w.max_identity_gap, std::fabs(vr.e_norm_sq - vr.total));
        const double h = vr.entropy_bits;
        const double bound =
            0.5 * rep.f_lip * rep.c_e * std::sqrt(std::min(1.0, 4.0 * h * ln2));
        w.min_norm_margin = std::min(w.min_norm_margin, bound - vr.e_norm);
        w.min_popoviciu =
            std::min(w.min_popoviciu, ce2 / 4.0 - vr.embedding_variance);
        w.min_coupling =
            std::min(w.min_coupling, ce2 * h * ln2 - vr.embedding_variance);
        w.max_mean_residual = std::max(w.max_mean_residual, vr.mean_residual_norm);
        w.contexts += 1;
    };

    Worker root;
    {
        IncrementalForward fwd(m);
        visit(fwd, root);
    }
    auto workers = parallel_by_first_token<Worker>(m, [&](TokenId t1) {
        Worker w;
        dfs_subtree(m, t1, max_context_len,
                    [&](const IncrementalForward& fwd) { visit(fwd, w); });
        return w;
    });
    workers.insert(workers.begin(), root);

    for (const auto& w : workers) {
        rep.max_identity_gap = std::max(rep.max_identity_gap, w.max_identity_gap);
        rep.min_expected_norm_margin =
            std::min(rep.min_expected_norm_margin, w.min_norm_margin);
        rep.min_popoviciu_margin = std::min(rep.min_popoviciu_margin, w.min_popoviciu);
        rep.min_coupling_margin = std::min(rep.min_coupling_margin, w.min_coupling);
        rep.max_mean_residual_norm =
            std::max(rep.max_mean_residual_norm, w.max_mean_residual);
        rep.contexts += w.contexts;
    }
    return rep;
}

// ------------------------------------------------------------ duality

std::vector<DualityReport> verify_duality(const Model& m,
                                          const std::vector<std::uint32_t>& ks,
                                          std::uint32_t max_context_len,
                                          std::uint64_t budget) {
    check_budget(m.vocab_size(), max_context_len, budget);
    const std::uint32_t V = m.vocab_size();
    const std::size_t dim = m.config().position_dim();

    const LipschitzEstimate lip = m.lipschitz_estimate(max_context_len);
    const double f_lip = lip.f_lip(m.config().layers);
    const double ce = m.embedding_diameter();
    const double var_bound = f_lip * f_lip * ce * ce / 4.0;

    struct Worker {
        std::vector<double> max_gap;       // per k
        std::vector<double> max_full_gap;  // per k (k == V only)
        std::vector<double> min_var_margin;
        std::uint64_t contexts = 0;
    };

    auto visit = [&](const IncrementalForward& fwd, Worker& w) {
        const NextTokenDist& d = fwd.dist();
        std::vector<double> f(static_cast<std::size_t>(V) * dim);
        for (std::uint32_t t = 0; t < V; ++t) {
            fwd.probe_kv(static_cast<TokenId>(t),
                         std::span<double>(f.data() + t * dim, dim));
        }
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            const std::uint32_t k = ks[ki];
            const TopK tk = top_k_tokens(d, k);
            const double rate = speculative_acceptance_rate(d, k);
            w.max_gap[ki] = std::max(w.max_gap[ki], std::fabs(rate - tk.mass));
            if (k == V) {
                w.max_full_gap[ki] =
                    std::max(w.max_full_gap[ki], std::fabs(rate - 1.0));
            }
            double var = 0.0;
            for (std::size_t a = 0; a < tk.tokens.size(); ++a) {
                for (std::size_t b = a + 1; b < tk.tokens.size(); ++b) {
                    const double wgt = (d.probs[tk.tokens[a]] / tk.mass) *
                                       (d.probs[tk.tokens[b]] / tk.mass);
                    var += wgt * kern::sum_sq_diff(f.data() + tk.tokens[a] * dim,
                                                   f.data() + tk.tokens[b] * dim, dim);
                }
            }
            w.min_var_margin[ki] = std::min(w.min_var_margin[ki], var_bound - var);
        }
        w.contexts += 1;
    };

    auto make_worker = [&] {
        Worker w;
        w.max_gap.assign(ks.size(), 0.0);
        w.max_full_gap.assign(ks.size(), 0.0);
        w.min_var_margin.assign(ks.size(), kInf);
        return w;
    };

    Worker root = make_worker();
    {
        IncrementalForward fwd(m);
        visit(fwd, root);
    }
    auto workers = parallel_by_first_token<Worker>(m, [&](TokenId t1) {
        Worker w = make_worker();
        dfs_subtree(m, t1, max_context_len,
                    [&](const IncrementalForward& fwd) { visit(fwd, w); });
        return w;
    });
    workers.insert(workers.begin(), root);

    std::uint64_t total_contexts = 0;
    for (const auto& w : workers) total_contexts += w.contexts;

    std::vector<DualityReport> out(ks.size());
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        out[ki].k = ks[ki];
        out[ki].contexts = total_contexts;
        out[ki].min_variance_margin = kInf;
        for (const auto& w : workers) {
            out[ki].max_acceptance_gap =
                std::max(out[ki].max_acceptance_gap, w.max_gap[ki]);
            out[ki].max_full_k_gap = std::max(out[ki].max_full_k_gap, w.max_full_gap[ki]);
            out[ki].min_variance_margin =
                std::min(out[ki].min_variance_margin, w.min_var_margin[ki]);
        }
    }
    return out;
}

// ------------------------------------------------------------ asymptotics

MarkovSource::MarkovSource(std::uint32_t vocab, std::vector<double> target_entropy_bits)
    : vocab_(vocab), entropy_bits_(std::move(target_entropy_bits)) {
    if (vocab < 2) throw std::invalid_argument("MarkovSource needs vocab >= 2");
    const double hmax = std::log2(static_cast<double>(vocab));
    dists_.reserve(entropy_bits_.size());
    for (double target : entropy_bits_) {
        if (target < 0.0 || target > hmax + 1e-12) {
            throw std::invalid_argument("target entropy out of range");
        }
        // distribution (p, (1-p)/(V-1), ...): entropy is continuous and
        // monotone in p on [1/V, 1], solve by bisection
        NextTokenDist d;
        d.probs.assign(vocab, 0.0);
        double lo = 1.0 / static_cast<double>(vocab), hi = 1.0;
        for (int it = 0; it < 200; ++it) {
            const double p = 0.5 * (lo + hi);
            const double rest = (1.0 - p) / static_cast<double>(vocab - 1);
            double h = -p * std::log2(p);
            if (rest > 0.0)
                h -= static_cast<double>(vocab - 1) * rest * std::log2(rest);
            if (h > target) {
                lo = p;
            } else {
                hi = p;
            }
        }
        const double p = 0.5 * (lo + hi);
        d.probs[0] = p;
        for (std::uint32_t t = 1; t < vocab; ++t) {
            d.probs[t] = (1.0 - p) / static_cast<double>(vocab - 1);
        }
        dists_.push_back(std::move(d));
    }
    // store achieved entropies so downstream arithmetic is exact
    for (std::size_t i = 0; i < dists_.size(); ++i) {
        entropy_bits_[i] = dists_[i].entropy_bits();
    }
}

NextTokenDist MarkovSource::next_dist(const TokenSeq& context) const {
    const std::size_t i = std::min(context.size(), dists_.size() - 1);
    return dists_[i];
}

std::vector<double> MarkovSource::decaying_schedule(std::uint32_t n, double h0,
                                                    double slope) {
    std::vector<double> out(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        out[i] = std::max(0.0, h0 - slope * static_cast<double>(i + 1));
    }
    return out;
}

std::vector<double> running_average(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        sum += v[i];
        out[i] = sum / static_cast<double>(i + 1);
    }
    return out;
}

AsymptoticReport verify_asymptotic(const Model& m, std::uint32_t synthetic_n,
                                   std::uint32_t toy_n, std::uint64_t budget) {
    AsymptoticReport rep;
    {
        const MarkovSource src(8, MarkovSource::decaying_schedule(synthetic_n));
        rep.synthetic_entropy_bits = src.entropies();
        rep.synthetic_running_avg = running_average(rep.synthetic_entropy_bits);
        rep.synthetic_monotone = true;
        for (std::size_t i = 1; i < rep.synthetic_running_avg.size(); ++i) {
            if (rep.synthetic_running_avg[i] > rep.synthetic_running_avg[i - 1]) {
                rep.synthetic_monotone = false;
            }
        }
    }

    if (toy_n > 0) {
        if (toy_n > m.config().max_context)
            throw std::invalid_argument("toy_n exceeds model max_context");
        check_budget(m.vocab_size(), toy_n - 1, budget);
        const NextTokenDist root_dist = IncrementalForward(m).dist();
        const std::uint32_t V = m.vocab_size();

        auto workers = parallel_by_first_token<std::vector<double>>(m, [&](TokenId t1) {
            std::vector<double> h(toy_n, 0.0);
            if (toy_n < 2) return h;
            IncrementalForward fwd(m);
            fwd.push(t1);
            auto rec = [&](auto&& self, double prob) -> void {
                const std::size_t j = fwd.size();
                const NextTokenDist d = fwd.dist();  // copy before any push
                h[j] += prob * d.entropy_bits();
                if (j + 1 >= toy_n) return;
                for (std::uint32_t t = 0; t < V; ++t) {
                    fwd.push(static_cast<TokenId>(t));
                    self(self, prob * d.probs[t]);
                    fwd.pop();
                }
            };
            rec(rec, root_dist.probs[t1]);
            return h;
        });

        rep.toy_entropy_bits.assign(toy_n, 0.0);
        rep.toy_entropy_bits[0] = root_dist.entropy_bits();
        for (const auto& w : workers) {
            for (std::uint32_t i = 1; i < toy_n; ++i) rep.toy_entropy_bits[i] += w[i];
        }
        rep.toy_running_avg = running_average(rep.toy_entropy_bits);
    }
    return rep;
}

// ------------------------------------------------------------ trie structure

TrieMetricStructureReport verify_trie_metric_structure(const Model& m,
                                                       std::uint32_t seq_len) {
    const std::uint32_t V = m.vocab_size();
    const std::uint64_t count = pow_sat(V, seq_len);
    if (count > 4096) throw std::invalid_argument("too many sequences for triple scan");

    // all sequences of length seq_len with their cumulative prefix log-probs
    std::vector<TokenSeq> seqs;
    std::vector<std::vector<double>> cum;
    seqs.reserve(count);
    TokenSeq cur(seq_len, 0);
    for (std::uint64_t idx = 0; idx < count; ++idx) {
        std::uint64_t x = idx;
        for (std::uint32_t j = 0; j < seq_len; ++j) {
            cur[seq_len - 1 - j] = static_cast<TokenId>(x % V);
            x /= V;
        }
        seqs.push_back(cur);
        cum.push_back(m.prefix_log2_probs(cur));
    }

    const std::size_t n = seqs.size();
    std::vector<double> metric(n * n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t lcp = common_prefix_length(seqs[a], seqs[b]);
            metric[a * n + b] = -cum[a][lcp];
        }
    }

    TrieMetricStructureReport rep;
    const double tol = 1e-12;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t c = 0; c < n; ++c) {
                const double dac = metric[a * n + c];
                const double dab = metric[a * n + b];
                const double dbc = metric[b * n + c];
                rep.triples += 1;
                if (dac >= std::min(dab, dbc) - tol) rep.reverse_min_holds += 1;
                if (dac <= std::max(dab, dbc) + tol) rep.paper_max_holds += 1;
            }
        }
    }
    return rep;
}

BestMatch best_match_bruteforce(
    const LanguageModel& m,
    const std::vector<std::pair<std::uint32_t, TokenSeq>>& registry,
    const TokenSeq& query) {
    if (registry.empty()) throw std::invalid_argument("empty registry");
    // same statistic the index computes, evaluated by full scan: cumulative
    // prefix log-probs per stored session, metric = -log2 P(lcp)
    BestMatch best;
    bool have = false;
    for (const auto& [id, seq] : registry) {
        const std::size_t lcp = common_prefix_length(query, seq);
        const std::vector<double> cum = m.prefix_log2_probs(seq);
        const double metric = -cum[lcp];
        bool better = false;
        if (!have) {
            better = true;
        } else if (metric != best.metric_bits) {
            better = metric > best.metric_bits;
        } else if (lcp != best.shared_prefix_length) {
            better = lcp > best.shared_prefix_length;
        } else {
            better = id < best.session_id;
        }
        if (better) {
            best.session_id = id;
            best.shared_prefix_length = lcp;
            best.metric_bits = metric;
            have = true;
        }
    }
    return best;
}

// ------------------------------------------------------------ workloads

void WorkloadSpec::validate() const {
    if (sessions < 1) throw std::invalid_argument("sessions must be >= 1");
    if (cluster_fraction < 0.0 || cluster_fraction > 1.0)
        throw std::invalid_argument("cluster_fraction must be in [0, 1]");
    if (tail_ratio < 0.0 || tail_ratio > 1.0)
        throw std::invalid_argument("tail_ratio must be in [0, 1]");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

Workload generate_workload(const Model& m, const WorkloadSpec& spec) {
    spec.validate();
    const std::uint32_t n = spec.length == 0 ? m.config().max_context : spec.length;
    if (n < 1 || n > m.config().max_context)
        throw std::invalid_argument("workload length out of range");

    const std::size_t n_clustered =
        static_cast<std::size_t>(std::llround(spec.cluster_fraction *
                                              static_cast<double>(spec.sessions)));
    const std::uint32_t tail_len =
        static_cast<std::uint32_t>(std::llround(spec.tail_ratio * n));
    const std::uint32_t shared_len = n - tail_len;

    std::uint64_t rng = spec.seed ^ 0xABCD1234u;

    Workload out;
    out.length = n;
    out.sessions.resize(spec.sessions);

    // one shared prefix, sampled once
    if (n_clustered >= 1) {
        IncrementalForward fwd(m);
        for (std::uint32_t j = 0; j < shared_len; ++j) {
            fwd.push(sample_token(fwd.dist(), spec.temperature, rng));
        }
        out.shared_prefix = fwd.tokens();
    }

    TokenId centroid_first_tail = 0;
    for (std::size_t s = 0; s < n_clustered; ++s) {
        IncrementalForward fwd(m);
        for (TokenId t : out.shared_prefix) fwd.push(t);
        for (std::uint32_t j = 0; j < tail_len; ++j) {
            TokenId t;
            if (s == 0) {
                // the first member continues greedily: it has the maximum
                // probability in the cluster and becomes the centroid
                t = greedy_token(fwd.dist());
                if (j == 0) centroid_first_tail = t;
            } else if (j == 0) {
                // force the divergence position to be exact
                t = sample_token(fwd.dist(), spec.temperature, rng,
                                 static_cast<int>(centroid_first_tail));
            } else {
                t = sample_token(fwd.dist(), spec.temperature, rng);
            }
            fwd.push(t);
        }
        out.sessions[s] = fwd.tokens();
    }
    for (std::size_t s = n_clustered; s < spec.sessions; ++s) {
        IncrementalForward fwd(m);
        for (std::uint32_t j = 0; j < n; ++j) {
            fwd.push(sample_token(fwd.dist(), spec.temperature, rng));
        }
        out.sessions[s] = fwd.tokens();
    }

    out.achieved_f =
        static_cast<double>(n_clustered) / static_cast<double>(spec.sessions);
    out.achieved_tail_ratio =
        n_clustered >= 2 ? static_cast<double>(tail_len) / static_cast<double>(n) : 0.0;
    if (n_clustered >= 2 && shared_len > 0) {
        out.suggested_delta_bits =
            -m.sequence_log2_prob(out.shared_prefix) - 1e-6;
    } else if (n_clustered >= 2) {
        out.suggested_delta_bits = 0.0;  // everything shares the empty prefix
    } else {
        out.suggested_delta_bits = 1e18;  // nothing should cluster
    }
    return out;
}

// ------------------------------------------------------------ roundtrip check

RoundtripCheck check_roundtrip(const Model& m, const std::vector<TokenSeq>& sessions,
                               const std::vector<CompressedCache>& caches) {
    RoundtripCheck rc;
    rc.min_bound_margin = kInf;
    const std::size_t dim = m.config().position_dim();

    for (const auto& cache : caches) {
        const std::vector<DecodedSession> decoded = decompress(cache, m);
        for (const auto& ds : decoded) {
            const TokenSeq& truth = sessions.at(ds.session_id);
            if (ds.tokens != truth) {
                rc.tokens_match = false;
                continue;
            }
            const ForwardResult direct = m.forward(truth);
            const MemberSection* mem = nullptr;
            for (const auto& ms : cache.members) {
                if (ms.session_id == ds.session_id) {
                    mem = &ms;
                    break;
                }
            }
            const std::size_t dbar =
                mem == nullptr ? truth.size() : mem->divergence_position;
            for (std::size_t pos = 0; pos < truth.size(); ++pos) {
                const auto a = direct.kv.position_vector(pos);
                const auto b = ds.kv.position_vector(pos);
                if (pos < dbar) {
                    if (std::memcmp(a.data(), b.data(), dim * sizeof(double)) != 0) {
                        rc.prefix_bit_identical = false;
                    }
                    continue;
                }
                rc.positions += 1;
                const EncodedPosition& rec = mem->tail[pos - dbar];
                double err = 0.0;
                for (std::size_t i = 0; i < dim; ++i) {
                    err = std::max(err, std::fabs(a[i] - b[i]));
                }
                rc.max_error = std::max(rc.max_error, err);
                if (rec.depth == 0) {
                    rc.depth0_positions += 1;
                    const double mse =
                        kern::sum_sq_diff(a.data(), b.data(), dim) /
                        static_cast<double>(dim);
                    rc.max_depth0_mse = std::max(rc.max_depth0_mse, mse);
                } else {
                    rc.min_bound_margin =
                        std::min(rc.min_bound_margin, decode_error_bound(rec) - err);
                }
            }
        }
    }
    return rc;
}

// ------------------------------------------------------------ claim matrix

bool ClaimMatrix::all_required_pass() const {
    for (const auto& r : rows) {
        if (r.required && !r.pass) return false;
    }
    return true;
}

std::string ClaimMatrix::table() const {
    std::string out;
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%-28s %-6s %-12s %s\n", "claim", "status",
                  "margin", "detail");
    out += buf;
    for (const auto& r : rows) {
        const char* status = r.required ? (r.pass ? "pass" : "FAIL") : "info";
        std::snprintf(buf, sizeof(buf), "%-28s %-6s %-12.4g %s\n", r.id.c_str(), status,
                      r.margin, r.detail.c_str());
        out += buf;
    }
    return out;
}

std::string ClaimMatrix::records() const {
    std::string out;
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "claim=%s status=%s margin=%.9g detail=%s\n",
                      r.id.c_str(),
                      r.required ? (r.pass ? "pass" : "fail") : "info", r.margin,
                      r.detail.c_str());
        out += buf;
    }
    return out;
}

namespace {

std::string series_to_string(const std::vector<double>& v, std::size_t limit = 16) {
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < v.size() && i < limit; ++i) {
        std::snprintf(buf, sizeof(buf), i == 0 ? "%.4f" : " %.4f", v[i]);
        out += buf;
    }
    if (v.size() > limit) out += " ...";
    return out;
}

}  // namespace

ClaimMatrix run_claim_matrix(const Model& m, const VerifyOptions& opts) {
    ClaimMatrix matrix;
    char buf[400];

    // determinism and prefix stability of the forward pass
    {
        const TokenSeq seq = {1, 0, 3, 2};
        const ForwardResult a = m.forward(seq);
        const ForwardResult b = m.forward(seq);
        TokenSeq ext = seq;
        ext.push_back(1);
        const ForwardResult c = m.forward(ext);
        bool prefix_ok = a.kv.bit_identical(b.kv);
        for (std::size_t pos = 0; pos < seq.size() && prefix_ok; ++pos) {
            prefix_ok = std::memcmp(a.kv.position_vector(pos).data(),
                                    c.kv.position_vector(pos).data(),
                                    a.kv.position_dim() * sizeof(double)) == 0;
        }
        matrix.rows.push_back({"forward_determinism", true, prefix_ok, 0.0,
                               "repeat + prefix extension bit-identical"});
    }

    {
        const InjectivityReport rep =
            verify_layer1_injectivity(m, opts.injectivity_context_len, opts.budget);
        std::snprintf(buf, sizeof(buf), "%llu contexts%s%s",
                      static_cast<unsigned long long>(rep.contexts_checked),
                      rep.ok ? "" : "; ", rep.note.c_str());
        matrix.rows.push_back({"layer1_injectivity", true, rep.ok, 0.0, buf});
    }

    {
        const EnumerationReport rep =
            verify_sequential_bound(m, opts.entropy_max_len, opts.budget);
        std::snprintf(buf, sizeof(buf), "max gap %.3g bits over %u positions%s%s",
                      rep.max_abs_gap, rep.max_len, rep.injectivity_ok ? "" : "; ",
                      rep.injectivity_note.c_str());
        matrix.rows.push_back({"entropy_equality", true,
                               rep.injectivity_ok && rep.max_abs_gap <= 1e-9,
                               1e-9 - rep.max_abs_gap, buf});

        double mean_kv = 0.0;
        for (double h : rep.kv_entropy_bits) mean_kv += h;
        mean_kv /= static_cast<double>(rep.kv_entropy_bits.size());
        const double margin = rep.log2_perplexity - mean_kv + 1e-9;
        std::snprintf(buf, sizeof(buf), "mean kv entropy %.6f <= log2 PP %.6f",
                      mean_kv, rep.log2_perplexity);
        matrix.rows.push_back(
            {"surprisal_average_bound", true, margin >= 0.0, margin, buf});
    }

    {
        const RatioReport r = theoretical_ratio(80, 64, 128, 3, 4.3, 1.0);
        const RatioReport r1000 = theoretical_ratio(80, 64, 128, 3, 4.3, 1000.0);
        const bool ok = round_sig(r.bits_per_token, 3) == 3.93e6 &&
                        round_sig(r.ratio_vs_floor, 3) == 914000.0 &&
                        round_sig(r.ratio_fp16_vs_floor, 2) == 4.9e6 &&
                        round_sig(r1000.ratio_vs_floor, 3) == 914.0;
        std::snprintf(buf, sizeof(buf),
                      "B=%.6g ratio=%.6g fp16=%.6g overhead1000=%.6g",
                      r.bits_per_token, r.ratio_vs_floor, r.ratio_fp16_vs_floor,
                      r1000.ratio_vs_floor);
        matrix.rows.push_back({"ratio_arithmetic", true, ok, 0.0, buf});
    }

    {
        const ResidualBoundsReport rep =
            verify_residual_bounds(m, opts.residual_context_len, opts.budget);
        const double margin =
            std::min({rep.min_expected_norm_margin, rep.min_popoviciu_margin,
                      rep.min_coupling_margin, 1e-10 - rep.max_identity_gap});
        std::snprintf(buf, sizeof(buf),
                      "%llu contexts; identity gap %.2g; margins norm %.3g "
                      "popoviciu %.3g coupling %.3g",
                      static_cast<unsigned long long>(rep.contexts),
                      rep.max_identity_gap, rep.min_expected_norm_margin,
                      rep.min_popoviciu_margin, rep.min_coupling_margin);
        matrix.rows.push_back(
            {"residual_identities_bounds", true, rep.all_pass(), margin, buf});

        // chain inequality re-check from the same estimate
        matrix.rows.push_back({"lipschitz_chain", true,
                               rep.lipschitz.global_kappa >= 1.0 &&
                                   rep.f_lip >= rep.lipschitz.full_map,
                               rep.f_lip - rep.lipschitz.full_map,
                               "kappa^L dominates the measured full-map ratio"});
    }

    {
        const bool ok = adaptive_depth(0.0, 3, 2.5) == 1 &&
                        adaptive_depth(2.5, 3, 2.5) == 3 &&
                        adaptive_depth(5.0 + 1e-9, 3, 2.5) == 6;
        matrix.rows.push_back({"adaptive_depth_formula", true, ok, 0.0,
                               "depths {1,3,6} at h in {0, hbar, 2 hbar + eps}"});
    }

    // workload-based rows share the larger-context model
    ModelConfig wl_cfg = m.config();
    wl_cfg.max_context = std::max(wl_cfg.max_context, opts.workload_length);
    const Model wl_model = Model::build(wl_cfg);

    {
        const std::vector<std::pair<double, double>> targets = {
            {0.5, 0.2}, {0.9, 0.1}, {1.0, 0.5}};
        double worst_rel_err = 0.0;
        bool ortho_ok = true;
        bool fidelity_ok = true;
        double fidelity_margin = kInf;
        std::string detail, ortho_detail, fidelity_detail;
        for (const auto& [f, tr] : targets) {
            WorkloadSpec spec;
            spec.sessions = opts.workload_sessions;
            spec.cluster_fraction = f;
            spec.tail_ratio = tr;
            spec.length = opts.workload_length;
            spec.seed = 7;
            const Workload wl = generate_workload(wl_model, spec);
            const auto records = cluster_sessions(wl_model, wl.sessions,
                                                  wl.suggested_delta_bits);

            CodecConfig raw_cfg;
            raw_cfg.mode = QuantMode::raw32;
            DedupStore store(wl_model, raw_cfg);
            store.store_workload(wl.sessions, records);
            const StorageReport rep = store.storage_report();
            const double rel_err =
                std::fabs(rep.measured_relative_cost - rep.predicted_relative_cost) /
                rep.predicted_relative_cost;
            worst_rel_err = std::max(worst_rel_err, rel_err);
            std::snprintf(buf, sizeof(buf), "(f=%.2g,t=%.2g): meas %.4f pred %.4f; ",
                          f, tr, rep.measured_relative_cost,
                          rep.predicted_relative_cost);
            detail += buf;

            const double f_err = std::fabs(rep.f - f);
            fidelity_margin = std::min(fidelity_margin, 0.02 - f_err);
            if (f_err > 0.02) fidelity_ok = false;
            std::snprintf(buf, sizeof(buf), "f_meas=%.4f (target %.2g); ", rep.f, f);
            fidelity_detail += buf;

            // orthogonality accounting under the default predictive codec
            CodecConfig adaptive_cfg;
            adaptive_cfg.mode = QuantMode::adaptive;
            adaptive_cfg.base_depth = 3;
            DedupStore store2(wl_model, adaptive_cfg);
            store2.store_workload(wl.sessions, records);
            const StorageReport rep2 = store2.storage_report();
            const bool sum_ok = rep2.layer1_saved_bits + rep2.layer2_saved_bits ==
                                rep2.total_saved_bits;
            bool disjoint_ok = true;
            for (const auto& cache : store2.containers()) {
                for (const auto& mem : cache.members) {
                    // layer-1 set {1..dbar} and layer-2 set {dbar+1..n} must
                    // partition the member's positions
                    const std::size_t n_total =
                        mem.divergence_position + mem.tail.size();
                    for (std::size_t p = 1; p <= n_total; ++p) {
                        const bool in_l1 = p <= mem.divergence_position;
                        const bool in_l2 =
                            mem.payload_bits_at(p, wl_model.config().position_dim()) > 0;
                        if (in_l1 == in_l2) disjoint_ok = false;
                    }
                }
            }
            if (!(sum_ok && disjoint_ok)) ortho_ok = false;
            std::snprintf(buf, sizeof(buf), "l1=%lld l2=%lld total=%lld; ",
                          static_cast<long long>(rep2.layer1_saved_bits),
                          static_cast<long long>(rep2.layer2_saved_bits),
                          static_cast<long long>(rep2.total_saved_bits));
            ortho_detail += buf;
        }
        matrix.rows.push_back({"storage_formula", true, worst_rel_err <= 0.05,
                               0.05 - worst_rel_err, detail});
        matrix.rows.push_back(
            {"orthogonality_accounting", true, ortho_ok, 0.0, ortho_detail});
        matrix.rows.push_back({"workload_fidelity", true, fidelity_ok,
                               fidelity_margin, fidelity_detail});
    }

    {
        // roundtrip error bound across quantizer modes on a small workload
        WorkloadSpec spec;
        spec.sessions = 12;
        spec.cluster_fraction = 0.5;
        spec.tail_ratio = 0.4;
        spec.length = std::min<std::uint32_t>(16, wl_cfg.max_context);
        spec.seed = 11;
        const Workload wl = generate_workload(wl_model, spec);
        const auto records =
            cluster_sessions(wl_model, wl.sessions, wl.suggested_delta_bits);

        double min_margin = kInf;
        bool ok = true;
        std::string detail;
        for (std::uint32_t b : {2u, 4u, 8u, 0u}) {  // 0 selects adaptive b0=3
            CodecConfig cfg;
            if (b == 0) {
                cfg.mode = QuantMode::adaptive;
                cfg.base_depth = 3;
            } else {
                cfg.mode = QuantMode::uniform;
                cfg.base_depth = b;
            }
            const auto caches =
                compress_workload(wl_model, wl.sessions, records, cfg);
            const RoundtripCheck rc = check_roundtrip(wl_model, wl.sessions, caches);
            ok = ok && rc.tokens_match && rc.prefix_bit_identical &&
                 rc.min_bound_margin >= 0.0;
            min_margin = std::min(min_margin, rc.min_bound_margin);
            std::snprintf(buf, sizeof(buf), "%s: err %.3g; ",
                          b == 0 ? "adaptive" : ("b=" + std::to_string(b)).c_str(),
                          rc.max_error);
            detail += buf;
        }
        matrix.rows.push_back(
            {"roundtrip_error_bound", true, ok, min_margin, detail});

        // waterfill dominance and zero-bit soundness on the same workload
        std::vector<double> sigmas;
        for (const auto& rec : records) {
            for (const auto& mb : rec.members) {
                if (mb.session_id == rec.centroid_id) continue;
                const TokenSeq& seq = wl.sessions[mb.session_id];
                IncrementalForward fwd(wl_model);
                for (std::size_t i = 0; i < mb.divergence_position; ++i)
                    fwd.push(seq[i]);
                for (std::size_t i = mb.divergence_position; i < seq.size(); ++i) {
                    sigmas.push_back(residual_variance_at(wl_model, fwd).total);
                    fwd.push(seq[i]);
                }
            }
        }
        std::vector<double> sorted = sigmas;
        std::sort(sorted.begin(), sorted.end());
        const double D = sorted.empty() ? 1.0 : sorted[sorted.size() * 3 / 10];

        CodecConfig wf_cfg;
        wf_cfg.mode = QuantMode::waterfill;
        wf_cfg.target_distortion = D;
        const auto wf_caches = compress_workload(wl_model, wl.sessions, records, wf_cfg);
        CodecConfig u3_cfg;
        u3_cfg.mode = QuantMode::uniform;
        u3_cfg.base_depth = 3;
        const auto u3_caches = compress_workload(wl_model, wl.sessions, records, u3_cfg);

        std::uint64_t wf_bits = 0, u3_bits = 0;
        for (const auto& c : wf_caches) wf_bits += c.total_bits;
        for (const auto& c : u3_caches) u3_bits += c.total_bits;

        const RoundtripCheck wf_rc = check_roundtrip(wl_model, wl.sessions, wf_caches);
        const double depth0_fraction =
            wf_rc.positions == 0
                ? 0.0
                : static_cast<double>(wf_rc.depth0_positions) /
                      static_cast<double>(wf_rc.positions);
        const bool ok_wf = wf_bits < u3_bits && depth0_fraction >= 0.2 &&
                           wf_rc.max_depth0_mse <= D;
        std::snprintf(buf, sizeof(buf),
                      "D=%.3g depth0=%.0f%% wf=%llu < uniform=%llu bits; "
                      "depth0 mse %.3g <= D",
                      D, 100.0 * depth0_fraction,
                      static_cast<unsigned long long>(wf_bits),
                      static_cast<unsigned long long>(u3_bits), wf_rc.max_depth0_mse);
        matrix.rows.push_back({"waterfill_dominance", true, ok_wf,
                               D - wf_rc.max_depth0_mse, buf});

        // lossless prefix dedup on the same records (criterion-5 shape)
        bool dedup_ok = true;
        CodecConfig cfgu4;
        cfgu4.mode = QuantMode::uniform;
        cfgu4.base_depth = 4;
        DedupStore store(wl_model, cfgu4);
        store.store_workload(wl.sessions, records);
        for (const auto& rec : records) {
            for (const auto& mb : rec.members) {
                if (mb.session_id == rec.centroid_id) continue;
                const auto delta = store.delta_of(mb.session_id);
                for (std::size_t p = 1; p <= mb.divergence_position; ++p) {
                    if (delta->payload_bits_at(p, wl_model.config().position_dim()) != 0)
                        dedup_ok = false;
                }
                const KvTensor recon = store.reconstruct(mb.session_id);
                const ForwardResult direct =
                    wl_model.forward(wl.sessions[mb.session_id]);
                for (std::size_t pos = 0; pos < mb.divergence_position; ++pos) {
                    if (std::memcmp(recon.position_vector(pos).data(),
                                    direct.kv.position_vector(pos).data(),
                                    recon.position_dim() * sizeof(double)) != 0) {
                        dedup_ok = false;
                    }
                }
            }
        }
        matrix.rows.push_back({"prefix_dedup_exact", true, dedup_ok, 0.0,
                               "zero prefix payload; prefix kv bit-identical"});
    }

    {
        const std::vector<std::uint32_t> ks = {1, 2, 4, m.vocab_size()};
        const auto reps = verify_duality(m, ks, opts.duality_context_len, opts.budget);
        double max_gap = 0.0, max_full = 0.0, min_var = kInf;
        for (const auto& r : reps) {
            max_gap = std::max(max_gap, r.max_acceptance_gap);
            max_full = std::max(max_full, r.max_full_k_gap);
            min_var = std::min(min_var, r.min_variance_margin);
        }
        const bool ok = max_gap <= 1e-12 && max_full <= 1e-12 && min_var >= 0.0;
        std::snprintf(buf, sizeof(buf),
                      "max |acc - Z_k| %.2g; |Z_V - 1| %.2g; var margin %.3g",
                      max_gap, max_full, min_var);
        matrix.rows.push_back(
            {"speculative_duality", true, ok, 1e-12 - max_gap, buf});
    }

    {
        const AsymptoticReport rep =
            verify_asymptotic(m, opts.synthetic_n, opts.toy_trace_n, opts.budget);
        std::snprintf(buf, sizeof(buf), "running avg over n=1..%u non-increasing",
                      opts.synthetic_n);
        matrix.rows.push_back(
            {"asymptotic_monotone", true, rep.synthetic_monotone, 0.0, buf});
        matrix.rows.push_back({"toy_entropy_trace", false, true, 0.0,
                               "H_i: " + series_to_string(rep.toy_entropy_bits)});
    }

    {
        // trie oracle equivalence on the small-vocabulary model
        ModelConfig small = m.config();
        small.vocab_size = 4;
        small.max_context = std::max<std::uint32_t>(small.max_context, 8);
        const Model small_model = Model::build(small);

        std::uint64_t rng = 77;
        PrefixIndex index(small_model);
        std::vector<std::pair<std::uint32_t, TokenSeq>> registry;
        for (std::uint32_t id = 0; id < 50; ++id) {
            IncrementalForward fwd(small_model);
            for (int j = 0; j < 8; ++j) fwd.push(sample_token(fwd.dist(), 1.0, rng));
            index.insert(id, fwd.tokens());
            registry.emplace_back(id, fwd.tokens());
        }
        bool ok = true;
        std::uint64_t queries = 0;
        TokenSeq q;
        auto rec = [&](auto&& self) -> void {
            if (q.size() >= 1) {
                ++queries;
                const auto got = index.best_match(q);
                const BestMatch want = best_match_bruteforce(small_model, registry, q);
                if (!got.has_value() || got->session_id != want.session_id ||
                    got->shared_prefix_length != want.shared_prefix_length ||
                    std::fabs(got->metric_bits - want.metric_bits) > 1e-12) {
                    ok = false;
                }
            }
            if (q.size() >= 6 || !ok) return;
            for (std::uint32_t t = 0; t < 4; ++t) {
                q.push_back(static_cast<TokenId>(t));
                self(self);
                q.pop_back();
            }
        };
        rec(rec);
        std::snprintf(buf, sizeof(buf), "%llu queries against 50 stored sessions",
                      static_cast<unsigned long long>(queries));
        matrix.rows.push_back({"trie_best_match_oracle", true, ok, 0.0, buf});

        const TrieMetricStructureReport tr =
            verify_trie_metric_structure(small_model, 3);
        std::snprintf(buf, sizeof(buf),
                      "reverse-min holds %llu/%llu; ultrametric-max holds %llu/%llu",
                      static_cast<unsigned long long>(tr.reverse_min_holds),
                      static_cast<unsigned long long>(tr.triples),
                      static_cast<unsigned long long>(tr.paper_max_holds),
                      static_cast<unsigned long long>(tr.triples));
        matrix.rows.push_back({"trie_metric_structure", false, true, 0.0, buf});
    }

    return matrix;
}

}  // namespace seqkv
