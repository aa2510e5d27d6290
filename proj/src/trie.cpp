#include "seqkv/trie.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <stdexcept>

namespace seqkv {

std::size_t common_prefix_length(const TokenSeq& a, const TokenSeq& b) {
    const std::size_t n = std::min(a.size(), b.size());
    std::size_t i = 0;
    while (i < n && a[i] == b[i]) ++i;
    return i;
}

double trie_metric(const LanguageModel& m, const TokenSeq& a, const TokenSeq& b) {
    const std::size_t lcp = common_prefix_length(a, b);
    if (lcp == 0) return 0.0;
    const TokenSeq prefix(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(lcp));
    return -m.sequence_log2_prob(prefix);
}

const ClusterMember& ClusterRecord::member(std::uint32_t session_id) const {
    for (const auto& mb : members) {
        if (mb.session_id == session_id) return mb;
    }
    throw std::out_of_range("session not in cluster record");
}

std::vector<ClusterRecord> cluster_sessions(const LanguageModel& m,
                                            const std::vector<TokenSeq>& sessions,
                                            double delta_bits,
                                            const ClusterOptions& opts) {
    if (delta_bits < 0.0) throw std::invalid_argument("delta_bits must be >= 0");
    const std::size_t n = sessions.size();

    std::vector<std::vector<double>> cum(n);
    for (std::size_t i = 0; i < n; ++i) cum[i] = m.prefix_log2_probs(sessions[i]);

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (cum[a].back() != cum[b].back()) return cum[a].back() > cum[b].back();
        return a < b;
    });

    // shared-prefix description length of sessions a and b, in bits
    auto pair_metric = [&](std::uint32_t a, std::uint32_t b) {
        const std::size_t lcp = common_prefix_length(sessions[a], sessions[b]);
        return -cum[a][lcp];
    };
    auto pair_ok = [&](std::uint32_t a, std::uint32_t b) {
        const double d = pair_metric(a, b);
        return opts.criterion == ClusterCriterion::shared_info_at_least
                   ? d >= delta_bits
                   : d <= delta_bits;
    };

    std::uint64_t fingerprint = 0;
    if (const auto* toy = dynamic_cast<const Model*>(&m)) {
        fingerprint = toy->fingerprint();
    }

    std::vector<bool> assigned(n, false);
    std::vector<ClusterRecord> records;
    for (std::size_t si = 0; si < n; ++si) {
        const std::uint32_t seed = order[si];
        if (assigned[seed]) continue;
        assigned[seed] = true;
        std::vector<std::uint32_t> members{seed};
        for (std::size_t ui = si + 1; ui < n; ++ui) {
            const std::uint32_t u = order[ui];
            if (assigned[u]) continue;
            bool ok = true;
            for (std::uint32_t mem : members) {
                if (!pair_ok(u, mem)) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                assigned[u] = true;
                members.push_back(u);
            }
        }

        // centroid maximizes P_M(s); ties resolved toward the lowest id
        std::uint32_t centroid = members[0];
        for (std::uint32_t mem : members) {
            if (cum[mem].back() > cum[centroid].back() ||
                (cum[mem].back() == cum[centroid].back() && mem < centroid)) {
                centroid = mem;
            }
        }

        ClusterRecord rec;
        rec.cluster_id = static_cast<std::uint32_t>(records.size());
        rec.centroid_id = centroid;
        rec.delta_bits = delta_bits;
        rec.model_fingerprint = fingerprint;
        std::sort(members.begin(), members.end());
        for (std::uint32_t mem : members) {
            ClusterMember cm;
            cm.session_id = mem;
            cm.divergence_position = static_cast<std::uint32_t>(
                common_prefix_length(sessions[mem], sessions[centroid]));
            cm.metric_bits = -cum[mem][cm.divergence_position];
            rec.members.push_back(cm);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

std::string cluster_table(const std::vector<ClusterRecord>& records) {
    std::string out =
        "session_id cluster_id centroid_id divergence_position pairwise_metric_bits\n";
    char line[160];
    for (const auto& rec : records) {
        for (const auto& mb : rec.members) {
            std::snprintf(line, sizeof(line), "%-10u %-10u %-11u %-19u %.6f\n",
                          mb.session_id, rec.cluster_id, rec.centroid_id,
                          mb.divergence_position, mb.metric_bits);
            out += line;
        }
    }
    return out;
}

// ---------------------------------------------------------------- prefix index

PrefixIndex::PrefixIndex(const LanguageModel& m, double epsilon)
    : model_(m), epsilon_(epsilon) {}

void PrefixIndex::insert(std::uint32_t session_id, const TokenSeq& seq) {
    std::unique_lock lock(mu_);
    if (registry_.count(session_id) != 0) {
        throw std::invalid_argument("duplicate session id " + std::to_string(session_id));
    }
    const std::vector<double> cum = model_.prefix_log2_probs(seq);

    Node* node = &root_;
    node->subtree_markers += 1;
    for (std::size_t j = 0; j < seq.size(); ++j) {
        auto it = node->children.find(seq[j]);
        if (it == node->children.end()) {
            auto child = std::make_unique<Node>();
            child->log2_edge = cum[j + 1] - cum[j];
            child->log2_prefix = cum[j + 1];
            it = node->children.emplace(seq[j], std::move(child)).first;
        }
        node = it->second.get();
        node->subtree_markers += 1;
    }
    node->markers.insert(
        std::lower_bound(node->markers.begin(), node->markers.end(), session_id),
        session_id);
    registry_.emplace(session_id, seq);
}

void PrefixIndex::evict(std::uint32_t session_id) {
    std::unique_lock lock(mu_);
    const auto reg = registry_.find(session_id);
    if (reg == registry_.end()) {
        throw std::invalid_argument("unknown session id " + std::to_string(session_id));
    }
    const TokenSeq& seq = reg->second;

    std::vector<Node*> path{&root_};
    for (TokenId t : seq) path.push_back(path.back()->children.at(t).get());

    Node* terminal = path.back();
    const auto mk =
        std::lower_bound(terminal->markers.begin(), terminal->markers.end(), session_id);
    terminal->markers.erase(mk);
    for (Node* n : path) n->subtree_markers -= 1;

    // prune childless nodes that neither carry nor lead to a stored session;
    // retained nodes keep the prefix-probability invariants intact
    for (std::size_t j = path.size() - 1; j > 0; --j) {
        Node* n = path[j];
        if (!n->children.empty() || !n->markers.empty()) break;
        path[j - 1]->children.erase(seq[j - 1]);
    }
    registry_.erase(reg);
}

std::uint32_t PrefixIndex::min_marker_excluding(const Node& node, const Node* skip) {
    std::uint32_t best = UINT32_MAX;
    if (!node.markers.empty()) best = node.markers.front();
    for (const auto& [tok, child] : node.children) {
        if (child.get() == skip || child->subtree_markers == 0) continue;
        best = std::min(best, min_marker_excluding(*child, nullptr));
    }
    return best;
}

std::optional<BestMatch> PrefixIndex::best_match(const TokenSeq& query) const {
    std::shared_lock lock(mu_);
    if (registry_.empty()) return std::nullopt;

    std::vector<const Node*> path{&root_};
    for (TokenId t : query) {
        const auto it = path.back()->children.find(t);
        if (it == path.back()->children.end()) break;
        path.push_back(it->second.get());
    }

    // -log2 P(prefix) never decreases along the path, so the deepest node with
    // a session diverging exactly there maximizes the metric, and the token
    // count tiebreak prefers the same node when probability-1 edges add zero.
    for (std::size_t j = path.size(); j-- > 0;) {
        const Node* skip = (j + 1 < path.size()) ? path[j + 1] : nullptr;
        const std::size_t exact =
            path[j]->subtree_markers - (skip != nullptr ? skip->subtree_markers : 0);
        if (exact == 0) continue;
        BestMatch bm;
        bm.session_id = min_marker_excluding(*path[j], skip);
        bm.shared_prefix_length = j;
        bm.metric_bits = -path[j]->log2_prefix;
        return bm;
    }
    return std::nullopt;  // unreachable when the registry is nonempty
}

std::size_t PrefixIndex::session_count() const {
    std::shared_lock lock(mu_);
    return registry_.size();
}

std::size_t PrefixIndex::count_nodes(const Node& node) {
    std::size_t n = 0;
    for (const auto& [tok, child] : node.children) n += 1 + count_nodes(*child);
    return n;
}

std::size_t PrefixIndex::node_count() const {
    std::shared_lock lock(mu_);
    return count_nodes(root_);
}

std::optional<TokenSeq> PrefixIndex::session_tokens(std::uint32_t session_id) const {
    std::shared_lock lock(mu_);
    const auto it = registry_.find(session_id);
    if (it == registry_.end()) return std::nullopt;
    return it->second;
}

void PrefixIndex::check_node(const Node& node, double parent_log2) {
    const double expect = parent_log2 + node.log2_edge;
    const double tol = 1e-12 * std::max(1.0, std::fabs(expect));
    if (std::fabs(node.log2_prefix - expect) > tol) {
        throw std::logic_error("trie node violates prefix = parent * edge");
    }
    std::size_t markers = node.markers.size();
    for (const auto& [tok, child] : node.children) {
        check_node(*child, node.log2_prefix);
        markers += child->subtree_markers;
    }
    if (markers != node.subtree_markers) {
        throw std::logic_error("trie subtree marker count out of sync");
    }
}

void PrefixIndex::check_invariants() const {
    std::shared_lock lock(mu_);
    std::size_t markers = root_.markers.size();
    for (const auto& [tok, child] : root_.children) {
        check_node(*child, 0.0);
        markers += child->subtree_markers;
    }
    if (markers != root_.subtree_markers || markers != registry_.size()) {
        throw std::logic_error("trie registry/marker count out of sync");
    }
}

}  // namespace seqkv
