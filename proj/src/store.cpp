#include "seqkv/store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace seqkv {

namespace {

// member-section size with every tail record re-costed at the raw-f32 depth:
// the storage picture with only the dedup layer active
std::uint64_t member_bits_dedup_only(const MemberSection& mem, std::size_t dim) {
    const std::uint64_t fixed = 32 + 32 + 16 + 16;
    const std::uint64_t per_pos = 16 + 8 + 32 + 32ull * dim;
    return fixed + per_pos * mem.tail.size();
}

}  // namespace

std::size_t DeltaCache::payload_bits_at(std::size_t position, std::size_t dim) const {
    return section == nullptr ? 0 : section->payload_bits_at(position, dim);
}

DedupStore::DedupStore(const Model& m, CodecConfig cfg) : model_(m), cfg_(std::move(cfg)) {
    cfg_.validate();
}

void DedupStore::store_cluster(const std::vector<TokenSeq>& sessions,
                               const ClusterRecord& rec) {
    if (rec.members.empty()) throw std::invalid_argument("empty cluster record");
    for (const auto& mb : rec.members) {
        if (sessions_.count(mb.session_id) != 0) {
            throw std::invalid_argument("session already stored: " +
                                        std::to_string(mb.session_id));
        }
    }

    CompressedCache cache = compress_cluster(model_, sessions, rec, cfg_);
    const std::size_t ci = containers_.size();

    CentroidCache cc;
    cc.session_id = rec.centroid_id;
    cc.tokens = cache.centroid_tokens;
    cc.kv = model_.forward(cc.tokens).kv;
    cc.model_fingerprint = model_.fingerprint();

    centroid_index_[rec.centroid_id] = ci;
    for (const auto& mb : rec.members) {
        sessions_[mb.session_id] = sessions.at(mb.session_id);
    }
    for (std::size_t mi = 0; mi < cache.members.size(); ++mi) {
        member_index_[cache.members[mi].session_id] = MemberRef{ci, mi};
    }
    containers_.push_back(std::move(cache));
    centroids_.push_back(std::move(cc));
}

void DedupStore::store_workload(const std::vector<TokenSeq>& sessions,
                                const std::vector<ClusterRecord>& records) {
    for (const auto& rec : records) store_cluster(sessions, rec);
}

KvTensor DedupStore::reconstruct(std::uint32_t session_id) const {
    if (const auto it = centroid_index_.find(session_id); it != centroid_index_.end()) {
        return centroids_[it->second].kv;
    }
    const auto it = member_index_.find(session_id);
    if (it == member_index_.end()) {
        throw std::invalid_argument("unknown session id " + std::to_string(session_id));
    }
    const CompressedCache& cache = containers_[it->second.container];
    const MemberSection& mem = cache.members[it->second.member];
    return decode_member(cache, mem, centroids_[it->second.container].kv, model_);
}

const CentroidCache* DedupStore::centroid_of(std::uint32_t session_id) const {
    const auto it = centroid_index_.find(session_id);
    return it == centroid_index_.end() ? nullptr : &centroids_[it->second];
}

std::optional<DeltaCache> DedupStore::delta_of(std::uint32_t session_id) const {
    const auto it = member_index_.find(session_id);
    if (it == member_index_.end()) return std::nullopt;
    const CompressedCache& cache = containers_[it->second.container];
    const MemberSection& mem = cache.members[it->second.member];
    DeltaCache view;
    view.session_id = mem.session_id;
    view.centroid_id = mem.centroid_id;
    view.divergence_position = mem.divergence_position;
    view.stored_bits = mem.section_bits(model_.config().position_dim());
    view.section = &mem;
    return view;
}

std::vector<std::uint32_t> DedupStore::session_ids() const {
    std::vector<std::uint32_t> out;
    out.reserve(sessions_.size());
    for (const auto& [id, seq] : sessions_) out.push_back(id);
    return out;
}

std::uint64_t full_cache_bits(const Model& m, const TokenSeq& session,
                              const CodecConfig& cfg) {
    std::vector<TokenSeq> one{session};
    ClusterRecord rec;
    rec.centroid_id = 0;
    rec.model_fingerprint = m.fingerprint();
    ClusterMember mb;
    mb.session_id = 0;
    mb.divergence_position = static_cast<std::uint32_t>(session.size());
    mb.metric_bits = 0.0;
    rec.members.push_back(mb);
    return compress_cluster(m, one, rec, cfg).total_bits;
}

StorageReport DedupStore::storage_report() const {
    if (sessions_.empty()) throw std::logic_error("storage_report on empty store");
    const std::size_t dim = model_.config().position_dim();

    StorageReport rep;
    rep.sessions = sessions_.size();

    std::size_t token_total = 0;
    for (const auto& [id, seq] : sessions_) token_total += seq.size();

    for (const auto& cache : containers_) {
        rep.stored_bits += cache.total_bits;
        if (!cache.members.empty()) {
            rep.clustered_sessions += cache.members.size() + 1;
        }
        // delta re-costed at full precision: the dedup-only intermediate
        std::uint64_t raw_members = 0;
        std::uint64_t actual_members = 0;
        for (const auto& mem : cache.members) {
            raw_members += member_bits_dedup_only(mem, dim);
            actual_members += mem.section_bits(dim);
        }
        rep.intermediate_bits += cache.total_bits - actual_members + raw_members;
    }

    double tail_fraction_sum = 0.0;
    std::size_t member_count = 0;
    for (const auto& [id, ref] : member_index_) {
        const MemberSection& mem = containers_[ref.container].members[ref.member];
        const std::size_t n = sessions_.at(id).size();
        if (n > 0) {
            tail_fraction_sum +=
                static_cast<double>(mem.tail.size()) / static_cast<double>(n);
        }
        ++member_count;
    }
    rep.lbar_over_n = member_count == 0 ? 0.0
                                        : tail_fraction_sum /
                                              static_cast<double>(member_count);
    rep.f = static_cast<double>(rep.clustered_sessions) /
            static_cast<double>(rep.sessions);

    for (const auto& [id, seq] : sessions_) {
        rep.baseline_bits += full_cache_bits(model_, seq, cfg_);
    }

    rep.measured_relative_cost = static_cast<double>(rep.stored_bits) /
                                 static_cast<double>(rep.baseline_bits);
    rep.predicted_relative_cost = 1.0 - rep.f * (1.0 - rep.lbar_over_n);
    rep.layer1_saved_bits = static_cast<std::int64_t>(rep.baseline_bits) -
                            static_cast<std::int64_t>(rep.intermediate_bits);
    rep.layer2_saved_bits = static_cast<std::int64_t>(rep.intermediate_bits) -
                            static_cast<std::int64_t>(rep.stored_bits);
    rep.total_saved_bits = static_cast<std::int64_t>(rep.baseline_bits) -
                           static_cast<std::int64_t>(rep.stored_bits);
    rep.bits_per_token = token_total == 0 ? 0.0
                                          : static_cast<double>(rep.stored_bits) /
                                                static_cast<double>(token_total);
    return rep;
}

std::string StorageReport::table() const {
    char buf[256];
    std::string out;
    out += "metric                     value\n";
    auto row_u = [&](const char* k, std::uint64_t v) {
        std::snprintf(buf, sizeof(buf), "%-26s %llu\n", k,
                      static_cast<unsigned long long>(v));
        out += buf;
    };
    auto row_i = [&](const char* k, std::int64_t v) {
        std::snprintf(buf, sizeof(buf), "%-26s %lld\n", k, static_cast<long long>(v));
        out += buf;
    };
    auto row_f = [&](const char* k, double v) {
        std::snprintf(buf, sizeof(buf), "%-26s %.6f\n", k, v);
        out += buf;
    };
    row_u("sessions", sessions);
    row_f("cluster_fraction_f", f);
    row_f("tail_ratio_lbar_over_n", lbar_over_n);
    row_u("stored_bits", stored_bits);
    row_u("baseline_bits", baseline_bits);
    row_f("measured_relative_cost", measured_relative_cost);
    row_f("predicted_relative_cost", predicted_relative_cost);
    row_u("intermediate_bits", intermediate_bits);
    row_i("layer1_saved_bits", layer1_saved_bits);
    row_i("layer2_saved_bits", layer2_saved_bits);
    row_i("total_saved_bits", total_saved_bits);
    row_f("bits_per_token", bits_per_token);
    return out;
}

std::string StorageReport::records() const {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf),
                  "sessions=%zu f=%.9g lbar_over_n=%.9g stored_bits=%llu "
                  "baseline_bits=%llu measured=%.9g predicted=%.9g "
                  "layer1_saved=%lld layer2_saved=%lld total_saved=%lld "
                  "bits_per_token=%.9g\n",
                  sessions, f, lbar_over_n,
                  static_cast<unsigned long long>(stored_bits),
                  static_cast<unsigned long long>(baseline_bits),
                  measured_relative_cost, predicted_relative_cost,
                  static_cast<long long>(layer1_saved_bits),
                  static_cast<long long>(layer2_saved_bits),
                  static_cast<long long>(total_saved_bits), bits_per_token);
    out += buf;
    return out;
}

}  // namespace seqkv
