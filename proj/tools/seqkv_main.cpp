// seqkv: sequential kv-cache compression engine over a deterministic toy
// transformer, with an exhaustive verification mode.
//
// Subcommands: gen, compress, decompress, verify, ratio, stats.
// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
// container format error.

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "seqkv/analyzer.hpp"
#include "seqkv/codec.hpp"
#include "seqkv/config.hpp"
#include "seqkv/kernels.hpp"
#include "seqkv/model.hpp"
#include "seqkv/store.hpp"
#include "seqkv/trie.hpp"

namespace {

using namespace seqkv;

const std::set<std::string> kKnownKeys = {
    // model
    "vocab_size", "layers", "heads", "head_dim", "seed", "max_context",
    // codec
    "quant_mode", "base_depth", "target_distortion", "mean_surprisal",
    "prediction", "topk_k", "centroid_delta",
    // clustering
    "delta_bits", "criterion", "epsilon",
    // workload generation
    "sessions", "cluster_fraction", "tail_ratio", "length", "temperature",
    "workload_seed",
};

struct Resolved {
    KvMap kv;

    std::string get(const std::string& key, const std::string& dflt) const {
        const auto it = kv.find(key);
        return it == kv.end() ? dflt : it->second;
    }
    double get_f(const std::string& key, double dflt) const {
        const auto it = kv.find(key);
        return it == kv.end() ? dflt : std::stod(it->second);
    }
    std::uint64_t get_u(const std::string& key, std::uint64_t dflt) const {
        const auto it = kv.find(key);
        return it == kv.end() ? dflt : std::stoull(it->second);
    }
};

Resolved resolve_config(const std::string& config_path,
                        const std::vector<std::string>& overrides,
                        std::int64_t seed_flag) {
    Resolved r;
    if (!config_path.empty()) r.kv = load_kv_file(config_path);
    for (const auto& o : overrides) apply_override(r.kv, o);
    if (seed_flag >= 0) r.kv["seed"] = std::to_string(seed_flag);
    for (const auto& [k, v] : r.kv) {
        if (kKnownKeys.count(k) == 0) {
            throw std::invalid_argument("unknown config key: " + k);
        }
    }
    return r;
}

void echo_config(const Resolved& r, const Model& m) {
    KvMap full = m.config().to_map();
    for (const auto& [k, v] : r.kv) full[k] = v;
    std::string line = "config:";
    for (const auto& [k, v] : full) {
        line += " " + k + "=" + v;
    }
    std::printf("%s\n", line.c_str());
    std::printf("fingerprint: %016" PRIx64 "\n", m.fingerprint());
}

Model build_model(const Resolved& r) {
    return Model::build(ModelConfig::from_map(r.kv));
}

CodecConfig codec_from(const Resolved& r) {
    return CodecConfig::from_map(r.kv);
}

// ---------------------------------------------------------------- workload io

void write_workload(const std::string& path, const Model& m, const WorkloadSpec& spec,
                    const Workload& wl) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    char head[512];
    std::snprintf(head, sizeof(head),
                  "# seqkv-workload fingerprint=%016" PRIx64
                  " sessions=%zu length=%u cluster_fraction=%.9g tail_ratio=%.9g "
                  "temperature=%.9g workload_seed=%llu achieved_f=%.9g "
                  "achieved_tail_ratio=%.9g suggested_delta_bits=%.9g\n",
                  m.fingerprint(), wl.sessions.size(), wl.length,
                  spec.cluster_fraction, spec.tail_ratio, spec.temperature,
                  static_cast<unsigned long long>(spec.seed), wl.achieved_f,
                  wl.achieved_tail_ratio, wl.suggested_delta_bits);
    out << head;
    for (const auto& seq : wl.sessions) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i > 0) out << ' ';
            out << seq[i];
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

struct WorkloadFile {
    KvMap header;
    std::vector<TokenSeq> sessions;
};

WorkloadFile read_workload(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open workload file: " + path);
    WorkloadFile wf;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# seqkv-workload", 0) != 0) {
        throw std::runtime_error("workload file missing header: " + path);
    }
    {
        std::istringstream hs(line.substr(std::string("# seqkv-workload").size()));
        std::string tok;
        while (hs >> tok) {
            const auto eq = tok.find('=');
            if (eq != std::string::npos) wf.header[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        TokenSeq seq;
        long v = 0;
        while (ls >> v) seq.push_back(static_cast<TokenId>(v));
        wf.sessions.push_back(std::move(seq));
    }
    return wf;
}

std::uint64_t parse_hex_fingerprint(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

// ---------------------------------------------------------------- commands

int cmd_gen(const Resolved& r, const std::string& out_path) {
    const Model m = build_model(r);
    echo_config(r, m);
    WorkloadSpec spec;
    spec.sessions = r.get_u("sessions", 100);
    spec.cluster_fraction = r.get_f("cluster_fraction", 0.5);
    spec.tail_ratio = r.get_f("tail_ratio", 0.2);
    spec.length = static_cast<std::uint32_t>(r.get_u("length", 0));
    spec.temperature = r.get_f("temperature", 1.0);
    spec.seed = r.get_u("workload_seed", 1);
    const Workload wl = generate_workload(m, spec);
    write_workload(out_path, m, spec, wl);
    std::printf("sessions: %zu length: %u achieved_f: %.6g achieved_tail_ratio: %.6g\n",
                wl.sessions.size(), wl.length, wl.achieved_f, wl.achieved_tail_ratio);
    std::printf("suggested_delta_bits: %.9g\n", wl.suggested_delta_bits);
    std::printf("workload written to %s\n", out_path.c_str());
    return 0;
}

int cmd_compress(const Resolved& r, const std::string& workload_path,
                 const std::string& out_path, const std::string& format) {
    const WorkloadFile wf = read_workload(workload_path);
    const Resolved& merged = r;
    const Model m = build_model(merged);
    echo_config(merged, m);

    if (auto it = wf.header.find("fingerprint"); it != wf.header.end()) {
        if (parse_hex_fingerprint(it->second) != m.fingerprint()) {
            throw std::runtime_error(
                "workload fingerprint does not match the configured model");
        }
    }

    double delta_bits = 0.0;
    const std::string delta_str = merged.get("delta_bits", "auto");
    if (delta_str == "auto") {
        const auto it = wf.header.find("suggested_delta_bits");
        if (it == wf.header.end()) {
            throw std::runtime_error(
                "workload header carries no suggested_delta_bits; pass delta_bits");
        }
        delta_bits = std::stod(it->second);
    } else {
        delta_bits = std::stod(delta_str);
    }

    ClusterOptions copts;
    if (merged.get("criterion", "shared_info") == "paper_literal") {
        copts.criterion = ClusterCriterion::paper_metric_at_most;
    }
    const auto records = cluster_sessions(m, wf.sessions, delta_bits, copts);

    DedupStore store(m, codec_from(merged));
    store.store_workload(wf.sessions, records);
    write_containers(out_path, store.containers());

    const StorageReport rep = store.storage_report();
    if (format == "records") {
        std::fputs(rep.records().c_str(), stdout);
    } else {
        std::printf("clusters: %zu\n", records.size());
        std::fputs(rep.table().c_str(), stdout);
    }
    std::printf("container written to %s\n", out_path.c_str());
    return 0;
}

int cmd_decompress(const std::string& in_path, const std::string& out_path) {
    const auto caches = read_containers(in_path);
    if (caches.empty()) throw std::runtime_error("no containers in " + in_path);

    // the container is self-describing: rebuild the model from the echo
    const Model m = Model::build(ModelConfig::from_map(caches.front().config_echo));
    std::printf("fingerprint: %016" PRIx64 "\n", m.fingerprint());

    std::map<std::uint32_t, TokenSeq> tokens;
    std::uint32_t max_id = 0;
    for (const auto& cache : caches) {
        if (cache.model_fingerprint != m.fingerprint()) {
            throw std::runtime_error("container fingerprint mismatch inside file");
        }
        for (const auto& ds : decompress(cache, m)) {
            tokens[ds.session_id] = ds.tokens;
            max_id = std::max(max_id, ds.session_id);
        }
    }
    std::vector<TokenSeq> sessions(max_id + 1);
    for (const auto& [id, seq] : tokens) sessions[id] = seq;

    const RoundtripCheck rc = check_roundtrip(m, sessions, caches);
    std::printf("sessions: %zu encoded_positions: %llu depth0_positions: %llu\n",
                tokens.size(), static_cast<unsigned long long>(rc.positions),
                static_cast<unsigned long long>(rc.depth0_positions));
    std::printf("max_abs_error: %.9g\n", rc.max_error);
    std::printf("prefix_bit_identical: %s\n", rc.prefix_bit_identical ? "yes" : "NO");

    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open output file: " + out_path);
        char buf[64];
        for (const auto& cache : caches) {
            for (const auto& ds : decompress(cache, m)) {
                for (std::size_t pos = 0; pos < ds.kv.n_positions(); ++pos) {
                    out << "session " << ds.session_id << " pos " << pos;
                    for (double v : ds.kv.position_vector(pos)) {
                        std::snprintf(buf, sizeof(buf), " %.17g", v);
                        out << buf;
                    }
                    out << '\n';
                }
            }
        }
    }

    const bool ok = rc.prefix_bit_identical && rc.tokens_match &&
                    (rc.positions == 0 || rc.min_bound_margin >= 0.0);
    if (!ok) {
        std::printf("DECODE GUARANTEE VIOLATED (bound margin %.3g)\n",
                    rc.min_bound_margin);
        return 1;
    }
    std::printf("decode error within the per-position guarantee\n");
    return 0;
}

int cmd_verify(const Resolved& r, const std::string& format, bool quick) {
    const Model m = build_model(r);
    echo_config(r, m);
    VerifyOptions opts;
    if (quick) {
        opts.entropy_max_len = 4;
        opts.injectivity_context_len = 3;
        opts.residual_context_len = 3;
        opts.duality_context_len = 3;
        opts.toy_trace_n = 6;
        opts.workload_sessions = 120;
        opts.workload_length = 48;
    }
    const ClaimMatrix matrix = run_claim_matrix(m, opts);
    if (format == "records") {
        std::fputs(matrix.records().c_str(), stdout);
    } else {
        std::fputs(matrix.table().c_str(), stdout);
    }
    if (!matrix.all_required_pass()) {
        std::printf("verification FAILED\n");
        return 1;
    }
    std::printf("all required claims pass\n");
    return 0;
}

int cmd_ratio(double layers, double heads, double head_dim, double bits, double hbar,
              double overhead) {
    const RatioReport r = theoretical_ratio(layers, heads, head_dim, bits, hbar, overhead);
    std::printf("bits_per_token=%.10g\n", r.bits_per_token);
    std::printf("bits_per_token_fp16=%.10g\n", r.bits_per_token_fp16);
    std::printf("ratio_vs_floor=%.10g\n", r.ratio_vs_floor);
    std::printf("ratio_fp16_vs_floor=%.10g\n", r.ratio_fp16_vs_floor);
    std::printf("B = %s bits/token at b=%g; vs floor %s bits/token: %sx "
                "(fp16: %sx)\n",
                format_sig(r.bits_per_token, 3).c_str(), bits,
                format_sig(hbar * overhead, 3).c_str(),
                format_sig(r.ratio_vs_floor, 3).c_str(),
                format_sig(r.ratio_fp16_vs_floor, 3).c_str());
    return 0;
}

int cmd_stats(const Resolved& r, const std::string& in_path) {
    const Model m = build_model(r);
    echo_config(r, m);
    std::printf("kernel_backend: %s\n", kern::ops().name);
    std::printf("embedding_diameter_ce: %.9g\n", m.embedding_diameter());
    std::printf("min_pairwise_embedding_distance: %.9g\n",
                m.min_pairwise_embedding_distance());
    std::printf("embedding_rank: %u of %u\n", m.embedding_rank(),
                std::min(m.config().vocab_size, m.config().model_dim()));
    const LipschitzEstimate lip = m.lipschitz_estimate(3);
    std::printf("kappa_hat: %.9g (contexts up to length %u)\n", lip.global_kappa,
                lip.context_len);
    for (std::size_t l = 0; l < lip.per_layer.size(); ++l) {
        std::printf("kappa_hat_layer%zu: %.9g\n", l + 1, lip.per_layer[l]);
    }
    std::printf("f_lip_kappa_pow_L: %.9g (direct full-map ratio %.9g)\n",
                lip.f_lip(m.config().layers), lip.full_map);

    if (!in_path.empty()) {
        const auto caches = read_containers(in_path);
        std::uint64_t bits = 0;
        std::size_t members = 0, positions = 0;
        for (const auto& c : caches) {
            bits += c.total_bits;
            members += c.members.size();
            positions += c.centroid_tokens.size();
            for (const auto& mem : c.members) positions += mem.tail.size();
        }
        std::printf("containers: %zu members: %zu total_bits: %llu\n", caches.size(),
                    members, static_cast<unsigned long long>(bits));
        std::printf("encoded_positions: %zu\n", positions);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sequential kv-cache compression engine"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path, out_path, in_path, workload_path, format = "text";
    std::vector<std::string> overrides;
    std::int64_t seed_flag = -1;
    bool quick = false;

    app.add_option("--config", config_path, "key=value config file")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed_flag, "model seed override");
    app.add_option("--out", out_path, "output path");
    app.add_option("--format", format, "output format")
        ->check(CLI::IsMember({"text", "records"}));
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    auto* gen = app.add_subcommand("gen", "generate a session workload file");
    auto* compress =
        app.add_subcommand("compress", "cluster and compress a workload");
    compress->add_option("--workload", workload_path, "workload file")->required();
    auto* decompress_cmd =
        app.add_subcommand("decompress", "reconstruct kv caches from a container");
    decompress_cmd->add_option("--in", in_path, "container file")->required();
    auto* verify = app.add_subcommand("verify", "run the claim verification matrix");
    verify->add_flag("--quick", quick, "reduced enumeration depths");

    auto* ratio = app.add_subcommand("ratio", "headline compression-ratio arithmetic");
    double r_layers = 80, r_heads = 64, r_head_dim = 128, r_bits = 3, r_hbar = 4.3,
           r_overhead = 1.0;
    ratio->add_option("--layers", r_layers, "transformer layers L");
    ratio->add_option("--heads", r_heads, "attention heads H");
    ratio->add_option("--head-dim", r_head_dim, "per-head dimension d");
    ratio->add_option("--bits", r_bits, "quantizer bits per component b");
    ratio->add_option("--mean-surprisal", r_hbar, "mean surprisal hbar, bits/token");
    ratio->add_option("--overhead", r_overhead, "coder overhead factor");

    auto* stats = app.add_subcommand("stats", "model and container statistics");
    stats->add_option("--in", in_path, "container file to summarize");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const Resolved r = resolve_config(config_path, overrides, seed_flag);
        if (gen->parsed()) {
            if (out_path.empty()) throw std::invalid_argument("gen requires --out");
            return cmd_gen(r, out_path);
        }
        if (compress->parsed()) {
            if (out_path.empty()) throw std::invalid_argument("compress requires --out");
            return cmd_compress(r, workload_path, out_path, format);
        }
        if (decompress_cmd->parsed()) {
            return cmd_decompress(in_path, out_path);
        }
        if (verify->parsed()) {
            return cmd_verify(r, format, quick);
        }
        if (ratio->parsed()) {
            return cmd_ratio(r_layers, r_heads, r_head_dim, r_bits, r_hbar, r_overhead);
        }
        if (stats->parsed()) {
            return cmd_stats(r, in_path);
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
