#include "seqkv/codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "seqkv/kernels.hpp"

namespace seqkv {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'V', 'C'};

// scale policy: smallest f32 >= the f64 max-abs, so quantization never clamps
float round_up_f32(double v) {
    float s = static_cast<float>(v);
    if (static_cast<double>(s) < v) s = std::nextafterf(s, std::numeric_limits<float>::infinity());
    return s;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
  public:
    Reader(std::span<const std::uint8_t> data, std::size_t offset)
        : data_(data), pos_(offset) {}

    std::size_t pos() const { return pos_; }

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(
            data_[pos_] | (static_cast<std::uint16_t>(data_[pos_ + 1]) << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

  private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) throw std::runtime_error("container: truncated");
    }
    std::span<const std::uint8_t> data_;
    std::size_t pos_;
};

std::size_t packed_code_bytes(std::uint32_t depth, std::size_t dim) {
    if (depth == 0) return 0;
    if (depth == 32) return 4 * dim;
    return (static_cast<std::size_t>(depth) * dim + 7) / 8;
}

void pack_codes(const std::vector<std::uint32_t>& codes, std::uint32_t depth,
                std::vector<std::uint8_t>& out) {
    if (depth == 32) {
        for (std::uint32_t c : codes) put_u32(out, c);
        return;
    }
    std::uint64_t acc = 0;
    std::uint32_t nbits = 0;
    for (std::uint32_t c : codes) {
        acc |= static_cast<std::uint64_t>(c) << nbits;
        nbits += depth;
        while (nbits >= 8) {
            out.push_back(static_cast<std::uint8_t>(acc & 0xFF));
            acc >>= 8;
            nbits -= 8;
        }
    }
    if (nbits > 0) out.push_back(static_cast<std::uint8_t>(acc & 0xFF));
}

std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes,
                                        std::uint32_t depth, std::size_t dim) {
    std::vector<std::uint32_t> codes(dim);
    if (depth == 32) {
        for (std::size_t i = 0; i < dim; ++i) {
            std::uint32_t v = 0;
            for (int b = 0; b < 4; ++b)
                v |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
            codes[i] = v;
        }
        return codes;
    }
    std::uint64_t acc = 0;
    std::uint32_t nbits = 0;
    std::size_t in = 0;
    const std::uint64_t mask = (depth == 32) ? ~0ull : ((1ull << depth) - 1);
    for (std::size_t i = 0; i < dim; ++i) {
        while (nbits < depth) {
            acc |= static_cast<std::uint64_t>(bytes[in++]) << nbits;
            nbits += 8;
        }
        codes[i] = static_cast<std::uint32_t>(acc & mask);
        acc >>= depth;
        nbits -= depth;
    }
    return codes;
}

}  // namespace

// ------------------------------------------------------------- config

const char* quant_mode_name(QuantMode m) {
    switch (m) {
        case QuantMode::uniform: return "uniform";
        case QuantMode::adaptive: return "adaptive";
        case QuantMode::waterfill: return "waterfill";
        case QuantMode::raw32: return "raw32";
    }
    return "adaptive";
}

QuantMode quant_mode_from_name(const std::string& name) {
    if (name == "uniform") return QuantMode::uniform;
    if (name == "adaptive") return QuantMode::adaptive;
    if (name == "waterfill") return QuantMode::waterfill;
    if (name == "raw32") return QuantMode::raw32;
    throw std::invalid_argument("unknown quant mode: " + name);
}

void CodecConfig::validate() const {
    if (base_depth < 1 || base_depth > 16)
        throw std::invalid_argument("base_depth must be in [1, 16]");
    if (mode == QuantMode::waterfill && !(target_distortion > 0.0))
        throw std::invalid_argument("waterfill mode requires target_distortion > 0");
    if (mean_surprisal < 0.0)
        throw std::invalid_argument("mean_surprisal must be >= 0");
    if (topk_k < 1) throw std::invalid_argument("topk_k must be >= 1");
}

KvMap CodecConfig::to_map() const {
    KvMap kv;
    kv["quant_mode"] = quant_mode_name(mode);
    kv["base_depth"] = std::to_string(base_depth);
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", target_distortion);
    kv["target_distortion"] = buf;
    std::snprintf(buf, sizeof(buf), "%.17g", mean_surprisal);
    kv["mean_surprisal"] = buf;
    kv["prediction"] = prediction_method_name(prediction);
    kv["topk_k"] = std::to_string(topk_k);
    kv["centroid_delta"] = centroid_delta ? "1" : "0";
    return kv;
}

CodecConfig CodecConfig::from_map(const KvMap& kv) {
    CodecConfig cfg;
    if (auto it = kv.find("quant_mode"); it != kv.end())
        cfg.mode = quant_mode_from_name(it->second);
    if (auto it = kv.find("base_depth"); it != kv.end())
        cfg.base_depth = static_cast<std::uint32_t>(std::stoul(it->second));
    if (auto it = kv.find("target_distortion"); it != kv.end())
        cfg.target_distortion = std::stod(it->second);
    if (auto it = kv.find("mean_surprisal"); it != kv.end())
        cfg.mean_surprisal = std::stod(it->second);
    if (auto it = kv.find("prediction"); it != kv.end())
        cfg.prediction = prediction_method_from_name(it->second);
    if (auto it = kv.find("topk_k"); it != kv.end())
        cfg.topk_k = static_cast<std::uint32_t>(std::stoul(it->second));
    if (auto it = kv.find("centroid_delta"); it != kv.end())
        cfg.centroid_delta = it->second == "1" || it->second == "true";
    cfg.validate();
    return cfg;
}

// ------------------------------------------------------------- layer 3

std::uint32_t adaptive_depth(double h_bits, std::uint32_t b0, double hbar_bits) {
    if (!(hbar_bits > 0.0)) throw std::invalid_argument("adaptive depth requires hbar > 0");
    const double raw = std::floor(static_cast<double>(b0) * h_bits / hbar_bits);
    if (raw < 1.0) return 1;
    return static_cast<std::uint32_t>(raw);
}

WaterfillRate waterfill_rate(double sigma2, double distortion, std::uint32_t dim) {
    if (!(distortion > 0.0)) throw std::invalid_argument("waterfill requires D > 0");
    if (sigma2 < 0.0) throw std::invalid_argument("variance must be >= 0");
    WaterfillRate out;
    if (sigma2 <= distortion) return out;  // zero rate at low-variance positions
    out.rate_bits_total =
        0.5 * static_cast<double>(dim) * std::log2(sigma2 / distortion);
    out.per_component = static_cast<std::uint32_t>(
        std::ceil(out.rate_bits_total / static_cast<double>(dim)));
    return out;
}

std::size_t EncodedPosition::record_bits(std::size_t dim) const {
    return 8 + 32 + 8 * packed_code_bytes(depth, dim);
}

EncodedPosition encode_residual(std::span<const double> residual, std::uint32_t depth) {
    if (depth > 16 && depth != 32)
        throw std::invalid_argument("depth must be in [0, 16] or 32 (raw)");
    for (double v : residual) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite residual component");
    }
    EncodedPosition rec;
    rec.depth = static_cast<std::uint8_t>(depth);
    const double maxabs = kern::max_abs(residual.data(), residual.size());
    rec.scale = round_up_f32(maxabs);
    if (depth == 0) return rec;

    rec.codes.resize(residual.size());
    if (depth == 32) {
        for (std::size_t i = 0; i < residual.size(); ++i) {
            rec.codes[i] = std::bit_cast<std::uint32_t>(static_cast<float>(residual[i]));
        }
        return rec;
    }

    const double scale = static_cast<double>(rec.scale);
    if (scale == 0.0) {
        std::fill(rec.codes.begin(), rec.codes.end(), 0u);
        return rec;
    }
    const double step = std::ldexp(scale, 1 - static_cast<int>(depth));
    const std::uint32_t max_code = (1u << depth) - 1;
    kern::ops().quantize_midrise(residual.data(), residual.size(), scale, step,
                                 max_code, rec.codes.data());
    for (std::size_t i = 0; i < residual.size(); ++i) {
        if (std::fabs(residual[i]) > scale) ++rec.clamped;
    }
    return rec;
}

std::vector<double> decode_residual(const EncodedPosition& rec, std::size_t dim) {
    std::vector<double> out(dim, 0.0);
    if (rec.depth == 0) return out;
    if (rec.codes.size() != dim) throw std::runtime_error("malformed residual record");
    if (rec.depth == 32) {
        for (std::size_t i = 0; i < dim; ++i) {
            out[i] = static_cast<double>(std::bit_cast<float>(rec.codes[i]));
        }
        return out;
    }
    const double scale = static_cast<double>(rec.scale);
    if (scale == 0.0) return out;
    const double step = std::ldexp(scale, 1 - static_cast<int>(rec.depth));
    kern::ops().dequantize_midrise(rec.codes.data(), dim, scale, step, out.data());
    return out;
}

double decode_error_bound(const EncodedPosition& rec) {
    const double scale = static_cast<double>(rec.scale);
    if (rec.depth == 0) return std::numeric_limits<double>::infinity();
    if (rec.depth == 32) return std::ldexp(scale, -24);
    return std::ldexp(scale, -static_cast<int>(rec.depth));
}

// ------------------------------------------------------------- container

std::size_t MemberSection::section_bits(std::size_t dim) const {
    std::size_t bits = 32 + 32 + 16 + 16 + 16 * tail_tokens.size();
    for (const auto& rec : tail) bits += rec.record_bits(dim);
    return bits;
}

std::size_t MemberSection::payload_bits_at(std::size_t position, std::size_t dim) const {
    if (position < 1 || position <= divergence_position) return 0;
    const std::size_t idx = position - divergence_position - 1;
    if (idx >= tail.size()) return 0;
    return 16 + tail[idx].record_bits(dim);  // token + record
}

std::size_t CompressedCache::position_dim() const {
    const ModelConfig mc = ModelConfig::from_map(config_echo);
    return mc.position_dim();
}

std::size_t CompressedCache::centroid_section_bits() const {
    return 16 + 16 * centroid_tokens.size() + 32 * centroid_kv.size();
}

std::vector<std::uint8_t> serialize(const CompressedCache& cache) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, cache.version);
    put_u64(out, cache.model_fingerprint);

    const std::string cfg = format_kv(cache.config_echo);
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());

    put_u16(out, static_cast<std::uint16_t>(cache.centroid_tokens.size()));
    for (TokenId t : cache.centroid_tokens) put_u16(out, t);
    for (float v : cache.centroid_kv) put_f32(out, v);

    put_u16(out, static_cast<std::uint16_t>(cache.members.size()));
    for (const auto& mem : cache.members) {
        put_u32(out, mem.session_id);
        put_u32(out, mem.centroid_id);
        put_u16(out, mem.divergence_position);
        put_u16(out, static_cast<std::uint16_t>(mem.tail_tokens.size()));
        for (TokenId t : mem.tail_tokens) put_u16(out, t);
        for (const auto& rec : mem.tail) {
            out.push_back(rec.depth);
            put_f32(out, rec.scale);
            pack_codes(rec.codes, rec.depth, out);
        }
    }
    return out;
}

CompressedCache parse_container(std::span<const std::uint8_t> data, std::size_t& offset) {
    Reader r(data, offset);
    const auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw std::runtime_error("container: bad magic");
    CompressedCache cache;
    cache.version = r.u16();
    if (cache.version != 1) throw std::runtime_error("container: unsupported version");
    cache.model_fingerprint = r.u64();

    const std::uint32_t cfg_len = r.u32();
    const auto cfg_bytes = r.bytes(cfg_len);
    cache.config_echo =
        parse_kv_text(std::string(cfg_bytes.begin(), cfg_bytes.end()));
    if (auto it = cache.config_echo.find("centroid_id"); it != cache.config_echo.end()) {
        cache.centroid_id = static_cast<std::uint32_t>(std::stoul(it->second));
    }

    const ModelConfig mc = ModelConfig::from_map(cache.config_echo);
    const std::size_t dim = mc.position_dim();

    const std::uint16_t n_tokens = r.u16();
    cache.centroid_tokens.resize(n_tokens);
    for (auto& t : cache.centroid_tokens) t = static_cast<TokenId>(r.u16());
    cache.centroid_kv.resize(static_cast<std::size_t>(n_tokens) * dim);
    for (auto& v : cache.centroid_kv) v = r.f32();

    const std::uint16_t n_members = r.u16();
    cache.members.resize(n_members);
    for (auto& mem : cache.members) {
        mem.session_id = r.u32();
        mem.centroid_id = r.u32();
        mem.divergence_position = r.u16();
        const std::uint16_t n_tail = r.u16();
        mem.tail_tokens.resize(n_tail);
        for (auto& t : mem.tail_tokens) t = static_cast<TokenId>(r.u16());
        mem.tail.resize(n_tail);
        for (auto& rec : mem.tail) {
            rec.depth = r.u8();
            if (rec.depth > 16 && rec.depth != 32)
                throw std::runtime_error("container: malformed depth");
            rec.scale = r.f32();
            if (rec.depth != 0) {
                const auto bytes = r.bytes(packed_code_bytes(rec.depth, dim));
                rec.codes = unpack_codes(bytes, rec.depth, dim);
            }
        }
    }
    cache.total_bits = 8 * (r.pos() - offset);
    offset = r.pos();
    return cache;
}

void write_containers(const std::string& path, const std::vector<CompressedCache>& caches) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    for (const auto& cache : caches) {
        const auto bytes = serialize(cache);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<CompressedCache> read_containers(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open container file: " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    std::vector<CompressedCache> out;
    std::size_t offset = 0;
    while (offset < data.size()) {
        out.push_back(parse_container(data, offset));
    }
    return out;
}

// ------------------------------------------------------------- pipeline

namespace {

std::vector<float> kv_to_f32(const KvTensor& kv) {
    std::vector<float> out(kv.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(kv.data()[i]);
    return out;
}

// mean realized surprisal over every tail position the encoder will touch
double calibrate_hbar(const Model& m, const std::vector<TokenSeq>& sessions,
                      const ClusterRecord& rec) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& mb : rec.members) {
        if (mb.session_id == rec.centroid_id) continue;
        const TokenSeq& seq = sessions.at(mb.session_id);
        const SurprisalTrace trace = m.surprisal_trace(seq);
        for (std::size_t i = mb.divergence_position; i < seq.size(); ++i) {
            sum += trace.surprisal_bits[i];
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace

CompressedCache compress_cluster(const Model& m, const std::vector<TokenSeq>& sessions,
                                 const ClusterRecord& rec, const CodecConfig& cfg) {
    cfg.validate();
    if (rec.model_fingerprint != 0 && rec.model_fingerprint != m.fingerprint()) {
        throw std::runtime_error("model fingerprint mismatch between cluster and codec");
    }

    const std::size_t dim = m.config().position_dim();
    const TokenSeq& centroid_seq = sessions.at(rec.centroid_id);

    CompressedCache cache;
    cache.model_fingerprint = m.fingerprint();
    cache.centroid_id = rec.centroid_id;
    cache.centroid_tokens = centroid_seq;

    const ForwardResult centroid_fwd = m.forward(centroid_seq);
    cache.centroid_kv = kv_to_f32(centroid_fwd.kv);

    double hbar = cfg.mean_surprisal;
    if (cfg.mode == QuantMode::adaptive && hbar == 0.0) {
        hbar = calibrate_hbar(m, sessions, rec);
    }

    cache.config_echo = m.config().to_map();
    {
        KvMap codec_echo = cfg.to_map();
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", hbar);
        codec_echo["mean_surprisal"] = buf;
        cache.config_echo.insert(codec_echo.begin(), codec_echo.end());
        cache.config_echo["centroid_id"] = std::to_string(rec.centroid_id);
    }

    std::vector<double> target(dim), actual(dim);
    for (const auto& mb : rec.members) {
        if (mb.session_id == rec.centroid_id) continue;
        const TokenSeq& seq = sessions.at(mb.session_id);
        const std::size_t dbar = mb.divergence_position;
        if (cfg.centroid_delta && seq.size() > centroid_seq.size()) {
            throw std::runtime_error(
                "centroid_delta mode requires member length <= centroid length");
        }

        MemberSection sec;
        sec.session_id = mb.session_id;
        sec.centroid_id = rec.centroid_id;
        sec.divergence_position = static_cast<std::uint16_t>(dbar);
        sec.tail_tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(dbar), seq.end());

        IncrementalForward fwd(m);
        for (std::size_t i = 0; i < dbar; ++i) fwd.push(seq[i]);

        for (std::size_t i = dbar; i < seq.size(); ++i) {
            fwd.probe_kv(seq[i], actual);
            std::uint32_t depth = 0;
            switch (cfg.mode) {
                case QuantMode::uniform:
                    depth = cfg.base_depth;
                    break;
                case QuantMode::adaptive: {
                    const double h = -std::log2(fwd.dist().probs[seq[i]]);
                    depth = adaptive_depth(h, cfg.base_depth, hbar);
                    depth = std::min(depth, 16u);
                    break;
                }
                case QuantMode::waterfill: {
                    const double sigma2 = residual_variance_at(m, fwd).total;
                    depth = waterfill_rate(sigma2, cfg.target_distortion,
                                           static_cast<std::uint32_t>(dim))
                                .per_component;
                    depth = std::min(depth, 16u);
                    break;
                }
                case QuantMode::raw32:
                    depth = 32;
                    break;
            }

            if (cfg.mode == QuantMode::raw32) {
                std::copy(actual.begin(), actual.end(), target.begin());
            } else if (cfg.centroid_delta) {
                kern::sub(actual.data(), centroid_fwd.kv.position_vector(i).data(),
                          target.data(), dim);
            } else {
                const PredictedKv pred = predict_at(fwd, cfg.prediction, cfg.topk_k);
                kern::sub(actual.data(), pred.flat.data(), target.data(), dim);
            }
            sec.tail.push_back(encode_residual(target, depth));
            fwd.push(seq[i]);
        }
        cache.members.push_back(std::move(sec));
    }
    std::sort(cache.members.begin(), cache.members.end(),
              [](const MemberSection& a, const MemberSection& b) {
                  return a.session_id < b.session_id;
              });

    cache.total_bits = 8 * serialize(cache).size();
    return cache;
}

std::vector<CompressedCache> compress_workload(const Model& m,
                                               const std::vector<TokenSeq>& sessions,
                                               const std::vector<ClusterRecord>& records,
                                               const CodecConfig& cfg) {
    std::vector<CompressedCache> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        out.push_back(compress_cluster(m, sessions, rec, cfg));
    }
    return out;
}

std::vector<DecodedSession> decompress(const CompressedCache& cache, const Model& m) {
    if (cache.model_fingerprint != m.fingerprint()) {
        throw std::runtime_error("container fingerprint does not match the model");
    }

    // the centroid cache is recomputed from its tokens; determinism makes the
    // result bit-identical to the encoder's copy, the f32 image verifies it
    const ForwardResult centroid_fwd = m.forward(cache.centroid_tokens);
    if (cache.centroid_kv.size() != centroid_fwd.kv.data().size()) {
        throw std::runtime_error("container: centroid payload size mismatch");
    }
    for (std::size_t i = 0; i < cache.centroid_kv.size(); ++i) {
        if (static_cast<float>(centroid_fwd.kv.data()[i]) != cache.centroid_kv[i]) {
            throw std::runtime_error("container: centroid payload does not match model");
        }
    }

    std::vector<DecodedSession> out;
    {
        DecodedSession c;
        c.session_id = cache.centroid_id;
        c.tokens = cache.centroid_tokens;
        c.kv = centroid_fwd.kv;
        out.push_back(std::move(c));
    }

    for (const auto& mem : cache.members) {
        DecodedSession s;
        s.session_id = mem.session_id;
        const std::size_t dbar = mem.divergence_position;
        if (dbar > cache.centroid_tokens.size()) {
            throw std::runtime_error("container: divergence beyond centroid length");
        }
        s.tokens.assign(cache.centroid_tokens.begin(),
                        cache.centroid_tokens.begin() + static_cast<std::ptrdiff_t>(dbar));
        s.tokens.insert(s.tokens.end(), mem.tail_tokens.begin(), mem.tail_tokens.end());
        s.kv = decode_member(cache, mem, centroid_fwd.kv, m);
        out.push_back(std::move(s));
    }
    return out;
}

KvTensor decode_member(const CompressedCache& cache, const MemberSection& mem,
                       const KvTensor& centroid_kv, const Model& m) {
    const CodecConfig cfg = CodecConfig::from_map(cache.config_echo);
    const std::size_t dim = m.config().position_dim();
    const std::size_t dbar = mem.divergence_position;
    if (dbar > centroid_kv.n_positions()) {
        throw std::runtime_error("container: divergence beyond centroid length");
    }

    KvTensor kv(dbar + mem.tail.size(), m.config().layers, m.config().model_dim());
    for (std::size_t i = 0; i < dbar; ++i) {
        const auto src = centroid_kv.position_vector(i);
        std::copy(src.begin(), src.end(), kv.position_vector(i).begin());
    }

    IncrementalForward fwd(m);
    for (std::size_t i = 0; i < dbar; ++i) fwd.push(cache.centroid_tokens[i]);
    for (std::size_t j = 0; j < mem.tail.size(); ++j) {
        const std::size_t pos = dbar + j;
        const std::vector<double> res = decode_residual(mem.tail[j], dim);
        auto dst = kv.position_vector(pos);
        if (cfg.mode == QuantMode::raw32) {
            std::copy(res.begin(), res.end(), dst.begin());
        } else if (cfg.centroid_delta) {
            if (pos >= centroid_kv.n_positions()) {
                throw std::runtime_error("container: centroid_delta tail beyond centroid");
            }
            const auto base = centroid_kv.position_vector(pos);
            for (std::size_t i = 0; i < dim; ++i) dst[i] = base[i] + res[i];
        } else {
            const PredictedKv pred = predict_at(fwd, cfg.prediction, cfg.topk_k);
            for (std::size_t i = 0; i < dim; ++i) dst[i] = pred.flat[i] + res[i];
        }
        fwd.push(mem.tail_tokens[j]);
    }
    return kv;
}

// ------------------------------------------------------------- ratios

RatioReport theoretical_ratio(double layers, double heads, double head_dim,
                              double depth_bits, double hbar,
                              double overhead_factor) {
    if (layers <= 0 || heads <= 0 || head_dim <= 0 || depth_bits <= 0 || hbar <= 0 ||
        overhead_factor <= 0) {
        throw std::invalid_argument("ratio inputs must be positive");
    }
    RatioReport r;
    r.bits_per_token = 2.0 * layers * heads * head_dim * depth_bits;
    r.bits_per_token_fp16 = 2.0 * layers * heads * head_dim * 16.0;
    r.ratio_vs_floor = r.bits_per_token / (hbar * overhead_factor);
    r.ratio_fp16_vs_floor = r.bits_per_token_fp16 / hbar;
    return r;
}

double round_sig(double v, int digits) {
    if (v == 0.0) return 0.0;
    const double mag = std::pow(10.0, digits - 1 - static_cast<int>(std::floor(std::log10(std::fabs(v)))));
    return std::round(v * mag) / mag;
}

std::string format_sig(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

}  // namespace seqkv
