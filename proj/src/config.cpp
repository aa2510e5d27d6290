#include "seqkv/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace seqkv {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
    KvMap out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key=value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": empty key");
        }
        out[key] = val;
    }
    return out;
}

KvMap load_kv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_kv_text(buf.str());
}

std::string format_kv(const KvMap& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void apply_override(KvMap& kv, const std::string& token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw std::runtime_error("override must be key=value, got '" + token + "'");
    }
    kv[trim(token.substr(0, eq))] = trim(token.substr(eq + 1));
}

}  // namespace seqkv
