#pragma once

#include <map>
#include <string>

namespace seqkv {

// Plain-text key=value configuration. One pair per line, '#' starts a
// comment, surrounding whitespace is ignored. The same format is used for
// config files, CLI --set overrides and the container's config echo.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap load_kv_file(const std::string& path);     // throws on I/O failure
std::string format_kv(const KvMap& kv);          // sorted, "key=value\n" lines

// "key=value" from a single CLI override token
void apply_override(KvMap& kv, const std::string& token);

}  // namespace seqkv
