#pragma once

// Run manifests: every output directory gets a manifest.json recording the
// subcommand, the fully resolved config, a stable hash of that config, and
// tool provenance.  Feeding a manifest back through --config reproduces
// the run bit for bit.

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "fit/errors.hpp"

#ifndef FIT_VERSION
#define FIT_VERSION "0.0.0"
#endif
#ifndef FIT_GIT_DESCRIBE
#define FIT_GIT_DESCRIBE "unknown"
#endif

namespace fit {

using json = nlohmann::json;

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// nlohmann dump() emits keys sorted, so this is a canonical form.
inline std::string config_hash(const json& config) { return hex64(fnv1a64(config.dump())); }

inline json make_manifest(const std::string& command, const json& config,
                          std::uint64_t seed) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["config_hash"] = config_hash(config);
    m["seed"] = seed;
    m["git_describe"] = FIT_GIT_DESCRIBE;
    m["versions"] = json{{"fit", FIT_VERSION}};
    return m;
}

inline void save_json(const std::string& path, const json& j, int indent = 2) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(indent) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline json load_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

}  // namespace fit
