#pragma once

#include <string>

#include "json.hpp"

namespace dwimpute::harness {

/// Compact JSON with object keys sorted and numbers normalized: integral
/// values below 2^53 print as integers, other reals with 17 significant
/// digits, so 1, 1.0 and 1e0 agree.
std::string canonical_json(const nlohmann::json& j);

std::string sha256_hex(const std::string& data);

/// Keys dropped before hashing, at any depth: output locations, timestamps
/// and the run seeds (records are keyed by (hash, seed) instead).
bool is_hash_excluded_key(const std::string& key);

/// SHA-256 of canonical_json(config) with the excluded keys removed.
std::string config_hash(const nlohmann::json& config);

}  // namespace dwimpute::harness
