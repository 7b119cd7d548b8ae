#include "dwimpute/harness/config_hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dwimpute::harness {

namespace {

void write_number(double v, std::string& out) {
  if (!std::isfinite(v)) throw std::invalid_argument("canonical_json: non-finite number");
  if (v == std::floor(v) && std::abs(v) < 9007199254740992.0) {
    out += std::to_string(static_cast<long long>(v));
    return;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void write_canonical(const nlohmann::json& j, std::string& out) {
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      out += '{';
      bool first = true;
      // nlohmann's default object type is an ordered std::map: keys are sorted.
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += nlohmann::json(it.key()).dump();
        out += ':';
        write_canonical(it.value(), out);
      }
      out += '}';
      break;
    }
    case nlohmann::json::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        write_canonical(j[i], out);
      }
      out += ']';
      break;
    }
    case nlohmann::json::value_t::number_integer:
    case nlohmann::json::value_t::number_unsigned:
      out += j.dump();
      break;
    case nlohmann::json::value_t::number_float:
      write_number(j.get<double>(), out);
      break;
    default:
      out += j.dump();
  }
}

nlohmann::json strip_excluded(const nlohmann::json& j) {
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!is_hash_excluded_key(it.key())) out[it.key()] = strip_excluded(it.value());
    }
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : j) out.push_back(strip_excluded(e));
    return out;
  }
  return j;
}

}  // namespace

std::string canonical_json(const nlohmann::json& j) {
  std::string out;
  write_canonical(j, out);
  return out;
}

std::string sha256_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

bool is_hash_excluded_key(const std::string& key) {
  return key == "output_dir" || key == "out" || key == "timestamp" || key == "created_at" || key == "started_at" ||
         key == "finished_at" || key == "seeds" || key == "base_seed" || key == "n_runs";
}

std::string config_hash(const nlohmann::json& config) { return sha256_hex(canonical_json(strip_excluded(config))); }

}  // namespace dwimpute::harness
