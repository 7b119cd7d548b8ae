#include "dwimpute/nn/param_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

namespace dwimpute::nn {

template <typename T>
std::vector<float> flatten_params(const ParamList<T>& params) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(count_parameters(params)));
  for (const auto* p : params)
    for (T v : p->value.values()) out.push_back(static_cast<float>(v));
  return out;
}

template <typename T>
void unflatten_params(const std::vector<float>& blob, const ParamList<T>& params) {
  if (static_cast<std::int64_t>(blob.size()) != count_parameters(params)) {
    throw std::runtime_error("weights blob has " + std::to_string(blob.size()) + " values, model expects " +
                             std::to_string(count_parameters(params)));
  }
  std::size_t k = 0;
  for (auto* p : params)
    for (auto& v : p->value.values()) v = static_cast<T>(blob[k++]);
}

template <typename T>
nlohmann::json param_layout(const ParamList<T>& params) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto* p : params) out.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  return out;
}

void write_blob(const std::vector<float>& blob, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<std::uint32_t> words(blob.size());
  for (std::size_t i = 0; i < blob.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(blob[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw std::runtime_error("cannot write weights to " + path.string());
}

std::vector<float> read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read weights from " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  if (bytes % 4 != 0) throw std::runtime_error("weights blob size is not a multiple of 4: " + path.string());
  std::vector<std::uint32_t> words(bytes / 4);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  std::vector<float> blob(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    blob[i] = std::bit_cast<float>(w);
  }
  return blob;
}

template std::vector<float> flatten_params<float>(const ParamList<float>&);
template std::vector<float> flatten_params<double>(const ParamList<double>&);
template void unflatten_params<float>(const std::vector<float>&, const ParamList<float>&);
template void unflatten_params<double>(const std::vector<float>&, const ParamList<double>&);
template nlohmann::json param_layout<float>(const ParamList<float>&);
template nlohmann::json param_layout<double>(const ParamList<double>&);

}  // namespace dwimpute::nn
