#pragma once

#include <filesystem>
#include <vector>

#include "dwimpute/nn/layers.hpp"
#include "json.hpp"

namespace dwimpute::nn {

/// Flattens parameter values in registration order.
template <typename T>
std::vector<float> flatten_params(const ParamList<T>& params);

/// Inverse of flatten_params; throws if the element count differs.
template <typename T>
void unflatten_params(const std::vector<float>& blob, const ParamList<T>& params);

/// Names and shapes, stored next to a weights blob so loads can be checked.
template <typename T>
nlohmann::json param_layout(const ParamList<T>& params);

/// Raw little-endian float32 blob.
void write_blob(const std::vector<float>& blob, const std::filesystem::path& path);
std::vector<float> read_blob(const std::filesystem::path& path);

}  // namespace dwimpute::nn
