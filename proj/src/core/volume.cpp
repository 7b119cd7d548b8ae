#include "dwimpute/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dwimpute {

namespace {

void check_invariants(const Dims& dims, const Spacing& spacing, std::span<const float> voxels,
                      RangeTag tag) {
  if (!dims.positive()) throw std::invalid_argument("Volume3D: dims must be positive, got " + to_string(dims));
  if (!spacing.positive()) throw std::invalid_argument("Volume3D: spacing must be positive");
  if (voxels.size() != dims.count()) {
    throw std::invalid_argument("Volume3D: voxel count " + std::to_string(voxels.size()) +
                                " does not match dims " + to_string(dims));
  }
  if (tag == RangeTag::unit) {
    for (float v : voxels) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw std::invalid_argument("Volume3D: unit-tagged volume has value outside [0, 1]");
      }
    }
  }
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

}  // namespace

std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

std::string to_string(RangeTag tag) { return tag == RangeTag::unit ? "unit" : "raw"; }

RangeTag range_tag_from_string(const std::string& s) {
  if (s == "unit") return RangeTag::unit;
  if (s == "raw") return RangeTag::raw;
  throw std::invalid_argument("unknown range_tag '" + s + "'");
}

Volume3D::Volume3D(Dims dims, Spacing spacing, RangeTag tag)
    : dims_(dims), spacing_(spacing), voxels_(dims.positive() ? dims.count() : 0, 0.0f), tag_(tag) {
  check_invariants(dims_, spacing_, voxels_, tag_);
}

Volume3D::Volume3D(Dims dims, Spacing spacing, std::vector<float> voxels, RangeTag tag)
    : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)), tag_(tag) {
  check_invariants(dims_, spacing_, voxels_, tag_);
}

void Volume3D::set_range_tag(RangeTag tag) {
  check_invariants(dims_, spacing_, voxels_, tag);
  tag_ = tag;
}

Volume3D minmax_normalize(const Volume3D& v) {
  auto in = v.voxels();
  std::vector<float> out(in.size(), 0.0f);
  if (!in.empty()) {
    const auto [lo_it, hi_it] = std::minmax_element(in.begin(), in.end());
    const double lo = *lo_it;
    const double range = static_cast<double>(*hi_it) - lo;
    if (range > 0.0) {
      for (std::size_t i = 0; i < in.size(); ++i) {
        // Clamp guards the float rounding of the (v - min) / range quotient.
        out[i] = std::clamp(static_cast<float>((in[i] - lo) / range), 0.0f, 1.0f);
      }
    }
  }
  return Volume3D(v.dims(), v.spacing(), std::move(out), RangeTag::unit);
}

void write_volume(const Volume3D& v, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());

  std::ofstream payload(path, std::ios::binary | std::ios::trunc);
  if (!payload) throw VolumeIoError(VolumeIoErrc::io_failure, "cannot open " + path.string() + " for writing");
  std::vector<std::uint32_t> words(v.size());
  auto vox = v.voxels();
  for (std::size_t i = 0; i < vox.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(vox[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  payload.write(reinterpret_cast<const char*>(words.data()),
                static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!payload) throw VolumeIoError(VolumeIoErrc::io_failure, "short write to " + path.string());

  nlohmann::json header = {
      {"dims", {v.dims().nx, v.dims().ny, v.dims().nz}},
      {"spacing_mm", {v.spacing().sx, v.spacing().sy, v.spacing().sz}},
      {"range_tag", to_string(v.range_tag())},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"order", "row-major, z fastest"},
      {"schema_version", kVolumeSchemaVersion},
  };
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw VolumeIoError(VolumeIoErrc::io_failure, "cannot write sidecar for " + path.string());
  side << header.dump(2) << '\n';
}

Volume3D read_volume(const std::filesystem::path& path) {
  const auto side_path = sidecar_path(path);
  if (!std::filesystem::exists(path) || !std::filesystem::exists(side_path)) {
    throw VolumeIoError(VolumeIoErrc::missing_file, "missing volume file or sidecar: " + path.string());
  }

  Dims dims;
  Spacing spacing;
  RangeTag tag;
  try {
    std::ifstream side(side_path);
    const auto header = nlohmann::json::parse(side);
    const auto& d = header.at("dims");
    const auto& s = header.at("spacing_mm");
    dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    tag = range_tag_from_string(header.at("range_tag").get<std::string>());
    if (header.contains("dtype") && header["dtype"] != "float32") {
      throw std::invalid_argument("unsupported dtype");
    }
  } catch (const std::exception& e) {
    throw VolumeIoError(VolumeIoErrc::malformed_header,
                        "malformed sidecar " + side_path.string() + ": " + e.what());
  }
  if (!dims.positive()) {
    throw VolumeIoError(VolumeIoErrc::invalid_dims, "nonpositive dims " + to_string(dims) + " in " +
                                                        side_path.string());
  }

  const auto bytes = std::filesystem::file_size(path);
  if (bytes != dims.count() * sizeof(float)) {
    throw VolumeIoError(VolumeIoErrc::size_mismatch,
                        "payload " + path.string() + " has " + std::to_string(bytes) +
                            " bytes, header declares " + std::to_string(dims.count()) + " voxels");
  }

  std::vector<std::uint32_t> words(dims.count());
  std::ifstream payload(path, std::ios::binary);
  payload.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!payload) throw VolumeIoError(VolumeIoErrc::io_failure, "short read from " + path.string());

  std::vector<float> voxels(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    voxels[i] = std::bit_cast<float>(w);
  }
  try {
    return Volume3D(dims, spacing, std::move(voxels), tag);
  } catch (const std::invalid_argument& e) {
    throw VolumeIoError(VolumeIoErrc::malformed_header, std::string("invalid volume: ") + e.what());
  }
}

}  // namespace dwimpute
