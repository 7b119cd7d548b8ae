#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwimpute {

/// Voxel grid extent. Storage order is row-major with z varying fastest:
/// index(x, y, z) = (x * ny + y) * nz + z.
struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;

  bool positive() const { return sx > 0 && sy > 0 && sz > 0; }
  bool operator==(const Spacing&) const = default;
};

enum class RangeTag { raw, unit };

std::string to_string(RangeTag tag);
RangeTag range_tag_from_string(const std::string& s);

/// A 3D scalar field. The unit of all imaging I/O.
class Volume3D {
 public:
  Volume3D() = default;

  /// Zero-filled volume.
  Volume3D(Dims dims, Spacing spacing, RangeTag tag);

  /// Takes ownership of `voxels`; throws std::invalid_argument if any type
  /// invariant is violated.
  Volume3D(Dims dims, Spacing spacing, std::vector<float> voxels, RangeTag tag);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  RangeTag range_tag() const { return tag_; }
  std::size_t size() const { return voxels_.size(); }

  std::span<const float> voxels() const { return voxels_; }
  std::span<float> voxels() { return voxels_; }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * dims_.ny + y) * dims_.nz + z;
  }
  float at(int x, int y, int z) const { return voxels_[index(x, y, z)]; }
  float& at(int x, int y, int z) { return voxels_[index(x, y, z)]; }

  /// Re-tags the volume; checks the [0, 1] invariant when tagging as unit.
  void set_range_tag(RangeTag tag);

  bool operator==(const Volume3D&) const = default;

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<float> voxels_;
  RangeTag tag_ = RangeTag::raw;
};

/// Per-volume min-max scaling to [0, 1]. A constant volume maps to zeros.
Volume3D minmax_normalize(const Volume3D& v);

enum class VolumeIoErrc {
  missing_file,
  size_mismatch,
  invalid_dims,
  malformed_header,
  io_failure,
};

class VolumeIoError : public std::runtime_error {
 public:
  VolumeIoError(VolumeIoErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  VolumeIoErrc code() const { return code_; }

 private:
  VolumeIoErrc code_;
};

inline constexpr int kVolumeSchemaVersion = 1;

/// Writes `<path>` (little-endian float32 payload) and `<path>.json` sidecar.
void write_volume(const Volume3D& v, const std::filesystem::path& path);
Volume3D read_volume(const std::filesystem::path& path);

}  // namespace dwimpute
