#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace cof {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline Vec3& operator+=(Vec3& a, const Vec3& b) {
  a[0] += b[0];
  a[1] += b[1];
  a[2] += b[2];
  return a;
}
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

/// Voxel lattice geometry. Data is stored x-fastest, then y, then z.
struct Grid {
  Index3 dims{1, 1, 1};
  Vec3 spacing_mm{1.0, 1.0, 1.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t linear(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  Index3 coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }
  double voxel_volume_mm3() const { return spacing_mm[0] * spacing_mm[1] * spacing_mm[2]; }
  bool is_interior(const Index3& c) const {
    for (int a = 0; a < 3; ++a)
      if (c[a] <= 0 || c[a] >= dims[a] - 1) return false;
    return true;
  }

  void validate() const;
  bool operator==(const Grid&) const = default;
};

struct Volume3D {
  Grid grid;
  std::vector<double> data;

  static Volume3D filled(const Grid& grid, double value);

  double at(int x, int y, int z) const { return data[grid.linear(x, y, z)]; }
  double& at(int x, int y, int z) { return data[grid.linear(x, y, z)]; }
  void validate() const;
};

/// A sequence of frames on one grid; frame_times are normalized cardiac phases.
struct Volume4D {
  std::vector<Volume3D> frames;
  std::vector<double> frame_times;

  const Grid& grid() const { return frames.front().grid; }
  std::size_t frame_count() const { return frames.size(); }
  void validate() const;
};

enum LabelClass : std::uint8_t { kBackground = 0, kLV = 1, kRV = 2, kMyo = 3 };
inline constexpr int kClassCount = 4;
const char* label_class_name(int cls);

struct LabelVolume {
  Grid grid;
  std::vector<std::uint8_t> labels;

  static LabelVolume empty(const Grid& grid);
  std::uint8_t at(int x, int y, int z) const { return labels[grid.linear(x, y, z)]; }
  void validate() const;
};

/// Per-voxel displacement in voxel units; component a moves along axis a.
struct DisplacementField {
  Grid grid;
  std::vector<Vec3> vectors;

  static DisplacementField zeros(const Grid& grid);
  void validate() const;
};

/// Equally spaced normalized phases k/T, k = 0..T-1.
std::vector<double> uniform_frame_times(std::size_t frames);

/// Eight-corner trilinear weights for one continuous voxel coordinate.
/// Coordinates outside [0, dim-1] clamp to the border; the position
/// derivative of a clamped axis is zero.
struct TrilinearStencil {
  std::array<std::size_t, 8> index;
  std::array<double, 8> weight;
  std::array<Vec3, 8> dweight;  // d weight / d position, only filled on request
};

TrilinearStencil make_stencil(const Grid& grid, const Vec3& point, bool with_derivative = false);

double sample_trilinear(const Volume3D& vol, const Vec3& point);
Volume3D warp(const Volume3D& vol, const DisplacementField& disp);

/// One soft probability volume per class, obtained by warping one-hot channels.
std::vector<Volume3D> warp_labels_soft(const LabelVolume& labels, const DisplacementField& disp);

/// det(I + grad u), central differences inside and one-sided at the border.
Volume3D jacobian_determinant(const DisplacementField& disp);

/// (a o b)(x) = b(x) + a(x + b(x)).
DisplacementField compose(const DisplacementField& a, const DisplacementField& b);

void require_same_grid(const Grid& a, const Grid& b, const char* what);

}  // namespace cof
