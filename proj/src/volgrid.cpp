#include "cof/volgrid.hpp"

#include <cmath>
#include <string>

#include "cof/error.hpp"

namespace cof {

namespace {

std::string dims_string(const Index3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

struct AxisWeights {
  int i0;
  int i1;
  double frac;
  bool active;
};

AxisWeights axis_weights(double p, int n) {
  if (n == 1) return {0, 0, 0.0, false};
  if (!(p >= 0.0)) return {0, 1, 0.0, false};
  if (p >= n - 1) return {n - 2, n - 1, 1.0, false};
  const int i0 = static_cast<int>(p);  // p >= 0, so truncation is floor
  return {i0, i0 + 1, p - i0, true};
}

}  // namespace

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape: return "shape";
    case ErrorCode::domain: return "domain";
    case ErrorCode::format: return "format";
    case ErrorCode::io: return "io";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::insufficient_signal: return "insufficient_signal";
    case ErrorCode::insufficient_frames: return "insufficient_frames";
    case ErrorCode::insufficient_data: return "insufficient_data";
    case ErrorCode::degenerate_input: return "degenerate_input";
    case ErrorCode::degenerate_anatomy: return "degenerate_anatomy";
    case ErrorCode::integration_blowup: return "integration_blowup";
    case ErrorCode::undefined_distance: return "undefined_distance";
    case ErrorCode::manifest: return "manifest";
  }
  return "unknown";
}

const char* label_class_name(int cls) {
  switch (cls) {
    case kBackground: return "background";
    case kLV: return "LV";
    case kRV: return "RV";
    case kMyo: return "Myo";
    default: return "unknown";
  }
}

void Grid::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, ErrorCode::shape, "grid dims must be >= 1, got " + dims_string(dims));
    require(std::isfinite(spacing_mm[a]) && spacing_mm[a] > 0.0, ErrorCode::invalid_argument,
            "grid spacing must be positive and finite");
  }
}

void require_same_grid(const Grid& a, const Grid& b, const char* what) {
  require(a.dims == b.dims, ErrorCode::shape,
          std::string(what) + ": dims mismatch " + dims_string(a.dims) + " vs " + dims_string(b.dims));
}

Volume3D Volume3D::filled(const Grid& grid, double value) {
  grid.validate();
  return {grid, std::vector<double>(grid.voxel_count(), value)};
}

void Volume3D::validate() const {
  grid.validate();
  require(data.size() == grid.voxel_count(), ErrorCode::shape, "volume data length does not match dims");
  for (double v : data) require(std::isfinite(v), ErrorCode::invalid_argument, "volume contains non-finite values");
}

void Volume4D::validate() const {
  require(frames.size() >= 2, ErrorCode::insufficient_frames, "a 4D volume needs at least 2 frames");
  require(frame_times.size() == frames.size(), ErrorCode::shape, "frame_times length does not match frame count");
  for (const auto& f : frames) {
    f.validate();
    require_same_grid(frames.front().grid, f.grid, "Volume4D frame");
    require(f.grid.spacing_mm == frames.front().grid.spacing_mm, ErrorCode::shape, "Volume4D frames differ in spacing");
  }
  require(frame_times.front() == 0.0, ErrorCode::invalid_argument, "frame 0 must be at time 0");
  for (std::size_t k = 1; k < frame_times.size(); ++k)
    require(frame_times[k] > frame_times[k - 1], ErrorCode::invalid_argument, "frame_times must be strictly increasing");
  require(frame_times.back() < 1.0, ErrorCode::invalid_argument, "frame_times must lie in [0, 1)");
}

LabelVolume LabelVolume::empty(const Grid& grid) {
  grid.validate();
  return {grid, std::vector<std::uint8_t>(grid.voxel_count(), kBackground)};
}

void LabelVolume::validate() const {
  grid.validate();
  require(labels.size() == grid.voxel_count(), ErrorCode::shape, "label data length does not match dims");
  for (auto l : labels)
    require(l < kClassCount, ErrorCode::invalid_argument, "label " + std::to_string(int(l)) + " outside class map");
}

DisplacementField DisplacementField::zeros(const Grid& grid) {
  grid.validate();
  return {grid, std::vector<Vec3>(grid.voxel_count(), Vec3{0.0, 0.0, 0.0})};
}

void DisplacementField::validate() const {
  grid.validate();
  require(vectors.size() == grid.voxel_count(), ErrorCode::shape, "displacement length does not match dims");
  for (const auto& v : vectors)
    for (double c : v) require(std::isfinite(c), ErrorCode::invalid_argument, "displacement contains non-finite values");
}

std::vector<double> uniform_frame_times(std::size_t frames) {
  std::vector<double> t(frames);
  for (std::size_t k = 0; k < frames; ++k) t[k] = static_cast<double>(k) / static_cast<double>(frames);
  return t;
}

TrilinearStencil make_stencil(const Grid& grid, const Vec3& point, bool with_derivative) {
  const AxisWeights ax = axis_weights(point[0], grid.dims[0]);
  const AxisWeights ay = axis_weights(point[1], grid.dims[1]);
  const AxisWeights az = axis_weights(point[2], grid.dims[2]);
  const double wx[2] = {1.0 - ax.frac, ax.frac};
  const double wy[2] = {1.0 - ay.frac, ay.frac};
  const double wz[2] = {1.0 - az.frac, az.frac};
  const std::size_t nx = static_cast<std::size_t>(grid.dims[0]);
  const std::size_t nxy = nx * static_cast<std::size_t>(grid.dims[1]);
  const std::size_t base = static_cast<std::size_t>(ax.i0) + static_cast<std::size_t>(ay.i0) * nx +
                           static_cast<std::size_t>(az.i0) * nxy;
  const std::size_t off[3] = {static_cast<std::size_t>(ax.i1 - ax.i0), static_cast<std::size_t>(ay.i1 - ay.i0) * nx,
                              static_cast<std::size_t>(az.i1 - az.i0) * nxy};

  TrilinearStencil s;
  for (int c = 0; c < 8; ++c) {
    const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
    s.index[c] = base + (bx ? off[0] : 0) + (by ? off[1] : 0) + (bz ? off[2] : 0);
    s.weight[c] = wx[bx] * wy[by] * wz[bz];
  }
  if (with_derivative) {
    const double sx = ax.active ? 1.0 : 0.0;
    const double sy = ay.active ? 1.0 : 0.0;
    const double sz = az.active ? 1.0 : 0.0;
    for (int c = 0; c < 8; ++c) {
      const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
      s.dweight[c] = {sx * (bx ? 1.0 : -1.0) * wy[by] * wz[bz], sy * (by ? 1.0 : -1.0) * wx[bx] * wz[bz],
                      sz * (bz ? 1.0 : -1.0) * wx[bx] * wy[by]};
    }
  }
  return s;
}

double sample_trilinear(const Volume3D& vol, const Vec3& point) {
  for (double c : point)
    require(std::isfinite(c), ErrorCode::invalid_argument, "sample_trilinear: non-finite sample point");
  const TrilinearStencil s = make_stencil(vol.grid, point);
  double v = 0.0;
  for (int c = 0; c < 8; ++c) v += s.weight[c] * vol.data[s.index[c]];
  return v;
}

Volume3D warp(const Volume3D& vol, const DisplacementField& disp) {
  require_same_grid(vol.grid, disp.grid, "warp");
  Volume3D out{vol.grid, std::vector<double>(vol.data.size())};
  const Grid& g = vol.grid;
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const Vec3& u = disp.vectors[i];
        if (u[0] == 0.0 && u[1] == 0.0 && u[2] == 0.0) {
          out.data[i] = vol.data[i];
          continue;
        }
        out.data[i] = sample_trilinear(vol, {x + u[0], y + u[1], z + u[2]});
      }
  return out;
}

std::vector<Volume3D> warp_labels_soft(const LabelVolume& labels, const DisplacementField& disp) {
  require_same_grid(labels.grid, disp.grid, "warp_labels_soft");
  const Grid& g = labels.grid;
  std::vector<Volume3D> channels(kClassCount, Volume3D::filled(g, 0.0));
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const Vec3& u = disp.vectors[i];
        const TrilinearStencil s = make_stencil(g, {x + u[0], y + u[1], z + u[2]});
        for (int c = 0; c < 8; ++c) channels[labels.labels[s.index[c]]].data[i] += s.weight[c];
      }
  return channels;
}

Volume3D jacobian_determinant(const DisplacementField& disp) {
  const Grid& g = disp.grid;
  for (int a = 0; a < 3; ++a)
    require(g.dims[a] >= 2, ErrorCode::shape, "jacobian_determinant needs at least 2 voxels along every axis");
  Volume3D out = Volume3D::filled(g, 0.0);
  auto at = [&](int x, int y, int z) -> const Vec3& { return disp.vectors[g.linear(x, y, z)]; };
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const Index3 c{x, y, z};
        double j[3][3];
        for (int a = 0; a < 3; ++a) {
          Index3 lo = c, hi = c;
          double h = 2.0;
          if (c[a] == 0) {
            hi[a] += 1;
            h = 1.0;
          } else if (c[a] == g.dims[a] - 1) {
            lo[a] -= 1;
            h = 1.0;
          } else {
            lo[a] -= 1;
            hi[a] += 1;
          }
          const Vec3& uh = at(hi[0], hi[1], hi[2]);
          const Vec3& ul = at(lo[0], lo[1], lo[2]);
          for (int r = 0; r < 3; ++r) j[r][a] = (uh[r] - ul[r]) / h + (r == a ? 1.0 : 0.0);
        }
        out.at(x, y, z) = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                          j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                          j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
      }
  return out;
}

DisplacementField compose(const DisplacementField& a, const DisplacementField& b) {
  require_same_grid(a.grid, b.grid, "compose");
  const Grid& g = a.grid;
  DisplacementField out{g, std::vector<Vec3>(g.voxel_count())};
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const Vec3& bv = b.vectors[i];
        const TrilinearStencil s = make_stencil(g, {x + bv[0], y + bv[1], z + bv[2]});
        Vec3 sampled{0.0, 0.0, 0.0};
        for (int c = 0; c < 8; ++c) sampled += s.weight[c] * a.vectors[s.index[c]];
        out.vectors[i] = bv + sampled;
      }
  return out;
}

}  // namespace cof
