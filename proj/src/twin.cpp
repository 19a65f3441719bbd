#include "cof/twin.hpp"

#include <cmath>

#include "cof/error.hpp"

namespace cof {

const char* ode_solver_name(OdeSolver s) { return s == OdeSolver::euler ? "euler" : "rk4"; }

OdeSolver parse_ode_solver(const std::string& name) {
  if (name == "euler") return OdeSolver::euler;
  if (name == "rk4") return OdeSolver::rk4;
  fail(ErrorCode::invalid_argument, "unknown ODE solver '" + name + "' (expected euler or rk4)");
}

DeformationSet ode_integrate(const BatchVelocity& velocity, const Grid& grid, const std::vector<double>& frame_times,
                             OdeSolver solver, int substeps) {
  grid.validate();
  require(substeps >= 1, ErrorCode::invalid_argument, "substeps must be >= 1");
  require(frame_times.size() >= 2, ErrorCode::insufficient_frames, "need at least 2 frame times");
  require(frame_times[0] == 0.0, ErrorCode::invalid_argument, "frame_times must start at 0");
  for (std::size_t k = 0; k < frame_times.size(); ++k) {
    require(std::isfinite(frame_times[k]) && frame_times[k] < 1.0, ErrorCode::invalid_argument,
            "frame_times must lie in [0, 1)");
    if (k) require(frame_times[k] > frame_times[k - 1], ErrorCode::invalid_argument, "frame_times must increase");
  }

  const std::size_t n = grid.voxel_count();
  std::vector<Vec3> origin(n), p(n), tmp(n), k1, k2, k3, k4;
  for (std::size_t i = 0; i < n; ++i) {
    const Index3 c = grid.coords(i);
    origin[i] = {double(c[0]), double(c[1]), double(c[2])};
  }
  p = origin;

  DeformationSet out;
  out.frame_times = frame_times;
  out.fields.push_back(DisplacementField::zeros(grid));

  auto check = [&](const std::vector<Vec3>& v, double t) {
    for (std::size_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a)
        if (!std::isfinite(v[i][a])) {
          const Index3 c = grid.coords(i);
          fail(ErrorCode::integration_blowup, "non-finite trajectory at voxel (" + std::to_string(c[0]) + ", " +
                                                   std::to_string(c[1]) + ", " + std::to_string(c[2]) +
                                                   ") at t = " + std::to_string(t));
        }
  };

  for (std::size_t k = 1; k < frame_times.size(); ++k) {
    const double h = (frame_times[k] - frame_times[k - 1]) / substeps;
    for (int s = 0; s < substeps; ++s) {
      const double t = frame_times[k - 1] + s * h;
      velocity(p, t, k1);
      if (solver == OdeSolver::euler) {
        for (std::size_t i = 0; i < n; ++i) p[i] += h * k1[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = p[i] + 0.5 * h * k1[i];
        velocity(tmp, t + 0.5 * h, k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = p[i] + 0.5 * h * k2[i];
        velocity(tmp, t + 0.5 * h, k3);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = p[i] + h * k3[i];
        velocity(tmp, t + h, k4);
        for (std::size_t i = 0; i < n; ++i) p[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      }
      check(p, t + h);
    }
    DisplacementField f = DisplacementField::zeros(grid);
    for (std::size_t i = 0; i < n; ++i) f.vectors[i] = p[i] - origin[i];
    out.fields.push_back(std::move(f));
  }
  return out;
}

DeformationSet ode_integrate(const VelocityNet& net, const ConditionEmbedding& cond, const Grid& grid,
                             const std::vector<double>& frame_times, OdeSolver solver, int substeps) {
  const BatchVelocity v = [&](std::span<const Vec3> pos, double t, std::vector<Vec3>& out) {
    out = velocity_forward_batch(net, pos, t, cond);
  };
  return ode_integrate(v, grid, frame_times, solver, substeps);
}

LabelVolume argmax_labels(const std::vector<Volume3D>& channels) {
  require(channels.size() == static_cast<std::size_t>(kClassCount), ErrorCode::shape, "expected one channel per class");
  LabelVolume out = LabelVolume::empty(channels[0].grid);
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    int best = 0;
    for (int c = 1; c < kClassCount; ++c)
      if (channels[c].data[i] > channels[best].data[i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Synthesis synthesize_4d(const Volume3D& reference, const LabelVolume& reference_labels, const DeformationSet& defs) {
  reference.validate();
  defs.validate();
  require_same_grid(reference.grid, reference_labels.grid, "synthesize_4d labels");
  require_same_grid(reference.grid, defs.grid(), "synthesize_4d deformations");
  Synthesis out;
  out.volumes.frame_times = defs.frame_times;
  for (std::size_t k = 0; k < defs.frame_count(); ++k) {
    if (k == 0) {
      out.volumes.frames.push_back(reference);
      out.labels.push_back(reference_labels);
      continue;
    }
    out.volumes.frames.push_back(warp(reference, defs.fields[k]));
    out.labels.push_back(argmax_labels(warp_labels_soft(reference_labels, defs.fields[k])));
  }
  return out;
}

}  // namespace cof
