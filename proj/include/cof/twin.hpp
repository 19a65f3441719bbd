#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cof/flowmatch.hpp"
#include "cof/toppr.hpp"
#include "cof/volgrid.hpp"

namespace cof {

enum class OdeSolver { euler, rk4 };

const char* ode_solver_name(OdeSolver s);
OdeSolver parse_ode_solver(const std::string& name);

/// Generic velocity callback for the integrator: fills `out` with v(p, t) for every position.
using BatchVelocity = std::function<void(std::span<const Vec3> positions, double t, std::vector<Vec3>& out)>;

/// Integrates dp/dt = v(p, t) from p(0) = x at every voxel of `grid` and
/// records u_k = p(t_k) - x. Field 0 is exactly zero.
DeformationSet ode_integrate(const BatchVelocity& velocity, const Grid& grid, const std::vector<double>& frame_times,
                             OdeSolver solver = OdeSolver::rk4, int substeps = 2);

DeformationSet ode_integrate(const VelocityNet& net, const ConditionEmbedding& cond, const Grid& grid,
                             const std::vector<double>& frame_times, OdeSolver solver = OdeSolver::rk4,
                             int substeps = 2);

struct Synthesis {
  Volume4D volumes;
  std::vector<LabelVolume> labels;
};

/// Warps the reference anatomy by every field; labels are the argmax of the
/// warped one-hot channels (ties to the lower class).
Synthesis synthesize_4d(const Volume3D& reference, const LabelVolume& reference_labels, const DeformationSet& defs);

/// Hard labels from soft channels, ties to the lower class index.
LabelVolume argmax_labels(const std::vector<Volume3D>& channels);

}  // namespace cof
