#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cof/volgrid.hpp"

namespace cof {

/// Stationary velocity field on a coarse control lattice; control point i
/// sits on voxel i * stride. Vectors are voxels per unit pseudo-time.
struct VelocityGrid {
  Index3 control_dims{1, 1, 1};
  int stride = 4;
  std::vector<Vec3> vectors;

  static VelocityGrid zeros_for(const Index3& dims, int stride);
  std::size_t control_count() const {
    return static_cast<std::size_t>(control_dims[0]) * control_dims[1] * control_dims[2];
  }
  std::size_t linear(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * control_dims[1] + y) * control_dims[0] + x;
  }
  bool covers(const Index3& dims) const;
  void validate() const;
};

struct RegConfig {
  double lambda_rec = 1.0;
  double lambda_seg = 1.0;
  double lambda_smooth = 1.0;
  int ncc_window = 0;  // 0 selects global NCC
  int squaring_steps = 6;
  int iters = 2000;
  double lr = 0.02;
  double weight_decay = 1e-5;
  double dice_eps = 1e-5;
  int stride = 4;
  std::uint64_t seed = 0;
  // Optional early stop: after `min_iters`, stop once the mean loss over the
  // last `stop_window` iterations improves on the window before it by less
  // than `stop_rel_tol` (relative). Disabled when stop_rel_tol <= 0.
  int stop_window = 50;
  double stop_rel_tol = 0.0;
  int min_iters = 100;

  void validate() const;
};

/// Reference-to-frame-k pull-back fields; field 0 is exactly zero.
struct DeformationSet {
  std::vector<DisplacementField> fields;
  std::vector<double> frame_times;
  std::vector<VelocityGrid> velocities;  // optional, one per field when produced by registration

  const Grid& grid() const { return fields.front().grid; }
  std::size_t frame_count() const { return fields.size(); }
  void validate() const;
};

/// Trilinear upsampling of the control lattice to every voxel.
DisplacementField upsample_velocity(const VelocityGrid& v, const Grid& grid);

/// Scaling and squaring: d0 = v / 2^S, then d <- d o d, S times.
DisplacementField integrate_svf(const VelocityGrid& v, const Grid& grid, int squaring_steps);

/// 1 - Pearson (window 0) or 1 - mean local NCC^2 over w^3 windows. When
/// `grad` is non-null it receives d loss / d moving_warped.
double ncc_loss(const Volume3D& fixed, const Volume3D& moving_warped, int window, std::vector<double>* grad = nullptr);

/// Keeps the largest 26-connected component of every foreground class.
LabelVolume largest_component_filter(const LabelVolume& labels);

/// Multi-class soft Dice over foreground classes against LCC-hardened teacher
/// labels. `student` holds one channel per class (index 0 is background and
/// is ignored). When `grad` is non-null it receives d loss / d channel.
double dice_teacher_loss(const std::vector<Volume3D>& student, const LabelVolume& teacher, double eps,
                         std::vector<std::vector<double>>* grad = nullptr);

struct LossTerms {
  double total = 0.0;
  double rec = 0.0;
  double seg = 0.0;
  double smooth = 0.0;
};

/// The composite registration objective for one (source, target) pair.
class RegistrationObjective {
 public:
  RegistrationObjective(const Volume3D& source, const Volume3D& target, const LabelVolume& source_labels,
                        const LabelVolume& target_labels, const RegConfig& cfg);

  const Grid& grid() const { return grid_; }
  VelocityGrid zero_velocity() const { return VelocityGrid::zeros_for(grid_.dims, cfg_.stride); }

  /// Loss terms at `v`; fills `grad` (same shape as v) when non-null. Not
  /// safe to call concurrently on one object.
  LossTerms evaluate(const VelocityGrid& v, VelocityGrid* grad = nullptr) const;

 private:
  struct Stencil {
    std::array<std::uint32_t, 8> index;
    std::array<double, 8> weight;
  };

  // Scratch buffers reused across evaluations; one objective per thread.
  struct Workspace {
    std::vector<std::vector<Vec3>> d;
    std::vector<Vec3> grad_src, grad_soft, g_cur, g_prev;
  };
  mutable Workspace ws_;

  Grid grid_;
  RegConfig cfg_;
  const Volume3D* source_;
  const Volume3D* target_;
  LabelVolume source_labels_;
  LabelVolume teacher_;
  std::vector<Stencil> upsample_;
  Index3 control_dims_;
};

struct PairResult {
  VelocityGrid velocity;
  DisplacementField displacement;
  std::vector<double> loss_trace;
  LossTerms final_terms;
};

PairResult register_pair(const Volume3D& source, const Volume3D& target, const LabelVolume& source_labels,
                         const LabelVolume& target_labels, const RegConfig& cfg,
                         const VelocityGrid* init = nullptr);

using SequenceProgress = std::function<void(std::size_t frame, const PairResult&)>;

DeformationSet register_sequence(const Volume4D& volumes, const std::vector<LabelVolume>& labels, const RegConfig& cfg,
                                 const SequenceProgress& progress = {});

}  // namespace cof
