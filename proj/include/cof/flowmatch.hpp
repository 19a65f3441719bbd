#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cof/toppr.hpp"
#include "cof/volgrid.hpp"

namespace cof {

inline constexpr int kReaCells = 8;  // c_rea pools an 8x8x8 partition of the volume
inline constexpr std::size_t kReaFeatureLength = 2 * kReaCells * kReaCells * kReaCells;

/// Subject conditioning: ECG waveform features and reference-anatomy features.
struct ConditionEmbedding {
  std::vector<double> c_ecg;
  std::vector<double> c_rea;
};

/// Mean then standard deviation of intensities over an 8x8x8 partition of the
/// volume (empty cells contribute zeros).
std::vector<double> rea_features(const Volume3D& reference);

struct VelocityNetConfig {
  std::size_t ecg_features = 12 * 64 + 1;
  std::size_t rea_features = kReaFeatureLength;
  int time_dim = 32;  // even; sin/cos pairs of harmonics 1..time_dim/2
  int rea_dim = 16;
  int width = 128;
  int hidden_layers = 3;
  Index3 domain_dims{64, 64, 64};  // positions normalize by this volume's half-extent
  std::uint64_t seed = 0;
  bool zero_head = false;

  void validate() const;
};

/// Coordinate network v(x, t, c) -> R^3 in voxels per unit time. Projected
/// c_ecg is added to a periodic time embedding that joins the normalized
/// position at the input; projected c_rea is concatenated to the first hidden
/// activation. Hidden layers use tanh.
class VelocityNet {
 public:
  VelocityNet() = default;
  explicit VelocityNet(const VelocityNetConfig& cfg);

  const VelocityNetConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  /// Output multiplier fixed before training from the reference speed scale.
  double velocity_scale() const { return velocity_scale_; }
  void set_velocity_scale(double s) { velocity_scale_ = s; }

  Vec3 normalize_position(const Vec3& voxel) const;

  struct Block {
    std::string name;
    int rows;
    int cols;
    std::size_t offset;
  };
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  friend class VelocityNetEvaluator;
  VelocityNetConfig cfg_;
  std::vector<Block> blocks_;
  std::vector<double> params_;
  double velocity_scale_ = 1.0;
};

/// Single query; `x` already normalized to [-1, 1]^3.
Vec3 velocity_forward(const VelocityNet& net, const Vec3& x, double t, const ConditionEmbedding& cond);

/// Batched evaluation at voxel positions (normalized internally).
std::vector<Vec3> velocity_forward_batch(const VelocityNet& net, std::span<const Vec3> voxel_positions, double t,
                                         const ConditionEmbedding& cond);

struct FlowSample {
  Vec3 position;  // voxel coordinates
  double t = 0.0;
  Vec3 velocity;  // v*, voxels per unit time
  std::size_t subject = 0;
};

/// Reference trajectories p_k = x + u_k(x) from seed voxels and their
/// periodic central-difference velocities.
struct ReferenceFlow {
  Index3 dims{1, 1, 1};
  std::vector<double> frame_times;
  std::vector<Vec3> positions;   // trajectory-major: [trajectory * T + k]
  std::vector<Vec3> velocities;  // same layout
  std::size_t subject = 0;

  std::size_t frames() const { return frame_times.size(); }
  std::size_t trajectory_count() const { return frames() ? positions.size() / frames() : 0; }
  std::size_t sample_count() const { return positions.size(); }
  FlowSample sample(std::size_t index) const;  // (trajectory, frame) sample, index = trajectory * T + k
  /// Continuous-time sample on one trajectory by linear interpolation between frames.
  FlowSample interpolate(std::size_t trajectory, double t) const;
};

/// Seeds every voxel, or only voxels within `mask_dilation` (Chebyshev) of a
/// foreground label when a mask is given.
ReferenceFlow derive_reference_velocities(const DeformationSet& defs, const LabelVolume* sample_mask = nullptr,
                                          int mask_dilation = 2);

/// Mean squared Euclidean error; conds are indexed by FlowSample::subject.
/// When `grad` is non-null it is resized to parameter_count() and filled.
double flow_matching_loss(const VelocityNet& net, std::span<const FlowSample> batch,
                          std::span<const ConditionEmbedding> conds, std::vector<double>* grad = nullptr);
double flow_matching_loss(const VelocityNet& net, std::span<const FlowSample> batch, const ConditionEmbedding& cond,
                          std::vector<double>* grad = nullptr);

struct FlowTrainConfig {
  int iters = 2000;
  int batch = 32;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  bool cosine_decay = true;  // lr * (1 + cos(pi * it / iters)) / 2
  std::uint64_t seed = 0;

  void validate() const;
};

struct FlowTrainResult {
  VelocityNet net;
  std::vector<double> loss_trace;
};

/// RMS reference speed per component over all subjects; used as the output scale.
double reference_velocity_scale(std::span<const ReferenceFlow> refs);

FlowTrainResult train_flow(VelocityNet net, std::span<const ReferenceFlow> refs,
                           std::span<const ConditionEmbedding> conds, const FlowTrainConfig& cfg);

}  // namespace cof
