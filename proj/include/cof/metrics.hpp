#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cof/toppr.hpp"
#include "cof/volgrid.hpp"

namespace cof {

inline constexpr double kPsnrCapDb = 99.0;

/// Mean SSIM over every fully contained w^3 window (population statistics,
/// K1 = 0.01, K2 = 0.03). The dynamic range is max(a) - min(a); a constant
/// reference falls back to a range of 1.
double ssim(const Volume3D& a, const Volume3D& b, int window = 7);

/// 10 log10(peak^2 / MSE), capped at kPsnrCapDb. Peak defaults to max(a).
double psnr(const Volume3D& a, const Volume3D& b, std::optional<double> peak = std::nullopt);

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
};

/// Hard-label overlap of class `cls`; both empty gives (1, 1), one empty (0, 0).
Overlap dice_iou(const LabelVolume& pred, const LabelVolume& truth, int cls);

enum class SurfaceMode { surface2d, surface3d };

/// Nonzero voxels of `labels` equal to `cls` become 1.
LabelVolume class_mask(const LabelVolume& labels, int cls);

/// One z-slice as a single-slice volume (in-plane spacing kept).
LabelVolume extract_slice(const LabelVolume& labels, int z);

/// Symmetric 95th percentile surface distance in mm between the nonzero
/// voxels of two masks. Boundary voxels have a face neighbour that is
/// background or outside the volume (in-plane neighbours only for 2D, which
/// requires single-slice masks). Percentile over the pooled directed
/// distances with linear interpolation. Empty masks throw undefined_distance.
double hd95(const LabelVolume& pred, const LabelVolume& truth, SurfaceMode mode);

/// Directed distances (mm) from every boundary voxel of `from` to the nearest
/// boundary voxel of `to`, in linear-index order of `from`.
std::vector<double> directed_surface_distances(const LabelVolume& from, const LabelVolume& to, SurfaceMode mode);

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// Pearson correlation; nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

struct MotionMetrics {
  double m_corr = 0.0;
  double m_ssim = 0.0;
};

/// Correlation and mean SSIM of consecutive frame differences.
MotionMetrics motion_metrics(const Volume4D& real, const Volume4D& gen, int window = 7);

/// Fraction of interior voxels with positive Jacobian determinant, per field.
std::vector<double> topology_report(const DeformationSet& defs);

}  // namespace cof
