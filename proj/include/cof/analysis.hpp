#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cof/metrics.hpp"
#include "cof/volgrid.hpp"

namespace cof {

/// Voxel count times voxel volume, in millilitres.
double chamber_volume(const LabelVolume& labels, int cls);

enum class EdvAnchor {
  first_frame,  // EDV at frame 0 (the R peak), ESV at the curve minimum
  extrema,      // EDV at the curve maximum, ESV at the curve minimum
};
const char* edv_anchor_name(EdvAnchor a);
EdvAnchor parse_edv_anchor(const std::string& name);

struct FunctionalIndices {
  double edv_ml = 0.0;
  double esv_ml = 0.0;
  double sv_ml = 0.0;
  double ef = 0.0;
  double co_l_per_min = 0.0;
  double heart_rate_bpm = 0.0;
  std::size_t ed_frame = 0;
  std::size_t es_frame = 0;
  EdvAnchor anchor = EdvAnchor::first_frame;
  std::vector<double> volume_curve_ml;
};

FunctionalIndices functional_indices(const std::vector<LabelVolume>& label_seq, const std::vector<double>& frame_times,
                                     double rr_seconds, EdvAnchor anchor = EdvAnchor::first_frame);

/// Same indices from an already measured LV curve.
FunctionalIndices functional_indices_from_curve(const std::vector<double>& volume_curve_ml, double rr_seconds,
                                                EdvAnchor anchor = EdvAnchor::first_frame);

/// Pearson over the volume curves; nullopt when either curve is constant.
std::optional<double> curve_correlation(const FunctionalIndices& real, const FunctionalIndices& gen);

inline constexpr std::array<int, 3> kForegroundClasses{kLV, kRV, kMyo};
inline constexpr double kSliceAreaFraction = 0.25;

/// Per-rank means; index [phase][class] with phase 0 = ED, 1 = ES and class
/// order LV, RV, Myo. HD95 means skip missing (empty-mask) slices and are
/// NaN when every slice was missing.
struct SliceRankStats {
  int rank = 0;
  std::size_t subjects = 0;
  std::array<std::array<double, 3>, 2> dice{};
  std::array<std::array<double, 3>, 2> iou{};
  std::array<std::array<double, 3>, 2> hd95{};
  std::array<std::array<std::size_t, 3>, 2> hd95_count{};
};

struct SliceProfile {
  std::vector<int> slice_z;  // z index of each retained rank (single-subject profiles)
  std::vector<SliceRankStats> ranks;
};

/// Myocardium area per z-slice of the truth ED labels; slices below 25% of
/// the peak are dropped and the rest ranked basal (lowest z) to apical.
std::vector<int> retained_slices(const LabelVolume& truth_ed);

SliceProfile slice_profile(const std::vector<LabelVolume>& pred_seq, const std::vector<LabelVolume>& truth_seq,
                           std::size_t ed_frame, std::size_t es_frame);

/// Mean per rank over subjects that have that rank.
SliceProfile aggregate_slice_profiles(std::span<const SliceProfile> profiles);

enum SweepMetric { kSweepDice = 0, kSweepIou = 1, kSweepHd95 = 2 };
inline constexpr int kSweepMetricCount = 3;
using MetricTable = std::array<std::array<double, 3>, kSweepMetricCount>;  // [metric][class LV, RV, Myo]

struct SweepCase {
  std::vector<LabelVolume> pred;
  std::vector<LabelVolume> truth;
};

struct SweepCaseScore {
  double spacing_x = 0.0;
  std::size_t bin = 0;
  MetricTable value{};  // time averages; HD95 NaN when undefined in every frame
};

struct SweepBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  MetricTable mean{};  // NaN for empty bins
  MetricTable stddev{};  // population standard deviation
};

struct ResolutionSweep {
  std::vector<SweepCaseScore> cases;
  std::vector<SweepBin> bins;
  std::optional<MetricTable> slope;  // per unit s_x; absent with < 2 distinct spacings
};

/// Uniform bin index of `x` over [lo, hi], last bin right-closed.
std::size_t uniform_bin(double x, double lo, double hi, std::size_t n_bins);

/// Least-squares slope of y on x; nullopt when x has no spread.
std::optional<double> linear_slope(std::span<const double> x, std::span<const double> y);

ResolutionSweep resolution_sweep(std::span<const SweepCase> cases, int n_bins);

struct BootstrapResult {
  double r_point = 0.0;
  std::vector<double> replicates;  // NaN marks a replicate that stayed degenerate
  std::size_t missing = 0;
  double replicate_mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

BootstrapResult bootstrap_correlation(std::span<const double> real, std::span<const double> gen,
                                      int replicates = 1000, std::uint64_t seed = 0);

/// Spearman rank correlation with average ranks for ties.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

struct AgreementStats {
  std::size_t n = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> pearson;
  std::optional<double> spearman;
};

AgreementStats agreement(std::span<const double> real, std::span<const double> gen);

}  // namespace cof
