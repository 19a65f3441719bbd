#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "cof/ecg.hpp"
#include "cof/volgrid.hpp"

namespace cof {

/// Analytic beating-heart phantom. Geometry is a set of ellipsoids (LV cavity,
/// LV epicardium, RV) contracted about `center_voxel` by the isotropic affine
/// A(t) = (1 - contraction_fraction * g(t)) I, where g is a raised-cosine
/// systolic pulse peaking at `systole_peak_phase`.
struct PhantomSpec {
  Grid grid{{64, 64, 64}, {1.0, 1.0, 1.0}};
  Vec3 lv_endo_radii_mm{12.0, 12.0, 17.0};
  Vec3 lv_epi_radii_mm{17.0, 17.0, 22.0};
  Vec3 rv_offset_mm{-15.0, 0.0, 0.0};
  Vec3 rv_radii_mm{11.0, 17.0, 19.0};
  Vec3 center_voxel{31.5, 31.5, 31.5};
  double heart_rate_bpm = 60.0;
  double contraction_fraction = 0.15;
  double systole_peak_phase = 0.4;
  std::size_t frames = 20;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  std::size_t ecg_cycles = 8;
  double ecg_snr_db = std::numeric_limits<double>::infinity();

  /// Cubic grid of `dim` voxels spanning the same 64 mm field of view as the
  /// default, with the systolic peak placed from the heart rate.
  static PhantomSpec standard(int dim, double heart_rate_bpm = 60.0);
  void validate() const;
};

struct PhantomTruth {
  Volume4D volumes;
  std::vector<LabelVolume> labels;
  std::vector<DisplacementField> displacements;  // pull-back maps frame 0 -> frame k
  std::vector<double> lv_cavity_volume_ml;
  std::vector<double> contraction_scale;         // 1 - kappa * g(t_k)
  EcgRecord ecg;
  double analytic_ef = 0.0;                      // 1 - det A at the systolic peak
};

/// Raised-cosine pulse: 0 at t = 0, 1 at t = peak, back to 0 at relaxation_end(peak).
double systolic_pulse(double t, double peak);
double systolic_pulse_rate(double t, double peak);
double relaxation_end_phase(double peak);

/// End of the T wave as a fraction of R-R, from the Bazett QT relation.
double default_systole_peak_phase(double heart_rate_bpm);

PhantomTruth generate_phantom(const PhantomSpec& spec);

/// Labels of the phantom at an arbitrary contraction scale; exposed for tests.
LabelVolume render_phantom_labels(const PhantomSpec& spec, double scale);

/// Sum-of-Gaussians 12-lead ECG. `t_wave_phase` places the T-wave peak as a
/// fraction of the R-R interval; by default it precedes the Bazett systolic peak.
/// An infinite SNR disables noise.
EcgRecord generate_synthetic_ecg(double heart_rate_bpm, std::size_t n_cycles,
                                 double sample_rate_hz = kDefaultSampleRateHz,
                                 double noise_snr_db = std::numeric_limits<double>::infinity(),
                                 std::uint64_t seed = 0, std::optional<double> t_wave_phase = std::nullopt);

/// Independent deterministic stream seed for (seed, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cof
