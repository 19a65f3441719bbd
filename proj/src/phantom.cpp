#include "cof/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cof/error.hpp"

namespace cof {

namespace {

struct Ellipsoid {
  Vec3 center;  // voxel coordinates
  Vec3 radii;   // voxels
  bool contains(const Vec3& p) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / radii[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

struct Anatomy {
  Ellipsoid lv_endo, lv_epi, rv;

  explicit Anatomy(const PhantomSpec& spec) {
    Vec3 endo, epi, rv_r, rv_c;
    for (int a = 0; a < 3; ++a) {
      const double s = spec.grid.spacing_mm[a];
      endo[a] = spec.lv_endo_radii_mm[a] / s;
      epi[a] = spec.lv_epi_radii_mm[a] / s;
      rv_r[a] = spec.rv_radii_mm[a] / s;
      rv_c[a] = spec.center_voxel[a] + spec.rv_offset_mm[a] / s;
    }
    lv_endo = {spec.center_voxel, endo};
    lv_epi = {spec.center_voxel, epi};
    rv = {rv_c, rv_r};
  }

  std::uint8_t classify(const Vec3& p) const {
    if (lv_endo.contains(p)) return kLV;
    if (lv_epi.contains(p)) return kMyo;
    if (rv.contains(p)) return kRV;
    return kBackground;
  }
};

double intensity_of(std::uint8_t label) {
  switch (label) {
    case kLV:
    case kRV: return 1.0;
    case kMyo: return 0.6;
    default: return 0.1;
  }
}

// Reference-frame point that lands on `y` after contraction by `scale`.
Vec3 pull_back(const Vec3& y, const Vec3& c, double scale) {
  return {c[0] + (y[0] - c[0]) / scale, c[1] + (y[1] - c[1]) / scale, c[2] + (y[2] - c[2]) / scale};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Wavelet {
  double offset_s;  // relative to the R peak
  double amplitude;
  double width_s;
};

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

double relaxation_end_phase(double peak) { return peak + std::min(peak, 0.95 * (1.0 - peak)); }

double systolic_pulse(double t, double peak) {
  const double end = relaxation_end_phase(peak);
  if (t <= 0.0 || t >= end) return 0.0;
  if (t <= peak) return 0.5 * (1.0 - std::cos(std::numbers::pi * t / peak));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (t - peak) / (end - peak)));
}

double systolic_pulse_rate(double t, double peak) {
  const double end = relaxation_end_phase(peak);
  if (t <= 0.0 || t >= end) return 0.0;
  if (t <= peak) return 0.5 * std::numbers::pi / peak * std::sin(std::numbers::pi * t / peak);
  return -0.5 * std::numbers::pi / (end - peak) * std::sin(std::numbers::pi * (t - peak) / (end - peak));
}

double default_systole_peak_phase(double heart_rate_bpm) {
  const double rr = 60.0 / heart_rate_bpm;
  const double qt = 0.4 * std::sqrt(rr);
  return std::clamp(qt / rr, 0.1, 0.8);
}

PhantomSpec PhantomSpec::standard(int dim, double heart_rate_bpm) {
  PhantomSpec spec;
  const double s = 64.0 / dim;
  spec.grid = Grid{{dim, dim, dim}, {s, s, s}};
  const double c = 0.5 * (dim - 1);
  spec.center_voxel = {c, c, c};
  spec.heart_rate_bpm = heart_rate_bpm;
  spec.systole_peak_phase = default_systole_peak_phase(heart_rate_bpm);
  return spec;
}

void PhantomSpec::validate() const {
  grid.validate();
  for (int a = 0; a < 3; ++a) {
    require(lv_endo_radii_mm[a] > 0.0, ErrorCode::invalid_argument, "LV endocardial radii must be positive");
    require(lv_epi_radii_mm[a] > lv_endo_radii_mm[a], ErrorCode::invalid_argument,
            "epicardial radii must exceed endocardial radii");
    require(rv_radii_mm[a] > 0.0, ErrorCode::invalid_argument, "RV radii must be positive");
  }
  require(contraction_fraction >= 0.0 && contraction_fraction < 0.5, ErrorCode::invalid_argument,
          "contraction_fraction must lie in [0, 0.5)");
  require(systole_peak_phase > 0.0 && systole_peak_phase < 1.0, ErrorCode::invalid_argument,
          "systole_peak_phase must lie in (0, 1)");
  require(frames >= 2, ErrorCode::invalid_argument, "phantom needs at least 2 frames");
  require(noise_sigma >= 0.0, ErrorCode::invalid_argument, "noise_sigma must be non-negative");
  require(heart_rate_bpm >= 30.0 && heart_rate_bpm <= 200.0, ErrorCode::invalid_argument,
          "heart rate must lie in [30, 200] bpm");

  // Frame 0 is the most dilated configuration; keep a 2-voxel margin there.
  const Anatomy anatomy(*this);
  for (const Ellipsoid* e : {&anatomy.lv_epi, &anatomy.rv}) {
    for (int a = 0; a < 3; ++a) {
      const double lo = e->center[a] - e->radii[a];
      const double hi = e->center[a] + e->radii[a];
      require(lo >= 2.0 && hi <= grid.dims[a] - 3.0, ErrorCode::domain,
              "phantom geometry exceeds the grid (2-voxel margin) along axis " + std::to_string(a));
    }
  }
}

LabelVolume render_phantom_labels(const PhantomSpec& spec, double scale) {
  const Anatomy anatomy(spec);
  LabelVolume out = LabelVolume::empty(spec.grid);
  const Grid& g = spec.grid;
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i)
        out.labels[i] = anatomy.classify(pull_back({double(x), double(y), double(z)}, spec.center_voxel, scale));
  return out;
}

PhantomTruth generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Anatomy anatomy(spec);
  const Grid& g = spec.grid;
  const Vec3& c = spec.center_voxel;

  PhantomTruth truth;
  truth.volumes.frame_times = uniform_frame_times(spec.frames);
  const double ref_volume_ml = 4.0 / 3.0 * std::numbers::pi * spec.lv_endo_radii_mm[0] * spec.lv_endo_radii_mm[1] *
                               spec.lv_endo_radii_mm[2] / 1000.0;

  for (std::size_t k = 0; k < spec.frames; ++k) {
    const double t = truth.volumes.frame_times[k];
    const double scale = 1.0 - spec.contraction_fraction * systolic_pulse(t, spec.systole_peak_phase);
    truth.contraction_scale.push_back(scale);
    truth.lv_cavity_volume_ml.push_back(ref_volume_ml * scale * scale * scale);

    std::mt19937_64 rng(derive_seed(spec.seed, k));
    std::normal_distribution<double> noise(0.0, 1.0);

    Volume3D vol = Volume3D::filled(g, 0.0);
    DisplacementField disp = DisplacementField::zeros(g);
    std::size_t i = 0;
    for (int z = 0; z < g.dims[2]; ++z)
      for (int y = 0; y < g.dims[1]; ++y)
        for (int x = 0; x < g.dims[0]; ++x, ++i) {
          // 2x2x2 supersampling gives partial-volume edges.
          double acc = 0.0;
          for (int s = 0; s < 8; ++s) {
            const Vec3 sub{x + ((s & 1) ? 0.25 : -0.25), y + ((s & 2) ? 0.25 : -0.25), z + ((s & 4) ? 0.25 : -0.25)};
            acc += intensity_of(anatomy.classify(pull_back(sub, c, scale)));
          }
          double value = acc / 8.0;
          if (spec.noise_sigma > 0.0) value += spec.noise_sigma * noise(rng);
          vol.data[i] = static_cast<double>(static_cast<float>(value));
          if (k > 0) {
            const double f = 1.0 / scale - 1.0;
            disp.vectors[i] = {f * (x - c[0]), f * (y - c[1]), f * (z - c[2])};
          }
        }
    truth.volumes.frames.push_back(std::move(vol));
    truth.labels.push_back(render_phantom_labels(spec, scale));
    truth.displacements.push_back(std::move(disp));
  }

  const double peak_scale = 1.0 - spec.contraction_fraction;
  truth.analytic_ef = 1.0 - peak_scale * peak_scale * peak_scale;

  const double rr = 60.0 / spec.heart_rate_bpm;
  const double t_wave = (spec.systole_peak_phase * rr - 0.06) / rr;
  truth.ecg = generate_synthetic_ecg(spec.heart_rate_bpm, spec.ecg_cycles, kDefaultSampleRateHz, spec.ecg_snr_db,
                                     derive_seed(spec.seed, 0xEC6ULL), std::max(0.05, t_wave));
  return truth;
}

EcgRecord generate_synthetic_ecg(double heart_rate_bpm, std::size_t n_cycles, double sample_rate_hz,
                                 double noise_snr_db, std::uint64_t seed, std::optional<double> t_wave_phase) {
  require(heart_rate_bpm >= 30.0 && heart_rate_bpm <= 200.0, ErrorCode::invalid_argument,
          "heart rate must lie in [30, 200] bpm");
  require(n_cycles >= 1, ErrorCode::invalid_argument, "n_cycles must be >= 1");
  require(sample_rate_hz > 0.0, ErrorCode::invalid_argument, "sample rate must be positive");
  require(!std::isnan(noise_snr_db), ErrorCode::invalid_argument, "SNR must not be NaN");

  const double rr = 60.0 / heart_rate_bpm;
  const double t_phase = t_wave_phase.value_or((0.4 * std::sqrt(rr) - 0.06) / rr);
  require(t_phase > 0.0 && t_phase < 1.0, ErrorCode::invalid_argument, "t_wave_phase must lie in (0, 1)");

  const std::array<Wavelet, 5> beat = {{{-0.16, 0.15, 0.020},
                                        {-0.03, -0.15, 0.008},
                                        {0.0, 1.0, 0.011},
                                        {0.03, -0.30, 0.009},
                                        {t_phase * rr, 0.35, 0.040}}};
  static constexpr std::array<double, kLeadCount> gains = {0.6, 1.0, 0.45, -0.8, 0.1, 0.7,
                                                           -0.4, 0.3, 0.8, 1.2, 1.1, 0.9};

  const double duration = std::max((static_cast<double>(n_cycles) + 1.0) * rr, 2.0);
  const auto n = static_cast<std::size_t>(std::ceil(duration * sample_rate_hz));

  EcgRecord rec;
  rec.sample_rate_hz = sample_rate_hz;
  std::vector<double> base(n, 0.0);
  // Beats extend one period beyond both ends so edge samples see neighbouring waves.
  for (long k = -1;; ++k) {
    const double r_time = (static_cast<double>(k) + 0.5) * rr;
    if (r_time - 0.5 * rr > duration) break;
    const long r_index = std::lround(r_time * sample_rate_hz);
    if (r_index >= 0 && static_cast<std::size_t>(r_index) < n) rec.true_r_peaks.push_back(static_cast<std::size_t>(r_index));
    for (const Wavelet& w : beat) {
      const double centre = r_time + w.offset_s;
      const long lo = std::max(0L, std::lround((centre - 8.0 * w.width_s) * sample_rate_hz));
      const long hi = std::min(static_cast<long>(n) - 1, std::lround((centre + 8.0 * w.width_s) * sample_rate_hz));
      for (long i = lo; i <= hi; ++i) {
        const double d = (static_cast<double>(i) / sample_rate_hz - centre) / w.width_s;
        base[static_cast<std::size_t>(i)] += w.amplitude * std::exp(-0.5 * d * d);
      }
    }
  }

  double sigma = 0.0;
  if (std::isfinite(noise_snr_db)) {
    double power = 0.0;
    for (double v : base) power += v * v;
    power /= static_cast<double>(n);
    sigma = std::sqrt(power / std::pow(10.0, noise_snr_db / 10.0));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int l = 0; l < kLeadCount; ++l) {
    rec.leads[l].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      double v = gains[l] * base[i];
      if (sigma > 0.0) v += sigma * noise(rng);
      rec.leads[l][i] = v;
    }
  }
  return rec;
}

}  // namespace cof
