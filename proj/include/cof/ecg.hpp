#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace cof {

inline constexpr int kLeadCount = 12;
inline constexpr double kDefaultSampleRateHz = 500.0;
inline constexpr std::size_t kDefaultPhaseSamples = 64;

/// Lead order used everywhere: I, II, III, aVR, aVL, aVF, V1..V6.
const std::array<const char*, kLeadCount>& lead_names();
inline constexpr int kLeadII = 1;

struct EcgRecord {
  double sample_rate_hz = kDefaultSampleRateHz;
  std::array<std::vector<double>, kLeadCount> leads;  // millivolts
  std::vector<std::size_t> true_r_peaks;              // phantom records only

  std::size_t sample_count() const { return leads[0].size(); }
  void validate() const;
};

struct CardiacCycle {
  std::array<std::vector<double>, kLeadCount> leads;  // raw crop [R_i, R_{i+1})
  double rr_seconds = 0.0;
  std::vector<double> phase_grid;                      // L phases in [0, 1)
  std::array<std::vector<double>, kLeadCount> resampled;  // 12 x L
  std::size_t start_sample = 0;
};

/// Pan-Tompkins style QRS detector on lead II. Throws insufficient_signal when
/// fewer than two beats are found.
std::vector<std::size_t> detect_r_peaks(const EcgRecord& rec);

struct MedianCycle {};
using CycleSelector = std::variant<MedianCycle, std::size_t>;

CardiacCycle extract_cycle(const EcgRecord& rec, const std::vector<std::size_t>& peaks,
                           CycleSelector which = MedianCycle{},
                           std::size_t phase_samples = kDefaultPhaseSamples);

/// Per-lead z-scored resampled waveform (12*L values) followed by rr_seconds.
std::vector<double> embed_ecg(const CardiacCycle& cycle);

}  // namespace cof
