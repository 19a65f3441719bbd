#include <cmath>

#include "cof/ecg.hpp"
#include "cof/error.hpp"
#include "cof/phantom.hpp"
#include "doctest.h"

using namespace cof;

namespace {

struct Match {
  double recall, precision;
};

Match match_peaks(const std::vector<std::size_t>& found, const std::vector<std::size_t>& truth, std::size_t tol) {
  std::size_t hit_truth = 0, hit_found = 0;
  for (std::size_t t : truth)
    for (std::size_t f : found)
      if ((f > t ? f - t : t - f) <= tol) {
        ++hit_truth;
        break;
      }
  for (std::size_t f : found)
    for (std::size_t t : truth)
      if ((f > t ? f - t : t - f) <= tol) {
        ++hit_found;
        break;
      }
  return {double(hit_truth) / truth.size(), double(hit_found) / found.size()};
}

double mean_rr(const std::vector<std::size_t>& p, double fs) {
  return double(p.back() - p.front()) / double(p.size() - 1) / fs;
}

}  // namespace

TEST_CASE("R-peak detection on phantom ECG at 20 dB") {
  const EcgRecord rec = generate_synthetic_ecg(60, 8, 500, 20.0, 3);
  const auto peaks = detect_r_peaks(rec);
  CHECK(peaks.size() == rec.true_r_peaks.size());
  const Match m = match_peaks(peaks, rec.true_r_peaks, 10);
  CHECK(m.recall == 1.0);
  CHECK(m.precision == 1.0);
}

TEST_CASE("R-R interval at slow and fast rates") {
  for (double hr : {40.0, 120.0}) {
    const EcgRecord rec = generate_synthetic_ecg(hr, 8, 500, 20.0, 4);
    const double rr = mean_rr(detect_r_peaks(rec), 500);
    CHECK(std::abs(rr - 60.0 / hr) / (60.0 / hr) <= 0.02);
  }
}

TEST_CASE("detector is amplitude-scale invariant and rejects flat signals") {
  EcgRecord rec = generate_synthetic_ecg(75, 6, 500, 15.0, 8);
  const auto base = detect_r_peaks(rec);
  for (auto& lead : rec.leads)
    for (auto& v : lead) v *= 3.7;
  CHECK(detect_r_peaks(rec) == base);

  EcgRecord flat;
  for (auto& lead : flat.leads) lead.assign(5000, 0.0);
  try {
    detect_r_peaks(flat);
    FAIL("expected insufficient_signal");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::insufficient_signal);
  }
}

TEST_CASE("extract_cycle: period, grid length, periodicity and selector range") {
  const EcgRecord rec = generate_synthetic_ecg(60, 6);
  const auto peaks = detect_r_peaks(rec);
  const CardiacCycle c = extract_cycle(rec, peaks);
  CHECK(std::abs(c.rr_seconds - 1.0) <= 0.02);
  for (const auto& row : c.resampled) CHECK(row.size() == 64);
  CHECK(c.phase_grid.size() == 64);
  CHECK(c.phase_grid.front() == 0.0);

  const CardiacCycle c0 = extract_cycle(rec, peaks, std::size_t{1});
  const CardiacCycle c1 = extract_cycle(rec, peaks, std::size_t{2});
  for (int l = 0; l < kLeadCount; ++l)
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(c0.resampled[l][i] - c1.resampled[l][i]) <= 1e-9);

  try {
    extract_cycle(rec, peaks, peaks.size());
    FAIL("expected invalid_argument");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::invalid_argument);
  }
}

TEST_CASE("median cycle picks the median R-R length, ties to the earlier cycle") {
  EcgRecord rec = generate_synthetic_ecg(60, 6);
  // Hand-built peak list: lengths 500, 480, 520, 480 -> sorted 480 480 500 520; median picks 480 or 500.
  const std::vector<std::size_t> peaks{250, 750, 1230, 1750, 2230};
  const CardiacCycle c = extract_cycle(rec, peaks);
  // Lower median of four lengths is 480; the earlier 480 cycle starts at 750.
  CHECK(c.start_sample == 750);
  CHECK(c.rr_seconds == doctest::Approx(0.96));
}

TEST_CASE("embed_ecg: length, zero-variance guard and scale invariance") {
  EcgRecord rec = generate_synthetic_ecg(60, 6);
  rec.leads[4].assign(rec.sample_count(), 0.25);
  const auto peaks = detect_r_peaks(rec);
  const auto e = embed_ecg(extract_cycle(rec, peaks));
  CHECK(e.size() == 12 * 64 + 1);
  for (int i = 0; i < 64; ++i) CHECK(e[4 * 64 + i] == 0.0);
  CHECK(e.back() == doctest::Approx(1.0).epsilon(0.02));

  EcgRecord scaled = rec;
  for (auto& v : scaled.leads[7]) v *= 3.0;
  const auto e3 = embed_ecg(extract_cycle(scaled, peaks));
  for (int i = 0; i < 64; ++i) CHECK(e3[7 * 64 + i] == doctest::Approx(e[7 * 64 + i]).epsilon(1e-12));
  CHECK(embed_ecg(extract_cycle(rec, peaks)) == e);
}
