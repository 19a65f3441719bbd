#include "cof/ecg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cof/error.hpp"

namespace cof {

namespace {

std::vector<double> bandpass_fir(double low_hz, double high_hz, double fs) {
  std::size_t taps = static_cast<std::size_t>(std::lround(0.2 * fs)) | 1U;
  const int half = static_cast<int>(taps / 2);
  const double f1 = low_hz / fs;
  const double f2 = high_hz / fs;
  auto sinc_lp = [](double f, int m) {
    if (m == 0) return 2.0 * f;
    return std::sin(2.0 * std::numbers::pi * f * m) / (std::numbers::pi * m);
  };
  std::vector<double> h(taps);
  for (int n = 0; n < static_cast<int>(taps); ++n) {
    const int m = n - half;
    const double hamming = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (taps - 1));
    h[n] = (sinc_lp(f2, m) - sinc_lp(f1, m)) * hamming;
  }
  return h;
}

// Zero-phase ("same") convolution with an odd-length symmetric kernel.
std::vector<double> filter_same(const std::vector<double>& x, const std::vector<double>& h) {
  const int n = static_cast<int>(x.size());
  const int half = static_cast<int>(h.size() / 2);
  std::vector<double> y(x.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    for (int j = lo; j <= hi; ++j) acc += h[j - i + half] * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> moving_average_centered(const std::vector<double>& x, int width) {
  const int n = static_cast<int>(x.size());
  const int half = width / 2;
  std::vector<double> prefix(x.size() + 1, 0.0);
  for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
  std::vector<double> y(x.size());
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    y[i] = (prefix[hi + 1] - prefix[lo]) / width;
  }
  return y;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

const std::array<const char*, kLeadCount>& lead_names() {
  static const std::array<const char*, kLeadCount> names = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                                            "V1", "V2", "V3",  "V4",  "V5",  "V6"};
  return names;
}

void EcgRecord::validate() const {
  require(std::isfinite(sample_rate_hz) && sample_rate_hz > 0.0, ErrorCode::invalid_argument,
          "ECG sample rate must be positive");
  const std::size_t n = leads[0].size();
  for (int l = 0; l < kLeadCount; ++l) {
    require(leads[l].size() == n, ErrorCode::shape, std::string("ECG lead ") + lead_names()[l] + " has a different length");
    for (double v : leads[l])
      require(std::isfinite(v), ErrorCode::invalid_argument, std::string("ECG lead ") + lead_names()[l] + " has non-finite samples");
  }
  require(static_cast<double>(n) >= 2.0 * sample_rate_hz, ErrorCode::insufficient_signal,
          "ECG record must span at least 2 seconds");
}

std::vector<std::size_t> detect_r_peaks(const EcgRecord& rec) {
  rec.validate();
  const double fs = rec.sample_rate_hz;
  const std::vector<double>& raw = rec.leads[kLeadII];
  const int n = static_cast<int>(raw.size());

  std::vector<double> centred(raw.size());
  const double mu = mean_of(raw);
  for (int i = 0; i < n; ++i) centred[i] = raw[i] - mu;

  const std::vector<double> band = filter_same(centred, bandpass_fir(5.0, 15.0, fs));

  std::vector<double> slope(raw.size(), 0.0);
  for (int i = 2; i + 2 < n; ++i)
    slope[i] = (2.0 * band[i + 1] + band[i + 2] - band[i - 2] - 2.0 * band[i - 1]) / 8.0;
  std::vector<double> squared(raw.size());
  for (int i = 0; i < n; ++i) squared[i] = slope[i] * slope[i];

  const int mwi_width = std::max(1, static_cast<int>(std::lround(0.150 * fs)));
  const std::vector<double> mwi = moving_average_centered(squared, mwi_width);

  const int refractory = static_cast<int>(std::lround(0.200 * fs));
  const int t_wave_window = static_cast<int>(std::lround(0.360 * fs));

  // Local maxima of the integrated signal, one per refractory window.
  std::vector<int> candidates;
  for (int i = 1; i + 1 < n; ++i) {
    if (!(mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] && mwi[i] > 0.0)) continue;
    if (!candidates.empty() && i - candidates.back() < refractory) {
      if (mwi[i] > mwi[candidates.back()]) candidates.back() = i;
      continue;
    }
    candidates.push_back(i);
  }
  if (candidates.size() < 2) fail(ErrorCode::insufficient_signal, "fewer than 2 R-peaks detected");

  auto max_slope_near = [&](int i) {
    double m = 0.0;
    for (int j = std::max(0, i - mwi_width / 2); j <= std::min(n - 1, i + mwi_width / 2); ++j)
      m = std::max(m, std::abs(slope[j]));
    return m;
  };

  const int learn = std::min(n, static_cast<int>(2.0 * fs));
  double spki = *std::max_element(mwi.begin(), mwi.begin() + learn) / 3.0;
  double npki = mean_of(std::vector<double>(mwi.begin(), mwi.begin() + learn)) / 2.0;
  auto threshold1 = [&] { return npki + 0.25 * (spki - npki); };

  std::vector<int> qrs;
  std::vector<double> qrs_slopes;
  std::vector<int> noise_since_last;
  auto rr_average = [&]() -> double {
    if (qrs.size() < 2) return 0.0;
    const std::size_t k = std::min<std::size_t>(8, qrs.size() - 1);
    return static_cast<double>(qrs.back() - qrs[qrs.size() - 1 - k]) / static_cast<double>(k);
  };

  for (int c : candidates) {
    const double value = mwi[c];
    bool accepted = false;
    if (value > threshold1()) {
      accepted = true;
      if (!qrs.empty() && c - qrs.back() < t_wave_window && max_slope_near(c) < 0.5 * qrs_slopes.back())
        accepted = false;
    }
    if (accepted) {
      spki = 0.125 * value + 0.875 * spki;
      qrs.push_back(c);
      qrs_slopes.push_back(max_slope_near(c));
      noise_since_last.clear();
      continue;
    }
    npki = 0.125 * value + 0.875 * npki;
    noise_since_last.push_back(c);

    // Search back for a missed beat when the gap grows too long.
    const double rr = rr_average();
    if (rr > 0.0 && c - qrs.back() > 1.66 * rr) {
      int best = -1;
      for (int cand : noise_since_last) {
        if (cand - qrs.back() < refractory || c - cand < refractory) continue;
        if (mwi[cand] > 0.5 * threshold1() && (best < 0 || mwi[cand] > mwi[best])) best = cand;
      }
      if (best >= 0) {
        spki = 0.25 * mwi[best] + 0.75 * spki;
        qrs.push_back(best);
        qrs_slopes.push_back(max_slope_near(best));
        std::erase_if(noise_since_last, [&](int v) { return v <= best; });
      }
    }
  }

  // Refine each fiducial to the band-passed lead II maximum nearby.
  const int search = static_cast<int>(std::lround(0.075 * fs));
  std::vector<std::size_t> peaks;
  for (int q : qrs) {
    int best = q;
    for (int j = std::max(0, q - search); j <= std::min(n - 1, q + search); ++j)
      if (band[j] > band[best]) best = j;
    if (!peaks.empty() && best - static_cast<int>(peaks.back()) < refractory) continue;
    peaks.push_back(static_cast<std::size_t>(best));
  }
  if (peaks.size() < 2) fail(ErrorCode::insufficient_signal, "fewer than 2 R-peaks detected");
  return peaks;
}

CardiacCycle extract_cycle(const EcgRecord& rec, const std::vector<std::size_t>& peaks, CycleSelector which,
                           std::size_t phase_samples) {
  rec.validate();
  require(peaks.size() >= 2, ErrorCode::insufficient_signal, "extract_cycle needs at least 2 R-peaks");
  require(phase_samples >= 2, ErrorCode::invalid_argument, "phase grid needs at least 2 samples");
  for (std::size_t i = 1; i < peaks.size(); ++i)
    require(peaks[i] > peaks[i - 1], ErrorCode::invalid_argument, "R-peaks must be strictly increasing");
  require(peaks.back() < rec.sample_count(), ErrorCode::invalid_argument, "R-peak index beyond record");

  const std::size_t cycles = peaks.size() - 1;
  std::size_t chosen = 0;
  if (std::holds_alternative<std::size_t>(which)) {
    chosen = std::get<std::size_t>(which);
    require(chosen < cycles, ErrorCode::invalid_argument,
            "cycle index " + std::to_string(chosen) + " out of range (" + std::to_string(cycles) + " cycles)");
  } else {
    std::vector<std::size_t> order(cycles);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return peaks[a + 1] - peaks[a] < peaks[b + 1] - peaks[b];
    });
    // Lower median; among equal lengths the earliest cycle wins.
    const std::size_t median_len = peaks[order[(cycles - 1) / 2] + 1] - peaks[order[(cycles - 1) / 2]];
    for (std::size_t i = 0; i < cycles; ++i)
      if (peaks[i + 1] - peaks[i] == median_len) {
        chosen = i;
        break;
      }
  }

  const std::size_t start = peaks[chosen];
  const std::size_t stop = peaks[chosen + 1];
  const double length = static_cast<double>(stop - start);

  CardiacCycle cycle;
  cycle.start_sample = start;
  cycle.rr_seconds = length / rec.sample_rate_hz;
  cycle.phase_grid.resize(phase_samples);
  for (std::size_t j = 0; j < phase_samples; ++j)
    cycle.phase_grid[j] = static_cast<double>(j) / static_cast<double>(phase_samples);
  for (int l = 0; l < kLeadCount; ++l) {
    const auto& lead = rec.leads[l];
    cycle.leads[l].assign(lead.begin() + static_cast<std::ptrdiff_t>(start), lead.begin() + static_cast<std::ptrdiff_t>(stop));
    auto& out = cycle.resampled[l];
    out.resize(phase_samples);
    for (std::size_t j = 0; j < phase_samples; ++j) {
      const double pos = static_cast<double>(start) + cycle.phase_grid[j] * length;
      const auto i0 = static_cast<std::size_t>(std::floor(pos));
      const double f = pos - static_cast<double>(i0);
      out[j] = f == 0.0 ? lead[i0] : (1.0 - f) * lead[i0] + f * lead[i0 + 1];
    }
  }
  return cycle;
}

std::vector<double> embed_ecg(const CardiacCycle& cycle) {
  require(cycle.rr_seconds > 0.0, ErrorCode::invalid_argument, "cycle rr_seconds must be positive");
  const std::size_t len = cycle.resampled[0].size();
  require(len > 0, ErrorCode::invalid_argument, "cycle has no resampled samples");
  std::vector<double> out;
  out.reserve(kLeadCount * len + 1);
  for (int l = 0; l < kLeadCount; ++l) {
    const auto& row = cycle.resampled[l];
    require(row.size() == len, ErrorCode::shape, "resampled leads differ in length");
    const double mu = mean_of(row);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(len);
    if (var < 1e-12) {
      out.insert(out.end(), len, 0.0);
      continue;
    }
    const double sd = std::sqrt(var);
    for (double v : row) out.push_back((v - mu) / sd);
  }
  out.push_back(cycle.rr_seconds);
  return out;
}

}  // namespace cof
