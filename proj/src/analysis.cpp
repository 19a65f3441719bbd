#include "cof/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "cof/error.hpp"

namespace cof {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int class_slot(int cls) { return cls == kLV ? 0 : cls == kRV ? 1 : 2; }

}  // namespace

double chamber_volume(const LabelVolume& labels, int cls) {
  require(cls >= 0 && cls < kClassCount, ErrorCode::invalid_argument, "unknown label class " + std::to_string(cls));
  const auto n = std::count(labels.labels.begin(), labels.labels.end(), static_cast<std::uint8_t>(cls));
  return static_cast<double>(n) * labels.grid.voxel_volume_mm3() / 1000.0;
}

const char* edv_anchor_name(EdvAnchor a) { return a == EdvAnchor::first_frame ? "first_frame" : "extrema"; }

EdvAnchor parse_edv_anchor(const std::string& name) {
  if (name == "first_frame") return EdvAnchor::first_frame;
  if (name == "extrema") return EdvAnchor::extrema;
  fail(ErrorCode::invalid_argument, "unknown EDV anchor '" + name + "' (expected first_frame or extrema)");
}

FunctionalIndices functional_indices_from_curve(const std::vector<double>& curve, double rr_seconds,
                                                EdvAnchor anchor) {
  require(curve.size() >= 2, ErrorCode::insufficient_frames, "functional indices need at least 2 frames");
  require(rr_seconds > 0.0 && std::isfinite(rr_seconds), ErrorCode::invalid_argument, "rr_seconds must be positive");
  FunctionalIndices f;
  f.anchor = anchor;
  f.volume_curve_ml = curve;
  f.es_frame = static_cast<std::size_t>(std::min_element(curve.begin(), curve.end()) - curve.begin());
  f.ed_frame = anchor == EdvAnchor::first_frame
                   ? 0
                   : static_cast<std::size_t>(std::max_element(curve.begin(), curve.end()) - curve.begin());
  f.edv_ml = curve[f.ed_frame];
  f.esv_ml = curve[f.es_frame];
  require(f.edv_ml > 0.0, ErrorCode::degenerate_anatomy, "end-diastolic LV volume is zero");
  f.sv_ml = f.edv_ml - f.esv_ml;
  f.ef = f.sv_ml / f.edv_ml;
  f.heart_rate_bpm = 60.0 / rr_seconds;
  f.co_l_per_min = f.sv_ml * f.heart_rate_bpm / 1000.0;
  return f;
}

FunctionalIndices functional_indices(const std::vector<LabelVolume>& label_seq, const std::vector<double>& frame_times,
                                     double rr_seconds, EdvAnchor anchor) {
  require(label_seq.size() == frame_times.size(), ErrorCode::shape, "one frame time per label volume required");
  std::vector<double> curve;
  curve.reserve(label_seq.size());
  for (const auto& l : label_seq) curve.push_back(chamber_volume(l, kLV));
  return functional_indices_from_curve(curve, rr_seconds, anchor);
}

std::optional<double> curve_correlation(const FunctionalIndices& real, const FunctionalIndices& gen) {
  require(real.volume_curve_ml.size() == gen.volume_curve_ml.size(), ErrorCode::shape,
          "volume curves differ in length (" + std::to_string(real.volume_curve_ml.size()) + " vs " +
              std::to_string(gen.volume_curve_ml.size()) + ")");
  return pearson(real.volume_curve_ml, gen.volume_curve_ml);
}

std::vector<int> retained_slices(const LabelVolume& truth_ed) {
  const Grid& g = truth_ed.grid;
  const std::size_t plane = static_cast<std::size_t>(g.dims[0]) * g.dims[1];
  std::vector<std::size_t> area(g.dims[2], 0);
  for (std::size_t i = 0; i < truth_ed.labels.size(); ++i) area[i / plane] += truth_ed.labels[i] == kMyo;
  const std::size_t peak = *std::max_element(area.begin(), area.end());
  require(peak > 0, ErrorCode::degenerate_anatomy, "no myocardium in the end-diastolic labels");
  std::vector<int> out;
  for (int z = 0; z < g.dims[2]; ++z)
    if (static_cast<double>(area[z]) >= kSliceAreaFraction * static_cast<double>(peak)) out.push_back(z);
  return out;
}

SliceProfile slice_profile(const std::vector<LabelVolume>& pred_seq, const std::vector<LabelVolume>& truth_seq,
                           std::size_t ed_frame, std::size_t es_frame) {
  require(pred_seq.size() == truth_seq.size(), ErrorCode::shape, "pred and truth sequences differ in length");
  require(ed_frame < truth_seq.size() && es_frame < truth_seq.size(), ErrorCode::invalid_argument,
          "ED/ES frame index out of range");
  for (std::size_t k = 0; k < pred_seq.size(); ++k) require_same_grid(pred_seq[k].grid, truth_seq[k].grid, "slice_profile");

  SliceProfile prof;
  prof.slice_z = retained_slices(truth_seq[ed_frame]);
  const std::array<std::size_t, 2> frames{ed_frame, es_frame};
  for (std::size_t r = 0; r < prof.slice_z.size(); ++r) {
    SliceRankStats s;
    s.rank = static_cast<int>(r);
    s.subjects = 1;
    for (int ph = 0; ph < 2; ++ph) {
      const LabelVolume p = extract_slice(pred_seq[frames[ph]], prof.slice_z[r]);
      const LabelVolume t = extract_slice(truth_seq[frames[ph]], prof.slice_z[r]);
      for (int cls : kForegroundClasses) {
        const int c = class_slot(cls);
        const Overlap o = dice_iou(p, t, cls);
        s.dice[ph][c] = o.dice;
        s.iou[ph][c] = o.iou;
        s.hd95[ph][c] = kNaN;
        try {
          s.hd95[ph][c] = hd95(class_mask(p, cls), class_mask(t, cls), SurfaceMode::surface2d);
          s.hd95_count[ph][c] = 1;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::undefined_distance) throw;
        }
      }
    }
    prof.ranks.push_back(s);
  }
  return prof;
}

SliceProfile aggregate_slice_profiles(std::span<const SliceProfile> profiles) {
  SliceProfile out;
  std::size_t max_rank = 0;
  for (const auto& p : profiles) max_rank = std::max(max_rank, p.ranks.size());
  for (std::size_t r = 0; r < max_rank; ++r) {
    SliceRankStats agg;
    agg.rank = static_cast<int>(r);
    std::array<std::array<double, 3>, 2> hd_sum{};
    for (const auto& p : profiles) {
      if (r >= p.ranks.size()) continue;
      const auto& s = p.ranks[r];
      agg.subjects += s.subjects;
      for (int ph = 0; ph < 2; ++ph)
        for (int c = 0; c < 3; ++c) {
          agg.dice[ph][c] += s.dice[ph][c] * s.subjects;
          agg.iou[ph][c] += s.iou[ph][c] * s.subjects;
          if (s.hd95_count[ph][c]) {
            hd_sum[ph][c] += s.hd95[ph][c] * s.hd95_count[ph][c];
            agg.hd95_count[ph][c] += s.hd95_count[ph][c];
          }
        }
    }
    for (int ph = 0; ph < 2; ++ph)
      for (int c = 0; c < 3; ++c) {
        agg.dice[ph][c] /= agg.subjects;
        agg.iou[ph][c] /= agg.subjects;
        agg.hd95[ph][c] = agg.hd95_count[ph][c] ? hd_sum[ph][c] / agg.hd95_count[ph][c] : kNaN;
      }
    out.ranks.push_back(agg);
  }
  return out;
}

std::size_t uniform_bin(double x, double lo, double hi, std::size_t n_bins) {
  if (hi <= lo) return 0;
  const double w = (hi - lo) / static_cast<double>(n_bins);
  const auto b = static_cast<std::size_t>(std::floor((x - lo) / w));
  return std::min(b, n_bins - 1);
}

std::optional<double> linear_slope(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::shape, "slope inputs differ in length");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx <= 0.0) return std::nullopt;
  return sxy / sxx;
}

ResolutionSweep resolution_sweep(std::span<const SweepCase> cases, int n_bins) {
  require(n_bins >= 1, ErrorCode::invalid_argument, "n_bins must be >= 1");
  require(!cases.empty(), ErrorCode::insufficient_data, "resolution sweep needs at least one case");
  ResolutionSweep out;
  for (const auto& cs : cases) {
    require(!cs.pred.empty() && cs.pred.size() == cs.truth.size(), ErrorCode::shape,
            "each case needs equal, non-empty pred and truth sequences");
    SweepCaseScore score;
    score.spacing_x = cs.truth[0].grid.spacing_mm[0];
    MetricTable sum{};
    std::array<std::size_t, 3> hd_n{};
    for (std::size_t k = 0; k < cs.pred.size(); ++k) {
      require_same_grid(cs.pred[k].grid, cs.truth[k].grid, "resolution_sweep");
      for (int cls : kForegroundClasses) {
        const int c = class_slot(cls);
        const Overlap o = dice_iou(cs.pred[k], cs.truth[k], cls);
        sum[kSweepDice][c] += o.dice;
        sum[kSweepIou][c] += o.iou;
        try {
          sum[kSweepHd95][c] += hd95(class_mask(cs.pred[k], cls), class_mask(cs.truth[k], cls), SurfaceMode::surface3d);
          ++hd_n[c];
        } catch (const Error& e) {
          if (e.code() != ErrorCode::undefined_distance) throw;
        }
      }
    }
    const double frames = static_cast<double>(cs.pred.size());
    for (int c = 0; c < 3; ++c) {
      score.value[kSweepDice][c] = sum[kSweepDice][c] / frames;
      score.value[kSweepIou][c] = sum[kSweepIou][c] / frames;
      score.value[kSweepHd95][c] = hd_n[c] ? sum[kSweepHd95][c] / static_cast<double>(hd_n[c]) : kNaN;
    }
    out.cases.push_back(score);
  }

  double lo = out.cases[0].spacing_x, hi = lo;
  for (const auto& c : out.cases) {
    lo = std::min(lo, c.spacing_x);
    hi = std::max(hi, c.spacing_x);
  }
  const auto nb = static_cast<std::size_t>(n_bins);
  out.bins.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    out.bins[b].lo = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(nb);
    out.bins[b].hi = b + 1 == nb ? hi : lo + (hi - lo) * static_cast<double>(b + 1) / static_cast<double>(nb);
  }
  for (auto& c : out.cases) c.bin = uniform_bin(c.spacing_x, lo, hi, nb);

  for (std::size_t b = 0; b < nb; ++b) {
    SweepBin& bin = out.bins[b];
    for (int m = 0; m < kSweepMetricCount; ++m)
      for (int c = 0; c < 3; ++c) {
        std::vector<double> vals;
        for (const auto& cs : out.cases)
          if (cs.bin == b && !std::isnan(cs.value[m][c])) vals.push_back(cs.value[m][c]);
        if (vals.empty()) {
          bin.mean[m][c] = kNaN;
          bin.stddev[m][c] = kNaN;
          continue;
        }
        const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        bin.mean[m][c] = mean;
        bin.stddev[m][c] = std::sqrt(ss / static_cast<double>(vals.size()));
      }
    for (const auto& cs : out.cases) bin.count += cs.bin == b;
  }

  if (hi > lo) {
    MetricTable slope{};
    for (int m = 0; m < kSweepMetricCount; ++m)
      for (int c = 0; c < 3; ++c) {
        std::vector<double> xs, ys;
        for (const auto& cs : out.cases)
          if (!std::isnan(cs.value[m][c])) {
            xs.push_back(cs.spacing_x);
            ys.push_back(cs.value[m][c]);
          }
        slope[m][c] = linear_slope(xs, ys).value_or(kNaN);
      }
    out.slope = slope;
  }
  return out;
}

BootstrapResult bootstrap_correlation(std::span<const double> real, std::span<const double> gen, int replicates,
                                      std::uint64_t seed) {
  require(real.size() == gen.size(), ErrorCode::shape, "bootstrap inputs differ in length");
  require(real.size() >= 3, ErrorCode::insufficient_data, "bootstrap needs at least 3 pairs");
  require(replicates >= 1, ErrorCode::invalid_argument, "replicates must be >= 1");
  const auto point = pearson(real, gen);
  require(point.has_value(), ErrorCode::degenerate_input, "correlation undefined: an input has zero variance");

  BootstrapResult out;
  out.r_point = *point;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
  std::vector<double> a(real.size()), b(real.size());
  constexpr int kRetries = 10;
  for (int rep = 0; rep < replicates; ++rep) {
    std::optional<double> r;
    for (int attempt = 0; attempt <= kRetries && !r; ++attempt) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t j = pick(rng);
        a[i] = real[j];
        b[i] = gen[j];
      }
      r = pearson(a, b);
    }
    out.replicates.push_back(r ? *r : kNaN);
    out.missing += !r;
  }
  std::vector<double> valid;
  for (double r : out.replicates)
    if (!std::isnan(r)) valid.push_back(r);
  require(!valid.empty(), ErrorCode::degenerate_input, "every bootstrap replicate was degenerate");
  out.replicate_mean = std::accumulate(valid.begin(), valid.end(), 0.0) / static_cast<double>(valid.size());
  out.ci_low = percentile(valid, 2.5);
  out.ci_high = percentile(valid, 97.5);
  return out;
}

namespace {
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::shape, "spearman inputs differ in length");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

AgreementStats agreement(std::span<const double> real, std::span<const double> gen) {
  require(real.size() == gen.size(), ErrorCode::shape, "agreement inputs differ in length");
  require(!real.empty(), ErrorCode::insufficient_data, "agreement needs at least one pair");
  AgreementStats s;
  s.n = real.size();
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < real.size(); ++i) {
    const double d = gen[i] - real[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  s.mae = abs_sum / static_cast<double>(s.n);
  s.rmse = std::sqrt(sq_sum / static_cast<double>(s.n));
  if (s.n >= 2) {
    s.pearson = pearson(real, gen);
    s.spearman = spearman(real, gen);
  }
  return s;
}

}  // namespace cof
