#include "cof/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cof/error.hpp"

namespace cof {

namespace {

// Sum over a w-long window along one axis, keeping only fully contained windows.
std::vector<double> box_axis(const std::vector<double>& in, const Index3& dims, int axis, int w, Index3& out_dims) {
  out_dims = dims;
  out_dims[axis] = dims[axis] - w + 1;
  std::vector<double> out(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2], 0.0);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? std::size_t(dims[0]) : std::size_t(dims[0]) * dims[1];
  std::size_t o = 0;
  for (int z = 0; z < out_dims[2]; ++z)
    for (int y = 0; y < out_dims[1]; ++y)
      for (int x = 0; x < out_dims[0]; ++x, ++o) {
        const std::size_t base = (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
        double s = 0.0;
        for (int k = 0; k < w; ++k) s += in[base + k * stride];
        out[o] = s;
      }
  return out;
}

std::vector<double> box3(const std::vector<double>& in, const Index3& dims, int w) {
  Index3 d1, d2, d3;
  auto a = box_axis(in, dims, 0, w, d1);
  auto b = box_axis(a, d1, 1, w, d2);
  return box_axis(b, d2, 2, w, d3);
}

bool is_boundary(const LabelVolume& m, int x, int y, int z, SurfaceMode mode) {
  const Index3& d = m.grid.dims;
  const int axes = mode == SurfaceMode::surface2d ? 2 : 3;
  for (int a = 0; a < axes; ++a)
    for (int s = -1; s <= 1; s += 2) {
      Index3 n{x, y, z};
      n[a] += s;
      if (n[a] < 0 || n[a] >= d[a]) return true;
      if (!m.labels[m.grid.linear(n[0], n[1], n[2])]) return true;
    }
  return false;
}

std::vector<std::uint8_t> boundary(const LabelVolume& m, SurfaceMode mode) {
  std::vector<std::uint8_t> out(m.labels.size(), 0);
  std::size_t i = 0;
  for (int z = 0; z < m.grid.dims[2]; ++z)
    for (int y = 0; y < m.grid.dims[1]; ++y)
      for (int x = 0; x < m.grid.dims[0]; ++x, ++i)
        if (m.labels[i] && is_boundary(m, x, y, z, mode)) out[i] = 1;
  return out;
}

// Exact 1D squared-distance transform (lower envelope of parabolas) for
// samples at positions s * q.
void edt_1d(const double* f, double* d, int n, double s, std::vector<int>& v, std::vector<double>& zb) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  zb.assign(n + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double pq = s * q;
    while (k >= 0) {
      const double pv = s * v[k];
      const double inter = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (inter <= zb[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        zb[k] = inter;
        zb[k + 1] = inf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      zb[0] = -inf;
      zb[1] = inf;
    }
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double pq = s * q;
    while (zb[j + 1] < pq) ++j;
    const double diff = pq - s * v[j];
    d[q] = diff * diff + f[v[j]];
  }
}

// Squared Euclidean distance (mm^2) to the nearest nonzero seed.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& seeds, const Grid& g, int axes) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) dist[i] = seeds[i] ? 0.0 : inf;
  std::vector<int> v;
  std::vector<double> zb, line, out;
  for (int a = 0; a < axes; ++a) {
    const int n = g.dims[a];
    const std::size_t stride = a == 0 ? 1 : a == 1 ? std::size_t(g.dims[0]) : std::size_t(g.dims[0]) * g.dims[1];
    line.resize(n);
    out.resize(n);
    for (std::size_t start = 0; start < seeds.size(); ++start) {
      if ((start / stride) % n != 0) continue;
      for (int q = 0; q < n; ++q) line[q] = dist[start + q * stride];
      edt_1d(line.data(), out.data(), n, g.spacing_mm[a], v, zb);
      for (int q = 0; q < n; ++q) dist[start + q * stride] = out[q];
    }
  }
  return dist;
}

void check_mask_pair(const LabelVolume& a, const LabelVolume& b, SurfaceMode mode) {
  a.validate();
  b.validate();
  require_same_grid(a.grid, b.grid, "hd95");
  if (mode == SurfaceMode::surface2d)
    require(a.grid.dims[2] == 1, ErrorCode::shape, "2D surface distances need single-slice masks");
  const auto nonempty = [](const LabelVolume& m) {
    return std::any_of(m.labels.begin(), m.labels.end(), [](std::uint8_t l) { return l != 0; });
  };
  require(nonempty(a) && nonempty(b), ErrorCode::undefined_distance, "surface distance is undefined for an empty mask");
}

}  // namespace

double ssim(const Volume3D& a, const Volume3D& b, int window) {
  a.validate();
  b.validate();
  require_same_grid(a.grid, b.grid, "ssim");
  require(window >= 1 && window % 2 == 1, ErrorCode::invalid_argument, "ssim window must be odd and >= 1");
  const Index3& d = a.grid.dims;
  for (int ax = 0; ax < 3; ++ax)
    require(window <= d[ax], ErrorCode::shape,
            "ssim window " + std::to_string(window) + " exceeds volume dimension " + std::to_string(d[ax]));

  const auto [lo, hi] = std::minmax_element(a.data.begin(), a.data.end());
  double range = *hi - *lo;
  if (range <= 0.0) range = 1.0;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  const std::size_t n = a.data.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.data[i] * a.data[i];
    bb[i] = b.data[i] * b.data[i];
    ab[i] = a.data[i] * b.data[i];
  }
  const auto sa = box3(a.data, d, window), sb = box3(b.data, d, window);
  const auto saa = box3(aa, d, window), sbb = box3(bb, d, window), sab = box3(ab, d, window);
  const double inv = 1.0 / (double(window) * window * window);
  double total = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    const double ma = sa[i] * inv, mb = sb[i] * inv;
    const double va = saa[i] * inv - ma * ma, vb = sbb[i] * inv - mb * mb, cov = sab[i] * inv - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(sa.size());
}

double psnr(const Volume3D& a, const Volume3D& b, std::optional<double> peak) {
  a.validate();
  b.validate();
  require_same_grid(a.grid, b.grid, "psnr");
  const double p = peak ? *peak : *std::max_element(a.data.begin(), a.data.end());
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(p * p / mse));
}

Overlap dice_iou(const LabelVolume& pred, const LabelVolume& truth, int cls) {
  require(cls >= 0 && cls < kClassCount, ErrorCode::invalid_argument, "unknown label class " + std::to_string(cls));
  require_same_grid(pred.grid, truth.grid, "dice_iou");
  require(pred.labels.size() == truth.labels.size(), ErrorCode::shape, "label volumes differ in size");
  std::size_t inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == cls, t = truth.labels[i] == cls;
    inter += p && t;
    np += p;
    nt += t;
  }
  if (np == 0 && nt == 0) return {1.0, 1.0};
  if (np == 0 || nt == 0) return {0.0, 0.0};
  return {2.0 * double(inter) / double(np + nt), double(inter) / double(np + nt - inter)};
}

LabelVolume class_mask(const LabelVolume& labels, int cls) {
  require(cls >= 0 && cls < kClassCount, ErrorCode::invalid_argument, "unknown label class " + std::to_string(cls));
  LabelVolume out = labels;
  for (auto& l : out.labels) l = l == cls ? 1 : 0;
  return out;
}

LabelVolume extract_slice(const LabelVolume& labels, int z) {
  require(z >= 0 && z < labels.grid.dims[2], ErrorCode::invalid_argument, "slice index out of range");
  Grid g = labels.grid;
  g.dims[2] = 1;
  LabelVolume out = LabelVolume::empty(g);
  const std::size_t plane = static_cast<std::size_t>(g.dims[0]) * g.dims[1];
  std::copy_n(labels.labels.begin() + static_cast<std::ptrdiff_t>(plane * z), plane, out.labels.begin());
  return out;
}

std::vector<double> directed_surface_distances(const LabelVolume& from, const LabelVolume& to, SurfaceMode mode) {
  check_mask_pair(from, to, mode);
  const auto bf = boundary(from, mode);
  const auto dist = squared_edt(boundary(to, mode), to.grid, mode == SurfaceMode::surface2d ? 2 : 3);
  std::vector<double> out;
  for (std::size_t i = 0; i < bf.size(); ++i)
    if (bf[i]) out.push_back(std::sqrt(dist[i]));
  return out;
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorCode::insufficient_data, "percentile of an empty set");
  require(q >= 0.0 && q <= 100.0, ErrorCode::invalid_argument, "percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = rank - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

double hd95(const LabelVolume& pred, const LabelVolume& truth, SurfaceMode mode) {
  auto d = directed_surface_distances(pred, truth, mode);
  const auto back = directed_surface_distances(truth, pred, mode);
  d.insert(d.end(), back.begin(), back.end());
  return percentile(std::move(d), 95.0);
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::shape, "pearson inputs differ in length");
  require(!a.empty(), ErrorCode::insufficient_data, "pearson of empty inputs");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

MotionMetrics motion_metrics(const Volume4D& real, const Volume4D& gen, int window) {
  require(real.frame_count() >= 2 && gen.frame_count() >= 2, ErrorCode::insufficient_frames,
          "motion metrics need at least 2 frames");
  require(real.frame_count() == gen.frame_count(), ErrorCode::shape, "real and generated frame counts differ");
  require_same_grid(real.grid(), gen.grid(), "motion_metrics");
  std::vector<double> dr, dg;
  double ssim_sum = 0.0;
  for (std::size_t k = 0; k + 1 < real.frame_count(); ++k) {
    Volume3D r = real.frames[k + 1], g = gen.frames[k + 1];
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      r.data[i] -= real.frames[k].data[i];
      g.data[i] -= gen.frames[k].data[i];
    }
    dr.insert(dr.end(), r.data.begin(), r.data.end());
    dg.insert(dg.end(), g.data.begin(), g.data.end());
    ssim_sum += ssim(r, g, window);
  }
  MotionMetrics m;
  m.m_corr = pearson(dr, dg).value_or(0.0);
  m.m_ssim = ssim_sum / static_cast<double>(real.frame_count() - 1);
  return m;
}

std::vector<double> topology_report(const DeformationSet& defs) {
  defs.validate();
  std::vector<double> out;
  for (const auto& f : defs.fields) {
    const Volume3D j = jacobian_determinant(f);
    std::size_t interior = 0, positive = 0;
    for (std::size_t i = 0; i < j.data.size(); ++i) {
      if (!f.grid.is_interior(f.grid.coords(i))) continue;
      ++interior;
      positive += j.data[i] > 0.0;
    }
    out.push_back(interior ? double(positive) / double(interior) : 1.0);
  }
  return out;
}

}  // namespace cof
