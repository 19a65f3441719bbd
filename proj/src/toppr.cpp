#include "cof/toppr.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>

#include "cof/adam.hpp"
#include "cof/error.hpp"

namespace cof {

static_assert(sizeof(Vec3) == 3 * sizeof(double), "Vec3 must be tightly packed");

namespace {

std::span<double> flat(std::vector<Vec3>& v) { return {reinterpret_cast<double*>(v.data()), v.size() * 3}; }

Grid control_lattice(const Index3& control_dims) { return Grid{control_dims, {1.0, 1.0, 1.0}}; }

// Sum over the truncated (2*half+1)^3 window centred on every voxel.
std::vector<double> box_sum(const std::vector<double>& in, const Grid& g, int half) {
  std::vector<double> cur = in;
  std::vector<double> next(in.size());
  const std::size_t strides[3] = {1, static_cast<std::size_t>(g.dims[0]),
                                  static_cast<std::size_t>(g.dims[0]) * g.dims[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = g.dims[axis];
    const std::size_t st = strides[axis];
    std::vector<double> prefix(n + 1);
    for (std::size_t i = 0; i < in.size(); ++i) {
      // Visit each line once, starting from its first element.
      if ((i / st) % n != 0) continue;
      prefix[0] = 0.0;
      for (int k = 0; k < n; ++k) prefix[k + 1] = prefix[k] + cur[i + k * st];
      for (int k = 0; k < n; ++k) {
        const int lo = std::max(0, k - half);
        const int hi = std::min(n - 1, k + half);
        next[i + k * st] = prefix[hi + 1] - prefix[lo];
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

std::vector<double> window_counts(const Grid& g, int half) {
  std::vector<double> out(g.voxel_count());
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const Index3 c{x, y, z};
        double n = 1.0;
        for (int a = 0; a < 3; ++a) n *= std::min(g.dims[a] - 1, c[a] + half) - std::max(0, c[a] - half) + 1;
        out[i] = n;
      }
  return out;
}

double global_ncc(const std::vector<double>& f, const std::vector<double>& w, std::vector<double>* grad) {
  const double n = static_cast<double>(f.size());
  const double mf = std::accumulate(f.begin(), f.end(), 0.0) / n;
  const double mw = std::accumulate(w.begin(), w.end(), 0.0) / n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = f[i] - mf, b = w[i] - mw;
    saa += a * a;
    sbb += b * b;
    sab += a * b;
  }
  require(saa > 0.0, ErrorCode::degenerate_input, "global NCC is undefined for a constant fixed volume");
  if (sbb <= 0.0) {
    if (grad) grad->assign(f.size(), 0.0);
    return 1.0;
  }
  const double denom = std::sqrt(saa * sbb);
  const double corr = sab / denom;
  if (grad) {
    grad->resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i)
      (*grad)[i] = -((f[i] - mf) / denom - corr * (w[i] - mw) / sbb);
  }
  return 1.0 - corr;
}

double local_ncc(const Grid& g, const std::vector<double>& f, const std::vector<double>& w, int window,
                 std::vector<double>* grad) {
  constexpr double kVarFloor = 1e-6;
  const int half = window / 2;
  const std::size_t n = f.size();
  std::vector<double> ff(n), ww(n), fw(n);
  for (std::size_t i = 0; i < n; ++i) {
    ff[i] = f[i] * f[i];
    ww[i] = w[i] * w[i];
    fw[i] = f[i] * w[i];
  }
  const auto cnt = window_counts(g, half);
  const auto sf = box_sum(f, g, half), sw = box_sum(w, g, half);
  const auto sff = box_sum(ff, g, half), sww = box_sum(ww, g, half), sfw = box_sum(fw, g, half);

  std::vector<double> g_sw, g_sww, g_sfw;
  if (grad) {
    g_sw.assign(n, 0.0);
    g_sww.assign(n, 0.0);
    g_sfw.assign(n, 0.0);
  }
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double cross = sfw[i] - sf[i] * sw[i] / cnt[i];
    const double fvar_raw = sff[i] - sf[i] * sf[i] / cnt[i];
    const double wvar_raw = sww[i] - sw[i] * sw[i] / cnt[i];
    const double fvar = std::max(fvar_raw, kVarFloor);
    const double wvar = std::max(wvar_raw, kVarFloor);
    const double cc = cross * cross / (fvar * wvar);
    total += cc;
    if (grad) {
      const double d_cross = -inv_n * 2.0 * cross / (fvar * wvar);
      const double d_wvar = wvar_raw > kVarFloor ? inv_n * cc / wvar : 0.0;
      // cross = sfw - sf*sw/cnt ; wvar = sww - sw^2/cnt
      g_sfw[i] = d_cross;
      g_sw[i] = d_cross * (-sf[i] / cnt[i]) + d_wvar * (-2.0 * sw[i] / cnt[i]);
      g_sww[i] = d_wvar;
    }
  }
  if (grad) {
    const auto b_sw = box_sum(g_sw, g, half), b_sww = box_sum(g_sww, g, half), b_sfw = box_sum(g_sfw, g, half);
    grad->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*grad)[i] = b_sw[i] + 2.0 * w[i] * b_sww[i] + f[i] * b_sfw[i];
  }
  return 1.0 - total * inv_n;
}

// Foreground soft Dice; channels[c - 1] holds class c.
double dice_foreground(const std::array<const std::vector<double>*, kClassCount - 1>& channels,
                       const LabelVolume& hardened, double eps,
                       std::array<std::vector<double>, kClassCount - 1>* grad) {
  const std::size_t n = hardened.labels.size();
  double sum_d = 0.0;
  constexpr double inv_classes = 1.0 / (kClassCount - 1);
  for (int c = 1; c < kClassCount; ++c) {
    const auto& p = *channels[c - 1];
    double spy = 0.0, spp = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = hardened.labels[i] == c ? 1.0 : 0.0;
      spy += p[i] * y;
      spp += p[i] * p[i];
      syy += y;
    }
    const double den = spp + syy + eps;
    sum_d += 2.0 * spy / den;
    if (grad) {
      auto& gc = (*grad)[c - 1];
      gc.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double y = hardened.labels[i] == c ? 1.0 : 0.0;
        gc[i] = -inv_classes * (2.0 * y / den - 2.0 * spy * 2.0 * p[i] / (den * den));
      }
    }
  }
  return 1.0 - inv_classes * sum_d;
}

}  // namespace

VelocityGrid VelocityGrid::zeros_for(const Index3& dims, int stride) {
  require(stride >= 1, ErrorCode::invalid_argument, "velocity grid stride must be >= 1");
  VelocityGrid v;
  v.stride = stride;
  for (int a = 0; a < 3; ++a) v.control_dims[a] = (dims[a] - 1 + stride - 1) / stride + 1;
  v.vectors.assign(v.control_count(), Vec3{0.0, 0.0, 0.0});
  return v;
}

bool VelocityGrid::covers(const Index3& dims) const {
  for (int a = 0; a < 3; ++a)
    if (static_cast<long>(control_dims[a] - 1) * stride < dims[a] - 1) return false;
  return true;
}

void VelocityGrid::validate() const {
  require(stride >= 1, ErrorCode::invalid_argument, "velocity grid stride must be >= 1");
  for (int a = 0; a < 3; ++a) require(control_dims[a] >= 1, ErrorCode::shape, "control dims must be >= 1");
  require(vectors.size() == control_count(), ErrorCode::shape, "velocity grid length does not match control dims");
  for (const auto& v : vectors)
    for (double c : v) require(std::isfinite(c), ErrorCode::invalid_argument, "velocity grid has non-finite values");
}

void RegConfig::validate() const {
  require(lambda_rec >= 0.0 && lambda_seg >= 0.0 && lambda_smooth >= 0.0, ErrorCode::invalid_argument,
          "loss weights must be non-negative");
  require(ncc_window == 0 || (ncc_window > 0 && ncc_window % 2 == 1), ErrorCode::invalid_argument,
          "ncc_window must be 0 or odd");
  require(squaring_steps >= 1, ErrorCode::invalid_argument, "squaring_steps must be >= 1");
  require(iters >= 1, ErrorCode::invalid_argument, "iters must be >= 1");
  require(lr > 0.0 && weight_decay >= 0.0 && dice_eps > 0.0, ErrorCode::invalid_argument,
          "lr and dice_eps must be positive, weight_decay non-negative");
  require(stride >= 1, ErrorCode::invalid_argument, "stride must be >= 1");
  require(stop_window >= 1 && min_iters >= 0, ErrorCode::invalid_argument, "invalid early-stop settings");
}

void DeformationSet::validate() const {
  require(!fields.empty(), ErrorCode::insufficient_frames, "deformation set is empty");
  require(frame_times.size() == fields.size(), ErrorCode::shape, "frame_times length does not match field count");
  for (const auto& f : fields) {
    f.validate();
    require_same_grid(fields.front().grid, f.grid, "DeformationSet field");
  }
  for (const auto& v : fields.front().vectors)
    require(v[0] == 0.0 && v[1] == 0.0 && v[2] == 0.0, ErrorCode::invalid_argument,
            "deformation field 0 must be exactly zero");
  for (std::size_t k = 1; k < frame_times.size(); ++k)
    require(frame_times[k] > frame_times[k - 1], ErrorCode::invalid_argument, "frame_times must be strictly increasing");
}

DisplacementField upsample_velocity(const VelocityGrid& v, const Grid& grid) {
  v.validate();
  require(v.covers(grid.dims), ErrorCode::shape, "velocity control grid does not cover the volume");
  const Grid lattice = control_lattice(v.control_dims);
  DisplacementField out = DisplacementField::zeros(grid);
  const double inv = 1.0 / v.stride;
  std::size_t i = 0;
  for (int z = 0; z < grid.dims[2]; ++z)
    for (int y = 0; y < grid.dims[1]; ++y)
      for (int x = 0; x < grid.dims[0]; ++x, ++i) {
        const TrilinearStencil s = make_stencil(lattice, {x * inv, y * inv, z * inv});
        Vec3 acc{0.0, 0.0, 0.0};
        for (int c = 0; c < 8; ++c) acc += s.weight[c] * v.vectors[s.index[c]];
        out.vectors[i] = acc;
      }
  return out;
}

DisplacementField integrate_svf(const VelocityGrid& v, const Grid& grid, int squaring_steps) {
  require(squaring_steps >= 0, ErrorCode::invalid_argument, "squaring_steps must be non-negative");
  DisplacementField d = upsample_velocity(v, grid);
  const double scale = std::ldexp(1.0, -squaring_steps);
  for (auto& vec : d.vectors) vec = scale * vec;
  for (int s = 0; s < squaring_steps; ++s) d = compose(d, d);
  return d;
}

double ncc_loss(const Volume3D& fixed, const Volume3D& moving_warped, int window, std::vector<double>* grad) {
  require_same_grid(fixed.grid, moving_warped.grid, "ncc_loss");
  require(window == 0 || (window > 0 && window % 2 == 1), ErrorCode::invalid_argument, "NCC window must be 0 or odd");
  if (window == 0) return global_ncc(fixed.data, moving_warped.data, grad);
  return local_ncc(fixed.grid, fixed.data, moving_warped.data, window, grad);
}

LabelVolume largest_component_filter(const LabelVolume& labels) {
  labels.validate();
  const Grid& g = labels.grid;
  const std::size_t n = g.voxel_count();
  LabelVolume out = LabelVolume::empty(g);
  std::vector<std::int32_t> component(n, -1);
  std::vector<std::size_t> queue;

  for (int cls = 1; cls < kClassCount; ++cls) {
    std::vector<std::size_t> best;
    std::vector<std::size_t> current;
    for (std::size_t seed = 0; seed < n; ++seed) {
      if (labels.labels[seed] != cls || component[seed] >= 0) continue;
      current.clear();
      queue.assign(1, seed);
      component[seed] = static_cast<std::int32_t>(seed);
      for (std::size_t head = 0; head < queue.size(); ++head) {
        const std::size_t i = queue[head];
        current.push_back(i);
        const Index3 c = g.coords(i);
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
              if (x < 0 || y < 0 || z < 0 || x >= g.dims[0] || y >= g.dims[1] || z >= g.dims[2]) continue;
              const std::size_t j = g.linear(x, y, z);
              if (labels.labels[j] != cls || component[j] >= 0) continue;
              component[j] = static_cast<std::int32_t>(seed);
              queue.push_back(j);
            }
      }
      // Scan order means an earlier component has the lower minimum index, so
      // strict comparison keeps it on ties.
      if (current.size() > best.size()) best = current;
    }
    for (std::size_t i : best) out.labels[i] = static_cast<std::uint8_t>(cls);
  }
  return out;
}

double dice_teacher_loss(const std::vector<Volume3D>& student, const LabelVolume& teacher, double eps,
                         std::vector<std::vector<double>>* grad) {
  require(student.size() == static_cast<std::size_t>(kClassCount), ErrorCode::shape,
          "dice_teacher_loss expects " + std::to_string(kClassCount) + " channels, got " + std::to_string(student.size()));
  for (const auto& ch : student) require_same_grid(ch.grid, teacher.grid, "dice_teacher_loss");
  const LabelVolume hardened = largest_component_filter(teacher);
  std::array<const std::vector<double>*, kClassCount - 1> channels{};
  for (int c = 1; c < kClassCount; ++c) channels[c - 1] = &student[c].data;
  std::array<std::vector<double>, kClassCount - 1> fg_grad;
  const double loss = dice_foreground(channels, hardened, eps, grad ? &fg_grad : nullptr);
  if (grad) {
    grad->assign(kClassCount, {});
    (*grad)[0].assign(teacher.labels.size(), 0.0);
    for (int c = 1; c < kClassCount; ++c) (*grad)[c] = std::move(fg_grad[c - 1]);
  }
  return loss;
}

RegistrationObjective::RegistrationObjective(const Volume3D& source, const Volume3D& target,
                                             const LabelVolume& source_labels, const LabelVolume& target_labels,
                                             const RegConfig& cfg)
    : grid_(source.grid), cfg_(cfg), source_(&source), target_(&target), source_labels_(source_labels) {
  cfg.validate();
  require_same_grid(source.grid, target.grid, "register_pair target");
  require_same_grid(source.grid, source_labels.grid, "register_pair source labels");
  require_same_grid(source.grid, target_labels.grid, "register_pair target labels");
  teacher_ = largest_component_filter(target_labels);

  const VelocityGrid proto = VelocityGrid::zeros_for(grid_.dims, cfg.stride);
  control_dims_ = proto.control_dims;
  const Grid lattice = control_lattice(control_dims_);
  const double inv = 1.0 / cfg.stride;
  upsample_.resize(grid_.voxel_count());
  std::size_t i = 0;
  for (int z = 0; z < grid_.dims[2]; ++z)
    for (int y = 0; y < grid_.dims[1]; ++y)
      for (int x = 0; x < grid_.dims[0]; ++x, ++i) {
        const TrilinearStencil s = make_stencil(lattice, {x * inv, y * inv, z * inv});
        for (int c = 0; c < 8; ++c) {
          upsample_[i].index[c] = static_cast<std::uint32_t>(s.index[c]);
          upsample_[i].weight[c] = s.weight[c];
        }
      }
}

LossTerms RegistrationObjective::evaluate(const VelocityGrid& v, VelocityGrid* grad) const {
  require(v.control_dims == control_dims_ && v.stride == cfg_.stride && v.vectors.size() == v.control_count(),
          ErrorCode::shape, "velocity grid does not match the registration lattice");
  const Grid& g = grid_;
  const std::size_t n = g.voxel_count();
  const int steps = cfg_.squaring_steps;
  const double scale = std::ldexp(1.0, -steps);

  // Forward: scaling and squaring, keeping every intermediate field.
  auto& d = ws_.d;
  d.resize(steps + 1);
  for (auto& level : d) level.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 acc{0.0, 0.0, 0.0};
    for (int c = 0; c < 8; ++c) acc += upsample_[i].weight[c] * v.vectors[upsample_[i].index[c]];
    d[0][i] = scale * acc;
  }
  for (int s = 1; s <= steps; ++s) {
    const auto& prev = d[s - 1];
    auto& cur = d[s];
    std::size_t i = 0;
    for (int z = 0; z < g.dims[2]; ++z)
      for (int y = 0; y < g.dims[1]; ++y)
        for (int x = 0; x < g.dims[0]; ++x, ++i) {
          const Vec3& p = prev[i];
          const TrilinearStencil st = make_stencil(g, {x + p[0], y + p[1], z + p[2]});
          Vec3 acc = p;
          for (int c = 0; c < 8; ++c) acc += st.weight[c] * prev[st.index[c]];
          cur[i] = acc;
        }
  }
  const auto& u = d[steps];

  // Warp intensities and foreground label channels; keep spatial gradients at
  // the sample points for the backward pass.
  Volume3D warped{g, std::vector<double>(n)};
  std::array<std::vector<double>, kClassCount - 1> soft;
  for (auto& ch : soft) ch.assign(n, 0.0);
  auto& grad_src = ws_.grad_src;
  auto& grad_soft = ws_.grad_soft;
  if (grad) {
    grad_src.resize(n);
    grad_soft.resize(n * (kClassCount - 1));
  }
  {
    std::size_t i = 0;
    for (int z = 0; z < g.dims[2]; ++z)
      for (int y = 0; y < g.dims[1]; ++y)
        for (int x = 0; x < g.dims[0]; ++x, ++i) {
          const Vec3& ui = u[i];
          const TrilinearStencil st = make_stencil(g, {x + ui[0], y + ui[1], z + ui[2]}, grad != nullptr);
          double val = 0.0;
          Vec3 gs{0.0, 0.0, 0.0};
          std::array<Vec3, kClassCount - 1> gl{};
          for (int c = 0; c < 8; ++c) {
            const double sv = source_->data[st.index[c]];
            val += st.weight[c] * sv;
            const int cls = source_labels_.labels[st.index[c]];
            if (cls > 0) soft[cls - 1][i] += st.weight[c];
            if (grad) {
              gs += sv * st.dweight[c];
              if (cls > 0) gl[cls - 1] += st.dweight[c];
            }
          }
          warped.data[i] = val;
          if (grad) {
            grad_src[i] = gs;
            for (int c = 0; c < kClassCount - 1; ++c) grad_soft[i * (kClassCount - 1) + c] = gl[c];
          }
        }
  }

  LossTerms terms;
  std::vector<double> g_warped;
  std::array<std::vector<double>, kClassCount - 1> g_soft;
  if (cfg_.lambda_rec > 0.0) terms.rec = ncc_loss(*target_, warped, cfg_.ncc_window, grad ? &g_warped : nullptr);
  if (cfg_.lambda_seg > 0.0) {
    std::array<const std::vector<double>*, kClassCount - 1> channels{};
    for (int c = 0; c < kClassCount - 1; ++c) channels[c] = &soft[c];
    terms.seg = dice_foreground(channels, teacher_, cfg_.dice_eps, grad ? &g_soft : nullptr);
  }

  // Diffusion regularizer on the control lattice, in per-voxel units.
  const Index3& cd = control_dims_;
  const double inv_stride2 = 1.0 / (static_cast<double>(cfg_.stride) * cfg_.stride);
  const double norm = 1.0 / static_cast<double>(v.control_count());
  std::vector<Vec3> g_smooth;
  if (grad) g_smooth.assign(v.control_count(), Vec3{0.0, 0.0, 0.0});
  double smooth = 0.0;
  for (int z = 0; z < cd[2]; ++z)
    for (int y = 0; y < cd[1]; ++y)
      for (int x = 0; x < cd[0]; ++x) {
        const std::size_t i = v.linear(x, y, z);
        const Index3 here{x, y, z};
        for (int a = 0; a < 3; ++a) {
          if (here[a] + 1 >= cd[a]) continue;
          Index3 nb = here;
          nb[a] += 1;
          const std::size_t j = v.linear(nb[0], nb[1], nb[2]);
          const Vec3 diff = v.vectors[j] - v.vectors[i];
          smooth += dot(diff, diff) * inv_stride2;
          if (grad) {
            const Vec3 gd = (2.0 * inv_stride2 * norm) * diff;
            g_smooth[j] += gd;
            g_smooth[i] += -1.0 * gd;
          }
        }
      }
  terms.smooth = smooth * norm;
  terms.total = cfg_.lambda_rec * terms.rec + cfg_.lambda_seg * terms.seg + cfg_.lambda_smooth * terms.smooth;

  if (!grad) return terms;

  // Backward: d loss / d u at every voxel.
  auto& g_cur = ws_.g_cur;
  g_cur.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 acc{0.0, 0.0, 0.0};
    if (cfg_.lambda_rec > 0.0) acc += (cfg_.lambda_rec * g_warped[i]) * grad_src[i];
    if (cfg_.lambda_seg > 0.0)
      for (int c = 0; c < kClassCount - 1; ++c)
        acc += (cfg_.lambda_seg * g_soft[c][i]) * grad_soft[i * (kClassCount - 1) + c];
    g_cur[i] = acc;
  }

  // Through each squaring step d_s(x) = d_{s-1}(x) + d_{s-1}(x + d_{s-1}(x)).
  auto& g_prev = ws_.g_prev;
  g_prev.resize(n);
  for (int s = steps; s >= 1; --s) {
    const auto& prev = d[s - 1];
    g_prev = g_cur;
    std::size_t i = 0;
    for (int z = 0; z < g.dims[2]; ++z)
      for (int y = 0; y < g.dims[1]; ++y)
        for (int x = 0; x < g.dims[0]; ++x, ++i) {
          const Vec3& p = prev[i];
          const Vec3& go = g_cur[i];
          const TrilinearStencil st = make_stencil(g, {x + p[0], y + p[1], z + p[2]}, true);
          Vec3 pos_grad{0.0, 0.0, 0.0};
          for (int c = 0; c < 8; ++c) {
            g_prev[st.index[c]] += st.weight[c] * go;
            const double proj = dot(prev[st.index[c]], go);
            pos_grad += proj * st.dweight[c];
          }
          g_prev[i] += pos_grad;
        }
    std::swap(g_cur, g_prev);
  }

  grad->control_dims = v.control_dims;
  grad->stride = v.stride;
  grad->vectors.assign(v.control_count(), Vec3{0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 gv = scale * g_cur[i];
    for (int c = 0; c < 8; ++c) grad->vectors[upsample_[i].index[c]] += upsample_[i].weight[c] * gv;
  }
  for (std::size_t j = 0; j < v.control_count(); ++j) grad->vectors[j] += cfg_.lambda_smooth * g_smooth[j];
  return terms;
}

PairResult register_pair(const Volume3D& source, const Volume3D& target, const LabelVolume& source_labels,
                         const LabelVolume& target_labels, const RegConfig& cfg, const VelocityGrid* init) {
  const RegistrationObjective objective(source, target, source_labels, target_labels, cfg);
  PairResult result;
  result.velocity = init ? *init : objective.zero_velocity();
  const VelocityGrid proto = objective.zero_velocity();
  require(result.velocity.control_dims == proto.control_dims && result.velocity.stride == proto.stride,
          ErrorCode::shape, "initial velocity grid does not match the registration lattice");
  result.velocity.validate();

  Adam adam(result.velocity.vectors.size() * 3,
            AdamConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  VelocityGrid grad;
  result.loss_trace.reserve(cfg.iters);
  for (int it = 0; it < cfg.iters; ++it) {
    const LossTerms terms = objective.evaluate(result.velocity, &grad);
    if (!std::isfinite(terms.total))
      fail(ErrorCode::divergence, "registration loss became non-finite at iteration " + std::to_string(it));
    result.loss_trace.push_back(terms.total);
    adam.step(flat(result.velocity.vectors), flat(grad.vectors));

    const int w = cfg.stop_window;
    if (cfg.stop_rel_tol > 0.0 && it + 1 >= std::max(cfg.min_iters, 2 * w)) {
      const auto end = result.loss_trace.end();
      const double recent = std::accumulate(end - w, end, 0.0) / w;
      const double before = std::accumulate(end - 2 * w, end - w, 0.0) / w;
      if (before - recent < cfg.stop_rel_tol * std::abs(before)) break;
    }
  }
  result.final_terms = objective.evaluate(result.velocity);
  if (!std::isfinite(result.final_terms.total))
    fail(ErrorCode::divergence, "registration loss became non-finite after the final update");
  result.displacement = integrate_svf(result.velocity, source.grid, cfg.squaring_steps);
  return result;
}

DeformationSet register_sequence(const Volume4D& volumes, const std::vector<LabelVolume>& labels,
                                 const RegConfig& cfg, const SequenceProgress& progress) {
  volumes.validate();
  require(labels.size() == volumes.frame_count(), ErrorCode::shape, "one label volume per frame is required");
  DeformationSet out;
  out.frame_times = volumes.frame_times;
  out.fields.push_back(DisplacementField::zeros(volumes.grid()));
  out.velocities.push_back(VelocityGrid::zeros_for(volumes.grid().dims, cfg.stride));
  for (std::size_t k = 1; k < volumes.frame_count(); ++k) {
    try {
      PairResult r = register_pair(volumes.frames[0], volumes.frames[k], labels[0], labels[k], cfg,
                                   &out.velocities.back());
      if (progress) progress(k, r);
      out.fields.push_back(std::move(r.displacement));
      out.velocities.push_back(std::move(r.velocity));
    } catch (const Error& e) {
      throw Error(e.code(), "frame " + std::to_string(k) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cof
