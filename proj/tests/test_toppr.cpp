#include <cmath>
#include <random>

#include "cof/error.hpp"
#include "cof/phantom.hpp"
#include "cof/toppr.hpp"
#include "cof/twin.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cof;

namespace {

VelocityGrid field_on_controls(const Grid& g, int stride, const std::function<Vec3(const Vec3&)>& f) {
  VelocityGrid v = VelocityGrid::zeros_for(g.dims, stride);
  for (int z = 0; z < v.control_dims[2]; ++z)
    for (int y = 0; y < v.control_dims[1]; ++y)
      for (int x = 0; x < v.control_dims[0]; ++x)
        v.vectors[v.linear(x, y, z)] = f({double(x * stride), double(y * stride), double(z * stride)});
  return v;
}

double max_norm(const DisplacementField& d) {
  double m = 0;
  for (const auto& v : d.vectors) m = std::max(m, std::sqrt(dot(v, v)));
  return m;
}

// Two concentric blobs with smooth intensity; labels 1 inside, 3 in the shell, 2 off-centre.
struct Scene {
  Volume3D vol;
  LabelVolume labels;
};

Scene blob_scene(const Grid& g, const Vec3& centre, double r_in, double r_out) {
  Scene s{Volume3D::filled(g, 0.0), LabelVolume::empty(g)};
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    const Index3 c = g.coords(i);
    const Vec3 p{double(c[0]), double(c[1]), double(c[2])};
    const Vec3 d = p - centre;
    const double r = std::sqrt(dot(d, d));
    s.vol.data[i] = 0.1 + 0.9 * std::exp(-r * r / (2 * r_out * r_out)) + 0.05 * std::sin(0.7 * p[0] + 0.3 * p[1]);
    if (r < r_in)
      s.labels.labels[i] = kLV;
    else if (r < r_out)
      s.labels.labels[i] = kMyo;
    else if (d[0] < -r_out && std::abs(d[1]) < r_out)
      s.labels.labels[i] = kRV;
  }
  return s;
}

}  // namespace

TEST_CASE("integrate_svf: zero and constant fields") {
  const Grid g{{17, 13, 9}, {1, 1, 1}};
  const auto zero = integrate_svf(VelocityGrid::zeros_for(g.dims, 4), g, 6);
  CHECK(max_norm(zero) == 0.0);
  const auto shift = integrate_svf(field_on_controls(g, 4, [](const Vec3&) { return Vec3{2, 0, 0}; }), g, 6);
  for (const auto& v : shift.vectors) {
    CHECK(std::abs(v[0] - 2.0) <= 1e-9);
    CHECK(std::abs(v[1]) <= 1e-9);
    CHECK(std::abs(v[2]) <= 1e-9);
  }
}

TEST_CASE("integrate_svf: linear field matches the exponential") {
  const Grid g{{33, 33, 33}, {1, 1, 1}};
  const auto u = integrate_svf(field_on_controls(g, 4, [](const Vec3& p) { return 0.1 * p; }), g, 6);
  const double k = std::exp(0.1) - 1.0;
  double worst = 0;
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    const Index3 c = g.coords(i);
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && c[a] >= 1 && c[a] * std::exp(0.1) <= g.dims[a] - 1;
    if (!inside) continue;
    for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(u.vectors[i][a] - k * c[a]) / (k * c[a]));
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("integrate_svf: negated field is an approximate inverse") {
  PhantomSpec spec = PhantomSpec::standard(32);
  const Grid& g = spec.grid;
  const Vec3 c = spec.center_voxel;
  const auto f = [&](const Vec3& p) {
    const Vec3 d = p - c;
    return (-0.15 * std::exp(-dot(d, d) / 200.0)) * d;
  };
  const VelocityGrid v = field_on_controls(g, 4, f);
  VelocityGrid neg = v;
  for (auto& x : neg.vectors) x = -1.0 * x;
  const auto fw = integrate_svf(v, g, 6), bw = integrate_svf(neg, g, 6);
  CHECK(max_norm(compose(bw, fw)) <= 0.1);
}

TEST_CASE("integrate_svf rejects a lattice that does not cover the grid") {
  const Grid g{{17, 17, 17}, {1, 1, 1}};
  VelocityGrid v = VelocityGrid::zeros_for({9, 9, 9}, 4);
  CHECK_THROWS_AS(integrate_svf(v, g, 6), Error);
}

TEST_CASE("ncc_loss: identity, affine invariance, anti-correlation, degenerate input") {
  std::mt19937_64 rng(1);
  const Grid g{{8, 8, 8}, {1, 1, 1}};
  const Volume3D a = oracle::random_volume(g, rng);
  CHECK(std::abs(ncc_loss(a, a, 0)) <= 1e-9);
  Volume3D b = a;
  for (auto& x : b.data) x = 2.5 * x + 0.7;
  CHECK(std::abs(ncc_loss(a, b, 0)) <= 1e-9);

  Volume3D ramp = Volume3D::filled(g, 0), rev = ramp;
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    ramp.data[i] = double(i);
    rev.data[i] = double(g.voxel_count() - i);
  }
  CHECK(std::abs(ncc_loss(ramp, rev, 0) - 2.0) <= 1e-9);
  CHECK(std::abs(ncc_loss(a, a, 3)) <= 1e-9);

  try {
    ncc_loss(Volume3D::filled(g, 1.0), a, 0);
    FAIL("expected degenerate_input");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::degenerate_input);
  }
}

TEST_CASE("largest_component_filter keeps the 10-voxel component") {
  const Grid g{{12, 12, 4}, {1, 1, 1}};
  LabelVolume l = LabelVolume::empty(g);
  for (int x = 0; x < 10; ++x) l.labels[g.linear(x, 0, 0)] = kLV;
  for (int x = 0; x < 3; ++x) l.labels[g.linear(x, 6, 2)] = kLV;
  const LabelVolume f = largest_component_filter(l);
  std::size_t n = 0;
  for (auto v : f.labels) n += v == kLV;
  CHECK(n == 10);
  CHECK(f.labels[g.linear(0, 6, 2)] == kBackground);
  // Diagonal contact counts under 26-connectivity.
  LabelVolume d = LabelVolume::empty(g);
  d.labels[g.linear(1, 1, 1)] = d.labels[g.linear(2, 2, 2)] = kMyo;
  std::size_t m = 0;
  for (auto v : largest_component_filter(d).labels) m += v == kMyo;
  CHECK(m == 2);
}

TEST_CASE("dice_teacher_loss: perfect student and brute-force formula") {
  const Grid g{{8, 8, 8}, {1, 1, 1}};
  const Scene s = blob_scene(g, {4, 4, 4}, 1.5, 2.8);
  std::vector<Volume3D> onehot(4, Volume3D::filled(g, 0.0));
  for (std::size_t i = 0; i < g.voxel_count(); ++i) onehot[s.labels.labels[i]].data[i] = 1.0;
  CHECK(dice_teacher_loss(onehot, s.labels, 1e-5) <= 1e-5);

  const std::vector<Volume3D> uniform(4, Volume3D::filled(g, 0.25));
  const LabelVolume teacher = largest_component_filter(s.labels);
  double sum = 0;
  for (int c = 1; c < 4; ++c) {
    double py = 0, pp = 0, yy = 0;
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
      const double y = teacher.labels[i] == c ? 1.0 : 0.0;
      py += 0.25 * y;
      pp += 0.0625;
      yy += y * y;
    }
    sum += 2 * py / (pp + yy + 1e-5);
  }
  CHECK(std::abs(dice_teacher_loss(uniform, s.labels, 1e-5) - (1.0 - sum / 3.0)) <= 1e-9);
  CHECK_THROWS_AS(dice_teacher_loss(std::vector<Volume3D>(3, Volume3D::filled(g, 0.0)), s.labels, 1e-5), Error);
}

TEST_CASE("registration objective gradient matches central differences") {
  const Grid g{{8, 8, 8}, {1, 1, 1}};
  const Scene src = blob_scene(g, {3.6, 4.1, 3.9}, 1.6, 2.9);
  const Scene tgt = blob_scene(g, {4.3, 3.7, 4.2}, 1.4, 2.6);
  RegConfig cfg;
  cfg.lambda_smooth = 0.1;
  for (int window : {0, 3}) {
    cfg.ncc_window = window;
    const RegistrationObjective obj(src.vol, tgt.vol, src.labels, tgt.labels, cfg);
    VelocityGrid v = obj.zero_velocity();
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    for (auto& x : v.vectors) x = {u(rng), u(rng), u(rng)};
    VelocityGrid grad = v;
    obj.evaluate(v, &grad);
    double worst = 0, scale = 0;
    const double h = 1e-6;  // larger steps straddle trilinear kinks near the lattice
    for (std::size_t i = 0; i < v.vectors.size(); ++i)
      for (int a = 0; a < 3; ++a) {
        VelocityGrid p = v, m = v;
        p.vectors[i][a] += h;
        m.vectors[i][a] -= h;
        const double fd = (obj.evaluate(p).total - obj.evaluate(m).total) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad.vectors[i][a]));
        scale = std::max(scale, std::abs(fd));
      }
    CAPTURE(window);
    CHECK(worst / scale <= 1e-4);
  }
}

TEST_CASE("register_pair on identical volumes stays at zero") {
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 2;
  const PhantomTruth t = generate_phantom(spec);
  RegConfig cfg;
  cfg.iters = 200;
  const PairResult r = register_pair(t.volumes.frames[0], t.volumes.frames[0], t.labels[0], t.labels[0], cfg);
  CHECK(max_norm(r.displacement) <= 0.05);
  CHECK(r.loss_trace.size() == 200);
}

TEST_CASE("register_sequence on a static sequence gives near-zero fields") {
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 3;
  spec.contraction_fraction = 0.0;
  const PhantomTruth t = generate_phantom(spec);
  RegConfig cfg;
  cfg.iters = 100;
  const DeformationSet d = register_sequence(t.volumes, t.labels, cfg);
  CHECK(d.frame_count() == 3);
  CHECK(max_norm(d.fields[0]) == 0.0);
  for (const auto& f : d.fields) CHECK(max_norm(f) <= 0.05);
}

TEST_CASE("register_sequence recovers phantom frames and preserves topology") {
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 10;
  spec.noise_sigma = 0.02;
  spec.seed = 4;
  const PhantomTruth t = generate_phantom(spec);
  RegConfig cfg;
  cfg.iters = 400;
  cfg.stop_rel_tol = 1e-3;
  std::vector<double> lv_dice;
  const DeformationSet d = register_sequence(t.volumes, t.labels, cfg);
  for (std::size_t k = 1; k < d.frame_count(); ++k) {
    const LabelVolume warped = argmax_labels(warp_labels_soft(t.labels[0], d.fields[k]));
    const auto [dice, iou] = oracle::dice_iou(warped, t.labels[k], kLV);
    CAPTURE(k);
    CHECK(dice >= 0.88);
    const Volume3D j = jacobian_determinant(d.fields[k]);
    std::size_t interior = 0, pos = 0;
    for (std::size_t i = 0; i < j.data.size(); ++i)
      if (j.grid.is_interior(j.grid.coords(i))) {
        ++interior;
        pos += j.data[i] > 0;
      }
    CHECK(double(pos) / double(interior) >= 0.995);
  }
}

TEST_CASE("dropping the segmentation term never raises the reconstruction loss") {
  // Compared on the rec + seg objective alone; the smoothness prior biases
  // rec-only solutions toward under-registration and is switched off here.
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 10;
  spec.noise_sigma = 0.02;
  const PhantomTruth t = generate_phantom(spec);
  const std::size_t es = 4;
  RegConfig with_seg, no_seg;
  with_seg.iters = no_seg.iters = 600;
  with_seg.lambda_smooth = no_seg.lambda_smooth = 0.0;
  no_seg.lambda_seg = 0.0;
  const auto a = register_pair(t.volumes.frames[0], t.volumes.frames[es], t.labels[0], t.labels[es], with_seg);
  const auto b = register_pair(t.volumes.frames[0], t.volumes.frames[es], t.labels[0], t.labels[es], no_seg);
  CHECK(b.final_terms.rec <= a.final_terms.rec);
}

TEST_CASE("loss trace moving average never rises on a phantom pair") {
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 10;
  spec.noise_sigma = 0.02;
  const PhantomTruth t = generate_phantom(spec);
  RegConfig cfg;
  cfg.iters = 600;
  const auto r = register_pair(t.volumes.frames[0], t.volumes.frames[4], t.labels[0], t.labels[4], cfg);
  const auto& tr = r.loss_trace;
  double prev = INFINITY;
  for (std::size_t s = 0; s + 100 <= tr.size(); ++s) {
    double m = 0;
    for (std::size_t i = s; i < s + 100; ++i) m += tr[i];
    m /= 100;
    CHECK(m <= prev + 1e-12);
    prev = m;
  }
}

TEST_CASE("register_pair reports divergence") {
  PhantomSpec spec = PhantomSpec::standard(32);
  spec.frames = 2;
  const PhantomTruth t = generate_phantom(spec);
  RegConfig cfg;
  cfg.iters = 5;
  cfg.lr = 1e300;
  try {
    register_pair(t.volumes.frames[0], t.volumes.frames[1], t.labels[0], t.labels[1], cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::divergence);
  }
}
