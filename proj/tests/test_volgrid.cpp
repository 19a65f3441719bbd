#include <cmath>
#include <random>

#include "cof/error.hpp"
#include "cof/volgrid.hpp"
#include "doctest.h"

using namespace cof;

namespace {

Volume3D random_volume(const Grid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Volume3D v = Volume3D::filled(g, 0.0);
  for (auto& x : v.data) x = u(rng);
  return v;
}

DisplacementField affine_field(const Grid& g, double alpha) {
  DisplacementField d = DisplacementField::zeros(g);
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) d.vectors[i] = {alpha * x, alpha * y, alpha * z};
  return d;
}

DisplacementField constant_field(const Grid& g, const Vec3& t) {
  DisplacementField d = DisplacementField::zeros(g);
  for (auto& v : d.vectors) v = t;
  return d;
}

}  // namespace

TEST_CASE("sample_trilinear on constant, lattice and hand-interpolated values") {
  const Grid g{{4, 5, 3}, {1, 1, 1}};
  CHECK(sample_trilinear(Volume3D::filled(g, 5.0), {1.3, 0.7, 2.1}) == doctest::Approx(5.0).epsilon(1e-15));

  std::mt19937_64 rng(1);
  const Volume3D r = random_volume(g, rng);
  CHECK(sample_trilinear(r, {2, 3, 1}) == r.at(2, 3, 1));

  Volume3D pair = Volume3D::filled(Grid{{2, 1, 1}, {1, 1, 1}}, 0.0);
  pair.data = {0.0, 10.0};
  CHECK(sample_trilinear(pair, {0.25, 0, 0}) == doctest::Approx(2.5).epsilon(1e-15));

  CHECK_THROWS_AS(sample_trilinear(r, {NAN, 0, 0}), Error);
}

TEST_CASE("sample_trilinear clamps out-of-domain points to the border") {
  Volume3D pair = Volume3D::filled(Grid{{2, 1, 1}, {1, 1, 1}}, 0.0);
  pair.data = {3.0, 7.0};
  CHECK(sample_trilinear(pair, {-4.0, 0, 0}) == 3.0);
  CHECK(sample_trilinear(pair, {9.0, 2.0, -1.0}) == 7.0);
}

TEST_CASE("sample_trilinear is linear in the volume") {
  const Grid g{{5, 4, 6}, {1, 1, 1}};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pos(-1.0, 6.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Volume3D a = random_volume(g, rng), b = random_volume(g, rng);
    const double alpha = 0.7, beta = -1.9;
    Volume3D mix = a;
    for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = alpha * a.data[i] + beta * b.data[i];
    const Vec3 p{pos(rng), pos(rng), pos(rng)};
    const double lhs = sample_trilinear(mix, p);
    const double rhs = alpha * sample_trilinear(a, p) + beta * sample_trilinear(b, p);
    CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(rhs)));
  }
}

TEST_CASE("warp identity, ramp shift and shape errors") {
  const Grid g{{6, 5, 4}, {1.5, 1, 2}};
  std::mt19937_64 rng(3);
  const Volume3D v = random_volume(g, rng);
  const auto zero = DisplacementField::zeros(g);
  const Volume3D w = warp(v, zero);
  CHECK(w.data == v.data);
  CHECK(warp(w, zero).data == v.data);
  CHECK(w.grid.spacing_mm == g.spacing_mm);

  Volume3D ramp = Volume3D::filled(g, 0.0);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x) ramp.at(x, y, z) = x;
  const Volume3D shifted = warp(ramp, constant_field(g, {1, 0, 0}));
  for (int x = 0; x < 5; ++x) CHECK(shifted.at(x, 2, 1) == doctest::Approx(x + 1.0));
  CHECK(shifted.at(5, 2, 1) == doctest::Approx(5.0));

  CHECK_THROWS_AS(warp(v, DisplacementField::zeros(Grid{{6, 5, 3}, {1, 1, 1}})), Error);
}

TEST_CASE("warp_labels_soft one-hot, partition of unity and half-voxel boundary") {
  const Grid g{{6, 6, 6}, {1, 1, 1}};
  LabelVolume lab = LabelVolume::empty(g);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> cls(0, kClassCount - 1);
  for (auto& l : lab.labels) l = static_cast<std::uint8_t>(cls(rng));

  const auto exact = warp_labels_soft(lab, DisplacementField::zeros(g));
  REQUIRE(exact.size() == static_cast<std::size_t>(kClassCount));
  for (std::size_t i = 0; i < lab.labels.size(); ++i)
    for (int c = 0; c < kClassCount; ++c) CHECK(exact[c].data[i] == (lab.labels[i] == c ? 1.0 : 0.0));

  DisplacementField d = DisplacementField::zeros(g);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (auto& v : d.vectors) v = {u(rng), u(rng), u(rng)};
  const auto soft = warp_labels_soft(lab, d);
  for (std::size_t i = 0; i < lab.labels.size(); ++i) {
    double s = 0.0;
    for (int c = 0; c < kClassCount; ++c) {
      CHECK(soft[c].data[i] >= 0.0);
      CHECK(soft[c].data[i] <= 1.0 + 1e-12);
      s += soft[c].data[i];
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }

  // LV on x <= 2, Myo on x >= 3; shifting by half a voxel straddles the edge.
  LabelVolume edge = LabelVolume::empty(g);
  for (std::size_t i = 0; i < edge.labels.size(); ++i) edge.labels[i] = g.coords(i)[0] <= 2 ? kLV : kMyo;
  const auto half = warp_labels_soft(edge, constant_field(g, {0.5, 0, 0}));
  const std::size_t at = g.linear(2, 3, 3);
  CHECK(half[kLV].data[at] == doctest::Approx(0.5));
  CHECK(half[kMyo].data[at] == doctest::Approx(0.5));
}

TEST_CASE("jacobian determinant of identity, scaling and translation") {
  const Grid g{{8, 8, 8}, {1, 1, 1}};
  for (double j : jacobian_determinant(DisplacementField::zeros(g)).data) CHECK(j == 1.0);
  const Volume3D scaled = jacobian_determinant(affine_field(g, 0.1));
  CHECK(scaled.at(4, 4, 4) == doctest::Approx(1.331).epsilon(1e-12));
  for (double j : jacobian_determinant(constant_field(g, {0.3, -1.7, 2.2})).data) CHECK(std::abs(j - 1.0) <= 1e-12);
  CHECK_THROWS_AS(jacobian_determinant(DisplacementField::zeros(Grid{{8, 1, 8}, {1, 1, 1}})), Error);
}

TEST_CASE("compose identity, translations, affine and associativity") {
  const Grid g{{10, 10, 10}, {1, 1, 1}};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  DisplacementField d = DisplacementField::zeros(g);
  for (auto& v : d.vectors) v = {u(rng), u(rng), u(rng)};
  const auto zero = DisplacementField::zeros(g);
  CHECK(compose(zero, d).vectors == d.vectors);
  CHECK(compose(d, zero).vectors == d.vectors);

  const auto t1 = constant_field(g, {1.0, 0.5, 0.0}), t2 = constant_field(g, {-0.25, 1.0, 0.75});
  const auto sum = compose(t1, t2);
  const Vec3& mid = sum.vectors[g.linear(5, 5, 5)];
  CHECK(mid[0] == doctest::Approx(0.75));
  CHECK(mid[1] == doctest::Approx(1.5));
  CHECK(mid[2] == doctest::Approx(0.75));

  const auto sq = compose(affine_field(g, 0.1), affine_field(g, 0.1));
  const Vec3& a = sq.vectors[g.linear(4, 3, 5)];
  CHECK(a[0] == doctest::Approx(0.21 * 4).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(0.21 * 3).epsilon(1e-12));
  CHECK(a[2] == doctest::Approx(0.21 * 5).epsilon(1e-12));

  const auto t3 = constant_field(g, {0.1, -0.2, 0.3});
  const auto left = compose(compose(t1, t2), t3);
  const auto right = compose(t1, compose(t2, t3));
  const Vec3& l = left.vectors[g.linear(5, 4, 5)];
  const Vec3& r = right.vectors[g.linear(5, 4, 5)];
  for (int c = 0; c < 3; ++c) CHECK(std::abs(l[c] - r[c]) <= 1e-9);
  CHECK_THROWS_AS(compose(d, DisplacementField::zeros(Grid{{10, 10, 9}, {1, 1, 1}})), Error);
}
