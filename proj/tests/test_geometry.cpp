#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "dpke/geometry.hpp"
#include "oracles.hpp"

using namespace dpke;
using Catch::Approx;

namespace {

PointSet line(std::initializer_list<double> xs) {
  PointSet out;
  for (double x : xs) out.emplace_back(x, 0.0, 0.0);
  return out;
}

Aabb unit_cube(double x = 0.0, double y = 0.0, double z = 0.0) {
  return {{x, y, z}, {1.0, 1.0, 1.0}};
}

}  // namespace

TEST_CASE("fps on a line picks the far end first") {
  const PointSet pts = line({0, 1, 2, 10});
  CHECK(farthest_point_sample(pts, 2, 0) == IndexList{0, 3});
  CHECK(farthest_point_sample(pts, 3, 0) == IndexList{0, 3, 2});
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(farthest_point_sample(pts, 1, i) == IndexList{i});
}

TEST_CASE("fps breaks ties by smallest index") {
  const PointSet pts = line({-1, 0, 1});
  CHECK(farthest_point_sample(pts, 2, 1) == IndexList{1, 0});
  const PointSet dup = line({0, 5, 5, 5});
  CHECK(farthest_point_sample(dup, 3, 0) == IndexList{0, 1, 2});
}

TEST_CASE("fps rejects bad arguments") {
  const PointSet pts = line({0, 1});
  CHECK_THROWS_AS(farthest_point_sample({}, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(farthest_point_sample(pts, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(farthest_point_sample(pts, 3, 0), std::invalid_argument);
  CHECK_THROWS_AS(farthest_point_sample(pts, 1, 2), std::invalid_argument);
}

TEST_CASE("fps matches the brute-force greedy oracle") {
  Rng rng = make_rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 16);
    PointSet pts = oracle::random_cloud(rng, n);
    // Quantized copies produce exact distance ties.
    if (trial % 3 == 0)
      for (auto& p : pts) p = (p * 3.0).array().round().matrix();
    const std::size_t k = 1 + uniform_index(rng, n);
    const std::size_t start = uniform_index(rng, n);
    const IndexList got = farthest_point_sample(pts, k, start);
    REQUIRE(got == oracle::fps(pts, k, start));
    CHECK(std::set<std::size_t>(got.begin(), got.end()).size() == k);
  }
}

TEST_CASE("chamfer examples") {
  const PointSet o{{0, 0, 0}};
  CHECK(chamfer_distance_sq(o, {{1, 0, 0}}, ChamferReduction::kSum) == 2.0);
  CHECK(chamfer_distance_sq(o, {{1, 0, 0}, {0, 0, 0}}, ChamferReduction::kSum) == 1.0);
  CHECK(chamfer_distance_sq(o, {{1, 0, 0}, {0, 0, 0}}, ChamferReduction::kMean) == 0.5);
  Rng rng = make_rng(3);
  const PointSet p = oracle::random_cloud(rng, 20);
  CHECK(chamfer_distance_sq(p, p) == 0.0);
  CHECK_THROWS_AS(chamfer_distance_sq({}, p), std::invalid_argument);
  CHECK_THROWS_AS(chamfer_distance_sq(p, {}), std::invalid_argument);
}

TEST_CASE("chamfer matches the exhaustive oracle and is symmetric") {
  Rng rng = make_rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const PointSet p = oracle::random_cloud(rng, 1 + uniform_index(rng, 30));
    const PointSet q = oracle::random_cloud(rng, 1 + uniform_index(rng, 30));
    for (bool mean : {false, true}) {
      const auto red = mean ? ChamferReduction::kMean : ChamferReduction::kSum;
      REQUIRE(chamfer_distance_sq(p, q, red) == oracle::chamfer(p, q, mean));
      CHECK(chamfer_distance_sq(p, q, red) == Approx(chamfer_distance_sq(q, p, red)).epsilon(1e-12));
    }
    CHECK(chamfer_distance_sq(p, q) > 0.0);
  }
}

TEST_CASE("normalize_point_count regimes") {
  Rng rng = make_rng(5);
  const PointSet three{{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
  const PointSet up = normalize_point_count(three, 8, rng);
  REQUIRE(up.size() == 8);
  for (std::size_t i = 0; i < 3; ++i) CHECK(up[i] == three[i]);
  for (const auto& p : up) CHECK(std::find(three.begin(), three.end(), p) != three.end());

  CHECK(normalize_point_count(three, 3, rng) == three);

  PointSet ten;
  for (int i = 0; i < 10; ++i) ten.emplace_back(i, 0, 0);
  const IndexList idx = farthest_point_sample(ten, 2, 0);
  CHECK(idx == IndexList{0, 9});
  for (int trial = 0; trial < 20; ++trial) {
    const PointSet down = normalize_point_count(ten, 2, rng);
    REQUIRE(down.size() == 2);
    // Whatever the random start, FPS on a line always reaches an endpoint.
    CHECK((down[1].x() == 0.0 || down[1].x() == 9.0));
  }
  CHECK_THROWS_AS(normalize_point_count({}, 4, rng), std::invalid_argument);
  CHECK_THROWS_AS(normalize_point_count(three, 0, rng), std::invalid_argument);
}

TEST_CASE("geometry_weight contract") {
  Rng rng = make_rng(6);
  const PointSet p = oracle::random_cloud(rng, 40);
  CHECK(geometry_weight(p, p, 40, 0.0, ChamferReduction::kMean, rng) == 1.0);
  CHECK(geometry_weight(p, p, 8, 0.0, ChamferReduction::kMean, rng) == 1.0);
  CHECK(geometry_weight(p, p, 500, 0.0, ChamferReduction::kSum, rng) == 1.0);
  CHECK(geometry_weight({}, p, 500, 0.0, ChamferReduction::kMean, rng) == 0.0);
  CHECK(geometry_weight(p, {}, 500, 0.3, ChamferReduction::kMean, rng) == 0.3);
  const double w = geometry_weight({{0, 0, 0}}, {{1, 0, 0}}, 1, 0.0, ChamferReduction::kSum, rng);
  CHECK(std::abs(w - std::exp(-2.0)) <= 1e-12);
  CHECK_THROWS_AS(geometry_weight(p, p, 8, 1.5, ChamferReduction::kMean, rng), std::invalid_argument);
}

TEST_CASE("geometry_weight is non-increasing as one set drifts away") {
  Rng rng = make_rng(7);
  const PointSet base = oracle::random_cloud(rng, 12);
  double prev = 2.0;
  for (int step = 0; step <= 10; ++step) {
    PointSet moved = base;
    for (auto& q : moved) q.x() += 0.1 * step;
    Rng r = make_rng(1);
    const double w = geometry_weight(base, moved, 12, 0.0, ChamferReduction::kMean, r);
    CHECK(w >= 0.0);
    CHECK(w <= 1.0);
    CHECK(w <= prev);
    prev = w;
  }
}

TEST_CASE("aabb iou and overlap examples") {
  CHECK(aabb_iou(unit_cube(), unit_cube()) == 1.0);
  CHECK(aabb_iou(unit_cube(), unit_cube(0.5)) == Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(aabb_iou(unit_cube(), unit_cube(3.0)) == 0.0);
  CHECK(aabb_overlaps(unit_cube(), unit_cube()));
  CHECK_FALSE(aabb_overlaps(unit_cube(), unit_cube(1.0)));
  CHECK(aabb_overlaps(unit_cube(), unit_cube(0.5)));
}

TEST_CASE("aabb iou agrees with a Monte-Carlo volume estimate") {
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Aabb a{{uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)},
                 {uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5)}};
    const Aabb b{{uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)},
                 {uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5)}};
    const Point3 lo = a.min_corner().cwiseMin(b.min_corner());
    const Point3 hi = a.max_corner().cwiseMax(b.max_corner());
    std::size_t in_a = 0, in_b = 0, in_both = 0;
    const std::size_t samples = 1000000;
    for (std::size_t i = 0; i < samples; ++i) {
      const Point3 p{uniform(rng, lo.x(), hi.x()), uniform(rng, lo.y(), hi.y()), uniform(rng, lo.z(), hi.z())};
      const bool ia = point_in_box(p, a), ib = point_in_box(p, b);
      in_a += ia;
      in_b += ib;
      in_both += ia && ib;
    }
    const double mc = static_cast<double>(in_both) / static_cast<double>(in_a + in_b - in_both);
    const double iou = aabb_iou(a, b);
    CHECK(iou == aabb_iou(b, a));
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
    CHECK(std::abs(mc - iou) <= 0.02 * std::max(iou, 0.05));
  }
}

TEST_CASE("crop keeps closed-box members in order") {
  Rng rng = make_rng(9);
  const PointSet cloud = oracle::random_cloud(rng, 50);
  const auto [all, idx] = crop_points_in_box(cloud, {{0.5, 0.5, 0.5}, {2, 2, 2}});
  CHECK(all == cloud);
  for (std::size_t i = 0; i < idx.size(); ++i) CHECK(idx[i] == i);
  CHECK(crop_points_in_box(cloud, {{50, 50, 50}, {1, 1, 1}}).first.empty());
  const auto [one, one_idx] = crop_points_in_box({{0, 0, 0}, {2, 2, 2}}, unit_cube());
  CHECK(one == PointSet{{0, 0, 0}});
  CHECK(one_idx == IndexList{0});
  const auto edge = crop_points_in_box({{0.5, 0.5, -0.5}}, unit_cube());
  CHECK(edge.first.size() == 1);
}

TEST_CASE("flip and scale transforms") {
  const PointSet pts{{1, 2, 3}};
  CHECK(apply_transform(pts, AugRecord::identity()) == pts);
  AugRecord fx;
  fx.flip_x = true;
  CHECK(apply_transform(pts, fx) == PointSet{{-1, 2, 3}});
  AugRecord s2;
  s2.scale = 2.0;
  const Aabb t = transform_box(unit_cube(1.0), s2);
  CHECK(t.center == Point3(2, 0, 0));
  CHECK(t.size == Point3(2, 2, 2));
  AugRecord flips;
  flips.flip_x = flips.flip_y = true;
  flips.scale = 1.1;
  CHECK(transform_box(unit_cube(), flips).size == Point3::Constant(1.1));
  AugRecord bad;
  bad.scale = 0.0;
  CHECK_THROWS_AS(apply_transform(pts, bad), std::invalid_argument);
}

TEST_CASE("transforms round-trip within 1e-9") {
  Rng rng = make_rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    AugRecord aug;
    aug.flip_x = bernoulli(rng, 0.5);
    aug.flip_y = bernoulli(rng, 0.5);
    aug.scale = uniform(rng, 0.85, 1.15);
    const PointSet cloud = oracle::random_cloud(rng, 30, 10.0);
    const PointSet a = apply_transform(inverse_transform(cloud, aug), aug);
    const PointSet b = inverse_transform(apply_transform(cloud, aug), aug);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      CHECK((a[i] - cloud[i]).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK((b[i] - cloud[i]).cwiseAbs().maxCoeff() <= 1e-9);
    }
    const Aabb box{{uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, 0, 2)}, {0.7, 1.1, 0.4}};
    const Aabb back = inverse_transform_box(transform_box(box, aug), aug);
    CHECK((back.center - box.center).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((back.size - box.size).cwiseAbs().maxCoeff() <= 1e-9);
  }
}
