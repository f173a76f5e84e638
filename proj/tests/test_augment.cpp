#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <numeric>

#include "dpke/augment.hpp"
#include "oracles.hpp"

using namespace dpke;
using Catch::Approx;

namespace {

Scene box_scene(const std::vector<std::pair<int, Aabb>>& boxes, int per_box) {
  Scene s;
  s.id = "t";
  Rng rng = make_rng(1);
  for (const auto& [cls, b] : boxes) {
    s.annotations.push_back({cls, b});
    for (int i = 0; i < per_box; ++i) {
      const Point3 lo = b.min_corner(), hi = b.max_corner();
      s.points.emplace_back(uniform(rng, lo.x(), hi.x()), uniform(rng, lo.y(), hi.y()), uniform(rng, lo.z(), hi.z()));
    }
  }
  return s;
}

ClassStats stats_from(const std::vector<double>& logits) {
  ClassStats st = ClassStats::make(static_cast<int>(logits.size()));
  for (std::size_t c = 0; c < logits.size(); ++c) st.observe(static_cast<int>(c), logits[c]);
  return st;
}

}  // namespace

TEST_CASE("proposal bank construction") {
  const Scene s = box_scene({{0, {{1, 1, 0.5}, {1, 1, 1}}}, {1, {{3, 3, 0.5}, {1, 1, 1}}}, {2, {{5, 5, 0.5}, {1, 1, 1}}}}, 20);
  const ProposalBank bank = build_proposal_bank(std::vector<Scene>{s}, 3);
  CHECK(bank.size() == 3);
  CHECK(bank.warnings.empty());
  for (const auto& cls : bank.by_class)
    for (const auto& inst : cls) {
      for (const auto& p : inst.points) CHECK(point_in_box(p, inst.centered_box()));
      const Aabb orig = s.annotations[static_cast<std::size_t>(inst.class_id)].box;
      for (const auto& p : inst.points) CHECK(point_in_box(p + orig.center, orig));
    }

  Scene sparse = box_scene({{0, {{1, 1, 0.5}, {1, 1, 1}}}}, 20);
  sparse.annotations.push_back({1, {{6, 6, 0.5}, {1, 1, 1}}});
  sparse.points.emplace_back(6, 6, 0.5);
  sparse.points.emplace_back(6.1, 6, 0.5);
  const ProposalBank b2 = build_proposal_bank(std::vector<Scene>{sparse}, 2);
  CHECK(b2.size() == 1);
  CHECK(b2.by_class[1].empty());
  CHECK(b2.warnings.size() == 1);
  CHECK_THROWS_AS(build_proposal_bank(std::vector<Scene>{}, 2), std::invalid_argument);
}

TEST_CASE("class statistics follow the momentum update") {
  ClassStats st = ClassStats::make(3);
  const ClassStats untouched = st;
  update_class_stats(st, {}, Assignment{}, {});
  CHECK(st.mean_logit == untouched.mean_logit);

  st.observe(1, 2.0);
  CHECK(st.mean_logit[1] == 2.0);
  st.observe(1, 4.0);
  CHECK(st.mean_logit[1] == Approx(0.95 * 2.0 + 0.05 * 4.0).epsilon(1e-15));

  ClassStats conv = ClassStats::make(1);
  conv.observe(0, 0.0);
  for (int i = 1; i <= 200; ++i) {
    conv.observe(0, 3.0);
    CHECK(std::abs(conv.mean_logit[0] - 3.0) == Approx(3.0 * std::pow(0.95, i)).epsilon(1e-9));
  }

  Proposal p;
  p.class_logits = Vector::Zero(3);
  p.class_logits << 0.1, 0.2, 0.7;
  Assignment asg;
  asg.label = {0};
  ClassStats s2 = ClassStats::make(3);
  update_class_stats(s2, {p}, asg, {{2, Aabb{}}});
  CHECK(s2.mean_logit[2] == 0.7);
  CHECK(s2.count[2] == 1);
  CHECK(s2.count[0] == 0);
}

TEST_CASE("class probabilities") {
  const auto hls = class_probabilities(stats_from({2, 5, 8}), SamplingMode::kHighLogit);
  CHECK(hls[0] == 0.5);
  CHECK(hls[1] == Approx(0.6224593312018546).epsilon(1e-12));
  CHECK(hls[2] == Approx(0.7310585786300049).epsilon(1e-12));
  const auto lls = class_probabilities(stats_from({2, 5, 8}), SamplingMode::kLowLogit);
  CHECK(lls == std::vector<double>(hls.rbegin(), hls.rend()));
  for (double w : class_probabilities(stats_from({3, 3, 3}), SamplingMode::kHighLogit)) CHECK(w == 0.5);
  for (double w : class_probabilities(stats_from({2, 5, 8}), SamplingMode::kUniform)) CHECK(w == 0.5);

  Rng rng = make_rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(6);
    for (auto& l : logits) l = normal(rng, 0, 3);
    const auto w = class_probabilities(stats_from(logits), SamplingMode::kHighLogit);
    for (double x : w) {
      CHECK(x >= 0.5);
      CHECK(x <= 0.7310585786300049);
    }
    std::vector<std::size_t> by_w(6), by_l(6);
    std::iota(by_w.begin(), by_w.end(), 0);
    std::iota(by_l.begin(), by_l.end(), 0);
    std::stable_sort(by_w.begin(), by_w.end(), [&](auto a, auto b) { return w[a] < w[b]; });
    std::stable_sort(by_l.begin(), by_l.end(), [&](auto a, auto b) { return logits[a] < logits[b]; });
    CHECK(by_w == by_l);
  }
}

TEST_CASE("sampling frequencies follow the categorical normalization") {
  const Scene s = box_scene({{0, {{1, 1, 0.5}, {1, 1, 1}}}, {1, {{3, 3, 0.5}, {1, 1, 1}}}}, 20);
  const ProposalBank bank = build_proposal_bank(std::vector<Scene>{s}, 2);
  Rng rng = make_rng(8);
  CHECK(sample_instances(bank, {0.5, 0.5}, 0, rng).empty());

  for (const std::vector<double>& probs : {std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.7310585786300049}}) {
    const std::size_t draws = 100000;
    std::size_t ones = 0;
    for (const BankInstance* inst : sample_instances(bank, probs, draws, rng)) ones += inst->class_id == 1;
    const double expected = probs[1] / (probs[0] + probs[1]);
    CHECK(std::abs(static_cast<double>(ones) / draws - expected) <= 0.01);
  }

  // Classes absent from the bank are never drawn.
  ProposalBank partial = bank;
  partial.by_class.push_back({});
  for (const BankInstance* inst : sample_instances(partial, {0.5, 0.5, 0.73}, 1000, rng)) CHECK(inst->class_id != 2);
}

TEST_CASE("insertion respects collisions") {
  const Scene s = box_scene({{0, {{1, 1, 0.5}, {1, 1, 1}}}, {1, {{3, 3, 0.5}, {0.8, 0.8, 0.8}}}}, 30);
  const ProposalBank bank = build_proposal_bank(std::vector<Scene>{s}, 2);
  Rng rng = make_rng(10);

  const InsertResult same = insert_instances(s, {}, s.boxes(), true, rng);
  CHECK(same.scene == s);

  std::vector<Aabb> tiles;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) tiles.push_back({{i + 0.5, j + 0.5, 1.0}, {1, 1, 2}});
  const auto picks = sample_instances(bank, {0.5, 0.5}, 4, rng);
  const InsertResult blocked = insert_instances(s, picks, tiles, true, rng);
  CHECK(blocked.inserted.empty());
  CHECK(blocked.dropped == 4);

  std::size_t total = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Aabb> collision;
    for (int k = 0; k < 6; ++k)
      collision.push_back({{uniform(rng, 1, 7), uniform(rng, 1, 7), 0.5}, {uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), 1}});
    const bool labeled = trial % 2 == 0;
    const auto inst = sample_instances(bank, {0.5, 0.7}, 4, rng);
    const InsertResult r = insert_instances(s, inst, collision, labeled, rng);
    total += r.inserted.size();
    CHECK(r.inserted.size() + r.dropped == inst.size());
    for (std::size_t i = 0; i < r.inserted.size(); ++i) {
      for (const auto& c : collision) REQUIRE_FALSE(aabb_overlaps(r.inserted[i].box, c));
      for (std::size_t j = i + 1; j < r.inserted.size(); ++j)
        REQUIRE_FALSE(aabb_overlaps(r.inserted[i].box, r.inserted[j].box));
      CHECK(r.inserted[i].box.min_corner().minCoeff() >= -1e-12);
      CHECK(r.inserted[i].box.max_corner().x() <= 8.0 + 1e-12);
    }
    CHECK(r.scene.points.size() >= s.points.size());
    CHECK(r.scene.annotations.size() == s.annotations.size() + (labeled ? r.inserted.size() : 0));
  }
  CHECK(total > 0);
}

TEST_CASE("weak augmentation") {
  Rng g = make_rng(2);
  Scene s;
  s.points = oracle::random_cloud(g, 100);
  s.annotations.push_back({0, Aabb{}});
  Rng a = make_rng(3), b = make_rng(3);
  const Scene x = weak_augment(s, 60, a);
  CHECK(x.points == weak_augment(s, 60, b).points);
  CHECK(x.points.size() == 60);
  CHECK(x.annotations == s.annotations);
  std::vector<Point3> pool = s.points;
  for (const auto& p : x.points) {
    auto it = std::find(pool.begin(), pool.end(), p);
    REQUIRE(it != pool.end());
    pool.erase(it);
  }
  Rng c = make_rng(4);
  const Scene perm = weak_augment(s, 100, c);
  auto key = [](const Point3& p) { return std::make_tuple(p.x(), p.y(), p.z()); };
  std::vector<std::tuple<double, double, double>> k1, k2;
  for (const auto& p : perm.points) k1.push_back(key(p));
  for (const auto& p : s.points) k2.push_back(key(p));
  std::sort(k1.begin(), k1.end());
  std::sort(k2.begin(), k2.end());
  CHECK(k1 == k2);
  Rng d = make_rng(5);
  CHECK(weak_augment(s, 150, d).points.size() == 150);
}

TEST_CASE("strong augmentation preserves order and inverts") {
  Rng g = make_rng(6);
  const PointSet cloud = oracle::random_cloud(g, 200, 8.0);
  CHECK(apply_transform(cloud, AugRecord::identity()) == cloud);
  std::map<bool, int> flips;
  for (int trial = 0; trial < 200; ++trial) {
    const auto [out, rec] = strong_augment(cloud, g);
    REQUIRE(out.size() == cloud.size());
    CHECK(rec.scale >= 0.85);
    CHECK(rec.scale <= 1.15);
    ++flips[rec.flip_x];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      CHECK(out[i] == transform_point(cloud[i], rec));
      CHECK((inverse_transform_point(out[i], rec) - cloud[i]).cwiseAbs().maxCoeff() <= 1e-9);
    }
  }
  CHECK(flips[true] > 60);
  CHECK(flips[false] > 60);
  CHECK_THROWS_AS(strong_augment({}, g), std::invalid_argument);
}
