#include <catch_amalgamated.hpp>

#include <cmath>

#include "dpke/ssl.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace dpke;
using Catch::Approx;

namespace {

Proposal make_proposal(const Point3& center, const Point3& size, double obj, int dim = 192, int classes = 3) {
  Proposal p;
  p.anchor = center;
  p.center = center;
  p.size = size;
  p.objectness_logit = std::log(obj / (1.0 - obj));
  p.objectness = obj;
  p.class_logits = Vector::Zero(classes);
  p.iou_logit = 0.0;
  p.iou_est = 0.5;
  p.feature_z = Vector::Zero(dim);
  return p;
}

ForwardResult bare_result(std::vector<Proposal> props) {
  ForwardResult fr;
  fr.proposals = std::move(props);
  fr.trace.seed_pos = Matrix::Zero(0, 3);
  fr.trace.votes = Matrix::Zero(0, 3);
  return fr;
}

/// A dense grid of points filling [0, 4]^2 x [0, 2].
PointSet grid_cloud() {
  PointSet out;
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j <= 20; ++j)
      for (int k = 0; k <= 10; ++k) out.emplace_back(0.2 * i, 0.2 * j, 0.2 * k);
  return out;
}

}  // namespace

TEST_CASE("huber values and continuity at delta") {
  CHECK(huber(0.5, 1.0) == 0.125);
  CHECK(huber(2.0, 1.0) == 1.5);
  CHECK(huber(-2.0, 1.0) == 1.5);
  CHECK(huber_grad(2.0, 1.0) == 1.0);
  CHECK(huber_grad(-0.25, 1.0) == -0.25);
  for (double delta : {0.5, 1.0, 2.0}) {
    const double below = delta - 1e-9, above = delta + 1e-9;
    CHECK(std::abs(huber(above, delta) - huber(below, delta)) < 1e-8);
    CHECK(std::abs(huber_grad(above, delta) - huber_grad(below, delta)) < 1e-8);
  }
}

TEST_CASE("anchor-distance assignment bands") {
  const std::vector<Aabb> boxes{{{0, 0, 0}, {1, 1, 1}}, {{5, 5, 0}, {1, 1, 1}}};
  std::vector<Proposal> props{make_proposal({0, 0, 0}, {1, 1, 1}, 0.5),
                              make_proposal({2.5, 2.5, 0}, {1, 1, 1}, 0.5),
                              make_proposal({0.45, 0, 0}, {1, 1, 1}, 0.5),
                              make_proposal({5, 5.2, 0}, {1, 1, 1}, 0.5)};
  // The regressed center plays no role; only the anchor does.
  props[0].center = Point3(9, 9, 9);
  const Assignment asg = assign_targets(props, boxes);
  CHECK(asg.label == std::vector<int>{0, Assignment::kNegative, Assignment::kIgnored, 1});
  CHECK(asg.positive_count() == 2);

  const std::vector<Aabb> twins{{{1, 0, 0}, {1, 1, 1}}, {{-1, 0, 0}, {1, 1, 1}}};
  AssignConfig wide;
  wide.positive_radius = 1.5;
  wide.negative_radius = 2.0;
  CHECK(assign_targets({make_proposal({0, 0, 0}, {1, 1, 1}, 0.5)}, twins, wide).label[0] == 0);

  const Assignment none = assign_targets(props, {});
  for (int l : none.label) CHECK(l == Assignment::kNegative);
}

TEST_CASE("supervised loss closed forms") {
  const std::vector<Annotation> gts{{1, {{0, 0, 0}, {1, 1, 1}}}};
  SECTION("objectness 0.5 everywhere gives ln 2") {
    const ForwardResult fr = bare_result({make_proposal({0, 0, 0}, {1, 1, 1}, 0.5),
                                          make_proposal({3, 0, 0}, {1, 1, 1}, 0.5)});
    const auto t = make_targets(fr, gts);
    const auto terms = supervised_loss(fr, t, {}, 1.0, true);
    CHECK(terms.objectness == Approx(std::log(2.0)).epsilon(1e-14));
  }
  SECTION("center error (2,0,0) gives 0.5") {
    Proposal p = make_proposal({0, 0, 0}, {1, 1, 1}, 0.5);
    p.center = Point3(2, 0, 0);
    const ForwardResult fr = bare_result({p});
    const auto terms = supervised_loss(fr, make_targets(fr, gts), {}, 1.0, true);
    CHECK(terms.center == Approx(0.5).epsilon(1e-15));
    CHECK(terms.size == 0.0);
  }
  SECTION("perfect predictions") {
    Proposal pos = make_proposal({0, 0, 0}, {1, 1, 1}, 1.0 - 1e-12);
    pos.class_logits << -30, 30, -30;
    pos.iou_est = 1.0;
    Proposal neg = make_proposal({4, 0, 0}, {1, 1, 1}, 1e-12);
    const ForwardResult fr = bare_result({pos, neg});
    const auto terms = supervised_loss(fr, make_targets(fr, gts), {}, 1.0, true);
    CHECK(terms.center == 0.0);
    CHECK(terms.size == 0.0);
    CHECK(terms.iou == 0.0);
    CHECK(terms.objectness < 1e-10);
    CHECK(terms.cls < 1e-20);
  }
  SECTION("no contributing proposals") {
    const ForwardResult fr = bare_result({make_proposal({0.45, 0, 0}, {1, 1, 1}, 0.5)});
    const auto terms = supervised_loss(fr, make_targets(fr, gts), {}, 1.0, true);
    CHECK(terms.objectness == 0.0);
    CHECK(terms.cls == 0.0);
    CHECK(terms.vote == 0.0);
  }
}

TEST_CASE("strict pseudo-label filter") {
  auto confident = [](double obj, double cls_prob, double iou) {
    Proposal p = make_proposal({1, 1, 1}, {1, 1, 1}, obj, 8, 2);
    // Two classes: softmax prob of the winner is sigmoid(l0 - l1).
    p.class_logits << std::log(cls_prob / (1.0 - cls_prob)), 0.0;
    p.iou_est = iou;
    return p;
  };
  CHECK(filter_pseudo_labels({confident(0.95, 0.95, 0.5)}).size() == 1);
  CHECK(filter_pseudo_labels({confident(0.85, 0.99, 0.9)}).empty());
  CHECK(filter_pseudo_labels({confident(0.95, 0.85, 0.9)}).empty());
  CHECK(filter_pseudo_labels({confident(0.95, 0.95, 0.2)}).empty());
  CHECK(filter_pseudo_labels({}).empty());
  const auto kept = filter_pseudo_labels({confident(0.95, 0.95, 0.5)});
  CHECK(kept[0].class_id == 0);
  CHECK(kept[0].class_confidence == Approx(0.95).epsilon(1e-12));

  // Kept set is a subset of the tau_obj-gated set.
  Rng rng = make_rng(4);
  for (int i = 0; i < 500; ++i) {
    const Proposal p = confident(uniform(rng, 0.01, 0.99), uniform(rng, 0.5, 0.99), uniform01(rng));
    if (!filter_pseudo_labels({p}).empty()) CHECK(p.objectness >= 0.6);
  }
}

TEST_CASE("feature matching closed forms") {
  const PointSet cloud = grid_cloud();
  const Aabb box{{2, 2, 1}, {1, 1, 1}};
  Proposal t = make_proposal(box.center, box.size, 0.8);
  Proposal s = t;
  FeatureMatchConfig cfg;
  Rng rng = make_rng(1);

  auto r = feature_matching_loss({s}, {t}, cloud, AugRecord::identity(), cfg, rng);
  CHECK(r.loss == 0.0);
  CHECK(r.gated == 1);
  CHECK(r.weights[0] == 1.0);

  s.feature_z.setConstant(2.0);
  r = feature_matching_loss({s}, {t}, cloud, AugRecord::identity(), cfg, rng);
  CHECK(r.loss == Approx(1.5).epsilon(1e-15));

  // Same pair seen through a strong augmentation of the student frame.
  AugRecord aug;
  aug.flip_x = true;
  aug.scale = 1.1;
  Proposal s_aug = s;
  s_aug.center = transform_box(box, aug).center;
  s_aug.size = transform_box(box, aug).size;
  r = feature_matching_loss({s_aug}, {t}, cloud, aug, cfg, rng);
  CHECK(r.weights[0] == Approx(1.0).epsilon(1e-12));
  CHECK(r.loss == Approx(1.5).epsilon(1e-12));

  Proposal low = t;
  low.objectness = 0.3;
  r = feature_matching_loss({s}, {low}, cloud, AugRecord::identity(), cfg, rng);
  CHECK(r.loss == 0.0);
  CHECK(r.gated == 0);

  CHECK_THROWS_AS(feature_matching_loss({s, s}, {t}, cloud, AugRecord::identity(), cfg, rng),
                  std::invalid_argument);

  cfg.weight_mode = WeightMode::kOff;
  CHECK(feature_matching_loss({s}, {t}, cloud, AugRecord::identity(), cfg, rng).loss == 0.0);
  cfg.weight_mode = WeightMode::kHighChamfer;
  CHECK(feature_matching_loss({s}, {t}, cloud, AugRecord::identity(), cfg, rng).loss == 0.0);
  cfg.weight_mode = WeightMode::kConstant;
  Proposal far = s;
  far.center = Point3(50, 50, 50);
  CHECK(feature_matching_loss({far}, {t}, cloud, AugRecord::identity(), cfg, rng).loss == Approx(1.5));
}

TEST_CASE("feature matching ignores teachers below the gate") {
  const PointSet cloud = grid_cloud();
  Rng rng = make_rng(2);
  FeatureMatchConfig cfg;
  std::vector<Proposal> st, te;
  for (int k = 0; k < 6; ++k) {
    const Point3 c(uniform(rng, 0.5, 3.5), uniform(rng, 0.5, 3.5), 1.0);
    Proposal t = make_proposal(c, {1, 1, 1}, k % 2 ? 0.9 : 0.3);
    Proposal s = make_proposal(c + Point3(0.1, 0, 0), {1, 1, 1}, 0.5);
    for (int i = 0; i < 192; ++i) {
      t.feature_z[i] = normal(rng);
      s.feature_z[i] = normal(rng);
    }
    te.push_back(t);
    st.push_back(s);
  }
  Rng r0 = make_rng(9);
  const double base = feature_matching_loss(st, te, cloud, AugRecord::identity(), cfg, r0).loss;
  CHECK(base > 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto perturbed = te;
    for (auto& t : perturbed) {
      if (t.objectness >= cfg.tau_obj) continue;
      t.center += Point3(normal(rng), normal(rng), 0);
      for (int i = 0; i < 192; ++i) t.feature_z[i] = normal(rng, 0, 5);
      t.objectness = uniform(rng, 0.0, 0.59);
    }
    Rng r1 = make_rng(9);
    CHECK(feature_matching_loss(st, perturbed, cloud, AugRecord::identity(), cfg, r1).loss == base);
  }
  for (auto& t : te) t.objectness = 0.59;
  Rng r2 = make_rng(9);
  CHECK(feature_matching_loss(st, te, cloud, AugRecord::identity(), cfg, r2).loss == 0.0);
}

TEST_CASE("LCD weighting decreases with Chamfer distance") {
  const PointSet cloud = grid_cloud();
  Rng rng = make_rng(3);
  FeatureMatchConfig cfg;
  cfg.target_points = 64;
  std::size_t checked = 0;
  for (int pair = 0; pair < 1000; ++pair) {
    const Point3 c(uniform(rng, 1.0, 3.0), uniform(rng, 1.0, 3.0), 1.0);
    Proposal t = make_proposal(c, {1, 1, 1}, 0.9);
    Proposal near = make_proposal(c, {1, 1, 1}, 0.5);
    for (int i = 0; i < 192; ++i) near.feature_z[i] = uniform(rng, -1, 1);
    Proposal farther = near;
    const double shift = uniform(rng, 0.05, 0.4);
    near.center.x() += shift;
    farther.center.x() += shift + uniform(rng, 0.25, 0.5);
    Rng a = make_rng(7, {static_cast<std::uint64_t>(pair)}), b = a;
    const auto rn = feature_matching_loss({near}, {t}, cloud, AugRecord::identity(), cfg, a);
    const auto rf = feature_matching_loss({farther}, {t}, cloud, AugRecord::identity(), cfg, b);
    const PointSet pt = crop_points_in_box(cloud, t.box()).first;
    const double cd_near = chamfer_distance_sq(pt, crop_points_in_box(cloud, near.box()).first);
    const double cd_far = chamfer_distance_sq(pt, crop_points_in_box(cloud, farther.box()).first);
    REQUIRE(cd_far > cd_near);
    CHECK(rf.loss < rn.loss);
    ++checked;
  }
  CHECK(checked == 1000);
}

TEST_CASE("total loss combination") {
  SupervisedTerms lab, pseudo;
  lab.objectness = 0.7;
  lab.center = 0.2;
  pseudo.cls = 0.4;
  LossCoefficients coef;
  coef.lambda_pseudo = 0.5;
  coef.lambda_feature = 2.0;
  const auto b = total_loss(lab, pseudo, 0.3, coef);
  CHECK(b.total == lab.weighted(coef.weights) + 0.5 * pseudo.weighted(coef.weights) + 2.0 * 0.3);
  coef.lambda_feature = 0.0;
  CHECK(total_loss(lab, pseudo, 0.3, coef).total == lab.weighted(coef.weights) + 0.5 * pseudo.weighted(coef.weights));
  CHECK(total_loss(lab, {}, 0.0, coef).total == lab.weighted(coef.weights));
  CHECK(total_loss({}, {}, 0.0, coef).total == 0.0);
  CHECK(b.finite());
}

TEST_CASE("full objective gradients match finite differences") {
  const auto samples = gradcheck::run(5, 6, 77);
  REQUIRE(samples.size() == 30);
  std::size_t nonzero = 0;
  for (const auto& s : samples) {
    INFO("scene " << s.scene << " param " << s.flat << " analytic " << s.analytic << " numeric " << s.numeric);
    CHECK(s.rel_error < 1e-4);
    nonzero += s.analytic != 0.0;
  }
  CHECK(nonzero >= 10);
}
