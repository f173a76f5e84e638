#pragma once

// A small vote-based point-cloud detector with hand-written reverse mode.
//
//   cloud (N) --FPS--> seeds (M) --kNN relative coords + height--> seed MLP + max-pool
//     --> vote MLP (offsets) --> votes --FPS--> cluster centers (K)
//     --> mean-pool seed features whose vote lies within the cluster radius,
//         plus a constant geometry descriptor of the member seeds
//     --> three proposal layers (outputs concatenated into feature z)
//     --> heads: objectness, class logits, center offset from the mean member
//         vote, size (softplus), IoU.
//
// Index selections (both FPS stages, k-NN, cluster membership) are constants
// for differentiation. The IoU head reads a detached copy of the last proposal
// layer, so its loss only trains the head itself.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/geometry.hpp"
#include "dpke/random.hpp"

namespace dpke {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ArchConfig {
  int num_points = 1024;
  int num_seeds = 128;
  int num_proposals = 64;
  int num_classes = 6;
  int knn = 16;
  int seed_width = 32;
  int proposal_width = 64;
  double cluster_radius = 1.0;
  double neighbor_scale = 4.0;  // relative neighbor coordinates are multiplied by this

  static constexpr int kPointChannels = 4;  // scaled relative xyz + absolute height
  static constexpr int kGeometryDescriptor = 5;
  static constexpr int kProposalLayers = 3;
  int feature_dim() const { return kProposalLayers * proposal_width; }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline void validate_arch(const ArchConfig& a) {
  if (a.num_points < 1 || a.num_seeds < 1 || a.num_proposals < 1 || a.num_classes < 1 ||
      a.knn < 1 || a.seed_width < 1 || a.proposal_width < 1)
    throw std::invalid_argument("ArchConfig: all sizes must be positive");
  if (a.num_seeds > a.num_points || a.num_proposals > a.num_seeds || a.knn > a.num_points)
    throw std::invalid_argument("ArchConfig: require K <= M <= N and knn <= N");
  if (!(a.cluster_radius > 0.0)) throw std::invalid_argument("ArchConfig: radius must be > 0");
}

enum ParamId : int {
  kSeedW1, kSeedB1, kSeedW2, kSeedB2,
  kVoteW1, kVoteB1, kVoteW2, kVoteB2,
  kPropW1, kPropB1, kPropW2, kPropB2, kPropW3, kPropB3,
  kObjW, kObjB, kClsW, kClsB, kCtrW, kCtrB, kSizeW, kSizeB, kIouW, kIouB,
  kParamCount
};

inline const char* param_name(int id) {
  static constexpr std::array<const char*, kParamCount> names = {
      "seed.w1", "seed.b1", "seed.w2", "seed.b2", "vote.w1", "vote.b1", "vote.w2", "vote.b2",
      "prop.w1", "prop.b1", "prop.w2", "prop.b2", "prop.w3", "prop.b3", "head.obj.w",
      "head.obj.b", "head.cls.w", "head.cls.b", "head.ctr.w", "head.ctr.b", "head.size.w",
      "head.size.b", "head.iou.w", "head.iou.b"};
  return names.at(static_cast<std::size_t>(id));
}

/// Biases are stored as column vectors (rank 1 in checkpoints).
inline bool param_is_bias(int id) { return id % 2 == 1; }

/// Rows x cols of every tensor, in ParamId order.
inline std::vector<std::pair<int, int>> param_shapes(const ArchConfig& a) {
  const int s = a.seed_width, p = a.proposal_width, c = a.num_classes;
  const int pin = s + ArchConfig::kGeometryDescriptor;
  return {{s, ArchConfig::kPointChannels}, {s, 1}, {s, s}, {s, 1}, {s, s}, {s, 1}, {3, s}, {3, 1},
          {p, pin}, {p, 1}, {p, p}, {p, 1}, {p, p}, {p, 1}, {1, p}, {1, 1},
          {c, p}, {c, 1}, {3, p}, {3, 1}, {3, p}, {3, 1}, {1, p}, {1, 1}};
}

/// Named weight tensors. Also used for gradients and optimizer moments.
struct ModelParams {
  ArchConfig arch;
  std::vector<Matrix> tensors;

  Matrix& operator[](int id) { return tensors[static_cast<std::size_t>(id)]; }
  const Matrix& operator[](int id) const { return tensors[static_cast<std::size_t>(id)]; }

  static ModelParams zeros(const ArchConfig& arch) {
    ModelParams m;
    m.arch = arch;
    for (auto [r, c] : param_shapes(arch)) m.tensors.push_back(Matrix::Zero(r, c));
    return m;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  /// Flat addressing across all tensors (ParamId order, column-major within).
  double& scalar(std::size_t flat) {
    for (auto& t : tensors) {
      if (flat < static_cast<std::size_t>(t.size())) return t.data()[flat];
      flat -= static_cast<std::size_t>(t.size());
    }
    throw std::out_of_range("ModelParams::scalar");
  }
  double scalar(std::size_t flat) const { return const_cast<ModelParams*>(this)->scalar(flat); }

  bool same_shape(const ModelParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].rows() != o.tensors[i].rows() || tensors[i].cols() != o.tensors[i].cols())
        return false;
    return true;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.arch == b.arch) || !a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
      if (a.tensors[i] != b.tensors[i]) return false;
    return true;
  }
};

/// Uniform(-b, b) with b = sqrt(6 / fan_in) ahead of a ReLU and
/// sqrt(1 / fan_in) for linear outputs. Biases start at zero.
inline ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  validate_arch(arch);
  ModelParams p = ModelParams::zeros(arch);
  Rng rng = make_rng(seed, {0x1417});
  for (int id = 0; id < kParamCount; ++id) {
    if (param_is_bias(id)) continue;
    Matrix& w = p[id];
    const double fan_in = static_cast<double>(w.cols());
    const bool relu_follows = id == kSeedW1 || id == kSeedW2 || id == kVoteW1 || id == kPropW1 ||
                              id == kPropW2 || id == kPropW3;
    const double bound = std::sqrt((relu_follows ? 6.0 : 1.0) / fan_in);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = uniform(rng, -bound, bound);
  }
  return p;
}

struct FpsIndices {
  IndexList seed_stage;      // into the input cloud (N -> M)
  IndexList proposal_stage;  // into the votes (M -> K)
  friend bool operator==(const FpsIndices&, const FpsIndices&) = default;
};

struct Proposal {
  std::size_t index = 0;  // slot
  Point3 anchor = Point3::Zero();  // mean vote of the cluster; the box center is regressed from it
  Point3 center = Point3::Zero();
  Point3 size = Point3::Ones();
  double objectness = 0.5;
  double objectness_logit = 0.0;
  Vector class_logits;
  double iou_est = 0.5;
  double iou_logit = 0.0;
  Vector feature_z;

  Aabb box() const { return {center, size}; }
  int predicted_class() const {
    Eigen::Index best = 0;
    class_logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  /// Softmax probability of the arg-max class.
  double class_confidence() const {
    const double m = class_logits.maxCoeff();
    const double z = (class_logits.array() - m).exp().sum();
    return 1.0 / z;
  }
};

/// Intermediates kept for the backward pass.
struct ForwardTrace {
  ArchConfig arch;
  Matrix seed_pos;                       // M x 3
  std::vector<std::size_t> neighbors;    // M*k, row-major per seed
  Matrix rel;                            // M*k x 4
  Matrix seed_pre1, seed_pre2;           // M*k x S
  Matrix seed_feat;                      // M x S
  std::vector<int> pool_argmax;          // M*S, row index into M*k
  Matrix vote_pre1;                      // M x S
  Matrix vote_offset;                    // M x 3
  Matrix votes;                          // M x 3
  Matrix cluster_center;                 // K x 3, the FPS-selected votes
  Matrix anchor;                         // K x 3, mean vote of each cluster's members
  std::vector<std::vector<std::size_t>> members;  // per cluster, seed rows
  Matrix prop_in;                        // K x (S + G)
  Matrix prop_pre1, prop_pre2, prop_pre3;  // K x P
  Matrix size_raw;                       // K x 3
};

struct ForwardResult {
  std::vector<Proposal> proposals;
  FpsIndices fps;
  ForwardTrace trace;

  Point3 vote(std::size_t m) const { return trace.votes.row(static_cast<Eigen::Index>(m)).transpose(); }
  Point3 seed(std::size_t m) const {
    return trace.seed_pos.row(static_cast<Eigen::Index>(m)).transpose();
  }
};

/// Upstream gradients for every differentiable output of a forward pass.
struct OutputGrads {
  Vector objectness_logit;  // K
  Matrix class_logits;      // K x C
  Matrix center;            // K x 3
  Matrix size;              // K x 3
  Vector iou_logit;         // K
  Matrix feature;           // K x 3P
  Matrix votes;             // M x 3

  static OutputGrads zeros(const ArchConfig& a) {
    OutputGrads g;
    g.objectness_logit = Vector::Zero(a.num_proposals);
    g.class_logits = Matrix::Zero(a.num_proposals, a.num_classes);
    g.center = Matrix::Zero(a.num_proposals, 3);
    g.size = Matrix::Zero(a.num_proposals, 3);
    g.iou_logit = Vector::Zero(a.num_proposals);
    g.feature = Matrix::Zero(a.num_proposals, a.feature_dim());
    g.votes = Matrix::Zero(a.num_seeds, 3);
    return g;
  }

  OutputGrads& operator+=(const OutputGrads& o) {
    objectness_logit += o.objectness_logit;
    class_logits += o.class_logits;
    center += o.center;
    size += o.size;
    iou_logit += o.iou_logit;
    feature += o.feature;
    votes += o.votes;
    return *this;
  }
  OutputGrads& operator*=(double s) {
    objectness_logit *= s;
    class_logits *= s;
    center *= s;
    size *= s;
    iou_logit *= s;
    feature *= s;
    votes *= s;
    return *this;
  }
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

constexpr double kMinSize = 1e-4;

inline Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

inline Matrix relu_mask(const Matrix& pre, const Matrix& upstream) {
  return (pre.array() > 0.0).select(upstream, 0.0);
}

inline Matrix affine(const Matrix& in, const Matrix& w, const Matrix& b) {
  Matrix out = in * w.transpose();
  out.rowwise() += b.col(0).transpose();
  return out;
}

inline Matrix to_matrix(const PointSet& pts, const IndexList& idx) {
  Matrix m(static_cast<Eigen::Index>(idx.size()), 3);
  for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[idx[i]].transpose();
  return m;
}

inline PointSet rows_to_points(const Matrix& m) {
  PointSet out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.emplace_back(m(i, 0), m(i, 1), m(i, 2));
  return out;
}

inline void check_indices(const IndexList& idx, std::size_t expected_len, std::size_t limit,
                          const char* stage) {
  if (idx.size() != expected_len)
    throw std::invalid_argument(std::string("reused FPS indices (") + stage + ") have wrong length");
  for (std::size_t i : idx)
    if (i >= limit)
      throw std::invalid_argument(std::string("reused FPS index out of range (") + stage + ")");
}

}  // namespace detail

/// Runs the detector on exactly arch.num_points points. With `reuse` both FPS
/// stages take the given indices verbatim; otherwise their start indices are
/// drawn from `rng` (index 0 when rng is null).
inline ForwardResult forward(const ModelParams& params, const PointSet& cloud,
                             const FpsIndices* reuse = nullptr, Rng* rng = nullptr) {
  const ArchConfig& a = params.arch;
  if (static_cast<int>(cloud.size()) != a.num_points)
    throw std::invalid_argument("forward: expected " + std::to_string(a.num_points) +
                                " points, got " + std::to_string(cloud.size()));
  const std::size_t n = cloud.size();
  const std::size_t m_seeds = static_cast<std::size_t>(a.num_seeds);
  const std::size_t k_props = static_cast<std::size_t>(a.num_proposals);
  const std::size_t knn = static_cast<std::size_t>(a.knn);
  const Eigen::Index sw = a.seed_width;
  const Eigen::Index pw = a.proposal_width;

  ForwardResult res;
  ForwardTrace& tr = res.trace;
  tr.arch = a;

  // Seed sampling.
  if (reuse) {
    detail::check_indices(reuse->seed_stage, m_seeds, n, "seed stage");
    res.fps.seed_stage = reuse->seed_stage;
  } else {
    const std::size_t start = rng ? uniform_index(*rng, n) : 0;
    res.fps.seed_stage = farthest_point_sample(cloud, m_seeds, start);
  }
  tr.seed_pos = detail::to_matrix(cloud, res.fps.seed_stage);

  // k-NN grouping, ties by index.
  tr.neighbors.resize(m_seeds * knn);
  tr.rel.resize(static_cast<Eigen::Index>(m_seeds * knn), ArchConfig::kPointChannels);
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t m = 0; m < m_seeds; ++m) {
    const Point3& s = cloud[res.fps.seed_stage[m]];
    for (std::size_t i = 0; i < n; ++i) dist[i] = {squared_distance(cloud[i], s), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(knn), dist.end());
    for (std::size_t j = 0; j < knn; ++j) {
      const std::size_t idx = dist[j].second;
      tr.neighbors[m * knn + j] = idx;
      const Eigen::Index row = static_cast<Eigen::Index>(m * knn + j);
      tr.rel.row(row).head(3) = ((cloud[idx] - s) * a.neighbor_scale).transpose();
      tr.rel(row, 3) = cloud[idx].z();
    }
  }

  // Seed MLP and max-pool.
  tr.seed_pre1 = detail::affine(tr.rel, params[kSeedW1], params[kSeedB1]);
  tr.seed_pre2 = detail::affine(detail::relu(tr.seed_pre1), params[kSeedW2], params[kSeedB2]);
  tr.seed_feat.resize(static_cast<Eigen::Index>(m_seeds), sw);
  tr.pool_argmax.resize(m_seeds * static_cast<std::size_t>(sw));
  for (std::size_t m = 0; m < m_seeds; ++m) {
    for (Eigen::Index c = 0; c < sw; ++c) {
      std::size_t best_row = m * knn;
      double best = std::max(0.0, tr.seed_pre2(static_cast<Eigen::Index>(best_row), c));
      for (std::size_t j = 1; j < knn; ++j) {
        const std::size_t row = m * knn + j;
        const double v = std::max(0.0, tr.seed_pre2(static_cast<Eigen::Index>(row), c));
        if (v > best) {
          best = v;
          best_row = row;
        }
      }
      tr.seed_feat(static_cast<Eigen::Index>(m), c) = best;
      tr.pool_argmax[m * static_cast<std::size_t>(sw) + static_cast<std::size_t>(c)] =
          static_cast<int>(best_row);
    }
  }

  // Votes.
  tr.vote_pre1 = detail::affine(tr.seed_feat, params[kVoteW1], params[kVoteB1]);
  tr.vote_offset = detail::affine(detail::relu(tr.vote_pre1), params[kVoteW2], params[kVoteB2]);
  tr.votes = tr.seed_pos + tr.vote_offset;

  // Cluster sampling on votes.
  if (reuse) {
    detail::check_indices(reuse->proposal_stage, k_props, m_seeds, "proposal stage");
    res.fps.proposal_stage = reuse->proposal_stage;
  } else {
    const PointSet vote_pts = detail::rows_to_points(tr.votes);
    const std::size_t start = rng ? uniform_index(*rng, m_seeds) : 0;
    res.fps.proposal_stage = farthest_point_sample(vote_pts, k_props, start);
  }
  tr.cluster_center.resize(static_cast<Eigen::Index>(k_props), 3);
  for (std::size_t k = 0; k < k_props; ++k)
    tr.cluster_center.row(static_cast<Eigen::Index>(k)) =
        tr.votes.row(static_cast<Eigen::Index>(res.fps.proposal_stage[k]));

  // Cluster pooling.
  const double r2 = a.cluster_radius * a.cluster_radius;
  const Eigen::Index pin = sw + ArchConfig::kGeometryDescriptor;
  tr.members.assign(k_props, {});
  tr.prop_in = Matrix::Zero(static_cast<Eigen::Index>(k_props), pin);
  tr.anchor = Matrix::Zero(static_cast<Eigen::Index>(k_props), 3);
  const double expected_members = static_cast<double>(m_seeds) / static_cast<double>(k_props);
  for (std::size_t k = 0; k < k_props; ++k) {
    const Eigen::Index kk = static_cast<Eigen::Index>(k);
    const Point3 c = tr.cluster_center.row(kk).transpose();
    auto& mem = tr.members[k];
    for (std::size_t m = 0; m < m_seeds; ++m) {
      const Point3 v = tr.votes.row(static_cast<Eigen::Index>(m)).transpose();
      if (squared_distance(v, c) <= r2) mem.push_back(m);
    }
    if (mem.empty()) mem.push_back(res.fps.proposal_stage[k]);  // only under float round-off
    const double inv = 1.0 / static_cast<double>(mem.size());
    Point3 mean_pos = Point3::Zero();
    for (std::size_t m : mem) {
      tr.prop_in.row(kk).head(sw) += tr.seed_feat.row(static_cast<Eigen::Index>(m)) * inv;
      mean_pos += tr.seed_pos.row(static_cast<Eigen::Index>(m)).transpose() * inv;
      tr.anchor.row(kk) += tr.votes.row(static_cast<Eigen::Index>(m)) * inv;
    }
    Point3 spread = Point3::Zero();
    for (std::size_t m : mem)
      spread += (tr.seed_pos.row(static_cast<Eigen::Index>(m)).transpose() - mean_pos).cwiseAbs() * inv;
    tr.prop_in(kk, sw + 0) = spread.x();
    tr.prop_in(kk, sw + 1) = spread.y();
    tr.prop_in(kk, sw + 2) = spread.z();
    tr.prop_in(kk, sw + 3) = mean_pos.z();
    tr.prop_in(kk, sw + 4) = static_cast<double>(mem.size()) / expected_members;
  }

  // Proposal layers and heads.
  tr.prop_pre1 = detail::affine(tr.prop_in, params[kPropW1], params[kPropB1]);
  const Matrix z1 = detail::relu(tr.prop_pre1);
  tr.prop_pre2 = detail::affine(z1, params[kPropW2], params[kPropB2]);
  const Matrix z2 = detail::relu(tr.prop_pre2);
  tr.prop_pre3 = detail::affine(z2, params[kPropW3], params[kPropB3]);
  const Matrix z3 = detail::relu(tr.prop_pre3);

  const Matrix obj = detail::affine(z3, params[kObjW], params[kObjB]);
  const Matrix cls = detail::affine(z3, params[kClsW], params[kClsB]);
  const Matrix ctr = detail::affine(z3, params[kCtrW], params[kCtrB]);
  tr.size_raw = detail::affine(z3, params[kSizeW], params[kSizeB]);
  const Matrix iou = detail::affine(z3, params[kIouW], params[kIouB]);

  res.proposals.resize(k_props);
  for (std::size_t k = 0; k < k_props; ++k) {
    const Eigen::Index kk = static_cast<Eigen::Index>(k);
    Proposal& p = res.proposals[k];
    p.index = k;
    p.anchor = tr.anchor.row(kk).transpose();
    p.center = p.anchor + ctr.row(kk).transpose();
    for (int d = 0; d < 3; ++d) p.size[d] = detail::softplus(tr.size_raw(kk, d)) + detail::kMinSize;
    p.objectness_logit = obj(kk, 0);
    p.objectness = detail::sigmoid(p.objectness_logit);
    p.class_logits = cls.row(kk).transpose();
    p.iou_logit = iou(kk, 0);
    p.iou_est = detail::sigmoid(p.iou_logit);
    p.feature_z.resize(3 * pw);
    p.feature_z << z1.row(kk).transpose(), z2.row(kk).transpose(), z3.row(kk).transpose();
  }
  return res;
}

/// Exact reverse-mode gradients of sum(grads * outputs) with respect to the
/// parameters that produced `result`.
inline ModelParams backward(const ModelParams& params, const ForwardResult& result,
                            const OutputGrads& g) {
  const ForwardTrace& tr = result.trace;
  const ArchConfig& a = tr.arch;
  if (!(a == params.arch)) throw std::invalid_argument("backward: architecture mismatch");
  const Eigen::Index K = a.num_proposals, M = a.num_seeds, C = a.num_classes;
  const Eigen::Index pw = a.proposal_width, sw = a.seed_width;
  if (g.objectness_logit.size() != K || g.class_logits.rows() != K || g.class_logits.cols() != C ||
      g.center.rows() != K || g.size.rows() != K || g.iou_logit.size() != K ||
      g.feature.rows() != K || g.feature.cols() != 3 * pw || g.votes.rows() != M)
    throw std::invalid_argument("backward: output gradient shape mismatch");

  ModelParams grads = ModelParams::zeros(a);
  const Matrix z1 = detail::relu(tr.prop_pre1);
  const Matrix z2 = detail::relu(tr.prop_pre2);
  const Matrix z3 = detail::relu(tr.prop_pre3);

  // Heads.
  Matrix d_size_raw(K, 3);
  for (Eigen::Index k = 0; k < K; ++k)
    for (int d = 0; d < 3; ++d) d_size_raw(k, d) = g.size(k, d) * detail::sigmoid(tr.size_raw(k, d));

  Matrix dz3 = g.feature.middleCols(2 * pw, pw);
  auto head = [&](int w_id, int b_id, const Matrix& d_out, bool to_trunk) {
    grads[w_id] += d_out.transpose() * z3;
    grads[b_id] += d_out.colwise().sum().transpose();
    if (to_trunk) dz3 += d_out * params[w_id];
  };
  head(kObjW, kObjB, Matrix(g.objectness_logit), true);
  head(kClsW, kClsB, g.class_logits, true);
  head(kCtrW, kCtrB, g.center, true);
  head(kSizeW, kSizeB, d_size_raw, true);
  head(kIouW, kIouB, Matrix(g.iou_logit), false);

  // Proposal layers.
  const Matrix d_pre3 = detail::relu_mask(tr.prop_pre3, dz3);
  grads[kPropW3] += d_pre3.transpose() * z2;
  grads[kPropB3] += d_pre3.colwise().sum().transpose();
  const Matrix dz2 = d_pre3 * params[kPropW3] + g.feature.middleCols(pw, pw);
  const Matrix d_pre2 = detail::relu_mask(tr.prop_pre2, dz2);
  grads[kPropW2] += d_pre2.transpose() * z1;
  grads[kPropB2] += d_pre2.colwise().sum().transpose();
  const Matrix dz1 = d_pre2 * params[kPropW2] + g.feature.leftCols(pw);
  const Matrix d_pre1 = detail::relu_mask(tr.prop_pre1, dz1);
  grads[kPropW1] += d_pre1.transpose() * tr.prop_in;
  grads[kPropB1] += d_pre1.colwise().sum().transpose();
  const Matrix d_in = d_pre1 * params[kPropW1];

  // Cluster pooling back to seed features; center gradients back to votes.
  Matrix d_feat = Matrix::Zero(M, sw);
  Matrix d_votes = g.votes;
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& mem = tr.members[static_cast<std::size_t>(k)];
    const double inv = 1.0 / static_cast<double>(mem.size());
    for (std::size_t m : mem) {
      d_feat.row(static_cast<Eigen::Index>(m)) += d_in.row(k).head(sw) * inv;
      d_votes.row(static_cast<Eigen::Index>(m)) += g.center.row(k) * inv;
    }
  }

  // Vote MLP (votes = seeds + offsets, seeds constant).
  const Matrix vote_h1 = detail::relu(tr.vote_pre1);
  grads[kVoteW2] += d_votes.transpose() * vote_h1;
  grads[kVoteB2] += d_votes.colwise().sum().transpose();
  const Matrix d_vote_pre1 = detail::relu_mask(tr.vote_pre1, d_votes * params[kVoteW2]);
  grads[kVoteW1] += d_vote_pre1.transpose() * tr.seed_feat;
  grads[kVoteB1] += d_vote_pre1.colwise().sum().transpose();
  d_feat += d_vote_pre1 * params[kVoteW1];

  // Max-pool routes to the arg-max row; a pooled zero came from a ReLU floor.
  Matrix d_seed_h2 = Matrix::Zero(tr.seed_pre2.rows(), sw);
  for (Eigen::Index m = 0; m < M; ++m)
    for (Eigen::Index c = 0; c < sw; ++c) {
      const int row = tr.pool_argmax[static_cast<std::size_t>(m * sw + c)];
      d_seed_h2(row, c) += d_feat(m, c);
    }
  const Matrix d_seed_pre2 = detail::relu_mask(tr.seed_pre2, d_seed_h2);
  const Matrix seed_h1 = detail::relu(tr.seed_pre1);
  grads[kSeedW2] += d_seed_pre2.transpose() * seed_h1;
  grads[kSeedB2] += d_seed_pre2.colwise().sum().transpose();
  const Matrix d_seed_pre1 = detail::relu_mask(tr.seed_pre1, d_seed_pre2 * params[kSeedW2]);
  grads[kSeedW1] += d_seed_pre1.transpose() * tr.rel;
  grads[kSeedB1] += d_seed_pre1.colwise().sum().transpose();
  return grads;
}

// ---------------------------------------------------------------------------
// Optimizer and teacher update

struct AdamState {
  ModelParams first;
  ModelParams second;
  std::uint64_t step = 0;

  static AdamState for_params(const ModelParams& p) {
    return {ModelParams::zeros(p.arch), ModelParams::zeros(p.arch), 0};
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (!params.same_shape(grads) || !params.same_shape(state.first))
    throw std::invalid_argument("adam_step: shape mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto m = state.first.tensors[i].array();
    auto v = state.second.tensors[i].array();
    const auto gr = grads.tensors[i].array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * gr;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * gr.square();
    params.tensors[i].array() -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
  }
}

/// teacher <- alpha * teacher + (1 - alpha) * student, element-wise.
inline void ema_update(ModelParams& teacher, const ModelParams& student, double alpha) {
  if (!teacher.same_shape(student)) throw std::invalid_argument("ema_update: shape mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema_update: alpha outside [0, 1]");
  for (std::size_t i = 0; i < teacher.tensors.size(); ++i)
    teacher.tensors[i] = alpha * teacher.tensors[i] + (1.0 - alpha) * student.tensors[i];
}

}  // namespace dpke
