#pragma once

#include <cstdint>
#include <vector>

#include "refrec/autodiff.hpp"
#include "refrec/geometry.hpp"
#include "refrec/matrix.hpp"

namespace refrec::metric {

/// Perfect matching between two equal-size point sets: point i of the first
/// set is matched to point permutation[i] of the second.
struct Assignment {
  std::vector<int> permutation;
  double cost = 0.0;  // sum of matched Euclidean distances
};

/// Global shape descriptors, one row per sample.
struct EmbeddingTable {
  Matrix vectors;  // M x d
  std::vector<std::int64_t> ids;

  EmbeddingTable() = default;
  EmbeddingTable(Matrix v, std::vector<std::int64_t> i);
  Eigen::Index size() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
  /// Row index of `id`; throws if absent.
  Eigen::Index row_of(std::int64_t id) const;
  /// Sub-table with the given ids, in the given order.
  EmbeddingTable subset(const std::vector<std::int64_t>& ids) const;
};

struct Neighbor {
  std::int64_t id;
  double distance;
};

/// Mean squared distance from each point of a to its nearest neighbour in b,
/// plus the symmetric term. Gradient flows to both sides through the
/// nearest-neighbour pairing of this evaluation.
ad::Value chamfer(const ad::Value& a, const ad::Value& b);
double chamfer(const Matrix& a, const Matrix& b);

/// Minimum-cost perfect matching under Euclidean point distances. Solved
/// exactly with a shortest-augmenting-path Hungarian method (Jonker-Volgenant).
Assignment emd_exact(const Matrix& a, const Matrix& b, int cap = 512);
/// Epsilon-scaled forward auction; cost is within N * epsilon of optimal.
Assignment emd_auction(const Matrix& a, const Matrix& b, double epsilon, long max_bids = 50'000'000);

/// Linear assignment on an arbitrary square cost matrix (row i -> column).
Assignment solve_assignment(const Matrix& cost);
Assignment solve_assignment_auction(const Matrix& cost, double epsilon, long max_bids);

enum class EmdSolver { exact, auction };

struct EmdOptions {
  EmdSolver solver = EmdSolver::exact;
  int exact_cap = 512;
  double auction_epsilon = 1e-3;
};

/// EMD loss cost / N with gradient through the (fixed) optimal matching.
/// Falls back to the auction solver when N exceeds exact_cap.
ad::Value emd_loss(const ad::Value& a, const ad::Value& b, const EmdOptions& opts = {});

/// Euclidean distances between every row of q and every row of r.
Matrix pairwise_l2(const EmbeddingTable& q, const EmbeddingTable& r);

/// k nearest rows of `table` to `query`, ascending distance, ties by id.
std::vector<Neighbor> nearest(const Eigen::Ref<const RowVector>& query, const EmbeddingTable& table, int k);

}  // namespace refrec::metric
