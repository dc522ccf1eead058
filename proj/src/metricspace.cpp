#include "refrec/metricspace.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "refrec/kernels.hpp"

namespace refrec::metric {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix euclidean_cost(const Matrix& a, const Matrix& b) {
  Matrix cost;
  kernels::pairwise_l2(a, b, cost);
  return cost;
}

void require_equal_counts(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() != b.rows())
    throw std::invalid_argument(std::string(who) + ": point counts differ (" + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()) + ")");
  if (a.cols() != b.cols()) throw std::invalid_argument(std::string(who) + ": coordinate dimensions differ");
}

double matched_cost(const Matrix& cost, const std::vector<int>& perm) {
  double s = 0.0;
  for (size_t i = 0; i < perm.size(); ++i) s += cost(static_cast<Eigen::Index>(i), perm[i]);
  return s;
}

}  // namespace

EmbeddingTable::EmbeddingTable(Matrix v, std::vector<std::int64_t> i) : vectors(std::move(v)), ids(std::move(i)) {
  if (static_cast<Eigen::Index>(ids.size()) != vectors.rows())
    throw std::invalid_argument("EmbeddingTable: id count does not match row count");
  std::unordered_set<std::int64_t> seen;
  for (auto id : ids)
    if (!seen.insert(id).second) throw std::invalid_argument("EmbeddingTable: duplicate id " + std::to_string(id));
}

Eigen::Index EmbeddingTable::row_of(std::int64_t id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw std::out_of_range("EmbeddingTable: unknown id " + std::to_string(id));
  return it - ids.begin();
}

EmbeddingTable EmbeddingTable::subset(const std::vector<std::int64_t>& want) const {
  std::unordered_map<std::int64_t, Eigen::Index> index;
  for (size_t r = 0; r < ids.size(); ++r) index.emplace(ids[r], static_cast<Eigen::Index>(r));
  Matrix v(static_cast<Eigen::Index>(want.size()), vectors.cols());
  for (size_t r = 0; r < want.size(); ++r) {
    const auto it = index.find(want[r]);
    if (it == index.end()) throw std::out_of_range("EmbeddingTable: unknown id " + std::to_string(want[r]));
    v.row(static_cast<Eigen::Index>(r)) = vectors.row(it->second);
  }
  return EmbeddingTable(std::move(v), want);
}

// ---------------------------------------------------------------------------
// Chamfer

double chamfer(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer: empty point set");
  std::vector<int> idx;
  Vector ab, ba;
  kernels::nearest_rows(a, b, idx, ab);
  kernels::nearest_rows(b, a, idx, ba);
  return ab.mean() + ba.mean();
}

ad::Value chamfer(const ad::Value& a, const ad::Value& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer: empty point set");
  std::vector<int> nn_ab, nn_ba;
  Vector d_ab, d_ba;
  kernels::nearest_rows(a.data(), b.data(), nn_ab, d_ab);
  kernels::nearest_rows(b.data(), a.data(), nn_ba, d_ba);
  Matrix out(1, 1);
  out(0, 0) = d_ab.mean() + d_ba.mean();
  return ad::make_node(
      std::move(out), {a, b},
      [nn_ab = std::move(nn_ab), nn_ba = std::move(nn_ba)](ad::Node& self) {
        ad::Node& pa = *self.parents[0];
        ad::Node& pb = *self.parents[1];
        const double g = self.grad(0, 0);
        Matrix ga = Matrix::Zero(pa.data.rows(), pa.data.cols());
        Matrix gb = Matrix::Zero(pb.data.rows(), pb.data.cols());
        const double sa = 2.0 * g / static_cast<double>(pa.data.rows());
        for (Eigen::Index i = 0; i < pa.data.rows(); ++i) {
          const int j = nn_ab[static_cast<size_t>(i)];
          const RowVector d = sa * (pa.data.row(i) - pb.data.row(j));
          ga.row(i) += d;
          gb.row(j) -= d;
        }
        const double sb = 2.0 * g / static_cast<double>(pb.data.rows());
        for (Eigen::Index j = 0; j < pb.data.rows(); ++j) {
          const int i = nn_ba[static_cast<size_t>(j)];
          const RowVector d = sb * (pb.data.row(j) - pa.data.row(i));
          gb.row(j) += d;
          ga.row(i) -= d;
        }
        pa.accumulate(ga);
        pb.accumulate(gb);
      },
      "chamfer");
}

// ---------------------------------------------------------------------------
// Exact assignment: Jonker-Volgenant (column reduction, reduction transfer,
// augmenting row reduction, then Dijkstra-style shortest augmenting paths).

Assignment solve_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw std::invalid_argument("solve_assignment: cost matrix must be square");
  const int n = static_cast<int>(cost.rows());
  Assignment result;
  if (n == 0) return result;
  for (Eigen::Index i = 0; i < cost.size(); ++i)
    if (!std::isfinite(cost.data()[i])) throw std::invalid_argument("solve_assignment: non-finite cost");
  auto c = [&](int i, int j) { return cost(i, j); };

  std::vector<int> rowsol(static_cast<size_t>(n), -1), colsol(static_cast<size_t>(n), -1);
  std::vector<double> v(static_cast<size_t>(n));
  std::vector<int> matches(static_cast<size_t>(n), 0), free_rows;
  free_rows.reserve(static_cast<size_t>(n));

  // Column reduction, last column first.
  for (int j = n - 1; j >= 0; --j) {
    int imin = 0;
    double mn = c(0, j);
    for (int i = 1; i < n; ++i)
      if (c(i, j) < mn) {
        mn = c(i, j);
        imin = i;
      }
    v[j] = mn;
    if (++matches[imin] == 1) {
      rowsol[imin] = j;
      colsol[j] = imin;
    } else if (v[j] < v[rowsol[imin]]) {
      const int j1 = rowsol[imin];
      rowsol[imin] = j;
      colsol[j] = imin;
      colsol[j1] = -1;
    } else {
      colsol[j] = -1;
    }
  }

  // Reduction transfer.
  for (int i = 0; i < n; ++i) {
    if (matches[i] == 0) {
      free_rows.push_back(i);
    } else if (matches[i] == 1) {
      const int j1 = rowsol[i];
      double mn = kInf;
      for (int j = 0; j < n; ++j)
        if (j != j1) mn = std::min(mn, c(i, j) - v[j]);
      if (mn < kInf) v[j1] -= mn;
    }
  }

  // Augmenting row reduction, two passes. Each reassignment leaves a valid
  // partial solution, so the step budget only trades speed, never correctness.
  // Unbounded, this phase can thrash on dense float costs (6x slower at N=256).
  long budget = 4L * n;
  for (int pass = 0; pass < 2 && budget > 0; ++pass) {
    size_t k = 0;
    const size_t prev = free_rows.size();
    std::vector<int> current(free_rows.begin(), free_rows.end());
    free_rows.clear();
    while (k < prev) {
      if (--budget < 0) {
        for (; k < prev; ++k) free_rows.push_back(current[k]);
        break;
      }
      const int i = current[k++];
      double umin = c(i, 0) - v[0], usubmin = kInf;
      int j1 = 0, j2 = -1;
      for (int j = 1; j < n; ++j) {
        const double h = c(i, j) - v[j];
        if (h < usubmin) {
          if (h >= umin) {
            usubmin = h;
            j2 = j;
          } else {
            usubmin = umin;
            umin = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      int i0 = colsol[j1];
      const bool strict = umin < usubmin;
      if (strict) {
        v[j1] -= (usubmin - umin);
      } else if (i0 > -1 && j2 >= 0) {
        j1 = j2;
        i0 = colsol[j2];
      }
      rowsol[i] = j1;
      colsol[j1] = i;
      if (i0 > -1) {
        rowsol[i0] = -1;
        if (strict) current[--k] = i0;
        else free_rows.push_back(i0);
      }
    }
  }

  // Shortest augmenting paths for the remaining free rows.
  std::vector<double> d(static_cast<size_t>(n));
  std::vector<int> pred(static_cast<size_t>(n)), collist(static_cast<size_t>(n));
  for (const int freerow : free_rows) {
    for (int j = 0; j < n; ++j) {
      d[j] = c(freerow, j) - v[j];
      pred[j] = freerow;
      collist[j] = j;
    }
    int low = 0, up = 0, last = 0, endofpath = -1;
    double mn = 0.0;
    bool found = false;
    while (!found) {
      if (up == low) {
        last = low - 1;
        mn = d[collist[up++]];
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double h = d[j];
          if (h <= mn) {
            if (h < mn) {
              up = low;
              mn = h;
            }
            collist[k] = collist[up];
            collist[up++] = j;
          }
        }
        for (int k = low; k < up; ++k)
          if (colsol[collist[k]] < 0) {
            endofpath = collist[k];
            found = true;
            break;
          }
      }
      if (!found) {
        const int j1 = collist[low++];
        const int i = colsol[j1];
        const double h = c(i, j1) - v[j1] - mn;
        for (int k = up; k < n; ++k) {
          const int j = collist[k];
          const double v2 = c(i, j) - v[j] - h;
          if (v2 < d[j]) {
            pred[j] = i;
            if (v2 == mn) {
              if (colsol[j] < 0) {
                endofpath = j;
                found = true;
                break;
              }
              collist[k] = collist[up];
              collist[up++] = j;
            }
            d[j] = v2;
          }
        }
      }
    }
    for (int k = 0; k <= last; ++k) {
      const int j1 = collist[k];
      v[j1] += d[j1] - mn;
    }
    int i = -1;
    do {
      i = pred[endofpath];
      colsol[endofpath] = i;
      const int j1 = endofpath;
      endofpath = rowsol[i];
      rowsol[i] = j1;
    } while (i != freerow);
  }

  result.permutation = std::move(rowsol);
  result.cost = matched_cost(cost, result.permutation);
  return result;
}

Assignment emd_exact(const Matrix& a, const Matrix& b, int cap) {
  require_equal_counts(a, b, "emd_exact");
  if (a.rows() > cap)
    throw std::invalid_argument("emd_exact: " + std::to_string(a.rows()) + " points exceeds exact-solver cap " +
                                std::to_string(cap));
  return solve_assignment(euclidean_cost(a, b));
}

// ---------------------------------------------------------------------------
// Auction (Bertsekas), maximising benefit = -cost, with epsilon scaling.

Assignment solve_assignment_auction(const Matrix& cost, double epsilon, long max_bids) {
  if (cost.rows() != cost.cols()) throw std::invalid_argument("auction: cost matrix must be square");
  if (!(epsilon > 0.0)) throw std::invalid_argument("auction: epsilon must be positive");
  const int n = static_cast<int>(cost.rows());
  Assignment result;
  if (n == 0) return result;
  if (n == 1) {
    result.permutation = {0};
    result.cost = cost(0, 0);
    return result;
  }

  const double span = cost.maxCoeff() - cost.minCoeff();
  std::vector<double> price(static_cast<size_t>(n), 0.0);
  std::vector<int> owner(static_cast<size_t>(n), -1), assigned(static_cast<size_t>(n), -1);
  double eps = std::max(span / 4.0, epsilon);
  long bids = 0;
  for (;;) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    std::vector<int> unassigned(static_cast<size_t>(n));
    std::iota(unassigned.rbegin(), unassigned.rend(), 0);
    while (!unassigned.empty()) {
      if (++bids > max_bids)
        throw std::runtime_error("auction: no convergence within " + std::to_string(max_bids) + " bids");
      const int i = unassigned.back();
      unassigned.pop_back();
      double best = -kInf, second = -kInf;
      int jbest = 0;
      for (int j = 0; j < n; ++j) {
        const double value = -cost(i, j) - price[j];
        if (value > best) {
          second = best;
          best = value;
          jbest = j;
        } else if (value > second) {
          second = value;
        }
      }
      price[jbest] += best - second + eps;
      if (owner[jbest] >= 0) {
        assigned[owner[jbest]] = -1;
        unassigned.push_back(owner[jbest]);
      }
      owner[jbest] = i;
      assigned[i] = jbest;
    }
    if (eps <= epsilon) break;
    eps = std::max(eps / 5.0, epsilon);
  }
  result.permutation = std::move(assigned);
  result.cost = matched_cost(cost, result.permutation);
  return result;
}

Assignment emd_auction(const Matrix& a, const Matrix& b, double epsilon, long max_bids) {
  require_equal_counts(a, b, "emd_auction");
  return solve_assignment_auction(euclidean_cost(a, b), epsilon, max_bids);
}

ad::Value emd_loss(const ad::Value& a, const ad::Value& b, const EmdOptions& opts) {
  require_equal_counts(a.data(), b.data(), "emd_loss");
  if (a.rows() == 0) throw std::invalid_argument("emd_loss: empty point set");
  const bool exact = opts.solver == EmdSolver::exact && a.rows() <= opts.exact_cap;
  Assignment asg = exact ? emd_exact(a.data(), b.data(), opts.exact_cap)
                         : emd_auction(a.data(), b.data(), opts.auction_epsilon);
  const double n = static_cast<double>(a.rows());
  Matrix out(1, 1);
  out(0, 0) = asg.cost / n;
  return ad::make_node(
      std::move(out), {a, b},
      [perm = std::move(asg.permutation), n](ad::Node& self) {
        ad::Node& pa = *self.parents[0];
        ad::Node& pb = *self.parents[1];
        const double g = self.grad(0, 0) / n;
        Matrix ga = Matrix::Zero(pa.data.rows(), pa.data.cols());
        Matrix gb = Matrix::Zero(pb.data.rows(), pb.data.cols());
        for (Eigen::Index i = 0; i < pa.data.rows(); ++i) {
          const int j = perm[static_cast<size_t>(i)];
          const RowVector diff = pa.data.row(i) - pb.data.row(j);
          const double len = diff.norm();
          if (len == 0.0) continue;
          const RowVector d = (g / len) * diff;
          ga.row(i) += d;
          gb.row(j) -= d;
        }
        pa.accumulate(ga);
        pb.accumulate(gb);
      },
      "emd");
}

// ---------------------------------------------------------------------------

Matrix pairwise_l2(const EmbeddingTable& q, const EmbeddingTable& r) {
  if (q.dim() != r.dim())
    throw std::invalid_argument("pairwise_l2: descriptor widths differ (" + std::to_string(q.dim()) + " vs " +
                                std::to_string(r.dim()) + ")");
  Matrix out;
  kernels::pairwise_l2(q.vectors, r.vectors, out);
  return out;
}

std::vector<Neighbor> nearest(const Eigen::Ref<const RowVector>& query, const EmbeddingTable& table, int k) {
  if (table.size() == 0) throw std::invalid_argument("nearest: empty table");
  if (query.size() != table.dim()) throw std::invalid_argument("nearest: query width does not match table");
  if (k < 0 || k > table.size()) throw std::invalid_argument("nearest: k exceeds table size");
  std::vector<Neighbor> all(static_cast<size_t>(table.size()));
  for (Eigen::Index r = 0; r < table.size(); ++r) {
    double s = 0.0;
    for (Eigen::Index t = 0; t < table.dim(); ++t) {
      const double diff = query[t] - table.vectors(r, t);
      s += diff * diff;
    }
    all[static_cast<size_t>(r)] = {table.ids[static_cast<size_t>(r)], std::sqrt(s)};
  }
  auto less = [](const Neighbor& x, const Neighbor& y) {
    return x.distance < y.distance || (x.distance == y.distance && x.id < y.id);
  };
  std::partial_sort(all.begin(), all.begin() + k, all.end(), less);
  all.resize(static_cast<size_t>(k));
  return all;
}

}  // namespace refrec::metric
