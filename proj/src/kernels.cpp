#include "refrec/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <string>

namespace refrec::kernels {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

constexpr Eigen::Index kRowBlock = 256;

}  // namespace

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.rows(), "gemm_nn: inner dimensions differ");
  const Eigen::Index n = a.rows(), k = a.cols(), m = b.cols();
  c.setZero(n, m);
  const double* bp = b.data();
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    double* ci = c.data() + i * m;
    const double* ai = a.data() + i * k;
    for (Eigen::Index p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bpr = bp + p * m;
      for (Eigen::Index j = 0; j < m; ++j) ci[j] += aip * bpr[j];
    }
  }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.rows() == b.rows(), "gemm_tn: row counts differ");
  const Eigen::Index n = a.rows(), k = a.cols(), m = b.cols();
  c.setZero(k, m);
#pragma omp parallel
  {
    const int nt = omp_get_num_threads();
    const int t = omp_get_thread_num();
    const Eigen::Index k0 = k * t / nt, k1 = k * (t + 1) / nt;
    for (Eigen::Index i0 = 0; i0 < n; i0 += kRowBlock) {
      const Eigen::Index i1 = std::min(n, i0 + kRowBlock);
      for (Eigen::Index p = k0; p < k1; ++p) {
        double* cp = c.data() + p * m;
        for (Eigen::Index i = i0; i < i1; ++i) {
          const double aip = a(i, p);
          if (aip == 0.0) continue;
          const double* bi = b.data() + i * m;
          for (Eigen::Index j = 0; j < m; ++j) cp[j] += aip * bi[j];
        }
      }
    }
  }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.cols(), "gemm_nt: column counts differ");
  const Matrix bt = b.transpose();
  gemm_nn(a, bt, c);
}

void segment_max(const Matrix& x, int group, Matrix& out, std::vector<int>& argmax) {
  require(group > 0 && x.rows() % group == 0, "segment_max: rows not a multiple of group");
  const Eigen::Index groups = x.rows() / group, m = x.cols();
  out.resize(groups, m);
  argmax.assign(static_cast<size_t>(groups * m), 0);
#pragma omp parallel for schedule(static)
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Eigen::Index base = g * group;
    for (Eigen::Index j = 0; j < m; ++j) {
      double best = x(base, j);
      Eigen::Index arg = base;
      for (Eigen::Index r = base + 1; r < base + group; ++r) {
        if (x(r, j) > best) {
          best = x(r, j);
          arg = r;
        }
      }
      out(g, j) = best;
      argmax[static_cast<size_t>(g * m + j)] = static_cast<int>(arg);
    }
  }
}

void pairwise_l2(const Matrix& q, const Matrix& r, Matrix& out) {
  require(q.cols() == r.cols(), "pairwise_l2: dimension mismatch");
  const Eigen::Index nq = q.rows(), nr = r.rows(), d = q.cols();
  out.resize(nq, nr);
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < nq; ++i) {
    const double* qi = q.data() + i * d;
    for (Eigen::Index j = 0; j < nr; ++j) {
      const double* rj = r.data() + j * d;
      double s = 0.0;
      for (Eigen::Index t = 0; t < d; ++t) {
        const double diff = qi[t] - rj[t];
        s += diff * diff;
      }
      out(i, j) = std::sqrt(s);
    }
  }
}

void nearest_rows(const Matrix& a, const Matrix& b, std::vector<int>& index, Vector& sq_dist) {
  require(a.cols() == b.cols(), "nearest_rows: dimension mismatch");
  require(b.rows() > 0, "nearest_rows: empty reference set");
  const Eigen::Index na = a.rows(), nb = b.rows(), d = a.cols();
  index.assign(static_cast<size_t>(na), 0);
  sq_dist.resize(na);
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < na; ++i) {
    const double* ai = a.data() + i * d;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index j = 0; j < nb; ++j) {
      const double* bj = b.data() + j * d;
      double s = 0.0;
      for (Eigen::Index t = 0; t < d; ++t) {
        const double diff = ai[t] - bj[t];
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = static_cast<int>(j);
      }
    }
    index[static_cast<size_t>(i)] = arg;
    sq_dist[i] = best;
  }
}

int thread_count() { return omp_get_max_threads(); }

void configure_threads_from_env() {
  if (const char* env = std::getenv("REFREC_THREADS")) {
    const int n = std::atoi(env);
    if (n <= 0) throw std::invalid_argument("REFREC_THREADS must be a positive integer, got '" + std::string(env) + "'");
    omp_set_num_threads(n);
  }
}

namespace reference {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.rows(), "gemm_nn: inner dimensions differ");
  c.setZero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.rows() == b.rows(), "gemm_tn: row counts differ");
  c.setZero(a.cols(), b.cols());
  for (Eigen::Index p = 0; p < a.cols(); ++p)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < a.rows(); ++i) s += a(i, p) * b(i, j);
      c(p, j) = s;
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.cols() == b.cols(), "gemm_nt: column counts differ");
  c.setZero(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (Eigen::Index p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
}

void segment_max(const Matrix& x, int group, Matrix& out, std::vector<int>& argmax) {
  require(group > 0 && x.rows() % group == 0, "segment_max: rows not a multiple of group");
  const Eigen::Index groups = x.rows() / group;
  out.resize(groups, x.cols());
  argmax.assign(static_cast<size_t>(groups * x.cols()), 0);
  for (Eigen::Index g = 0; g < groups; ++g)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Eigen::Index arg = g * group;
      for (Eigen::Index r = 0; r < group; ++r)
        if (x(g * group + r, j) > x(arg, j)) arg = g * group + r;
      out(g, j) = x(arg, j);
      argmax[static_cast<size_t>(g * x.cols() + j)] = static_cast<int>(arg);
    }
}

void pairwise_l2(const Matrix& q, const Matrix& r, Matrix& out) {
  require(q.cols() == r.cols(), "pairwise_l2: dimension mismatch");
  out.resize(q.rows(), r.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index j = 0; j < r.rows(); ++j) out(i, j) = (q.row(i) - r.row(j)).norm();
}

void nearest_rows(const Matrix& a, const Matrix& b, std::vector<int>& index, Vector& sq_dist) {
  require(a.cols() == b.cols(), "nearest_rows: dimension mismatch");
  require(b.rows() > 0, "nearest_rows: empty reference set");
  index.assign(static_cast<size_t>(a.rows()), 0);
  sq_dist.resize(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    int arg = 0;
    double best = (a.row(i) - b.row(0)).squaredNorm();
    for (Eigen::Index j = 1; j < b.rows(); ++j) {
      const double s = (a.row(i) - b.row(j)).squaredNorm();
      if (s < best) {
        best = s;
        arg = static_cast<int>(j);
      }
    }
    index[static_cast<size_t>(i)] = arg;
    sq_dist[i] = best;
  }
}

}  // namespace reference

}  // namespace refrec::kernels
