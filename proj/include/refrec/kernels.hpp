#pragma once

// Data-parallel inner loops. Every kernel here has a serial counterpart in
// refrec::kernels::reference that is kept deliberately naive; the unit tests
// and bench/ compare the two.
//
// All parallel kernels partition the *output* rows across threads and keep
// the per-element accumulation order fixed, so results do not depend on the
// thread count.

#include <cstdint>
#include <vector>

#include "refrec/matrix.hpp"

namespace refrec::kernels {

/// C = A * B.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c);
/// C = A^T * B.
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
/// C = A * B^T.
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c);

/// Row-wise max over consecutive groups of `group` rows. `argmax` receives the
/// absolute row index of the winner for every (group, column); ties resolve to
/// the lowest row.
void segment_max(const Matrix& x, int group, Matrix& out, std::vector<int>& argmax);

/// Euclidean distances between every row of q and every row of r.
void pairwise_l2(const Matrix& q, const Matrix& r, Matrix& out);

/// For every row of a: index of the nearest row of b under squared Euclidean
/// distance (ties to the lowest index) and that squared distance.
void nearest_rows(const Matrix& a, const Matrix& b, std::vector<int>& index, Vector& sq_dist);

/// Number of threads the kernels will use (honours REFREC_THREADS).
int thread_count();
/// Applies REFREC_THREADS to the OpenMP runtime. Called once by the CLI.
void configure_threads_from_env();

namespace reference {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c);
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c);
void segment_max(const Matrix& x, int group, Matrix& out, std::vector<int>& argmax);
void pairwise_l2(const Matrix& q, const Matrix& r, Matrix& out);
void nearest_rows(const Matrix& a, const Matrix& b, std::vector<int>& index, Vector& sq_dist);

}  // namespace reference

}  // namespace refrec::kernels
