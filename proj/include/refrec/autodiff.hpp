#pragma once

// Small reverse-mode differentiation engine over dense row-major matrices.
//
// A Value is a shared handle to a graph node. Parameters are long-lived leaf
// nodes; every forward pass builds a fresh graph on top of them and backward()
// walks that graph once in reverse topological order. Gradients accumulate, so
// callers zero parameter gradients between steps (zero_grads).

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "refrec/matrix.hpp"

namespace refrec::ad {

struct Node {
  Matrix data;
  Matrix grad;  // same shape as data whenever requires_grad
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  void accumulate(const Matrix& g);
};

class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that never receives gradient.
  static Value constant(Matrix m);
  /// Leaf with a zero-initialised gradient buffer.
  static Value parameter(Matrix m);
  static Value scalar(double x);

  const Matrix& data() const { return node_->data; }
  Matrix& mutable_data() { return node_->data; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->data.rows(); }
  Eigen::Index cols() const { return node_->data.cols(); }
  double item() const;

  /// Independent leaf with a copy of this value's data (and grad flag).
  Value clone() const;
  /// Constant leaf sharing nothing with the graph.
  Value detach() const { return constant(node_->data); }

  bool valid() const { return node_ != nullptr; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node. `backward` receives the result node; it reads the
/// result grad and accumulates into parents that require grad. When no parent
/// requires grad the node is created as a constant.
Value make_node(Matrix data, std::vector<Value> parents, std::function<void(Node&)> backward,
                const char* op);

void backward(const Value& root);
void zero_grads(std::span<Value> params);

// Primitive operations. Shape violations throw std::invalid_argument.
Value matmul(const Value& a, const Value& b);
/// Elementwise sum; a 1 x C right operand is broadcast over the rows of a.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double s);
Value square(const Value& a);
Value relu(const Value& a);
Value tanh(const Value& a);
Value log(const Value& a);
Value sum(const Value& a);
Value mean(const Value& a);
/// Max over consecutive blocks of `points` rows: (B*points) x C -> B x C.
/// Gradient is routed to the argmax row only (ties to the lowest row).
Value max_over_points(const Value& a, int points);
Value softmax(const Value& a);
Value log_softmax(const Value& a);
/// R x C -> R x 1 with out(i) = a(i, cols[i]).
Value pick(const Value& a, std::span<const int> cols);
Value reshape(const Value& a, Eigen::Index rows, Eigen::Index cols);
Value slice_rows(const Value& a, Eigen::Index begin, Eigen::Index count);
Value concat_rows(std::span<const Value> parts);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(double s, const Value& a) { return scale(a, s); }

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Moments are keyed by parameter position,
/// so the same parameter list (in the same order) must be passed every step.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void step(std::span<Value> params);

  void set_lr(double lr) { opts_.lr = lr; }
  const AdamWOptions& options() const { return opts_; }
  long steps() const { return step_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  AdamWOptions opts_;
  long step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

/// lr0 * 0.5 * (1 + cos(pi * it / total)); no restarts.
double cosine_lr(long it, long total, double lr0);

}  // namespace refrec::ad
