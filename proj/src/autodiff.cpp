#include "refrec/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "refrec/kernels.hpp"

namespace refrec::ad {

namespace {

std::string shape(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape(a) + " and " + shape(b));
}

void require_same_shape(const char* op, const Value& a, const Value& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a.data(), b.data());
}

Node& parent(Node& self, size_t i) { return *self.parents[i]; }

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.rows() != data.rows() || grad.cols() != data.cols()) grad.setZero(data.rows(), data.cols());
  grad += g;
}

Value Value::constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->data = std::move(m);
  return Value(std::move(n));
}

Value Value::parameter(Matrix m) {
  auto n = std::make_shared<Node>();
  n->grad.setZero(m.rows(), m.cols());
  n->data = std::move(m);
  n->requires_grad = true;
  n->op = "param";
  return Value(std::move(n));
}

Value Value::scalar(double x) {
  Matrix m(1, 1);
  m(0, 0) = x;
  return constant(std::move(m));
}

double Value::item() const {
  if (rows() != 1 || cols() != 1) throw std::invalid_argument("item: value is " + shape(data()) + ", not 1x1");
  return data()(0, 0);
}

Value Value::clone() const {
  return requires_grad() ? parameter(data()) : constant(data());
}

Value make_node(Matrix data, std::vector<Value> parents, std::function<void(Node&)> backward,
                const char* op) {
  auto n = std::make_shared<Node>();
  n->data = std::move(data);
  n->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->grad.setZero(n->data.rows(), n->data.cols());
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Value(std::move(n));
}

void backward(const Value& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be 1x1, got " + shape(root.data()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

void zero_grads(std::span<Value> params) {
  for (auto& p : params)
    if (p.requires_grad()) p.mutable_grad().setZero(p.rows(), p.cols());
}

Value matmul(const Value& a, const Value& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a.data(), b.data());
  Matrix out;
  kernels::gemm_nn(a.data(), b.data(), out);
  return make_node(
      std::move(out), {a, b},
      [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        Matrix tmp;
        if (pa.requires_grad) {
          kernels::gemm_nt(self.grad, pb.data, tmp);
          pa.accumulate(tmp);
        }
        if (pb.requires_grad) {
          kernels::gemm_tn(pa.data, self.grad, tmp);
          pb.accumulate(tmp);
        }
      },
      "matmul");
}

Value add(const Value& a, const Value& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    return make_node(
        a.data() + b.data(), {a, b},
        [](Node& self) {
          parent(self, 0).accumulate(self.grad);
          parent(self, 1).accumulate(self.grad);
        },
        "add");
  }
  if (b.rows() == 1 && b.cols() == a.cols()) {
    Matrix out = a.data().rowwise() + b.data().row(0);
    return make_node(
        std::move(out), {a, b},
        [](Node& self) {
          parent(self, 0).accumulate(self.grad);
          parent(self, 1).accumulate(self.grad.colwise().sum());
        },
        "add_bias");
  }
  shape_error("add", a.data(), b.data());
}

Value sub(const Value& a, const Value& b) {
  require_same_shape("sub", a, b);
  return make_node(
      a.data() - b.data(), {a, b},
      [](Node& self) {
        parent(self, 0).accumulate(self.grad);
        parent(self, 1).accumulate(-self.grad);
      },
      "sub");
}

Value mul(const Value& a, const Value& b) {
  require_same_shape("mul", a, b);
  return make_node(
      a.data().cwiseProduct(b.data()), {a, b},
      [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.data));
        if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.data));
      },
      "mul");
}

Value scale(const Value& a, double s) {
  return make_node(
      a.data() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); }, "scale");
}

Value square(const Value& a) {
  return make_node(
      a.data().array().square().matrix(), {a},
      [](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate(2.0 * self.grad.cwiseProduct(pa.data));
      },
      "square");
}

Value relu(const Value& a) {
  return make_node(
      a.data().cwiseMax(0.0), {a},
      [](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate((pa.data.array() > 0.0).select(self.grad, 0.0).matrix());
      },
      "relu");
}

Value tanh(const Value& a) {
  return make_node(
      a.data().array().tanh().matrix(), {a},
      [](Node& self) {
        parent(self, 0).accumulate(self.grad.cwiseProduct((1.0 - self.data.array().square()).matrix()));
      },
      "tanh");
}

Value log(const Value& a) {
  return make_node(
      a.data().array().log().matrix(), {a},
      [](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate(self.grad.cwiseQuotient(pa.data));
      },
      "log");
}

Value sum(const Value& a) {
  Matrix out(1, 1);
  out(0, 0) = a.data().sum();
  return make_node(
      std::move(out), {a},
      [](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate(Matrix::Constant(pa.data.rows(), pa.data.cols(), self.grad(0, 0)));
      },
      "sum");
}

Value mean(const Value& a) {
  if (a.data().size() == 0) throw std::invalid_argument("mean: empty operand");
  const double n = static_cast<double>(a.data().size());
  Matrix out(1, 1);
  out(0, 0) = a.data().sum() / n;
  return make_node(
      std::move(out), {a},
      [n](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate(Matrix::Constant(pa.data.rows(), pa.data.cols(), self.grad(0, 0) / n));
      },
      "mean");
}

Value max_over_points(const Value& a, int points) {
  if (points <= 0 || a.rows() % points != 0)
    throw std::invalid_argument("max_over_points: " + shape(a.data()) + " is not a stack of " +
                                std::to_string(points) + "-point blocks");
  Matrix out;
  std::vector<int> arg;
  kernels::segment_max(a.data(), points, out, arg);
  return make_node(
      std::move(out), {a},
      [arg = std::move(arg)](Node& self) {
        Node& pa = parent(self, 0);
        Matrix g = Matrix::Zero(pa.data.rows(), pa.data.cols());
        const Eigen::Index c = self.data.cols();
        for (Eigen::Index b = 0; b < self.data.rows(); ++b)
          for (Eigen::Index j = 0; j < c; ++j) g(arg[static_cast<size_t>(b * c + j)], j) += self.grad(b, j);
        pa.accumulate(g);
      },
      "max_over_points");
}

namespace {

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Value softmax(const Value& a) {
  if (a.cols() == 0) throw std::invalid_argument("softmax: zero classes");
  return make_node(
      row_softmax(a.data()), {a},
      [](Node& self) {
        const Matrix& s = self.data;
        const Eigen::VectorXd dot = self.grad.cwiseProduct(s).rowwise().sum();
        Matrix g = s.cwiseProduct((self.grad.colwise() - dot));
        parent(self, 0).accumulate(g);
      },
      "softmax");
}

Value log_softmax(const Value& a) {
  if (a.cols() == 0) throw std::invalid_argument("log_softmax: zero classes");
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.data().row(i).maxCoeff();
    const double lse = mx + std::log((a.data().row(i).array() - mx).exp().sum());
    out.row(i) = (a.data().row(i).array() - lse).matrix();
  }
  return make_node(
      std::move(out), {a},
      [](Node& self) {
        const Matrix s = self.data.array().exp().matrix();
        const Eigen::VectorXd total = self.grad.rowwise().sum();
        Matrix g = self.grad - (s.array().colwise() * total.array()).matrix();
        parent(self, 0).accumulate(g);
      },
      "log_softmax");
}

Value pick(const Value& a, std::span<const int> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows())
    throw std::invalid_argument("pick: " + std::to_string(cols.size()) + " indices for " + shape(a.data()));
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int c = cols[static_cast<size_t>(i)];
    if (c < 0 || c >= a.cols()) throw std::invalid_argument("pick: column index out of range");
    out(i, 0) = a.data()(i, c);
  }
  std::vector<int> idx(cols.begin(), cols.end());
  return make_node(
      std::move(out), {a},
      [idx = std::move(idx)](Node& self) {
        Node& pa = parent(self, 0);
        Matrix g = Matrix::Zero(pa.data.rows(), pa.data.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, idx[static_cast<size_t>(i)]) = self.grad(i, 0);
        pa.accumulate(g);
      },
      "pick");
}

Value reshape(const Value& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.data().size())
    throw std::invalid_argument("reshape: cannot view " + shape(a.data()) + " as " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  Matrix out = Eigen::Map<const Matrix>(a.data().data(), rows, cols);
  return make_node(
      std::move(out), {a},
      [](Node& self) {
        Node& pa = parent(self, 0);
        pa.accumulate(Eigen::Map<const Matrix>(self.grad.data(), pa.data.rows(), pa.data.cols()));
      },
      "reshape");
}

Value slice_rows(const Value& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds for " + shape(a.data()));
  return make_node(
      a.data().middleRows(begin, count), {a},
      [begin, count](Node& self) {
        Node& pa = parent(self, 0);
        Matrix g = Matrix::Zero(pa.data.rows(), pa.data.cols());
        g.middleRows(begin, count) = self.grad;
        pa.accumulate(g);
      },
      "slice_rows");
}

Value concat_rows(std::span<const Value> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts.front().data(), p.data());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.data();
    offsets.push_back(at);
    at += p.rows();
  }
  return make_node(
      std::move(out), std::vector<Value>(parts.begin(), parts.end()),
      [offsets = std::move(offsets)](Node& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
          Node& p = *self.parents[i];
          if (p.requires_grad) p.accumulate(self.grad.middleRows(offsets[i], p.data.rows()));
        }
      },
      "concat_rows");
}

void AdamW::step(std::span<Value> params) {
  if (params.empty()) return;
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("AdamW::step: parameter list changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params[i].mutable_data();
    const Matrix& g = params[i].grad();
    if (m_[i].rows() != p.rows() || m_[i].cols() != p.cols())
      throw std::invalid_argument("AdamW::step: parameter shape changed between steps");
    p *= (1.0 - opts_.lr * opts_.weight_decay);
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
    p.array() -= opts_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
}

double cosine_lr(long it, long total, double lr0) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total must be positive");
  if (it < 0 || it > total) throw std::invalid_argument("cosine_lr: iteration outside [0, total]");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / static_cast<double>(total)));
}

}  // namespace refrec::ad
