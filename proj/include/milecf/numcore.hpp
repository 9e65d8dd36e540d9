#pragma once

// Dense reverse-mode differentiation over Eigen matrices.
//
// A Graph records every operation applied to its Vars; Graph::backward walks
// the record in reverse creation order (which is a topological order) and
// pushes the gradients of bound Parameters into Parameter::grad. Values are
// rank-2 row-major matrices; a scalar is 1x1 and a vector is 1xn.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "milecf/error.hpp"
#include "milecf/random.hpp"

namespace milecf::num {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A persistent tensor that outlives graphs: model weights, or the relaxed
/// counterfactual candidate.
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, Matrix<Scalar> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    grad.setZero(value.rows(), value.cols());
    has_grad = false;
  }
};

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Matrix<Scalar>& value() const { return graph_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Graph&, const Mat& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf whose gradient is accumulated into `p.grad` by backward().
  Var<Scalar> parameter(Parameter<Scalar>& p) { return push(p.value, true, &p, {}); }

  /// Records an op node. `parents` decide whether the node needs a gradient;
  /// `backward` receives d(loss)/d(output) and calls accumulate() on parents.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Populates gradients of every bound Parameter reachable from `loss`,
  /// then clears the graph. Outstanding Vars are invalid afterwards.
  void backward(const Var<Scalar>& loss) {
    if (nodes_.empty()) throw InvalidArgument("backward on an empty graph");
    check_owner(loss);
    const Mat& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw NonScalarLoss("loss has shape [" + std::to_string(lv.rows()) + "," +
                          std::to_string(lv.cols()) + "]");
    }
    nodes_[loss.id()].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        // the closure may append to other nodes' grads; keep a stable copy
        const Mat g = std::move(n.grad);
        n.backward(*this, g);
      } else if (n.bound) {
        Parameter<Scalar>& p = *n.bound;
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
          p.grad.setZero(p.value.rows(), p.value.cols());
        }
        p.grad += n.grad;
        p.has_grad = true;
      }
    }
    clear();
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Parameter<Scalar>* bound = nullptr;
    Backward backward;
  };

  Var<Scalar> push(Mat value, bool requires_grad, Parameter<Scalar>* bound, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat{}, requires_grad, bound, std::move(backward)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  void check_owner(const Var<Scalar>& v) const {
    if (&v.graph() != this || v.id() >= nodes_.size()) {
      throw InvalidArgument("Var does not belong to this graph");
    }
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "," + std::to_string(c) + "]";
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
                        shape_str(b.rows(), b.cols()));
  }
}

template <typename Scalar, typename F, typename DF>
Var<Scalar> unary(const Var<Scalar>& a, F f, DF df_from_x_and_y) {
  auto& g = a.graph();
  Matrix<Scalar> y = a.value().unaryExpr(f);
  const std::size_t ia = a.id();
  return g.record(std::move(y), {a}, [ia, df_from_x_and_y](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    const auto& x = g.value(ia);
    Matrix<Scalar> d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) d.data()[i] = df_from_x_and_y(x.data()[i]);
    g.accumulate(ia, go.cwiseProduct(d));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + detail::shape_str(a.rows(), a.cols()) + " x " +
                        detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<Scalar> y = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(y), {a, b}, [ia, ib](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    if (g.requires_grad(ia)) g.accumulate(ia, go * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * go);
  });
}

/// Elementwise sum. `b` may also be a 1xn row added to every row of `a`.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const std::size_t ia = a.id(), ib = b.id();
  if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols()) {
    Matrix<Scalar> y = a.value().rowwise() + b.value().row(0);
    return a.graph().record(std::move(y), {a, b}, [ia, ib](Graph<Scalar>& g, const Matrix<Scalar>& go) {
      g.accumulate(ia, go);
      if (g.requires_grad(ib)) g.accumulate(ib, go.colwise().sum());
    });
  }
  detail::require_same_shape(a, b, "add");
  Matrix<Scalar> y = a.value() + b.value();
  return a.graph().record(std::move(y), {a, b}, [ia, ib](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go);
    g.accumulate(ib, go);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Matrix<Scalar> y = a.value() - b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(y), {a, b}, [ia, ib](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go);
    g.accumulate(ib, -go);
  });
}

/// Hadamard product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<Scalar> y = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(y), {a, b}, [ia, ib](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    if (g.requires_grad(ia)) g.accumulate(ia, go.cwiseProduct(g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, go.cwiseProduct(g.value(ia)));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Matrix<Scalar> y = a.value() * s;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, s](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go * s);
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  Matrix<Scalar> y = a.value().array() + s;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go);
  });
}

/// Multiplies row i of `a` by weights[i] (weights are constants).
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& a, std::span<const Scalar> weights) {
  if (static_cast<Eigen::Index>(weights.size()) != a.rows()) {
    throw ShapeMismatch("scale_rows: weight count differs from row count");
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(weights.data(), weights.size());
  Matrix<Scalar> y = w.asDiagonal() * a.value();
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, w](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, w.asDiagonal() * go);
  });
}

// ---------------------------------------------------------------------------
// Shape

template <typename Scalar>
Var<Scalar> concat_cols(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) throw ShapeMismatch("concat_cols: row counts differ");
  Matrix<Scalar> y(a.rows(), a.cols() + b.cols());
  y << a.value(), b.value();
  const std::size_t ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.graph().record(std::move(y), {a, b}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go.leftCols(ca));
    g.accumulate(ib, go.rightCols(cb));
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("concat_rows: column counts differ");
  Matrix<Scalar> y(a.rows() + b.rows(), a.cols());
  y << a.value(), b.value();
  const std::size_t ia = a.id(), ib = b.id();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return a.graph().record(std::move(y), {a, b}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go.topRows(ra));
    g.accumulate(ib, go.bottomRows(rb));
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw IndexOutOfBounds("slice_cols: [" + std::to_string(start) + "," +
                           std::to_string(start + count) + ") outside " +
                           std::to_string(a.cols()) + " columns");
  }
  Matrix<Scalar> y = a.value().middleCols(start, count);
  const std::size_t ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.graph().record(std::move(y), {a}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    Matrix<Scalar> d = Matrix<Scalar>::Zero(rows, cols);
    d.middleCols(start, count) = go;
    g.accumulate(ia, d);
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw IndexOutOfBounds("slice_rows: [" + std::to_string(start) + "," +
                           std::to_string(start + count) + ") outside " +
                           std::to_string(a.rows()) + " rows");
  }
  Matrix<Scalar> y = a.value().middleRows(start, count);
  const std::size_t ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.graph().record(std::move(y), {a}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    Matrix<Scalar> d = Matrix<Scalar>::Zero(rows, cols);
    d.middleRows(start, count) = go;
    g.accumulate(ia, d);
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  auto f = [](Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); };
  return detail::unary(a, f, [f](Scalar x) {
    const Scalar y = f(x);
    return y * (Scalar(1) - y);
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return std::tanh(x); }, [](Scalar x) {
    const Scalar y = std::tanh(x);
    return Scalar(1) - y * y;
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
                       [](Scalar x) { return x > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return std::exp(x); }, [](Scalar x) { return std::exp(x); });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return std::log(x); }, [](Scalar x) { return Scalar(1) / x; });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return x * x; }, [](Scalar x) { return 2 * x; });
}

/// sqrt with a zero subgradient at 0.
template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return std::sqrt(x); },
                       [](Scalar x) { return x > 0 ? Scalar(0.5) / std::sqrt(x) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return std::abs(x); },
                       [](Scalar x) { return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0)); });
}

template <typename Scalar>
Var<Scalar> reciprocal(const Var<Scalar>& a) {
  return detail::unary(a, [](Scalar x) { return Scalar(1) / x; },
                       [](Scalar x) { return Scalar(-1) / (x * x); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> y(1, 1);
  y(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.graph().record(std::move(y), {a}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, Matrix<Scalar>::Constant(rows, cols, go(0, 0)));
  });
}

/// m x n -> m x 1
template <typename Scalar>
Var<Scalar> row_sum(const Var<Scalar>& a) {
  Matrix<Scalar> y = a.value().rowwise().sum();
  const std::size_t ia = a.id();
  const Eigen::Index cols = a.cols();
  return a.graph().record(std::move(y), {a}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go.replicate(1, cols));
  });
}

/// Mean of the rows selected by `mask` (weights, typically 0/1) -> 1 x n.
template <typename Scalar>
Var<Scalar> masked_mean(const Var<Scalar>& a, std::span<const Scalar> mask) {
  if (static_cast<Eigen::Index>(mask.size()) != a.rows()) {
    throw ShapeMismatch("masked_mean: mask length differs from row count");
  }
  Scalar total = 0;
  for (Scalar m : mask) total += m;
  if (!(total > 0)) throw InvalidArgument("masked_mean: mask selects no rows");
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> w =
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(mask.data(), mask.size()) / total;
  Matrix<Scalar> y = w * a.value();
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, w](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, w.transpose() * go);
  });
}

// ---------------------------------------------------------------------------
// Probabilistic

/// Softmax along `axis` (1: each row sums to one, 0: each column).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis = 1) {
  if (axis != 0 && axis != 1) throw InvalidArgument("softmax: axis must be 0 or 1");
  Matrix<Scalar> x = axis == 1 ? Matrix<Scalar>(a.value()) : Matrix<Scalar>(a.value().transpose());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
  Matrix<Scalar> y = axis == 1 ? x : Matrix<Scalar>(x.transpose());
  const std::size_t ia = a.id();
  Matrix<Scalar> s = y;
  return a.graph().record(std::move(y), {a}, [ia, axis, s = std::move(s)](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    if (axis == 1) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = go.cwiseProduct(s).rowwise().sum();
      g.accumulate(ia, s.cwiseProduct(go - dots.replicate(1, s.cols())));
    } else {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dots = go.cwiseProduct(s).colwise().sum();
      g.accumulate(ia, s.cwiseProduct(go - dots.replicate(s.rows(), 1)));
    }
  });
}

/// Mean over rows of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw ShapeMismatch("cross_entropy: label count differs from row count");
  }
  const auto& z = logits.value();
  Matrix<Scalar> probs(z.rows(), z.cols());
  Scalar loss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int label = labels[r];
    if (label < 0 || label >= z.cols()) {
      throw IndexOutOfBounds("cross_entropy: label " + std::to_string(label) + " outside " +
                             std::to_string(z.cols()) + " classes");
    }
    const Scalar m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const Scalar total = probs.row(r).sum();
    probs.row(r) /= total;
    loss += -(z(r, label) - m - std::log(total));
  }
  const Scalar n = static_cast<Scalar>(z.rows());
  Matrix<Scalar> y(1, 1);
  y(0, 0) = loss / n;
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.graph().record(std::move(y), {logits},
                               [il, probs = std::move(probs), lab = std::move(lab), n](
                                   Graph<Scalar>& g, const Matrix<Scalar>& go) {
                                 Matrix<Scalar> d = probs;
                                 for (std::size_t r = 0; r < lab.size(); ++r) d(r, lab[r]) -= 1;
                                 g.accumulate(il, d * (go(0, 0) / n));
                               });
}

/// Multiclass margin loss on a 1xC row: max(0, margin - (z_d - max_{j!=d} z_j)).
template <typename Scalar>
Var<Scalar> hinge(const Var<Scalar>& logits, int desired, Scalar margin = Scalar(1)) {
  if (logits.rows() != 1) throw ShapeMismatch("hinge: expects a single row of logits");
  const auto& z = logits.value();
  const Eigen::Index classes = z.cols();
  if (desired < 0 || desired >= classes) {
    throw IndexOutOfBounds("hinge: desired class " + std::to_string(desired) + " outside " +
                           std::to_string(classes) + " classes");
  }
  if (classes < 2) throw ShapeMismatch("hinge: needs at least two classes");
  Eigen::Index rival = desired == 0 ? 1 : 0;
  for (Eigen::Index j = 0; j < classes; ++j) {
    if (j != desired && z(0, j) > z(0, rival)) rival = j;
  }
  const Scalar slack = margin - (z(0, desired) - z(0, rival));
  Matrix<Scalar> y(1, 1);
  y(0, 0) = slack > 0 ? slack : Scalar(0);
  const std::size_t il = logits.id();
  const bool active = slack > 0;
  return logits.graph().record(std::move(y), {logits}, [=](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    if (!active) return;
    Matrix<Scalar> d = Matrix<Scalar>::Zero(1, classes);
    d(0, desired) = -go(0, 0);
    d(0, rival) = go(0, 0);
    g.accumulate(il, d);
  });
}

/// Gathers rows of `table`.
template <typename Scalar>
Var<Scalar> embedding_lookup(const Var<Scalar>& table, std::span<const int> indices) {
  const auto& t = table.value();
  Matrix<Scalar> y(static_cast<Eigen::Index>(indices.size()), t.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= t.rows()) {
      throw IndexOutOfBounds("embedding_lookup: index " + std::to_string(indices[i]) +
                             " outside table of " + std::to_string(t.rows()) + " rows");
    }
    y.row(i) = t.row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  const Eigen::Index rows = t.rows(), cols = t.cols();
  return table.graph().record(std::move(y), {table},
                              [=, idx = std::move(idx)](Graph<Scalar>& g, const Matrix<Scalar>& go) {
                                Matrix<Scalar> d = Matrix<Scalar>::Zero(rows, cols);
                                for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += go.row(i);
                                g.accumulate(it, d);
                              });
}

/// Inverted dropout; the identity when `train` is false or `rate` is 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& a, Scalar rate, bool train, Rng& rng) {
  if (!(rate >= 0 && rate < 1)) throw InvalidArgument("dropout: rate must lie in [0, 1)");
  if (!train || rate == 0) return a;
  const Scalar keep = Scalar(1) - rate;
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = uniform01(rng) < keep ? Scalar(1) / keep : Scalar(0);
  }
  Matrix<Scalar> y = a.value().cwiseProduct(mask);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, mask = std::move(mask)](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, go.cwiseProduct(mask));
  });
}

namespace detail {

// Adjugate via cofactors; defined for singular matrices too, which the
// determinant gradient needs (d det(K) / dK = adj(K)^T).
template <typename Scalar>
Matrix<Scalar> adjugate(const Matrix<Scalar>& k) {
  const Eigen::Index n = k.rows();
  Matrix<Scalar> adj(n, n);
  if (n == 1) {
    adj(0, 0) = 1;
    return adj;
  }
  Matrix<Scalar> minor(n - 1, n - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index r = 0, mr = 0; r < n; ++r) {
        if (r == i) continue;
        for (Eigen::Index c = 0, mc = 0; c < n; ++c) {
          if (c == j) continue;
          minor(mr, mc++) = k(r, c);
        }
        ++mr;
      }
      const Scalar sign = ((i + j) % 2 == 0) ? Scalar(1) : Scalar(-1);
      adj(j, i) = sign * minor.determinant();
    }
  }
  return adj;
}

}  // namespace detail

/// Determinant of a small square matrix.
template <typename Scalar>
Var<Scalar> det(const Var<Scalar>& a) {
  if (a.rows() != a.cols()) throw ShapeMismatch("det: matrix is not square");
  Matrix<Scalar> y(1, 1);
  y(0, 0) = a.value().determinant();
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia](Graph<Scalar>& g, const Matrix<Scalar>& go) {
    g.accumulate(ia, detail::adjugate<Scalar>(g.value(ia)).transpose() * go(0, 0));
  });
}

// ---------------------------------------------------------------------------
// Optimiser

template <typename Scalar>
class Adam {
 public:
  struct Options {
    Scalar learning_rate = Scalar(0.005);
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar epsilon = Scalar(1e-8);
  };

  Adam() : Adam(Options{}) {}
  explicit Adam(Options options) : opt_(options) {}

  const Options& options() const { return opt_; }
  long step_count() const { return step_; }

  /// One bias-corrected update of every parameter; grads are zeroed after.
  void step(std::span<Parameter<Scalar>* const> params) {
    if (first_.empty()) {
      for (auto* p : params) {
        first_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
        second_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (first_.size() != params.size()) {
      throw ShapeMismatch("Adam: parameter set changed between steps");
    }
    for (auto* p : params) {
      if (!p->has_grad) throw MissingGradient("parameter '" + p->name + "' has no gradient");
    }
    ++step_;
    const Scalar c1 = Scalar(1) - std::pow(opt_.beta1, static_cast<Scalar>(step_));
    const Scalar c2 = Scalar(1) - std::pow(opt_.beta2, static_cast<Scalar>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      if (p.value.rows() != first_[i].rows() || p.value.cols() != first_[i].cols()) {
        throw ShapeMismatch("Adam: moment buffer shape differs for '" + p.name + "'");
      }
      first_[i] = opt_.beta1 * first_[i] + (Scalar(1) - opt_.beta1) * p.grad;
      second_[i] = opt_.beta2 * second_[i] + (Scalar(1) - opt_.beta2) * p.grad.cwiseAbs2();
      p.value.array() -= opt_.learning_rate * (first_[i].array() / c1) /
                         ((second_[i].array() / c2).sqrt() + opt_.epsilon);
      p.zero_grad();
    }
  }

 private:
  Options opt_;
  std::vector<Matrix<Scalar>> first_;
  std::vector<Matrix<Scalar>> second_;
  long step_ = 0;
};

}  // namespace milecf::num
