#include "prf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace prf {

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily; persistent on leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Pulls this node's grad into the parents' grad buffers (+= only).
  std::function<void(Node&)> backprop;

  std::size_t numel() const { return data.size(); }
  bool is_leaf() const { return !backprop; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_mode = true;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data,
                               bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace
}  // namespace detail

using detail::Node;

Tensor make_tensor(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

const std::shared_ptr<Node>& node_sp(const Tensor& t) { return t.node_; }

namespace {

Tensor wrap(std::shared_ptr<Node> n) { return make_tensor(std::move(n)); }

// Builds the result node of an op. Parents/backprop attach only when grad
// mode is on and some input needs gradients; otherwise the result is a plain
// value (forward-only evaluation).
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backprop) {
  bool rg = false;
  if (detail::g_grad_mode) {
    for (const auto& p : parents)
      if (p->requires_grad) rg = true;
  }
  auto n = detail::new_node(std::move(shape), std::move(data), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return wrap(std::move(n));
}

void check_2d(const Tensor& t, const char* what) {
  if (t.rank() > 2)
    throw DimensionError(std::string(what) + ": expected rank <= 2 tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
}

// Unary elementwise helper: y_i = f(x_i), dx_i += g_i * dfdx(x_i, y_i).
template <class F, class D>
Tensor unary_ew(const Tensor& x, F f, D dfdx) {
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  std::vector<double> saved = out;
  return make_op(x.shape(), std::move(out), {node_sp(x)},
                 [dfdx, y = std::move(saved)](Node& self) {
                   Node& X = *self.parents[0];
                   if (!X.requires_grad) return;
                   X.ensure_grad();
                   for (std::size_t i = 0; i < self.data.size(); ++i)
                     X.grad[i] += self.grad[i] * dfdx(X.data[i], y[i]);
                 });
}

}  // namespace

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return wrap(detail::new_node(
      s, std::vector<double>(detail::shape_numel(s), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  return wrap(detail::new_node(
      s, std::vector<double>(detail::shape_numel(s), v), requires_grad));
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> d,
                         bool requires_grad) {
  if (d.size() != detail::shape_numel(s))
    throw DimensionError("from_data: data length does not match shape");
  return wrap(detail::new_node(s, std::move(d), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return from_data({n, n}, std::move(d));
}

Tensor Tensor::uniform(const Shape& s, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  std::vector<double> d(detail::shape_numel(s));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return from_data(s, std::move(d), requires_grad);
}

Tensor Tensor::normal(const Shape& s, Rng& rng, double mean, double stddev,
                      bool requires_grad) {
  std::vector<double> d(detail::shape_numel(s));
  for (auto& x : d) x = rng.normal(mean, stddev);
  return from_data(s, std::move(d), requires_grad);
}

Tensor Tensor::xavier(std::size_t rows, std::size_t cols, Rng& rng,
                      bool requires_grad) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform({rows, cols}, rng, -limit, limit, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->numel(); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() <= 1) return 1;
  if (s.size() == 2) return s[0];
  throw DimensionError("rows(): tensor rank > 2");
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  if (s.size() == 2) return s[1];
  throw DimensionError("cols(): tensor rank > 2");
}

const std::vector<double>& Tensor::data() const { return node_->data; }

std::vector<double>& Tensor::raw_data() {
  if (!node_->is_leaf())
    throw ContractError("raw_data(): only leaf tensors may be mutated");
  return node_->data;
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!node_->is_leaf())
    throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = v;
}

bool Tensor::is_leaf() const { return node_->is_leaf(); }

bool Tensor::has_grad() const {
  return node_->grad.size() == node_->data.size();
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient present");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

double Tensor::value() const {
  if (numel() != 1) throw ContractError("value(): tensor is not scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  return node_->data[i * cols() + j];
}

Tensor Tensor::detach() const {
  return wrap(detail::new_node(node_->shape, node_->data, false));
}

bool Tensor::all_finite() const {
  for (double v : node_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_mode) {
  detail::g_grad_mode = false;
}
NoGradGuard::~NoGradGuard() { detail::g_grad_mode = prev_; }

bool grad_mode_enabled() { return detail::g_grad_mode; }

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (k != b.rows())
    throw DimensionError("matmul: inner dimensions disagree " +
                         detail::shape_str(a.shape()) + " x " +
                         detail::shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return make_op({m, n}, std::move(out), {node_sp(a), node_sp(b)},
                 [m, k, n](Node& self) {
                   Node& A = *self.parents[0];
                   Node& B = *self.parents[1];
                   const double* g = self.grad.data();
                   if (A.requires_grad) {
                     A.ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) {
                         const double gv = g[i * n + j];
                         if (gv == 0.0) continue;
                         double* arow = A.grad.data() + i * k;
                         for (std::size_t kk = 0; kk < k; ++kk)
                           arow[kk] += gv * B.data[kk * n + j];
                       }
                   }
                   if (B.requires_grad) {
                     B.ensure_grad();
                     for (std::size_t kk = 0; kk < k; ++kk)
                       for (std::size_t i = 0; i < m; ++i) {
                         const double av = A.data[i * k + kk];
                         if (av == 0.0) continue;
                         const double* grow = g + i * n;
                         double* brow = B.grad.data() + kk * n;
                         for (std::size_t j = 0; j < n; ++j)
                           brow[j] += av * grow[j];
                       }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  return make_op({n, m}, std::move(out), {node_sp(a)}, [m, n](Node& self) {
    Node& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i)
        A.grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---- elementwise / broadcast ----------------------------------------------

namespace {

bool is_row_vector_over(const Tensor& vec, const Tensor& mat) {
  if (mat.rank() != 2) return false;
  const std::size_t n = mat.cols();
  if (vec.rank() == 1 && vec.shape()[0] == n) return true;
  if (vec.rank() == 2 && vec.rows() == 1 && vec.cols() == n) return true;
  return false;
}

// matrix + broadcast row vector
Tensor add_broadcast(const Tensor& m, const Tensor& v, double vsign) {
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(m.data());
  const auto& vd = v.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += vsign * vd[j];
  return make_op(m.shape(), std::move(out), {node_sp(m), node_sp(v)},
                 [r, c, vsign](Node& self) {
                   Node& M = *self.parents[0];
                   Node& V = *self.parents[1];
                   if (M.requires_grad) {
                     M.ensure_grad();
                     for (std::size_t i = 0; i < self.data.size(); ++i)
                       M.grad[i] += self.grad[i];
                   }
                   if (V.requires_grad) {
                     V.ensure_grad();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         V.grad[j] += vsign * self.grad[i * c + j];
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_op(a.shape(), std::move(out), {node_sp(a), node_sp(b)},
                   [](Node& self) {
                     for (int p = 0; p < 2; ++p) {
                       Node& P = *self.parents[p];
                       if (!P.requires_grad) continue;
                       P.ensure_grad();
                       for (std::size_t i = 0; i < self.data.size(); ++i)
                         P.grad[i] += self.grad[i];
                     }
                   });
  }
  // broadcast of a trailing vector over matrix rows
  if (is_row_vector_over(b, a)) return add_broadcast(a, b, 1.0);
  if (is_row_vector_over(a, b)) return add_broadcast(b, a, 1.0);
  throw DimensionError("add: shapes not broadcast-compatible " +
                       detail::shape_str(a.shape()) + " vs " +
                       detail::shape_str(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    return make_op(a.shape(), std::move(out), {node_sp(a), node_sp(b)},
                   [](Node& self) {
                     Node& A = *self.parents[0];
                     Node& B = *self.parents[1];
                     if (A.requires_grad) {
                       A.ensure_grad();
                       for (std::size_t i = 0; i < self.data.size(); ++i)
                         A.grad[i] += self.grad[i];
                     }
                     if (B.requires_grad) {
                       B.ensure_grad();
                       for (std::size_t i = 0; i < self.data.size(); ++i)
                         B.grad[i] -= self.grad[i];
                     }
                   });
  }
  if (is_row_vector_over(b, a)) return add_broadcast(a, b, -1.0);
  throw DimensionError("sub: shapes not broadcast-compatible");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op(a.shape(), std::move(out), {node_sp(a), node_sp(b)},
                 [](Node& self) {
                   Node& A = *self.parents[0];
                   Node& B = *self.parents[1];
                   if (A.requires_grad) {
                     A.ensure_grad();
                     for (std::size_t i = 0; i < self.data.size(); ++i)
                       A.grad[i] += self.grad[i] * B.data[i];
                   }
                   if (B.requires_grad) {
                     B.ensure_grad();
                     for (std::size_t i = 0; i < self.data.size(); ++i)
                       B.grad[i] += self.grad[i] * A.data[i];
                   }
                 });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  return make_op(a.shape(), std::move(out), {node_sp(a)}, [s](Node& self) {
    Node& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      A.grad[i] += self.grad[i] * s;
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor tanh(const Tensor& a) {
  return unary_ew(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_ew(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_ew(
      a, [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_ew(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_ew(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor pow(const Tensor& a, double p) {
  return unary_ew(
      a,
      [p](double x) { return std::pow(x > kPowClamp ? x : kPowClamp, p); },
      [p](double x, double y) {
        if (x <= kPowClamp) return 0.0;
        return p * y / x;
      });
}

Tensor pow(const Tensor& a, const Tensor& p) {
  return pow(a, p, kPowClamp);
}

Tensor pow(const Tensor& a, const Tensor& p, double base_floor) {
  if (p.numel() != 1) throw ContractError("pow: exponent must be scalar");
  const double pv = p.value();
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double xc = ad[i] > base_floor ? ad[i] : base_floor;
    out[i] = std::pow(xc, pv);
  }
  return make_op(
      a.shape(), std::move(out), {node_sp(a), node_sp(p)},
      [pv, base_floor](Node& self) {
        Node& A = *self.parents[0];
        Node& P = *self.parents[1];
        if (A.requires_grad) {
          A.ensure_grad();
          for (std::size_t i = 0; i < self.data.size(); ++i) {
            const double x = A.data[i];
            if (x <= base_floor) continue;  // clamped region: flat in x
            A.grad[i] += self.grad[i] * pv * self.data[i] / x;
          }
        }
        if (P.requires_grad) {
          P.ensure_grad();
          double acc = 0.0;
          for (std::size_t i = 0; i < self.data.size(); ++i) {
            const double xc = A.data[i] > base_floor ? A.data[i] : base_floor;
            acc += self.grad[i] * self.data[i] * std::log(xc);
          }
          P.grad[0] += acc;
        }
      });
}

Tensor reciprocal(const Tensor& a) {
  return unary_ew(
      a, [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_op({1}, {acc}, {node_sp(a)}, [](Node& self) {
    Node& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < A.data.size(); ++i) A.grad[i] += g;
  });
}

Tensor rows_mean(const Tensor& a) {
  check_2d(a, "rows_mean");
  const std::size_t n = a.rows(), c = a.cols();
  if (n == 0) throw ContractError("rows_mean: empty input");
  std::vector<double> out(c, 0.0);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += ad[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(n);
  return make_op({1, c}, std::move(out), {node_sp(a)}, [n, c](Node& self) {
    Node& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        A.grad[i * c + j] += self.grad[j] * inv;
  });
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax_rows(const Tensor& a, const RowMask* mask) {
  check_2d(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (mask) {
    if (mask->rows != m || mask->cols != n)
      throw DimensionError("softmax_rows: mask shape mismatch");
  }
  std::vector<double> out(m * n, 0.0);
  const auto& ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      mx = std::max(mx, ad[i * n + j]);
    }
    if (!std::isfinite(mx))
      throw DegenerateRowError("softmax_rows: fully masked row " +
                               std::to_string(i));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      const double e = std::exp(ad[i * n + j] - mx);
      out[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  std::vector<std::uint8_t> keep;
  if (mask) keep = mask->keep;
  std::vector<double> y = out;
  return make_op(
      a.shape(), std::move(out), {node_sp(a)},
      [m, n, keep = std::move(keep), y = std::move(y)](Node& self) {
        Node& A = *self.parents[0];
        if (!A.requires_grad) return;
        A.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            dot += self.grad[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            if (!keep.empty() && !keep[i * n + j]) continue;
            A.grad[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
          }
        }
      });
}

// ---- shape / indexing ------------------------------------------------------

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  check_2d(a, "gather_rows");
  const std::size_t n = a.rows(), c = a.cols();
  std::vector<double> out(idx.size() * c);
  const auto& ad = a.data();
  for (std::size_t t = 0; t < idx.size(); ++t) {
    if (idx[t] >= n) throw ContractError("gather_rows: index out of range");
    std::copy_n(ad.data() + idx[t] * c, c, out.data() + t * c);
  }
  return make_op({idx.size(), c}, std::move(out), {node_sp(a)},
                 [idx, c](Node& self) {
                   Node& A = *self.parents[0];
                   if (!A.requires_grad) return;
                   A.ensure_grad();
                   for (std::size_t t = 0; t < idx.size(); ++t)
                     for (std::size_t j = 0; j < c; ++j)
                       A.grad[idx[t] * c + j] += self.grad[t * c + j];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != c)
      throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<std::size_t> row_counts;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    parents.push_back(node_sp(p));
    row_counts.push_back(p.rows());
  }
  return make_op({total, c}, std::move(out), std::move(parents),
                 [row_counts, c](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < self.parents.size(); ++k) {
                     Node& P = *self.parents[k];
                     const std::size_t len = row_counts[k] * c;
                     if (P.requires_grad) {
                       P.ensure_grad();
                       for (std::size_t i = 0; i < len; ++i)
                         P.grad[i] += self.grad[off + i];
                     }
                     off += len;
                   }
                 });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_2d(a, "concat_cols");
  check_2d(b, "concat_cols");
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  if (b.rows() != n) throw DimensionError("concat_cols: row count mismatch");
  std::vector<double> out(n * (ca + cb));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(ad.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(bd.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return make_op({n, ca + cb}, std::move(out), {node_sp(a), node_sp(b)},
                 [n, ca, cb](Node& self) {
                   Node& A = *self.parents[0];
                   Node& B = *self.parents[1];
                   const std::size_t cw = ca + cb;
                   if (A.requires_grad) {
                     A.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < ca; ++j)
                         A.grad[i * ca + j] += self.grad[i * cw + j];
                   }
                   if (B.requires_grad) {
                     B.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < cb; ++j)
                         B.grad[i * cb + j] += self.grad[i * cw + ca + j];
                   }
                 });
}

Tensor reshape(const Tensor& a, const Shape& s) {
  if (detail::shape_numel(s) != a.numel())
    throw DimensionError("reshape: element count mismatch");
  return make_op(s, a.data(), {node_sp(a)}, [](Node& self) {
    Node& A = *self.parents[0];
    if (!A.requires_grad) return;
    A.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      A.grad[i] += self.grad[i];
  });
}

Tensor scatter_rows_merge(const Tensor& base, const Tensor& rows,
                          const std::vector<std::size_t>& where) {
  check_2d(base, "scatter_rows_merge");
  check_2d(rows, "scatter_rows_merge");
  const std::size_t n = base.rows(), c = base.cols();
  if (rows.cols() != c)
    throw DimensionError("scatter_rows_merge: column count mismatch");
  if (rows.rows() != where.size())
    throw ContractError("scatter_rows_merge: index count mismatch");
  std::vector<double> out(base.data());
  std::vector<std::uint8_t> replaced(n, 0);
  const auto& rd = rows.data();
  for (std::size_t t = 0; t < where.size(); ++t) {
    if (where[t] >= n)
      throw ContractError("scatter_rows_merge: index out of range");
    if (replaced[where[t]])
      throw ContractError("scatter_rows_merge: duplicate target row");
    replaced[where[t]] = 1;
    std::copy_n(rd.data() + t * c, c, out.data() + where[t] * c);
  }
  return make_op({n, c}, std::move(out), {node_sp(base), node_sp(rows)},
                 [where, replaced = std::move(replaced), n, c](Node& self) {
                   Node& B = *self.parents[0];
                   Node& R = *self.parents[1];
                   if (B.requires_grad) {
                     B.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i) {
                       if (replaced[i]) continue;
                       for (std::size_t j = 0; j < c; ++j)
                         B.grad[i * c + j] += self.grad[i * c + j];
                     }
                   }
                   if (R.requires_grad) {
                     R.ensure_grad();
                     for (std::size_t t = 0; t < where.size(); ++t)
                       for (std::size_t j = 0; j < c; ++j)
                         R.grad[t * c + j] += self.grad[where[t] * c + j];
                   }
                 });
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw DimensionError("conv2d: expected x{C,H,W}, w{O,C,kh,kw}, b{O}");
  const std::size_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != ci || b.shape()[0] != co)
    throw DimensionError("conv2d: channel mismatch");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;

  const auto& xd = x.data();
  const auto& wdt = w.data();
  const auto& bd = b.data();
  std::vector<double> out(co * ho * wo, 0.0);
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = bd[oc];
        for (std::size_t ic = 0; ic < ci; ++ic)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy) * stride + ky - pad;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox) * stride + kx - pad;
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              acc += xd[(ic * h + iy) * wd + ix] *
                     wdt[((oc * ci + ic) * kh + ky) * kw + kx];
            }
          }
        out[(oc * ho + oy) * wo + ox] = acc;
      }
  return make_op(
      {co, ho, wo}, std::move(out), {node_sp(x), node_sp(w), node_sp(b)},
      [ci, h, wd, co, kh, kw, ho, wo, stride, pad](Node& self) {
        Node& X = *self.parents[0];
        Node& W = *self.parents[1];
        Node& B = *self.parents[2];
        if (X.requires_grad) X.ensure_grad();
        if (W.requires_grad) W.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        for (std::size_t oc = 0; oc < co; ++oc)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const double g = self.grad[(oc * ho + oy) * wo + ox];
              if (g == 0.0) continue;
              if (B.requires_grad) B.grad[oc] += g;
              for (std::size_t ic = 0; ic < ci; ++ic)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy) * stride + ky - pad;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox) * stride + kx - pad;
                    if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                    const std::size_t xi = (ic * h + iy) * wd + ix;
                    const std::size_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                    if (X.requires_grad) X.grad[xi] += g * W.data[wi];
                    if (W.requires_grad) W.grad[wi] += g * X.data[xi];
                  }
                }
            }
      });
}

Tensor chw_to_rows(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("chw_to_rows: expected {C,H,W}");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::vector<double> out(c * h * w);
  const auto& xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) out[p * c + ch] = xd[ch * h * w + p];
  return make_op({h * w, c}, std::move(out), {node_sp(x)},
                 [c, hw = h * w](Node& self) {
                   Node& X = *self.parents[0];
                   if (!X.requires_grad) return;
                   X.ensure_grad();
                   for (std::size_t ch = 0; ch < c; ++ch)
                     for (std::size_t p = 0; p < hw; ++p)
                       X.grad[ch * hw + p] += self.grad[p * c + ch];
                 });
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Node ids are monotone in creation order and parents precede children, so
  // descending-id order is a valid reverse topological order.
  std::vector<Node*> reachable;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    reachable.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](Node* a, Node* b) { return a->id > b->id; });

  // Interior nodes get fresh scratch gradients; leaves accumulate.
  for (Node* n : reachable) {
    if (n->is_leaf())
      n->ensure_grad();
    else
      n->grad.assign(n->data.size(), 0.0);
  }
  root->grad[0] += 1.0;
  for (Node* n : reachable) {
    if (n->backprop) n->backprop(*n);
  }
}

// ---- ODE integration -------------------------------------------------------

Tensor ode_integrate(const std::function<Tensor(const Tensor&, double)>& f,
                     const OdeState& s) {
  if (s.steps < 1) throw ContractError("ode_integrate: steps must be >= 1");
  if (!(s.t1 > s.t0)) throw ContractError("ode_integrate: need t1 > t0");
  const double h = (s.t1 - s.t0) / static_cast<double>(s.steps);
  Tensor y = s.state;
  double t = s.t0;
  for (int step = 0; step < s.steps; ++step) {
    const Tensor k1 = f(y, t);
    const Tensor k2 = f(add(y, scale(k1, h / 2.0)), t + h / 2.0);
    const Tensor k3 = f(add(y, scale(k2, h / 2.0)), t + h / 2.0);
    const Tensor k4 = f(add(y, scale(k3, h)), t + h);
    Tensor incr = add(add(k1, k4), scale(add(k2, k3), 2.0));
    y = add(y, scale(incr, h / 6.0));
    t += h;
    if (!y.all_finite())
      throw DivergenceError("ode_integrate: non-finite state at t=" +
                            std::to_string(t));
  }
  return y;
}

// ---- gradient check --------------------------------------------------------

double grad_check(const std::function<Tensor()>& f,
                  const std::vector<Tensor>& leaves, double h) {
  for (auto leaf : leaves) {
    if (!leaf.is_leaf() || !leaf.requires_grad())
      throw ContractError("grad_check: inputs must be requires_grad leaves");
    leaf.zero_grad();
  }
  Tensor out = f();
  if (out.numel() != 1) throw ContractError("grad_check: f must be scalar");
  backward(out);

  std::vector<std::vector<double>> ad;
  ad.reserve(leaves.size());
  for (const auto& leaf : leaves) ad.push_back(leaf.grad());

  double max_err = 0.0;
  NoGradGuard forward_only;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    auto& xs = leaf.raw_data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x0 = xs[i];
      xs[i] = x0 + h;
      const double fp = f().value();
      xs[i] = x0 - h;
      const double fm = f().value();
      xs[i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = ad[li][i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1.0});
      max_err = std::max(max_err, std::abs(a - fd) / denom);
    }
  }
  return max_err;
}

}  // namespace prf
