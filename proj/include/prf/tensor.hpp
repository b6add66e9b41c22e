#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "prf/errors.hpp"
#include "prf/rng.hpp"

namespace prf {

using Shape = std::vector<std::size_t>;

namespace detail {
struct Node;
}

// Boolean keep-mask over a 2D tensor; entries with keep==0 are excluded from
// row softmax and produce exactly-zero outputs.
struct RowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  static RowMask all(std::size_t r, std::size_t c, std::uint8_t v = 1) {
    return RowMask{r, c, std::vector<std::uint8_t>(r * c, v)};
  }
  std::uint8_t& at(std::size_t i, std::size_t j) { return keep[i * cols + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const {
    return keep[i * cols + j];
  }
};

// Dense row-major double tensor participating in a reverse-mode computation
// graph. Copies are shallow (shared node); use detach() for a graph-free leaf.
//
// Graphs are single-owner: a graph must not be mutated from two threads, but
// independent graphs (including forwards sharing the same frozen leaves) may
// run concurrently.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> d,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor identity(std::size_t n);
  static Tensor uniform(const Shape& s, Rng& rng, double lo, double hi,
                        bool requires_grad = false);
  static Tensor normal(const Shape& s, Rng& rng, double mean, double stddev,
                       bool requires_grad = false);
  // Glorot-uniform init for a rows x cols weight matrix.
  static Tensor xavier(std::size_t rows, std::size_t cols, Rng& rng,
                       bool requires_grad = true);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // rank-1 tensors count as a single row
  std::size_t cols() const;

  const std::vector<double>& data() const;
  // Direct data mutation; valid only on leaves (optimizer updates, finite
  // differences). Mutating an interior node would desynchronize the graph.
  std::vector<double>& raw_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool is_leaf() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  double value() const;  // numel()==1
  double at(std::size_t i, std::size_t j) const;
  Tensor detach() const;
  bool all_finite() const;

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_tensor(std::shared_ptr<detail::Node>);
  friend const std::shared_ptr<detail::Node>& node_sp(const Tensor&);
};

const std::shared_ptr<detail::Node>& node_sp(const Tensor& t);

// While alive, newly created ops record no graph (pure forward evaluation).
// Thread-local; nest freely.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_mode_enabled();

// ---- operations (all differentiable unless noted) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// add: same shape, or broadcast of a trailing vector {n} / {1,n} over the
// rows of an {m,n} matrix (either operand may be the vector).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);  // subgradient 0 at the corner
Tensor clamp_min(const Tensor& a, double lo);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);  // gradient 0 at 0

// x^p with the base clamped to >= kPowClamp so fractional powers and the
// d/dp = x^p ln(x) term stay finite.
inline constexpr double kPowClamp = 1e-6;
Tensor pow(const Tensor& a, double p);
Tensor pow(const Tensor& a, const Tensor& p);  // p: learnable scalar
// Same, with an explicit base floor (for bases already known positive, e.g.
// the outer root in generalized-mean pooling).
Tensor pow(const Tensor& a, const Tensor& p, double base_floor);
Tensor reciprocal(const Tensor& a);

Tensor sum(const Tensor& a);        // -> {1}
Tensor rows_mean(const Tensor& a);  // {n,c} -> {1,c}

// Row-stabilized softmax; masked entries are exactly 0. A fully masked row
// throws DegenerateRowError.
Tensor softmax_rows(const Tensor& a, const RowMask* mask = nullptr);

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, const Shape& s);
// out = base with out[where[t]] = rows[t]; rows not listed pass through.
Tensor scatter_rows_merge(const Tensor& base, const Tensor& rows,
                          const std::vector<std::size_t>& where);

// x {Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout}; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
Tensor chw_to_rows(const Tensor& x);  // {C,H,W} -> {H*W, C}

// Accumulates gradients into every reachable requires_grad leaf. Repeated
// calls without zero_grad() accumulate further.
void backward(const Tensor& loss);

struct OdeState {
  Tensor state;
  double t0 = 0.0;
  double t1 = 1.0;
  int steps = 8;
};

// Classical fixed-step RK4, unrolled in-graph so the result is differentiable
// through every stage. Throws DivergenceError if the state goes non-finite.
Tensor ode_integrate(const std::function<Tensor(const Tensor&, double)>& f,
                     const OdeState& s);

// Compares backward() gradients of the scalar f() against central finite
// differences on each leaf coordinate. Returns the max scaled relative error
// |ad - fd| / max(|ad|, |fd|, 1).
double grad_check(const std::function<Tensor()>& f,
                  const std::vector<Tensor>& leaves, double h = 1e-5);

}  // namespace prf
