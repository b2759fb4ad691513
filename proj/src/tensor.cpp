#include "dsfed/tensor.hpp"

#include <algorithm>
#include <type_traits>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>


#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dsfed {

namespace {
#if defined(__GLIBC__)
// Autodiff tapes allocate and free many ~1 MB buffers per step; above the
// default mmap threshold every one of them is a fresh mapping plus page faults.
[[maybe_unused]] const int kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return 0;
}();
#endif
}  // namespace

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": non-finite input value in tensor of shape " +
                           shape_str(t.shape()));
    }
  }
}

void require_finite_output(const std::vector<double>& out, const char* op) {
  for (double v : out) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
  }
}

std::vector<double>& ensure_grad(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

// Builds the result node; records parents only when some input needs grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool rg = false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) rg = true;
  }
  if (rg) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->defined() ? t->node() : nullptr);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

bool wants_grad(const NodePtr& p) { return p && p->requires_grad; }

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  require_finite(a, name);
  require_finite(b, name);
  const std::size_t na = a.size(), nb = b.size();
  Shape shape;
  if (a.shape() == b.shape() || (na == nb && nb != 1)) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    shape = a.shape();
  } else if (nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = shape_numel(shape);
  const std::size_t sa = na == 1 ? 0 : 1, sb = nb == 1 ? 0 : 1;
  auto da = a.data(), db = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = da[i * sa], y = db[i * sb];
    switch (kind) {
      case BinKind::Add: out[i] = x + y; break;
      case BinKind::Sub: out[i] = x - y; break;
      case BinKind::Mul: out[i] = x * y; break;
      case BinKind::Div:
        if (y == 0.0) throw NonFiniteError(std::string(name) + ": division by zero");
        out[i] = x / y;
        break;
    }
  }
  if (kind == BinKind::Div) require_finite_output(out, name);
  return make_result(std::move(shape), std::move(out), {&a, &b}, [kind, n, sa, sb](Node& self) {
    const NodePtr& pa = self.parents[0];
    const NodePtr& pb = self.parents[1];
    const auto& g = self.grad;
    if (wants_grad(pa)) {
      auto& ga = ensure_grad(*pa);
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == BinKind::Mul) d *= pb->data[i * sb];
        if (kind == BinKind::Div) d /= pb->data[i * sb];
        ga[i * sa] += d;
      }
    }
    if (wants_grad(pb)) {
      auto& gb = ensure_grad(*pb);
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        switch (kind) {
          case BinKind::Add: break;
          case BinKind::Sub: d = -d; break;
          case BinKind::Mul: d *= pa->data[i * sa]; break;
          case BinKind::Div: {
            const double y = pb->data[i * sb];
            d *= -pa->data[i * sa] / (y * y);
            break;
          }
        }
        gb[i * sb] += d;
      }
    }
  });
}

// Unary elementwise op whose derivative is expressible from (input, output).
template <class F, class D>
Tensor unary(const Tensor& a, const char* name, F f, D dfdx, bool check_out = false) {
  require_defined(a, name);
  require_finite(a, name);
  auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i]);
  if (check_out) require_finite_output(out, name);
  return make_result(a.shape(), std::move(out), {&a}, [dfdx](Node& self) {
    const NodePtr& p = self.parents[0];
    auto& gp = ensure_grad(*p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gp[i] += self.grad[i] * dfdx(p->data[i], self.data[i]);
    }
  });
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("Tensor: zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("Tensor: non-finite value in shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::vector<double> Tensor::values() const { return node_->data; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_history() const { return node_ && !node_->is_leaf(); }

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

std::span<double> Tensor::mutable_leaf_data() {
  if (has_history()) throw std::logic_error("mutable_leaf_data: tensor is not a leaf");
  return node_->data;
}

std::span<double> Tensor::mutable_grad() { return ensure_grad(*node_); }

void Tensor::backward() const {
  if (!node_) throw std::invalid_argument("backward: undefined tensor");
  if (size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (node_->is_leaf()) throw std::logic_error("backward: tensor has no recorded history");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads are recomputed from scratch on every call; leaves accumulate.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    else ensure_grad(*n);
  }
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------- ops

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Div, "div"); }
Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; }, true);
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary(a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; }, true);
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor rsub_scalar(double c, const Tensor& a) {
  return unary(a, "rsub_scalar", [c](double x) { return c - x; }, [](double, double) { return -1.0; }, true);
}

Tensor sigmoid(const Tensor& a) {
  // Kept strictly inside (0,1) even where exp saturates.
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return unary(
      a, "sigmoid",
      [lo, hi](double x) {
        const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return std::clamp(s, lo, hi);
      },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; }, true);
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NonFiniteError("log: non-positive input; clamp probabilities first");
  }
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, true);
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  require_finite(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {&a}, [](Node& self) {
    auto& gp = ensure_grad(*self.parents[0]);
    const double g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto da = a.data(), db = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * db[p * n + j];
    }
  }
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const NodePtr& pa = self.parents[0];
    const NodePtr& pb = self.parents[1];
    const auto& g = self.grad;
    if (wants_grad(pa)) {
      auto& ga = ensure_grad(*pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb->data[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (wants_grad(pb)) {
      auto& gb = ensure_grad(*pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa->data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

namespace {

// GEMM kernels below fix the summation order of every output element, so the
// result does not depend on buffer alignment (library kernels pick peeling
// paths at run time, which changes the last bits between runs).

// Micro-kernel over a packed panel ap[p*MR + r]:
// c[r, 0..NR) = sum_p ap[p*MR + r] * b[p, 0..NR), p ascending for every output.
template <std::size_t MR, std::size_t NR>
[[gnu::noinline]] void tile(const double* __restrict ap, const double* __restrict b, std::size_t ldb,
                            double* __restrict c, std::size_t ldc, std::size_t k) {
  double acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict bp = b + p * ldb;
    const double* __restrict av = ap + p * MR;
#pragma GCC unroll 8
    for (std::size_t r = 0; r < MR; ++r)
#pragma GCC unroll 16
      for (std::size_t l = 0; l < NR; ++l) acc[r][l] += av[r] * bp[l];
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t l = 0; l < NR; ++l) c[r * ldc + l] = acc[r][l];
}

template <std::size_t MR>
void row_block(const double* ap, const double* b, double* c, std::size_t k, std::size_t n) {
  constexpr std::size_t NR = 16;
  std::size_t j = 0;
  for (; j + NR <= n; j += NR) tile<MR, NR>(ap, b + j, n, c + j, n, k);
  for (; j < n; ++j) tile<MR, 1>(ap, b + j, n, c + j, n, k);
}

// c[m,n] = A * b[k,n] with A(r,p) = a[r*sa + p*sp]; c overwritten.
void gemm_strided(const double* a, std::size_t sa, std::size_t sp, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  constexpr std::size_t MR = 4;
  std::vector<double> pack(k * MR);
  std::size_t i = 0;
  for (; i + MR <= m; i += MR) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t r = 0; r < MR; ++r) pack[p * MR + r] = a[(i + r) * sa + p * sp];
    row_block<MR>(pack.data(), b, c + i * n, k, n);
  }
  for (; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) pack[p] = a[i * sa + p * sp];
    row_block<1>(pack.data(), b, c + i * n, k, n);
  }
}

// c[m,n] = a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, k, 1, b, c, m, k, n);
}

// c[k,n] = a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, 1, k, b, c, k, m, n);
}

// c[m,k] += a[m,n] * b[k,n]^T, computed as c^T = b * a^T so the packed
// kernel (and its fixed summation order) applies; only a is transposed.
void gemm_nt_add(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<double> at(n * m), ct(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
  gemm_strided(b, n, 1, at.data(), ct.data(), k, n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) c[i * k + p] += ct[p * m + i];
}

struct ConvGeom {
  std::size_t c, h, w, o, k, pad, oh, ow;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return oh * ow; }
};

// cols[(c*k + ky)*k + kx, y*ow + x] = in[c, y+ky-pad, x+kx-pad] (zero outside).
void im2col(const ConvGeom& g, const double* in, double* cols) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + y * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = in + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const auto ix = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatter-add column gradients back to the input layout.
void col2im_add(const ConvGeom& g, const double* cols, double* in_grad) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = in_grad + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + y * g.ow;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const auto ix = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[x];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t pad) {
  require_defined(input, "conv2d");
  require_defined(weight, "conv2d");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  if (is.size() != 3 || ws.size() != 4 || ws[1] != is[0] || ws[2] != ws[3] || ws[2] % 2 == 0) {
    throw ShapeError("conv2d: incompatible input " + shape_str(is) + " and weight " + shape_str(ws) +
                     " (expected [C,H,W] and [O,C,k,k] with odd k)");
  }
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(ws));
  }
  ConvGeom g{is[0], is[1], is[2], ws[0], ws[2], pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) {
    throw ShapeError("conv2d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(is));
  }
  g.oh = g.h + 2 * pad - g.k + 1;
  g.ow = g.w + 2 * pad - g.k + 1;
  require_finite(input, "conv2d");
  require_finite(weight, "conv2d");
  if (bias.defined()) require_finite(bias, "conv2d");

  const std::size_t R = g.rows(), N = g.cols(), O = g.o;
  // The column matrix is kept for the backward pass.
  auto cols = std::make_shared<std::vector<double>>(R * N);
  im2col(g, input.data().data(), cols->data());
  std::vector<double> out(O * N);
  gemm_nn(weight.data().data(), cols->data(), out.data(), O, R, N);
  if (bias.defined()) {
    for (std::size_t o = 0; o < O; ++o) {
      const double b = bias.data()[o];
      for (std::size_t j = 0; j < N; ++j) out[o * N + j] += b;
    }
  }
  return make_result({g.o, g.oh, g.ow}, std::move(out), {&input, &weight, &bias}, [g, cols, R, N, O](Node& self) {
    const NodePtr& pin = self.parents[0];
    const NodePtr& pw = self.parents[1];
    const NodePtr& pb = self.parents[2];
    const double* gout = self.grad.data();
    if (wants_grad(pb)) {
      auto& gb = ensure_grad(*pb);
      for (std::size_t o = 0; o < O; ++o) {
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) acc += gout[o * N + j];
        gb[o] += acc;
      }
    }
    if (wants_grad(pw)) gemm_nt_add(gout, cols->data(), ensure_grad(*pw).data(), O, N, R);
    if (wants_grad(pin)) {
      std::vector<double> gcols(R * N);
      gemm_tn(pw->data.data(), gout, gcols.data(), O, R, N);
      col2im_add(g, gcols.data(), ensure_grad(*pin).data());
    }
  });
}

namespace {

Tensor pool2(const Tensor& input, bool use_max, const char* name) {
  require_defined(input, name);
  const auto& s = input.shape();
  if (s.size() < 2 || s.size() > 3 || s[s.size() - 1] % 2 || s[s.size() - 2] % 2) {
    throw ShapeError(std::string(name) + ": expected [H,W] or [C,H,W] with even H and W, got " + shape_str(s));
  }
  require_finite(input, name);
  const std::size_t c = s.size() == 3 ? s[0] : 1;
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t oh = h / 2, ow = w / 2;
  Shape out_shape = s;
  out_shape[s.size() - 2] = oh;
  out_shape[s.size() - 1] = ow;
  auto in = input.data();
  std::vector<double> out(c * oh * ow);
  // For max pooling, remember which input fed each output.
  auto argmax = std::make_shared<std::vector<std::size_t>>(use_max ? out.size() : 0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = ch * h * w + 2 * y * w + 2 * x;
        const std::size_t idx[4] = {base, base + 1, base + w, base + w + 1};
        const std::size_t oi = (ch * oh + y) * ow + x;
        if (use_max) {
          std::size_t best = idx[0];
          for (std::size_t q = 1; q < 4; ++q)
            if (in[idx[q]] > in[best]) best = idx[q];
          out[oi] = in[best];
          (*argmax)[oi] = best;
        } else {
          out[oi] = 0.25 * (in[idx[0]] + in[idx[1]] + in[idx[2]] + in[idx[3]]);
        }
      }
  return make_result(std::move(out_shape), std::move(out), {&input}, [use_max, argmax, c, h, w, oh, ow](Node& self) {
    auto& gp = ensure_grad(*self.parents[0]);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t oi = (ch * oh + y) * ow + x;
          const double g = self.grad[oi];
          if (use_max) {
            gp[(*argmax)[oi]] += g;
          } else {
            const std::size_t base = ch * h * w + 2 * y * w + 2 * x;
            gp[base] += 0.25 * g;
            gp[base + 1] += 0.25 * g;
            gp[base + w] += 0.25 * g;
            gp[base + w + 1] += 0.25 * g;
          }
        }
  });
}

}  // namespace

Tensor max_pool2(const Tensor& input) { return pool2(input, true, "max_pool2"); }
Tensor mean_pool2(const Tensor& input) { return pool2(input, false, "mean_pool2"); }

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    auto& gp = ensure_grad(*self.parents[0]);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& a, std::size_t offset, Shape shape) {
  require_defined(a, "slice");
  const std::size_t n = shape_numel(shape);
  if (offset + n > a.size()) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  auto d = a.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(offset),
                          d.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return make_result(std::move(shape), std::move(out), {&a}, [offset](Node& self) {
    auto& gp = ensure_grad(*self.parents[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[offset + i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- checks

double gradient_check(const std::function<Tensor(const Tensor&)>& model_eval, std::span<const double> params,
                      double step) {
  if (!(step > 0.0 && step <= 1e-2)) throw std::invalid_argument("gradient_check: step must lie in (0, 1e-2]");
  const std::vector<double> base(params.begin(), params.end());
  const Shape shape{base.size()};

  auto eval_at = [&](const std::vector<double>& p) {
    return model_eval(Tensor::from(shape, p, false)).item();
  };

  Tensor leaf = Tensor::from(shape, base, true);
  Tensor loss = model_eval(leaf);
  const double f0 = loss.item();
  if (std::bit_cast<std::uint64_t>(f0) != std::bit_cast<std::uint64_t>(eval_at(base))) {
    throw std::runtime_error("gradient_check: model_eval is not deterministic");
  }
  std::vector<double> analytic(base.size(), 0.0);
  if (loss.has_history()) {
    loss.backward();
    if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }

  double worst = 0.0;
  std::vector<double> p = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    p[i] = base[i] + step;
    const double fp = eval_at(p);
    p[i] = base[i] - step;
    const double fm = eval_at(p);
    p[i] = base[i];
    const double fd = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

// ---------------------------------------------------------------- optimizer

OptimizerState::OptimizerState(double lr, double mom, std::size_t n_params)
    : learning_rate(lr), momentum(mom), velocity(n_params, 0.0) {
  if (!(lr > 0.0)) throw std::invalid_argument("OptimizerState: learning rate must be positive");
  if (!(mom >= 0.0 && mom < 1.0)) throw std::invalid_argument("OptimizerState: momentum must lie in [0,1)");
}

void sgd_step(Tensor& params, OptimizerState& state) {
  if (!params.defined() || !params.has_grad()) throw std::logic_error("sgd_step: parameters have no gradient");
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: velocity length " + std::to_string(state.velocity.size()) +
                     " does not match parameter length " + std::to_string(params.size()));
  }
  auto g = params.grad();
  auto p = params.mutable_leaf_data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] + g[i];
    p[i] -= state.learning_rate * state.velocity[i];
  }
  params.clear_grad();
}

// ---------------------------------------------------------------- bytes

namespace {
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}
}  // namespace

std::vector<std::uint8_t> serialize_params(std::span<const double> values) {
  std::vector<std::uint8_t> out;
  out.reserve(serialized_params_bytes(values.size()));
  put_u64(out, values.size());
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

std::vector<double> deserialize_params(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw std::invalid_argument("deserialize_params: truncated header");
  const std::uint64_t n = get_u64(bytes, 0);
  if (bytes.size() != serialized_params_bytes(n)) {
    throw std::invalid_argument("deserialize_params: expected " + std::to_string(serialized_params_bytes(n)) +
                                " bytes, got " + std::to_string(bytes.size()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<double>(get_u64(bytes, 8 + 8 * i));
  return out;
}

}  // namespace dsfed
