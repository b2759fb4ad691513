#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsfed {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when an op receives incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op receives (or would produce) NaN/Inf.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};
}  // namespace detail

/// Dense row-major float64 tensor with an optional reverse-mode tape.
///
/// Copies are shallow handles: two Tensor objects copied from one another
/// refer to the same storage and gradient buffer. Ops never mutate their
/// inputs; only backward() (grad accumulation) and sgd_step() (leaf update)
/// write into an existing tensor.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> data() const;
  std::vector<double> values() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  bool has_history() const;

  /// Reverse pass from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  // Leaf-only mutable access, used by the optimizer.
  std::span<double> mutable_leaf_data();
  std::span<double> mutable_grad();
  void clear_grad();

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise binary ops. Either side may be a single-element tensor, which
// broadcasts as a scalar; any other shape mismatch is a ShapeError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
/// c - a
Tensor rsub_scalar(double c, const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);

// Unary ops.
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Reductions to a single-element tensor of shape {1}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// Stride-1 2-D convolution (cross-correlation) with symmetric zero padding.
/// input [C,H,W], weight [O,C,k,k] with odd k, bias [O] (may be undefined).
/// Output [O, H+2*pad-k+1, W+2*pad-k+1].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t pad);

/// 2x2 pooling with stride 2 over the last two dims of [C,H,W] or [H,W].
Tensor max_pool2(const Tensor& input);
Tensor mean_pool2(const Tensor& input);

Tensor reshape(const Tensor& a, Shape shape);
/// Contiguous view [offset, offset+numel(shape)) of the flattened tensor.
Tensor slice(const Tensor& a, std::size_t offset, Shape shape);

/// Central-difference gradient check. Returns
/// max_i |autodiff_i - fd_i| / max(1, |fd_i|).
double gradient_check(const std::function<Tensor(const Tensor&)>& model_eval,
                      std::span<const double> params, double step);

struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.0;
  std::vector<double> velocity;

  OptimizerState() = default;
  OptimizerState(double lr, double mom, std::size_t n_params);
};

/// velocity = momentum*velocity + grad; params -= lr*velocity; grad cleared.
void sgd_step(Tensor& params, OptimizerState& state);

/// Length-prefixed little-endian float64 stream: u64 count, then values.
std::vector<std::uint8_t> serialize_params(std::span<const double> values);
std::vector<double> deserialize_params(std::span<const std::uint8_t> bytes);
constexpr std::size_t serialized_params_bytes(std::size_t n) { return 8 + 8 * n; }

// Fixed probability floor applied before every log.
inline constexpr double kProbFloor = 1e-7;

}  // namespace dsfed
