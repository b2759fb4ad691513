#include "dsfed/models.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace dsfed {

std::string to_string(ScaleClass s) { return s == ScaleClass::Foundation ? "foundation" : "lightweight"; }

ScaleClass scale_from_string(const std::string& s) {
  if (s == "foundation") return ScaleClass::Foundation;
  if (s == "lightweight") return ScaleClass::Lightweight;
  throw std::invalid_argument("unknown model scale '" + s + "'");
}

void ModelSpec::validate() const {
  if (input_size < 2) throw std::invalid_argument("ModelSpec: input_size must be >= 2");
  if (widths.empty()) throw std::invalid_argument("ModelSpec: at least one layer required");
  if (widths.size() != kernels.size()) {
    throw std::invalid_argument("ModelSpec: widths and kernels must have equal length");
  }
  if (widths.back() != 1) throw std::invalid_argument("ModelSpec: last layer must have width 1");
  for (auto w : widths) {
    if (w == 0) throw std::invalid_argument("ModelSpec: layer width must be positive");
  }
  for (auto k : kernels) {
    if (k % 2 == 0) throw std::invalid_argument("ModelSpec: kernel sizes must be odd");
    if (k > 2 * input_size - 1) throw std::invalid_argument("ModelSpec: kernel larger than input");
  }
}

std::size_t ModelSpec::param_count() const {
  std::size_t n = 0, in = 1;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    n += widths[l] * in * kernels[l] * kernels[l] + widths[l];
    in = widths[l];
  }
  return n;
}

ModelSpec ModelSpec::lightweight_default(std::size_t input_size) {
  return {ScaleClass::Lightweight, input_size, {8, 8, 1}, {3, 3, 3}};
}

ModelSpec ModelSpec::foundation_default(std::size_t input_size) {
  return {ScaleClass::Foundation, input_size, {16, 16, 16, 16, 16, 1}, {3, 3, 3, 3, 3, 3}};
}

ModelParams init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams p{spec, std::vector<double>(spec.param_count(), 0.0)};
  std::mt19937_64 rng(seed);
  std::size_t off = 0, in = 1;
  for (std::size_t l = 0; l < spec.widths.size(); ++l) {
    const std::size_t k = spec.kernels[l];
    const std::size_t fan_in = in * k * k;
    const std::size_t n_w = spec.widths[l] * fan_in;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (std::size_t i = 0; i < n_w; ++i) p.values[off + i] = dist(rng);
    off += n_w + spec.widths[l];  // biases stay zero
    in = spec.widths[l];
  }
  return p;
}

Tensor forward(const ModelSpec& spec, const Tensor& params, const Tensor& image) {
  if (params.size() != spec.param_count()) {
    throw ShapeError("forward: parameter vector of length " + std::to_string(params.size()) +
                     " does not match spec with " + std::to_string(spec.param_count()) + " parameters");
  }
  const auto& s = image.shape();
  if (s.size() != 2 || s[0] != spec.input_size || s[1] != spec.input_size) {
    throw ShapeError("forward: image shape " + shape_str(s) + " does not match input size " +
                     std::to_string(spec.input_size));
  }
  Tensor x = reshape(image, {1, s[0], s[1]});
  std::size_t off = 0, in = 1;
  for (std::size_t l = 0; l < spec.widths.size(); ++l) {
    const std::size_t k = spec.kernels[l], out = spec.widths[l];
    Tensor w = slice(params, off, {out, in, k, k});
    off += out * in * k * k;
    Tensor b = slice(params, off, {out});
    off += out;
    x = conv2d(x, w, b, k / 2);
    x = (l + 1 < spec.widths.size()) ? relu(x) : sigmoid(x);
    in = out;
  }
  return reshape(x, {s[0], s[1]});
}

Tensor forward(const ModelParams& params, const Tensor& image) {
  return forward(params.spec, Tensor::from({params.values.size()}, params.values), image);
}

Tensor supervised_loss(const Tensor& prob_map, const Tensor& mask) {
  if (prob_map.shape() != mask.shape()) {
    throw ShapeError("supervised_loss: prediction " + shape_str(prob_map.shape()) + " vs mask " +
                     shape_str(mask.shape()));
  }
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("supervised_loss: mask must be binary");
  }
  Tensor p = clamp(prob_map, kProbFloor, 1.0 - kProbFloor);
  Tensor bce = neg(mean(mask * log(p) + rsub_scalar(1.0, mask) * log(rsub_scalar(1.0, p))));
  Tensor inter = sum(p * mask);
  Tensor denom = add_scalar(sum(p) + sum(mask), kSoftDiceEps);
  Tensor soft_dice = add_scalar(mul_scalar(inter, 2.0), kSoftDiceEps) / denom;
  return bce + rsub_scalar(1.0, soft_dice);
}

}  // namespace dsfed
