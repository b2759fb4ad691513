#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsfed/tensor.hpp"

namespace dsfed {

enum class ScaleClass { Foundation, Lightweight };

std::string to_string(ScaleClass s);
ScaleClass scale_from_string(const std::string& s);

/// A plain stack of same-resolution convolutions: ReLU between layers,
/// sigmoid on the single-channel output.
struct ModelSpec {
  ScaleClass scale = ScaleClass::Lightweight;
  std::size_t input_size = 32;
  std::vector<std::size_t> widths;   // output channels per layer; last is 1
  std::vector<std::size_t> kernels;  // odd kernel side per layer

  void validate() const;
  std::size_t param_count() const;

  static ModelSpec lightweight_default(std::size_t input_size = 32);
  static ModelSpec foundation_default(std::size_t input_size = 32);

  bool operator==(const ModelSpec&) const = default;
};

struct ModelParams {
  ModelSpec spec;
  std::vector<double> values;

  std::size_t byte_size() const { return serialized_params_bytes(values.size()); }
};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
ModelParams init_model(const ModelSpec& spec, std::uint64_t seed);

/// Differentiable forward pass. `params` is a flat tensor of length
/// spec.param_count(); `image` is [H,W] with H == W == spec.input_size.
Tensor forward(const ModelSpec& spec, const Tensor& params, const Tensor& image);

/// Gradient-free convenience overload.
Tensor forward(const ModelParams& params, const Tensor& image);

/// Mean BCE plus (1 - soft Dice), computed on probabilities clamped to
/// [kProbFloor, 1 - kProbFloor].
Tensor supervised_loss(const Tensor& prob_map, const Tensor& mask);

// Smoothing constant of the soft-Dice term.
inline constexpr double kSoftDiceEps = 1e-6;

}  // namespace dsfed
