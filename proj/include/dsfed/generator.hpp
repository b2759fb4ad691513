#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsfed/synth.hpp"
#include "dsfed/tensor.hpp"

namespace dsfed {

/// Client-fitted conditional generator: per-region intensity moments plus a
/// sinusoidal texture and residual noise level. This is the only thing a
/// client uploads about its image appearance.
struct GeneratorParams {
  double est_fg_mean = 0;
  double est_fg_std = 0;
  double est_bg_mean = 0;
  double est_bg_std = 0;
  double est_texture_freq = 0;
  double est_noise_sigma = 0;
  double est_fg_fraction = 0;  // mean mask coverage of the fitting data
  int source_client = 0;

  bool operator==(const GeneratorParams&) const = default;
};

struct GeneratedSample {
  Tensor image;
  Tensor mask;
  int source_client = 0;
  std::size_t index = 0;
};

inline constexpr std::size_t kMinFitSamples = 5;
inline constexpr std::size_t kGeneratorParamsBytes = 7 * 8 + 4;

GeneratorParams fit_generator(const ClientDataset& client);

/// Renders an image for `mask` from the fitted statistics. The mask is the label.
GeneratedSample generate(const GeneratorParams& gen, const Tensor& mask, std::uint64_t seed);

/// Union over clients of n_per_client samples conditioned on masks drawn with
/// replacement from each client's bank. Sample order: client-major.
std::vector<GeneratedSample> build_global_set(std::span<const GeneratorParams> generators,
                                              std::span<const std::vector<Tensor>> mask_banks,
                                              std::size_t n_per_client, std::uint64_t seed);

/// Per-image summary (mean, std, mean gradient magnitude).
std::array<double, 3> image_summary(const Tensor& image);

/// Fréchet distance between two Gaussians given as mean vectors and
/// row-major covariance matrices of dimension d. 1e-6*I is added to both
/// covariances before the matrix square root; the result is clamped at 0.
double frechet_distance(std::span<const double> mu_a, std::span<const double> cov_a,
                        std::span<const double> mu_b, std::span<const double> cov_b, std::size_t d);

/// Fréchet distance between Gaussian fits of the image summaries of two sets.
double frechet_pixel_distance(std::span<const Tensor> set_a, std::span<const Tensor> set_b);

std::vector<std::uint8_t> serialize_generator(const GeneratorParams& gen);
GeneratorParams deserialize_generator(std::span<const std::uint8_t> bytes);

/// Length-prefixed records: header {K, n_per_client, grid}, then one record
/// per sample {u16 source_client, mask bitmap, grid*grid float64 image}.
std::vector<std::uint8_t> encode_dtilde(std::span<const GeneratedSample> samples, std::size_t n_clients,
                                        std::size_t n_per_client, std::size_t grid);
struct DTildeFile {
  std::size_t n_clients = 0, n_per_client = 0, grid = 0;
  std::vector<GeneratedSample> samples;
};
DTildeFile decode_dtilde(std::span<const std::uint8_t> bytes);

}  // namespace dsfed
