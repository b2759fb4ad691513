#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsfed/tensor.hpp"

namespace dsfed {

/// Per-client appearance ("modality") of the rendered images.
struct DomainStyle {
  double fg_mean = 0.7;
  double fg_std = 0.0;
  double bg_mean = 0.3;
  double bg_std = 0.0;
  double texture_freq = 4.0;  // cycles per image width
  double noise_sigma = 0.0;
  double contrast = 1.0;

  void validate() const;
  bool operator==(const DomainStyle&) const = default;
};

struct TaskSample {
  Tensor image;  // [G,G] in [0,1]
  Tensor mask;   // [G,G] in {0,1}
  int domain_id = 0;
};

struct ClientDataset {
  int domain_id = 0;
  DomainStyle style;
  std::vector<TaskSample> samples;
  std::vector<Tensor> mask_bank;
};

/// Ranges of the seeded style sampler.
struct StyleRanges {
  double fg_mean_min = 0.45, fg_mean_max = 0.9;
  double bg_mean_min = 0.05, bg_mean_max = 0.45;
  double fg_std_max = 0.08, bg_std_max = 0.08;
  double texture_freq_min = 2, texture_freq_max = 8;  // integers drawn inclusive
  double noise_sigma_min = 0.02, noise_sigma_max = 0.2;
  double contrast_min = 0.8, contrast_max = 1.2;

  void validate() const;
};

struct FederationSpec {
  std::size_t n_clients = 4;
  std::size_t samples_per_client = 24;
  std::size_t grid = 32;
  StyleRanges styles;
  std::uint64_t seed = 0;
};

inline constexpr double kMinFgFraction = 0.05;
inline constexpr double kMaxFgFraction = 0.6;
inline constexpr double kMinStyleContrast = 0.15;   // |fg_mean - bg_mean|
inline constexpr double kMinStyleSeparation = 0.1;  // pairwise fg_mean or noise_sigma

double foreground_fraction(const Tensor& mask);

/// Binary mask of 1-3 filled ellipses with foreground fraction in [0.05, 0.6].
Tensor gen_mask(std::uint64_t seed, std::size_t grid);

/// Texture field sqrt(2) * sin(2*pi*freq*x/G + phase), unit RMS, varying along x.
double texture_value(double freq, double phase, std::size_t x, std::size_t grid);

/// pixel = clamp(contrast * (region_mean + region_std*texture + noise), 0, 1).
Tensor render(const Tensor& mask, const DomainStyle& style, std::uint64_t seed);

DomainStyle sample_style(const StyleRanges& ranges, std::uint64_t seed);
bool styles_separated(const DomainStyle& a, const DomainStyle& b);

std::vector<ClientDataset> make_federation(const FederationSpec& spec);

struct LeaveOneOutSplit {
  std::vector<ClientDataset> train_clients;
  std::vector<TaskSample> test_set;
  int held_out = 0;
};

LeaveOneOutSplit split_leave_one_out(const std::vector<ClientDataset>& federation, int held_out);

// Row-major LSB-first bit packing of a binary mask.
std::vector<std::uint8_t> pack_mask(const Tensor& mask);
Tensor unpack_mask(std::span<const std::uint8_t> bits, std::size_t grid);
constexpr std::size_t mask_bitmap_bytes(std::size_t grid) { return (grid * grid + 7) / 8; }

/// u32 count, u32 grid, then count bitmaps.
std::vector<std::uint8_t> serialize_mask_bank(std::span<const Tensor> masks, std::size_t grid);
std::vector<Tensor> deserialize_mask_bank(std::span<const std::uint8_t> bytes);
constexpr std::size_t mask_bank_bytes(std::size_t count, std::size_t grid) {
  return 8 + count * mask_bitmap_bytes(grid);
}

/// Portable replay format for a whole federation.
void save_federation(const std::string& path, const std::vector<ClientDataset>& federation);
std::vector<ClientDataset> load_federation(const std::string& path);

}  // namespace dsfed
