#include "dsfed/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "dsfed/bytes.hpp"
#include "dsfed/rng.hpp"

namespace dsfed {

void DomainStyle::validate() const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("DomainStyle: ") + name + " must lie in [0,1]");
  };
  unit(fg_mean, "fg_mean");
  unit(bg_mean, "bg_mean");
  if (std::abs(fg_mean - bg_mean) < kMinStyleContrast - 1e-12) {
    throw std::invalid_argument("DomainStyle: |fg_mean - bg_mean| must be at least 0.15");
  }
  if (!(fg_std >= 0 && bg_std >= 0 && noise_sigma >= 0)) {
    throw std::invalid_argument("DomainStyle: std and noise values must be non-negative");
  }
  if (!(texture_freq >= 0) || !std::isfinite(texture_freq)) {
    throw std::invalid_argument("DomainStyle: texture_freq must be non-negative");
  }
  if (!(contrast > 0) || !std::isfinite(contrast)) throw std::invalid_argument("DomainStyle: contrast must be positive");
}

void StyleRanges::validate() const {
  auto range = [](double lo, double hi, const char* name) {
    if (!(lo <= hi)) throw std::invalid_argument(std::string("style ranges: ") + name + " min exceeds max");
  };
  range(fg_mean_min, fg_mean_max, "fg_mean");
  range(bg_mean_min, bg_mean_max, "bg_mean");
  range(texture_freq_min, texture_freq_max, "texture_freq");
  range(noise_sigma_min, noise_sigma_max, "noise_sigma");
  range(contrast_min, contrast_max, "contrast");
  if (fg_mean_max - bg_mean_min < kMinStyleContrast) {
    throw std::invalid_argument("style ranges: cannot reach the 0.15 foreground/background gap");
  }
  if (fg_std_max < 0 || bg_std_max < 0 || noise_sigma_min < 0 || contrast_min <= 0 || texture_freq_min < 0) {
    throw std::invalid_argument("style ranges: negative spread, noise or frequency");
  }
}

double foreground_fraction(const Tensor& mask) {
  double on = 0;
  for (double v : mask.data()) on += v;
  return on / static_cast<double>(mask.size());
}

Tensor gen_mask(std::uint64_t seed, std::size_t grid) {
  if (grid < 16) throw std::invalid_argument("gen_mask: grid must be at least 16");
  const double g = static_cast<double>(grid);
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, {attempt}));
    std::uniform_int_distribution<int> count(1, 3);
    std::uniform_real_distribution<double> center(0.2 * g, 0.8 * g);
    std::uniform_real_distribution<double> axis(0.08 * g, 0.3 * g);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::vector<double> m(grid * grid, 0.0);
    const int n = count(rng);
    for (int e = 0; e < n; ++e) {
      const double cx = center(rng), cy = center(rng);
      const double a = axis(rng), b = axis(rng);
      const double t = angle(rng);
      const double ct = std::cos(t), st = std::sin(t);
      for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx;
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double u = (dx * ct + dy * st) / a;
          const double v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) m[y * grid + x] = 1.0;
        }
    }
    Tensor mask = Tensor::from({grid, grid}, std::move(m));
    const double frac = foreground_fraction(mask);
    if (frac >= kMinFgFraction && frac <= kMaxFgFraction) return mask;
  }
}

double texture_value(double freq, double phase, std::size_t x, std::size_t grid) {
  return std::numbers::sqrt2 *
         std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(x) / static_cast<double>(grid) + phase);
}

Tensor render(const Tensor& mask, const DomainStyle& style, std::uint64_t seed) {
  style.validate();
  const auto& s = mask.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("render: mask must be square, got " + shape_str(s));
  const std::size_t grid = s[0];
  Rng rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  const double phase = phase_dist(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto m = mask.data();
  std::vector<double> img(grid * grid);
  for (std::size_t y = 0; y < grid; ++y)
    for (std::size_t x = 0; x < grid; ++x) {
      const std::size_t i = y * grid + x;
      const bool fg = m[i] > 0.5;
      const double mu = fg ? style.fg_mean : style.bg_mean;
      const double sd = fg ? style.fg_std : style.bg_std;
      double v = mu;
      if (sd > 0) v += sd * texture_value(style.texture_freq, phase, x, grid);
      if (style.noise_sigma > 0) v += style.noise_sigma * noise(rng);
      img[i] = std::clamp(style.contrast * v, 0.0, 1.0);
    }
  return Tensor::from({grid, grid}, std::move(img));
}

DomainStyle sample_style(const StyleRanges& r, std::uint64_t seed) {
  Rng rng(seed);
  auto uni = [&rng](double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng); };
  DomainStyle st;
  do {
    st.fg_mean = uni(r.fg_mean_min, r.fg_mean_max);
    st.bg_mean = uni(r.bg_mean_min, r.bg_mean_max);
  } while (st.fg_mean - st.bg_mean < kMinStyleContrast);
  st.fg_std = uni(0.0, r.fg_std_max);
  st.bg_std = uni(0.0, r.bg_std_max);
  st.texture_freq = static_cast<double>(std::uniform_int_distribution<int>(
      static_cast<int>(std::ceil(r.texture_freq_min)), static_cast<int>(std::floor(r.texture_freq_max)))(rng));
  st.noise_sigma = uni(r.noise_sigma_min, r.noise_sigma_max);
  st.contrast = uni(r.contrast_min, r.contrast_max);
  return st;
}

bool styles_separated(const DomainStyle& a, const DomainStyle& b) {
  return std::abs(a.fg_mean - b.fg_mean) >= kMinStyleSeparation ||
         std::abs(a.noise_sigma - b.noise_sigma) >= kMinStyleSeparation;
}

std::vector<ClientDataset> make_federation(const FederationSpec& spec) {
  if (spec.n_clients < 2) throw std::invalid_argument("make_federation: need at least 2 clients");
  if (spec.samples_per_client == 0) throw std::invalid_argument("make_federation: samples_per_client must be positive");
  spec.styles.validate();
  std::vector<ClientDataset> fed(spec.n_clients);
  for (std::size_t k = 0; k < spec.n_clients; ++k) {
    auto& c = fed[k];
    c.domain_id = static_cast<int>(k);
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::invalid_argument("make_federation: style ranges too narrow to separate clients");
      c.style = sample_style(spec.styles, derive_seed(spec.seed, {kTagStyle, k, attempt}));
      bool ok = true;
      for (std::size_t j = 0; j < k; ++j) ok = ok && styles_separated(c.style, fed[j].style);
      if (ok) break;
    }
    for (std::size_t i = 0; i < spec.samples_per_client; ++i) {
      Tensor mask = gen_mask(derive_seed(spec.seed, {kTagMask, k, i}), spec.grid);
      Tensor image = render(mask, c.style, derive_seed(spec.seed, {kTagRender, k, i}));
      c.samples.push_back({image, mask, c.domain_id});
      c.mask_bank.push_back(mask);
    }
  }
  return fed;
}

LeaveOneOutSplit split_leave_one_out(const std::vector<ClientDataset>& federation, int held_out) {
  LeaveOneOutSplit split;
  split.held_out = held_out;
  bool found = false;
  for (const auto& c : federation) {
    if (c.domain_id == held_out) {
      split.test_set = c.samples;
      found = true;
    } else {
      split.train_clients.push_back(c);
    }
  }
  if (!found) throw std::invalid_argument("split_leave_one_out: unknown domain id " + std::to_string(held_out));
  return split;
}

std::vector<std::uint8_t> pack_mask(const Tensor& mask) {
  std::vector<std::uint8_t> bits((mask.size() + 7) / 8, 0);
  auto d = mask.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] != 0.0 && d[i] != 1.0) throw std::invalid_argument("pack_mask: mask must be binary");
    if (d[i] == 1.0) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return bits;
}

Tensor unpack_mask(std::span<const std::uint8_t> bits, std::size_t grid) {
  if (bits.size() != mask_bitmap_bytes(grid)) throw std::invalid_argument("unpack_mask: bitmap size mismatch");
  std::vector<double> m(grid * grid);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (bits[i / 8] >> (i % 8)) & 1u ? 1.0 : 0.0;
  return Tensor::from({grid, grid}, std::move(m));
}

std::vector<std::uint8_t> serialize_mask_bank(std::span<const Tensor> masks, std::size_t grid) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(masks.size()));
  w.u32(static_cast<std::uint32_t>(grid));
  for (const auto& m : masks) {
    if (m.size() != grid * grid) throw ShapeError("serialize_mask_bank: mask of shape " + shape_str(m.shape()));
    w.bytes(pack_mask(m));
  }
  return w.take();
}

std::vector<Tensor> deserialize_mask_bank(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::uint32_t n = r.u32();
  const std::size_t grid = r.u32();
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(unpack_mask(r.bytes(mask_bitmap_bytes(grid)), grid));
  if (!r.done()) throw std::runtime_error("deserialize_mask_bank: trailing bytes");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

namespace {
constexpr std::uint32_t kFederationMagic = 0x44465344;  // "DSFD"
}

void save_federation(const std::string& path, const std::vector<ClientDataset>& federation) {
  if (federation.empty()) throw std::invalid_argument("save_federation: empty federation");
  const std::size_t grid = federation.front().samples.at(0).mask.shape()[0];
  ByteWriter w;
  w.u32(kFederationMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(federation.size()));
  w.u32(static_cast<std::uint32_t>(grid));
  for (const auto& c : federation) {
    w.u32(static_cast<std::uint32_t>(c.domain_id));
    const auto& s = c.style;
    for (double v : {s.fg_mean, s.fg_std, s.bg_mean, s.bg_std, s.texture_freq, s.noise_sigma, s.contrast}) w.f64(v);
    w.u32(static_cast<std::uint32_t>(c.samples.size()));
    for (const auto& smp : c.samples) {
      w.bytes(pack_mask(smp.mask));
      for (double v : smp.image.data()) w.f64(v);
    }
    w.bytes(serialize_mask_bank(c.mask_bank, grid));
  }
  write_file_bytes(path, w.buffer());
}

std::vector<ClientDataset> load_federation(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.u32() != kFederationMagic) throw std::runtime_error("load_federation: bad magic in '" + path + "'");
  if (r.u32() != 1) throw std::runtime_error("load_federation: unsupported version");
  const std::uint32_t n = r.u32();
  const std::size_t grid = r.u32();
  std::vector<ClientDataset> fed(n);
  for (auto& c : fed) {
    c.domain_id = static_cast<int>(r.u32());
    auto& s = c.style;
    for (double* v : {&s.fg_mean, &s.fg_std, &s.bg_mean, &s.bg_std, &s.texture_freq, &s.noise_sigma, &s.contrast}) {
      *v = r.f64();
    }
    const std::uint32_t ns = r.u32();
    for (std::uint32_t i = 0; i < ns; ++i) {
      Tensor mask = unpack_mask(r.bytes(mask_bitmap_bytes(grid)), grid);
      std::vector<double> img(grid * grid);
      for (auto& v : img) v = r.f64();
      c.samples.push_back({Tensor::from({grid, grid}, std::move(img)), mask, c.domain_id});
    }
    const std::uint32_t nb = r.u32();
    if (r.u32() != grid) throw std::runtime_error("load_federation: mask bank grid mismatch");
    for (std::uint32_t i = 0; i < nb; ++i) c.mask_bank.push_back(unpack_mask(r.bytes(mask_bitmap_bytes(grid)), grid));
  }
  if (!r.done()) throw std::runtime_error("load_federation: trailing bytes in '" + path + "'");
  return fed;
}

}  // namespace dsfed
