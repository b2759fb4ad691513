#include "dsfed/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

#include "dsfed/bytes.hpp"
#include "dsfed/rng.hpp"

namespace dsfed {

namespace {

struct Moments {
  double sum = 0, sum_sq = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

// Population std about a known mean, two-pass for accuracy.
double pooled_std(const std::vector<const Tensor*>& images, const std::vector<const Tensor*>& masks, bool fg,
                  double mu) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto img = images[i]->data();
    auto m = masks[i]->data();
    for (std::size_t p = 0; p < img.size(); ++p) {
      if ((m[p] > 0.5) != fg) continue;
      const double d = img[p] - mu;
      acc += d * d;
      ++n;
    }
  }
  return n ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
}

}  // namespace

GeneratorParams fit_generator(const ClientDataset& client) {
  if (client.samples.size() < kMinFitSamples) {
    throw std::invalid_argument("fit_generator: client " + std::to_string(client.domain_id) + " has " +
                                std::to_string(client.samples.size()) + " samples, need at least 5");
  }
  std::vector<const Tensor*> images, masks;
  for (const auto& s : client.samples) {
    images.push_back(&s.image);
    masks.push_back(&s.mask);
  }
  const std::size_t grid = images.front()->shape()[0];

  Moments fg, bg;
  double frac = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto img = images[i]->data();
    auto m = masks[i]->data();
    for (std::size_t p = 0; p < img.size(); ++p) (m[p] > 0.5 ? fg : bg).add(img[p]);
    frac += foreground_fraction(*masks[i]);
  }
  GeneratorParams gen;
  gen.source_client = client.domain_id;
  gen.est_fg_mean = fg.mean();
  gen.est_bg_mean = bg.mean();
  gen.est_fg_std = pooled_std(images, masks, true, gen.est_fg_mean);
  gen.est_bg_std = pooled_std(images, masks, false, gen.est_bg_mean);
  gen.est_fg_fraction = frac / static_cast<double>(images.size());

  // Region-demeaned residuals.
  std::vector<std::vector<double>> resid(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto img = images[i]->data();
    auto m = masks[i]->data();
    resid[i].resize(img.size());
    for (std::size_t p = 0; p < img.size(); ++p) resid[i][p] = img[p] - (m[p] > 0.5 ? gen.est_fg_mean : gen.est_bg_mean);
  }

  // Dominant horizontal frequency: row-wise DFT power at integer bins.
  const std::size_t max_bin = grid / 2;
  std::vector<double> power(max_bin + 1, 0.0);
  const double two_pi_over_g = 2.0 * std::numbers::pi / static_cast<double>(grid);
  for (const auto& r : resid)
    for (std::size_t y = 0; y < grid; ++y)
      for (std::size_t u = 1; u <= max_bin; ++u) {
        double re = 0, im = 0;
        for (std::size_t x = 0; x < grid; ++x) {
          const double a = two_pi_over_g * static_cast<double>(u * x);
          re += r[y * grid + x] * std::cos(a);
          im -= r[y * grid + x] * std::sin(a);
        }
        power[u] += re * re + im * im;
      }
  std::size_t best = 1;
  for (std::size_t u = 2; u <= max_bin; ++u)
    if (power[u] > power[best]) best = u;
  std::vector<double> others;
  for (std::size_t u = 1; u <= max_bin; ++u)
    if (u != best) others.push_back(power[u]);
  std::nth_element(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(others.size() / 2), others.end());
  const double median = others.empty() ? 0.0 : others[others.size() / 2];
  // A texture must stand well clear of the flat noise floor to count.
  const bool textured = power[best] > 8.0 * median && power[best] > 1e-12;
  gen.est_texture_freq = textured ? static_cast<double>(best) : 0.0;

  // Remove the per-region sinusoid by least squares and measure what is left.
  double noise_acc = 0;
  std::size_t noise_n = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto m = masks[i]->data();
    auto& r = resid[i];
    if (textured) {
      for (int region = 0; region < 2; ++region) {
        double ss = 0, sc = 0, cc = 0, rs = 0, rc = 0;
        for (std::size_t p = 0; p < r.size(); ++p) {
          if ((m[p] > 0.5) != (region == 1)) continue;
          const double a = two_pi_over_g * gen.est_texture_freq * static_cast<double>(p % grid);
          const double s = std::sin(a), c = std::cos(a);
          ss += s * s;
          sc += s * c;
          cc += c * c;
          rs += r[p] * s;
          rc += r[p] * c;
        }
        const double det = ss * cc - sc * sc;
        if (std::abs(det) < 1e-12) continue;
        const double bs = (rs * cc - rc * sc) / det;
        const double bc = (rc * ss - rs * sc) / det;
        for (std::size_t p = 0; p < r.size(); ++p) {
          if ((m[p] > 0.5) != (region == 1)) continue;
          const double a = two_pi_over_g * gen.est_texture_freq * static_cast<double>(p % grid);
          r[p] -= bs * std::sin(a) + bc * std::cos(a);
        }
      }
    }
    for (double v : r) {
      noise_acc += v * v;
      ++noise_n;
    }
  }
  gen.est_noise_sigma = std::sqrt(noise_acc / static_cast<double>(noise_n));
  return gen;
}

GeneratedSample generate(const GeneratorParams& gen, const Tensor& mask, std::uint64_t seed) {
  const auto& s = mask.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("generate: mask must be square, got " + shape_str(s));
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("generate: mask must be binary");
  }
  const std::size_t grid = s[0];
  const double sigma = gen.est_noise_sigma;
  const double amp_fg = std::sqrt(std::max(0.0, gen.est_fg_std * gen.est_fg_std - sigma * sigma));
  const double amp_bg = std::sqrt(std::max(0.0, gen.est_bg_std * gen.est_bg_std - sigma * sigma));

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
      double v = fg ? gen.est_fg_mean : gen.est_bg_mean;
      const double amp = fg ? amp_fg : amp_bg;
      if (amp > 0 && gen.est_texture_freq > 0) v += amp * texture_value(gen.est_texture_freq, phase, x, grid);
      if (sigma > 0) v += sigma * noise(rng);
      img[i] = std::clamp(v, 0.0, 1.0);
    }
  return {Tensor::from({grid, grid}, std::move(img)), mask, gen.source_client, 0};
}

std::vector<GeneratedSample> build_global_set(std::span<const GeneratorParams> generators,
                                              std::span<const std::vector<Tensor>> mask_banks,
                                              std::size_t n_per_client, std::uint64_t seed) {
  if (generators.size() != mask_banks.size()) {
    throw std::invalid_argument("build_global_set: one mask bank per generator required");
  }
  std::vector<GeneratedSample> out;
  out.reserve(generators.size() * n_per_client);
  for (std::size_t k = 0; k < generators.size(); ++k) {
    const auto& bank = mask_banks[k];
    if (bank.empty()) {
      throw std::invalid_argument("build_global_set: empty mask bank for client " +
                                  std::to_string(generators[k].source_client));
    }
    Rng pick(derive_seed(seed, {kTagGlobalSet, k}));
    std::uniform_int_distribution<std::size_t> which(0, bank.size() - 1);
    for (std::size_t i = 0; i < n_per_client; ++i) {
      GeneratedSample s = generate(generators[k], bank[which(pick)], derive_seed(seed, {kTagGenerate, k, i}));
      s.index = out.size();
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::array<double, 3> image_summary(const Tensor& image) {
  const auto& s = image.shape();
  if (s.size() != 2 || s[0] < 2 || s[1] < 2) throw ShapeError("image_summary: expected [H,W], got " + shape_str(s));
  const std::size_t h = s[0], w = s[1];
  auto d = image.data();
  double mean = 0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(d.size());
  double var = 0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d.size());
  double grad = 0;
  for (std::size_t y = 0; y + 1 < h; ++y)
    for (std::size_t x = 0; x + 1 < w; ++x) {
      const double gx = d[y * w + x + 1] - d[y * w + x];
      const double gy = d[(y + 1) * w + x] - d[y * w + x];
      grad += std::sqrt(gx * gx + gy * gy);
    }
  grad /= static_cast<double>((h - 1) * (w - 1));
  return {mean, std::sqrt(var), grad};
}

double frechet_distance(std::span<const double> mu_a, std::span<const double> cov_a, std::span<const double> mu_b,
                        std::span<const double> cov_b, std::size_t d) {
  if (mu_a.size() != d || mu_b.size() != d || cov_a.size() != d * d || cov_b.size() != d * d) {
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  }
  using Mat = Eigen::MatrixXd;
  const auto n = static_cast<Eigen::Index>(d);
  Mat a = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_a.data(), n, n);
  Mat b = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_b.data(), n, n);
  a = 0.5 * (a + a.transpose()) + 1e-6 * Mat::Identity(n, n);
  b = 0.5 * (b + b.transpose()) + 1e-6 * Mat::Identity(n, n);

  // tr sqrt(A B) = tr sqrt(A^{1/2} B A^{1/2}); the inner matrix is symmetric PSD.
  Eigen::SelfAdjointEigenSolver<Mat> ea(a);
  Mat sqrt_a = ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
               ea.eigenvectors().transpose();
  Mat inner = sqrt_a * b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double mean_term = 0;
  for (std::size_t i = 0; i < d; ++i) mean_term += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
  const double d2 = mean_term + a.trace() + b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d2);
}

double frechet_pixel_distance(std::span<const Tensor> set_a, std::span<const Tensor> set_b) {
  if (set_a.size() < 10 || set_b.size() < 10) {
    throw std::invalid_argument("frechet_pixel_distance: each set needs at least 10 images");
  }
  auto fit = [](std::span<const Tensor> set, std::vector<double>& mu, std::vector<double>& cov) {
    std::vector<std::array<double, 3>> feats;
    for (const auto& img : set) feats.push_back(image_summary(img));
    mu.assign(3, 0.0);
    cov.assign(9, 0.0);
    for (const auto& f : feats)
      for (int i = 0; i < 3; ++i) mu[i] += f[i];
    for (auto& m : mu) m /= static_cast<double>(feats.size());
    for (const auto& f : feats)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cov[i * 3 + j] += (f[i] - mu[i]) * (f[j] - mu[j]);
    for (auto& c : cov) c /= static_cast<double>(feats.size() - 1);
  };
  std::vector<double> mu_a, cov_a, mu_b, cov_b;
  fit(set_a, mu_a, cov_a);
  fit(set_b, mu_b, cov_b);
  return frechet_distance(mu_a, cov_a, mu_b, cov_b, 3);
}

std::vector<std::uint8_t> serialize_generator(const GeneratorParams& g) {
  ByteWriter w;
  for (double v : {g.est_fg_mean, g.est_fg_std, g.est_bg_mean, g.est_bg_std, g.est_texture_freq, g.est_noise_sigma,
                   g.est_fg_fraction}) {
    w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(g.source_client));
  return w.take();
}

GeneratorParams deserialize_generator(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kGeneratorParamsBytes) throw std::invalid_argument("deserialize_generator: wrong record size");
  ByteReader r(bytes);
  GeneratorParams g;
  for (double* v : {&g.est_fg_mean, &g.est_fg_std, &g.est_bg_mean, &g.est_bg_std, &g.est_texture_freq,
                    &g.est_noise_sigma, &g.est_fg_fraction}) {
    *v = r.f64();
  }
  g.source_client = static_cast<int>(r.u32());
  return g;
}

std::vector<std::uint8_t> encode_dtilde(std::span<const GeneratedSample> samples, std::size_t n_clients,
                                        std::size_t n_per_client, std::size_t grid) {
  ByteWriter w;
  w.u32(12);
  w.u32(static_cast<std::uint32_t>(n_clients));
  w.u32(static_cast<std::uint32_t>(n_per_client));
  w.u32(static_cast<std::uint32_t>(grid));
  const std::size_t record = 2 + mask_bitmap_bytes(grid) + 8 * grid * grid;
  for (const auto& s : samples) {
    if (s.image.size() != grid * grid) throw ShapeError("encode_dtilde: sample grid mismatch");
    w.u32(static_cast<std::uint32_t>(record));
    w.u16(static_cast<std::uint16_t>(s.source_client));
    w.bytes(pack_mask(s.mask));
    for (double v : s.image.data()) w.f64(v);
  }
  return w.take();
}

DTildeFile decode_dtilde(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != 12) throw std::runtime_error("decode_dtilde: bad header record");
  DTildeFile f;
  f.n_clients = r.u32();
  f.n_per_client = r.u32();
  f.grid = r.u32();
  const std::size_t record = 2 + mask_bitmap_bytes(f.grid) + 8 * f.grid * f.grid;
  while (!r.done()) {
    if (r.u32() != record) throw std::runtime_error("decode_dtilde: bad sample record length");
    GeneratedSample s;
    s.source_client = r.u16();
    s.mask = unpack_mask(r.bytes(mask_bitmap_bytes(f.grid)), f.grid);
    std::vector<double> img(f.grid * f.grid);
    for (auto& v : img) v = r.f64();
    s.image = Tensor::from({f.grid, f.grid}, std::move(img));
    s.index = f.samples.size();
    f.samples.push_back(std::move(s));
  }
  return f;
}

}  // namespace dsfed
