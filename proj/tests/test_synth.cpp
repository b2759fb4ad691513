#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>

#include "dsfed/synth.hpp"

using namespace dsfed;

TEST_CASE("gen_mask") {
  CHECK(gen_mask(3, 32).values() == gen_mask(3, 32).values());
  CHECK(gen_mask(3, 32).values() != gen_mask(4, 32).values());
  CHECK_THROWS(gen_mask(1, 15));
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto m = gen_mask(s, 32);
    const double f = foreground_fraction(m);
    REQUIRE(f >= 0.05);
    REQUIRE(f <= 0.6);
    for (double v : m.data()) REQUIRE((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("render collapses to two levels without texture or noise") {
  DomainStyle st{0.8, 0.0, 0.2, 0.0, 4.0, 0.0, 1.0};
  const auto mask = gen_mask(7, 32);
  const auto img = render(mask, st, 1);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(img[i] == (mask[i] == 1.0 ? 0.8 : 0.2));
  CHECK(render(mask, st, 5).values() == img.values());
}

TEST_CASE("render is deterministic and clamped") {
  DomainStyle st{0.9, 0.08, 0.1, 0.08, 3.0, 0.2, 1.2};
  const auto mask = gen_mask(2, 32);
  const auto a = render(mask, st, 11);
  CHECK(a.values() == render(mask, st, 11).values());
  CHECK(a.values() != render(mask, st, 12).values());
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("foreground mean over renders tracks contrast * fg_mean") {
  DomainStyle st{0.6, 0.05, 0.2, 0.05, 5.0, 0.1, 1.1};
  const auto mask = gen_mask(9, 32);
  double acc = 0;
  std::size_t n = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto img = render(mask, st, s);
    for (std::size_t i = 0; i < img.size(); ++i)
      if (mask[i] == 1.0) {
        acc += img[i];
        ++n;
      }
  }
  CHECK(std::abs(acc / static_cast<double>(n) - 1.1 * 0.6) < 0.02);
}

TEST_CASE("style validation") {
  DomainStyle st{0.5, 0.0, 0.4, 0.0, 2.0, 0.0, 1.0};
  CHECK_THROWS(st.validate());  // contrast gap 0.1 < 0.15
  st.bg_mean = 0.3;
  CHECK_NOTHROW(st.validate());
  st.noise_sigma = -0.1;
  CHECK_THROWS(st.validate());
}

TEST_CASE("make_federation") {
  FederationSpec fs;
  fs.seed = 5;
  const auto fed = make_federation(fs);
  REQUIRE(fed.size() == 4);
  std::set<int> ids;
  for (const auto& c : fed) {
    ids.insert(c.domain_id);
    CHECK(c.samples.size() == fs.samples_per_client);
    CHECK(c.mask_bank.size() == c.samples.size());
    for (const auto& s : c.samples) CHECK(s.domain_id == c.domain_id);
  }
  CHECK(ids.size() == 4);

  const auto again = make_federation(fs);
  for (std::size_t k = 0; k < fed.size(); ++k) {
    CHECK(fed[k].style == again[k].style);
    for (std::size_t i = 0; i < fed[k].samples.size(); ++i) {
      CHECK(fed[k].samples[i].image.values() == again[k].samples[i].image.values());
    }
  }
  fs.n_clients = 1;
  CHECK_THROWS(make_federation(fs));
}

TEST_CASE("client styles are pairwise separated for 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FederationSpec fs;
    fs.seed = seed;
    fs.samples_per_client = 1;
    const auto fed = make_federation(fs);
    for (std::size_t a = 0; a < fed.size(); ++a) {
      CHECK(fed[a].style.fg_mean - fed[a].style.bg_mean >= 0.15);
      for (std::size_t b = a + 1; b < fed.size(); ++b) {
        const bool sep = std::abs(fed[a].style.fg_mean - fed[b].style.fg_mean) >= 0.1 ||
                         std::abs(fed[a].style.noise_sigma - fed[b].style.noise_sigma) >= 0.1;
        CHECK(sep);
      }
    }
  }
}

TEST_CASE("leave-one-out split partitions the federation") {
  FederationSpec fs;
  fs.samples_per_client = 6;
  const auto fed = make_federation(fs);
  const auto split = split_leave_one_out(fed, 2);
  CHECK(split.train_clients.size() == 3);
  CHECK(split.test_set.size() == 6);
  for (const auto& c : split.train_clients) CHECK(c.domain_id != 2);
  for (const auto& s : split.test_set) CHECK(s.domain_id == 2);

  std::vector<int> tested(fed.size(), 0);
  for (const auto& c : fed)
    for (const auto& s : split_leave_one_out(fed, c.domain_id).test_set) tested[s.domain_id]++;
  for (int n : tested) CHECK(n == 6);
  CHECK_THROWS(split_leave_one_out(fed, 9));
}

TEST_CASE("mask bitmaps") {
  const auto m = gen_mask(12, 20);
  const auto bits = pack_mask(m);
  CHECK(bits.size() == mask_bitmap_bytes(20));
  CHECK(bits.size() == 50);
  CHECK(unpack_mask(bits, 20).values() == m.values());
  CHECK((pack_mask(Tensor::from({1, 3}, {1, 0, 1}))[0]) == 0b101);

  std::vector<Tensor> bank{m, gen_mask(13, 20), gen_mask(14, 20)};
  const auto bytes = serialize_mask_bank(bank, 20);
  CHECK(bytes.size() == mask_bank_bytes(3, 20));
  const auto back = deserialize_mask_bank(bytes);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back[i].values() == bank[i].values());
}

TEST_CASE("federation replay file") {
  FederationSpec fs;
  fs.n_clients = 2;
  fs.samples_per_client = 3;
  fs.grid = 16;
  const auto fed = make_federation(fs);
  const std::string path = "test_synth_federation.bin";
  save_federation(path, fed);
  const auto back = load_federation(path);
  std::remove(path.c_str());
  REQUIRE(back.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(back[k].style == fed[k].style);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(back[k].samples[i].image.values() == fed[k].samples[i].image.values());
      CHECK(back[k].samples[i].mask.values() == fed[k].samples[i].mask.values());
    }
  }
}
