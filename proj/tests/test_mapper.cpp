#include <catch2/catch_amalgamated.hpp>

#include "dlat/mapper.hpp"

using namespace dlat;
namespace ad = dlat::ad;

TEST_CASE("image mapper emits six codes of length 256") {
  Rng rng(1);
  DiverseAgeMapper m(Modality::image, 6, rng);
  Rng nr(2);
  auto codes = m.map_noise(sample_noise(nr));
  REQUIRE(codes.size() == 6);
  for (size_t i = 0; i < codes.size(); ++i) {
    CHECK(codes[i].values.numel() == 256);
    CHECK(codes[i].modality == Modality::image);
    CHECK(codes[i].group.index == trainable_groups()[i].index);
    codes[i].check();
  }
}

TEST_CASE("landmark mapper emits codes of length 64") {
  Rng rng(1);
  DiverseAgeMapper m(Modality::landmark, 6, rng);
  Rng nr(2);
  auto codes = m.map_noise(sample_noise(nr));
  REQUIRE(codes.size() == 6);
  for (const auto& c : codes) CHECK(c.values.numel() == 64);
}

TEST_CASE("mapping is a pure function of the noise") {
  Rng rng(5);
  DiverseAgeMapper m(Modality::image, 3, rng);
  Rng nr(9);
  Tensor n = sample_noise(nr);
  auto a = m.map_noise(n), b = m.map_noise(n);
  for (size_t k = 0; k < a.size(); ++k)
    for (int64_t i = 0; i < a[k].values.numel(); ++i)
      CHECK(a[k].values[i] == b[k].values[i]);
}

TEST_CASE("distinct noises give distinct codes for every group") {
  Rng rng(11);
  DiverseAgeMapper m(Modality::image, 6, rng);
  Rng nr(13);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = m.map_noise(sample_noise(nr));
    auto b = m.map_noise(sample_noise(nr));
    for (size_t k = 0; k < a.size(); ++k) {
      double l2 = 0.0;
      for (int64_t i = 0; i < a[k].values.numel(); ++i) {
        const double d = a[k].values[i] - b[k].values[i];
        l2 += d * d;
      }
      CHECK(l2 > 0.0);
    }
  }
}

TEST_CASE("batched forward matches per-sample mapping") {
  Rng rng(17);
  DiverseAgeMapper m(Modality::landmark, 3, rng);
  Rng nr(19);
  Tensor n1 = sample_noise(nr), n2 = sample_noise(nr);
  Tensor batch({2, kNoiseDim});
  for (int64_t i = 0; i < kNoiseDim; ++i) {
    batch[i] = n1[i];
    batch[kNoiseDim + i] = n2[i];
  }
  auto heads = m.forward(ad::constant(batch));
  auto c1 = m.map_noise(n1), c2 = m.map_noise(n2);
  REQUIRE(heads.size() == 3);
  for (size_t k = 0; k < 3; ++k) {
    const Tensor& h = heads[k].val();
    REQUIRE(h.dim(0) == 2);
    for (int64_t j = 0; j < h.dim(1); ++j) {
      CHECK(h[j] == Catch::Approx(c1[k].values[j]).margin(1e-12));
      CHECK(h[h.dim(1) + j] == Catch::Approx(c2[k].values[j]).margin(1e-12));
    }
  }
}
