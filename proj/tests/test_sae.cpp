#include <doctest.h>

#include <cmath>
#include <fstream>

#include "crl/sae.hpp"
#include "crl/steering.hpp"
#include "generators.hpp"

using namespace crl;
using crl::testing::random_sae;
using crl::testing::random_vec;
using crl::testing::scratch_dir;

namespace {

// Identity encoder on a d=d_dict=3 dictionary.
SaeParams identity_sae(SaeActivation act) {
  SaeParams sae = make_sae(3, 3, act);
  for (std::size_t i = 0; i < 3; ++i) {
    sae.w_enc(i, i) = 1.0;
    sae.w_dec(i, i) = 1.0;
  }
  return sae;
}

}  // namespace

TEST_CASE("encode applies the activation") {
  SUBCASE("relu clips negatives") {
    const SaeParams sae = identity_sae(SaeActivation::kRelu);
    CHECK(encode(sae, Vec{-1.0, 0.0, 2.0}).z == Vec{0.0, 0.0, 2.0});
  }
  SUBCASE("jumprelu zeroes values at or below the threshold") {
    SaeParams sae = identity_sae(SaeActivation::kJumpRelu);
    sae.threshold = Vec{0.5, 0.5, 0.5};
    CHECK(encode(sae, Vec{0.4, 0.6, 0.5}).z == Vec{0.0, 0.6, 0.0});
  }
  SUBCASE("encoder bias shifts the preactivation") {
    SaeParams sae = identity_sae(SaeActivation::kRelu);
    sae.b_enc = Vec{1.0, -1.0, 0.0};
    CHECK(encode(sae, Vec{0.0, 0.5, 3.0}).z == Vec{1.0, 0.0, 3.0});
  }
  SUBCASE("the step and layer tags are carried through") {
    const auto fa = encode(identity_sae(SaeActivation::kRelu), Vec{1.0, 1.0, 1.0}, 4, 2);
    CHECK(fa.step == 4);
    CHECK(fa.layer == 2);
  }
  SUBCASE("a wrong residual width is a shape error") {
    try {
      encode(identity_sae(SaeActivation::kRelu), Vec{1.0, 2.0});
      FAIL("expected a shape error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kShape);
    }
  }
}

TEST_CASE("decode fixtures") {
  SaeParams sae = make_sae(2, 3, SaeActivation::kRelu);
  sae.w_dec(0, 0) = 1.0;
  sae.w_dec(1, 1) = 2.0;
  sae.w_dec(2, 0) = -1.0;
  sae.w_dec(2, 1) = 1.0;
  sae.b_dec = Vec{0.5, 0.0};
  CHECK(decode(sae, Vec{0.0, 0.0, 0.0}) == Vec{0.5, 0.0});
  CHECK(decode(sae, Vec{1.0, 0.0, 0.0}) == Vec{1.5, 0.0});
  CHECK(decode(sae, Vec{2.0, 1.0, 3.0}) == Vec{-0.5, 5.0});
}

TEST_CASE("decode is affine in z") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const SaeParams sae = random_sae(rng, 6, 10);
    const Vec a = random_vec(rng, 10);
    const Vec b = random_vec(rng, 10);
    const double s = 0.3 + static_cast<double>(trial) / 50.0;
    Vec mix(10);
    for (std::size_t i = 0; i < 10; ++i) mix[i] = s * a[i] + (1.0 - s) * b[i];
    const Vec da = decode(sae, a);
    const Vec db = decode(sae, b);
    const Vec dm = decode(sae, mix);
    for (std::size_t k = 0; k < 6; ++k) {
      CHECK(dm[k] == doctest::Approx(s * da[k] + (1.0 - s) * db[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("sae_loss properties") {
  std::mt19937_64 rng(5);
  SUBCASE("a perfect identity dictionary on a nonnegative input has zero reconstruction error") {
    const SaeParams sae = identity_sae(SaeActivation::kRelu);
    const auto loss = sae_loss(sae, Vec{1.0, 0.0, 2.0}, 0.1);
    CHECK(loss.reconstruction == 0.0);
    CHECK(loss.sparsity == doctest::Approx(0.3));
    CHECK(loss.total == doctest::Approx(0.3));
  }
  SUBCASE("terms are nonnegative and add up on random instances") {
    for (int trial = 0; trial < 100; ++trial) {
      const SaeParams sae = random_sae(rng, 5, 8, SaeActivation::kJumpRelu);
      const auto loss = sae_loss(sae, random_vec(rng, 5), 0.05 * trial);
      CHECK(loss.reconstruction >= 0.0);
      CHECK(loss.sparsity >= 0.0);
      CHECK(loss.total == doctest::Approx(loss.reconstruction + loss.sparsity).epsilon(1e-14));
    }
  }
  SUBCASE("a zero sparsity weight drops the penalty") {
    const SaeParams sae = random_sae(rng, 5, 8);
    CHECK(sae_loss(sae, random_vec(rng, 5), 0.0).sparsity == 0.0);
  }
  SUBCASE("a negative sparsity weight is rejected") {
    CHECK_THROWS_AS(sae_loss(identity_sae(SaeActivation::kRelu), Vec{1.0, 1.0, 1.0}, -1.0), Error);
  }
}

TEST_CASE("SAE persistence and validation") {
  std::mt19937_64 rng(8);
  const SaeParams sae = random_sae(rng, 4, 7, SaeActivation::kJumpRelu);
  const auto dir = scratch_dir("sae");
  save_sae(sae, dir + "/s.crls");
  CHECK(load_sae(dir + "/s.crls") == sae);

  SaeParams bad = sae;
  bad.threshold[2] = -0.1;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = sae;
  bad.b_dec.pop_back();
  CHECK_THROWS_AS(validate(bad), Error);
}

TEST_CASE("feature label files") {
  const auto dir = scratch_dir("labels");
  {
    std::ofstream os(dir + "/labels.tsv");
    os << "# comment\n3\tplural nouns\n\n17\tclosing bracket\n";
  }
  const auto labels = load_feature_labels(dir + "/labels.tsv");
  CHECK(labels.size() == 2);
  CHECK(labels.at(3) == "plural nouns");
  CHECK(labels.at(17) == "closing bracket");
}

TEST_CASE("encode and decode match an explicit recomputation") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const auto act = trial % 2 ? SaeActivation::kJumpRelu : SaeActivation::kRelu;
    const SaeParams sae = random_sae(rng, 5, 9, act);
    const Vec x = random_vec(rng, 5);
    const Vec z = encode(sae, x).z;
    for (std::size_t j = 0; j < 9; ++j) {
      double pre = sae.b_enc[j];
      for (std::size_t i = 0; i < 5; ++i) pre += x[i] * sae.w_enc(i, j);
      const bool on = act == SaeActivation::kRelu ? pre > 0.0 : pre > sae.threshold[j] && pre > 0.0;
      CHECK(z[j] == doctest::Approx(on ? pre : 0.0).epsilon(1e-13));
    }
    const Vec xhat = decode(sae, z);
    double recon = 0.0;
    double l1 = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      double s = sae.b_dec[i];
      for (std::size_t j = 0; j < 9; ++j) s += z[j] * sae.w_dec(j, i);
      CHECK(xhat[i] == doctest::Approx(s).epsilon(1e-13));
      recon += (x[i] - s) * (x[i] - s);
    }
    for (double v : z) l1 += std::abs(v);
    const auto loss = sae_loss(sae, x, 0.3);
    CHECK(loss.total == doctest::Approx(recon + 0.3 * l1).epsilon(1e-12));
  }
}

TEST_CASE("zero-input SAE fixtures") {
  std::mt19937_64 rng(4);
  SaeParams sae = random_sae(rng, 4, 6);
  std::fill(sae.b_enc.begin(), sae.b_enc.end(), 0.0);
  CHECK(encode(sae, Vec(4, 0.0)).z == Vec(6, 0.0));
  CHECK(decode(sae, Vec(6, 0.0)) == sae.b_dec);
  Vec onehot(6, 0.0);
  onehot[4] = 1.5;
  std::fill(sae.b_dec.begin(), sae.b_dec.end(), 0.0);
  const Vec row = decode(sae, onehot);
  for (std::size_t i = 0; i < 4; ++i) CHECK(row[i] == doctest::Approx(1.5 * sae.w_dec(4, i)).epsilon(1e-15));
  const auto loss = sae_loss(sae, Vec(4, 0.0), 0.5);
  CHECK(loss.total == 0.0);
  CHECK(loss.reconstruction == 0.0);
  CHECK(loss.sparsity == 0.0);
}
