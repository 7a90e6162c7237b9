#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "xiltk/metrics.hpp"
#include "xiltk/rng.hpp"
#include "xiltk/xil.hpp"

using namespace xiltk;

namespace {

Batch random_batch(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> px(n * kImgPixels);
  for (auto& v : px) v = rng.next_double();
  Batch b;
  b.images = Tensor::from_data({n, 1, kImgH, kImgW}, std::move(px));
  b.labels.resize(n);
  for (auto& l : b.labels) l = int64_t(rng.next_below(10));
  return b;
}

Model constant_class_model(int cls) {
  Model m = init_model(Arch::MLP, 1);
  for (auto& [name, t] : m.params) std::fill(t.buffer().begin(), t.buffer().end(), 0.0);
  m.params.at("fc2.b").data()[cls] = 5.0;
  return m;
}

}  // namespace

TEST_CASE("accuracy") {
  SUBCASE("empty set rejected") {
    Batch empty;
    empty.images = Tensor::zeros({0, 1, 28, 28});
    CHECK_THROWS_AS(accuracy(init_model(Arch::MLP, 1), empty), TensorError);
  }
  SUBCASE("constant-class model scores the label frequency exactly") {
    Batch b = random_batch(500, 3);
    Model m = constant_class_model(4);
    int64_t count = std::count(b.labels.begin(), b.labels.end(), 4);
    CHECK(accuracy(m, b) == doctest::Approx(double(count) / 500.0));
    CHECK(accuracy(m, b) == doctest::Approx(0.1).epsilon(0.5));
  }
  SUBCASE("recount oracle on a trained-ish model") {
    Batch b = random_batch(64, 9);
    Model m = init_model(Arch::MLP, 2);
    NoGradGuard ng;
    Tensor logits = m.forward(b.images);
    int64_t correct = 0;
    for (int64_t i = 0; i < 64; ++i) {
      int64_t best = 0;
      for (int64_t k = 1; k < 10; ++k)
        if (logits.data()[i * 10 + k] > logits.data()[i * 10 + best]) best = k;
      correct += best == b.labels[i];
    }
    CHECK(accuracy(m, b) == doctest::Approx(double(correct) / 64.0));
  }
}

TEST_CASE("wr_score") {
  std::vector<uint8_t> mask(16, 0);
  mask[0] = mask[1] = mask[4] = mask[5] = 1;  // 4 marked cells in a 4x4 toy

  SUBCASE("binarized map covering the mask scores 1") {
    Tensor map = Tensor::full({4, 4}, 1.0);
    CHECK(wr_score(map, mask, 0.5) == 1.0);
  }
  SUBCASE("all-zero map scores 0") {
    CHECK(wr_score(Tensor::zeros({4, 4}), mask, 0.0) == 0.0);
  }
  SUBCASE("two of four cells above alpha -> 0.5") {
    std::vector<double> v(16, 0.0);
    v[0] = 1.0;   // normalizes to 1 > 0.5
    v[1] = 0.9;   // 0.9 > 0.5
    v[4] = 0.3;   // below
    v[5] = 0.1;   // below
    CHECK(wr_score(Tensor::from_data({4, 4}, std::move(v)), mask, 0.5) == 0.5);
  }
  SUBCASE("empty mask rejected") {
    std::vector<uint8_t> none(16, 0);
    CHECK_THROWS_AS(wr_score(Tensor::zeros({4, 4}), none, 0.1), TensorError);
  }
  SUBCASE("range, scaling invariance, restricted monotonicity") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> v(16);
      for (auto& x : v) x = rng.uniform(-1, 2);
      Tensor map = Tensor::from_data({4, 4}, v);
      double alpha = rng.uniform(0, 1);
      double s = wr_score(map, mask, alpha);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      // positive rescaling leaves the score unchanged
      Tensor scaled = Tensor::from_data({4, 4}, v);
      for (auto& x : scaled.buffer()) x *= 3.7;
      CHECK(wr_score(scaled, mask, alpha) == s);
      // raising an in-mask pixel toward the max never decreases the score
      double mx = *std::max_element(v.begin(), v.end());
      std::vector<double> raised = v;
      raised[0] = mx;
      CHECK(wr_score(Tensor::from_data({4, 4}, std::move(raised)), mask, alpha) >= s);
    }
  }
}

TEST_CASE("wr_threshold") {
  Batch b = random_batch(32, 5);

  SUBCASE("zero-map model gives alpha 0") {
    Model m = constant_class_model(2);
    CHECK(wr_threshold(m, ExplainerTag::IG, b) == 0.0);
  }
  SUBCASE("equals the flat mean over the normalized maps") {
    Model m = init_model(Arch::SCNN, 7);
    WrOptions opt;
    double alpha = wr_threshold(m, ExplainerTag::GRADCAM, b, opt);
    auto maps = normalized_maps(m, ExplainerTag::GRADCAM, b, opt);
    double total = 0;
    int64_t count = 0;
    for (auto& mp : maps) {
      for (double v : mp.buffer()) total += v;
      count += mp.size();
    }
    CHECK(alpha == doctest::Approx(total / double(count)).epsilon(1e-12));
    CHECK(alpha > 0.0);
  }
}

TEST_CASE("wr_dataset") {
  // small decoy test set
  ImageSet set;
  set.split = Split::test;
  Rng rng(13);
  int64_t n = 24;
  set.labels.resize(n);
  set.images.assign(n * kImgPixels, 0);
  for (int64_t i = 0; i < n; ++i) {
    set.labels[i] = uint8_t(rng.next_below(10));
    for (int k = 0; k < 40; ++k)
      set.images[i * kImgPixels + 230 + rng.next_below(320)] = uint8_t(1 + rng.next_below(255));
  }
  DecoySet decoy = make_decoy(set, 21);

  SUBCASE("zero-map model scores 0") {
    Model m = constant_class_model(1);
    CHECK(wr_dataset(m, ExplainerTag::IG, decoy, 0.1) == 0.0);
  }
  SUBCASE("random conv model lands in [0,1] for both cheap explainers") {
    Model m = init_model(Arch::SCNN, 3);
    Batch b = to_batch(decoy);
    for (ExplainerTag tag : {ExplainerTag::IG, ExplainerTag::GRADCAM}) {
      double alpha = wr_threshold(m, tag, b);
      double wr = wr_dataset(m, tag, decoy, alpha);
      CHECK(wr >= 0.0);
      CHECK(wr <= 1.0);
    }
  }
}
