#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "testutil.hpp"
#include "xiltk/metrics.hpp"
#include "xiltk/rng.hpp"
#include "xiltk/xil.hpp"

using namespace xiltk;

namespace {

Tensor random_image(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> px(n * kImgPixels);
  for (auto& v : px) v = rng.next_double();
  return Tensor::from_data({n, 1, kImgH, kImgW}, std::move(px));
}

Tensor corner_mask(int64_t n) {
  std::vector<double> m(n * kImgPixels, 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) m[i * kImgPixels + r * kImgW + c] = 1.0;
  return Tensor::from_data({n, 1, kImgH, kImgW}, std::move(m));
}

void zero_params(Model& m) {
  for (auto& [name, t] : m.params) std::fill(t.buffer().begin(), t.buffer().end(), 0.0);
}

/// Central FD of a loss value w.r.t. a handful of parameter entries.
double fd_param_check(Model& model, const std::function<Tensor()>& make_loss,
                      const std::string& pname, const std::vector<int64_t>& entries,
                      double h = 1e-5) {
  Tensor loss = make_loss();
  GradMap grads = backward(loss);
  Tensor g = grad_of(grads, model.params.at(pname));
  double worst = 0;
  double* buf = model.params.at(pname).data();
  for (int64_t e : entries) {
    double orig = buf[e];
    buf[e] = orig + h;
    double fp = make_loss().item();
    buf[e] = orig - h;
    double fm = make_loss().item();
    buf[e] = orig;
    double fd = (fp - fm) / (2 * h);
    double denom = std::max({std::fabs(fd), std::fabs(g.data()[e]), 1e-6});
    worst = std::max(worst, std::fabs(fd - g.data()[e]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("default lambdas") {
  CHECK(default_lambda(Method::RRR, "decoy_mnist") == 10);
  CHECK(default_lambda(Method::RRR, "decoy_fmnist") == 100);
  CHECK(default_lambda(Method::RRRG, "decoy_mnist") == 1);
  CHECK(default_lambda(Method::RBR, "decoy_mnist") == 1e5);
  CHECK(default_lambda(Method::CDEP, "decoy_fmnist") == 1e6);
  CHECK(default_lambda(Method::HINT, "decoy_mnist") == 1e3);
  CHECK(default_lambda(Method::HINT, "decoy_fmnist") == 0.1);
  CHECK(default_lambda(Method::VANILLA, "decoy_mnist") == 0);
}

TEST_CASE("zero conditions of the explanation losses") {
  Tensor x = random_image(2, 1);
  Tensor zero_mask = Tensor::zeros({2, 1, 28, 28});
  Tensor mask = corner_mask(2);
  std::vector<int64_t> labels{3, 7};

  SUBCASE("all-zero masks") {
    Model cnn = init_model(Arch::SCNN, 1);
    CHECK(rrr_loss(cnn, x, zero_mask, MaskSemantics::penalty).item() == 0.0);
    CHECK(rrrg_loss(cnn, x, zero_mask, MaskSemantics::penalty).item() == 0.0);
    CHECK(rbr_loss(cnn, x, labels, zero_mask, MaskSemantics::penalty).item() == 0.0);
    CHECK(cdep_loss(cnn, x, zero_mask, MaskSemantics::penalty).item() == 0.0);
  }
  SUBCASE("constant model: rrr and rbr vanish") {
    Model cnn = init_model(Arch::SCNN, 1);
    zero_params(cnn);
    cnn.params.at("fc2.b").buffer() = {1, 0, 0, 0, 0, 0, 0, 0, 0, 2};
    CHECK(rrr_loss(cnn, x, mask, MaskSemantics::penalty).item() == 0.0);
    // theta-gradient independent of x -> influence zero
    CHECK(rbr_loss(cnn, x, labels, mask, MaskSemantics::penalty).item() == 0.0);
    // constant model: GradCAM map all zeros, empty reward mask -> hint zero
    CHECK(hint_loss(cnn, x, zero_mask, MaskSemantics::reward).item() == 0.0);
  }
  SUBCASE("nonnegativity on random models") {
    Model cnn = init_model(Arch::SCNN, 5);
    CHECK(rrr_loss(cnn, x, mask, MaskSemantics::penalty).item() >= 0.0);
    CHECK(rrrg_loss(cnn, x, mask, MaskSemantics::penalty).item() >= 0.0);
    CHECK(rbr_loss(cnn, x, labels, mask, MaskSemantics::penalty).item() >= 0.0);
    CHECK(cdep_loss(cnn, x, mask, MaskSemantics::penalty).item() >= 0.0);
    CHECK(hint_loss(cnn, x, mask, MaskSemantics::reward).item() >= 0.0);
  }
}

TEST_CASE("semantics preconditions") {
  Model cnn = init_model(Arch::SCNN, 1);
  Tensor x = random_image(1, 1);
  Tensor mask = corner_mask(1);
  CHECK_THROWS_AS(rrr_loss(cnn, x, mask, MaskSemantics::reward), TensorError);
  CHECK_THROWS_AS(rrrg_loss(cnn, x, mask, MaskSemantics::reward), TensorError);
  CHECK_THROWS_AS(rbr_loss(cnn, x, {0}, mask, MaskSemantics::reward), TensorError);
  CHECK_THROWS_AS(cdep_loss(cnn, x, mask, MaskSemantics::reward), TensorError);
  CHECK_THROWS_AS(hint_loss(cnn, x, mask, MaskSemantics::penalty), TensorError);
  Model mlp = init_model(Arch::MLP, 1);
  CHECK_THROWS_AS(rrrg_loss(mlp, x, mask, MaskSemantics::penalty), TensorError);
}

TEST_CASE("loss gradients w.r.t. parameters match finite differences") {
  Model cnn = init_model(Arch::SCNN, 17);
  Tensor x = random_image(2, 19);
  Tensor mask = corner_mask(2);
  std::vector<int64_t> labels{1, 8};
  std::vector<int64_t> probe{0, 3, 77, 1234};

  SUBCASE("rrr") {
    auto make = [&]() { return rrr_loss(cnn, x, mask, MaskSemantics::penalty); };
    CHECK(fd_param_check(cnn, make, "fc1.w", probe) < 1e-3);
    CHECK(fd_param_check(cnn, make, "conv1.w", {0, 7, 100}) < 1e-3);
  }
  SUBCASE("rrrg") {
    auto make = [&]() { return rrrg_loss(cnn, x, mask, MaskSemantics::penalty); };
    CHECK(fd_param_check(cnn, make, "conv2.w", {0, 11, 500}) < 1e-3);
    CHECK(fd_param_check(cnn, make, "fc2.w", {5, 42}) < 1e-3);
  }
  SUBCASE("cdep") {
    auto make = [&]() { return cdep_loss(cnn, x, mask, MaskSemantics::penalty); };
    CHECK(fd_param_check(cnn, make, "conv1.w", {0, 7, 100}) < 1e-3);
    CHECK(fd_param_check(cnn, make, "fc1.w", probe) < 1e-3);
  }
  SUBCASE("hint") {
    auto make = [&]() { return hint_loss(cnn, x, mask, MaskSemantics::reward); };
    CHECK(fd_param_check(cnn, make, "conv2.w", {0, 11, 500}) < 1e-3);
  }
  SUBCASE("rbr (third-order chain, looser tolerance)") {
    auto make = [&]() { return rbr_loss(cnn, x, labels, mask, MaskSemantics::penalty); };
    CHECK(fd_param_check(cnn, make, "fc1.w", {0, 77}, 1e-4) < 1e-2);
  }
}

TEST_CASE("combined loss") {
  Model cnn = init_model(Arch::SCNN, 23);
  Batch batch;
  batch.images = random_image(4, 29);
  batch.labels = {0, 4, 7, 9};
  batch.masks = corner_mask(4);
  batch.semantics = MaskSemantics::penalty;

  StepStats st;
  double vanilla = cross_entropy(cnn.forward(batch.images), batch.labels).item();

  SUBCASE("lambda zero equals cross entropy exactly") {
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 0;
    CHECK(combined_loss(cnn, batch, cfg, st).item() == doctest::Approx(vanilla).epsilon(1e-14));
  }
  SUBCASE("vanilla ignores masks entirely") {
    XilConfig cfg;
    CHECK(combined_loss(cnn, batch, cfg, st).item() == doctest::Approx(vanilla).epsilon(1e-14));
    CHECK(st.exp_loss == 0);
  }
  SUBCASE("rrr with lambda matches a per-term recomputation") {
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 10;
    double total = combined_loss(cnn, batch, cfg, st).item();
    double expl = rrr_loss(cnn, batch.images, batch.masks, MaskSemantics::penalty).item();
    CHECK(total == doctest::Approx(vanilla + 10 * expl).epsilon(1e-10));
    CHECK(st.exp_loss == doctest::Approx(expl));
    CHECK_FALSE(st.clipped);
  }
  SUBCASE("empty masks reduce to the vanilla loss") {
    Batch empty = batch;
    empty.masks = Tensor::zeros({4, 1, 28, 28});
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 10;
    CHECK(combined_loss(cnn, empty, cfg, st).item() == doctest::Approx(vanilla).epsilon(1e-12));
  }
  SUBCASE("examples without masks contribute only the prediction term") {
    Batch partial = batch;
    partial.mask_present = {0, 0, 0, 0};
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 10;
    CHECK(combined_loss(cnn, partial, cfg, st).item() == doctest::Approx(vanilla).epsilon(1e-14));
  }
  SUBCASE("clipping freezes the explanation term and its gradient") {
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 10;
    cfg.rr_clip = 1e-12;  // force the clip
    Tensor total = combined_loss(cnn, batch, cfg, st);
    CHECK(st.clipped);
    CHECK(st.exp_loss == 1e-12);
    // gradient equals the pure cross-entropy gradient
    Tensor g_total = grad_of(backward(total), cnn.params.at("fc2.w"));
    Tensor ce = cross_entropy(cnn.forward(batch.images), batch.labels);
    Tensor g_ce = grad_of(backward(ce), cnn.params.at("fc2.w"));
    for (int64_t i = 0; i < g_total.size(); ++i)
      CHECK(g_total.data()[i] == doctest::Approx(g_ce.data()[i]).epsilon(1e-12));
  }
  SUBCASE("missing masks rejected for mask methods") {
    Batch nomask;
    nomask.images = batch.images;
    nomask.labels = batch.labels;
    XilConfig cfg;
    cfg.method = Method::RRR;
    cfg.lambda = 1;
    CHECK_THROWS_AS(combined_loss(cnn, nomask, cfg, st), TensorError);
  }
}

TEST_CASE("dataset plumbing: to_batch, attach_feedback, ce_revise") {
  ImageSet set;
  set.split = Split::train;
  Rng rng(5);
  int64_t n = 40;
  set.labels.resize(n);
  set.images.assign(n * kImgPixels, 0);
  for (int64_t i = 0; i < n; ++i) {
    set.labels[i] = uint8_t(rng.next_below(10));
    for (int k = 0; k < 30; ++k)
      set.images[i * kImgPixels + 200 + rng.next_below(300)] = uint8_t(rng.next_below(256));
  }
  DecoySet decoy = make_decoy(set, 11);
  Batch b = to_batch(decoy);
  CHECK(b.n() == n);
  for (double v : b.images.buffer()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // decoy pixel visible in the batch
  auto img0 = decoy.decoyed_image(0);
  for (int p = 0; p < kImgPixels; ++p)
    CHECK(b.images.data()[p] == doctest::Approx(img0[p] / 255.0));

  auto fb = make_feedback(decoy, FeedbackQuality::correct, FeedbackSemantics::penalty);
  FeedbackSet fs = sample_feedback_subset(fb, 25, 3);
  attach_feedback(b, fs);
  CHECK(b.semantics == MaskSemantics::penalty);
  int64_t present = 0;
  for (int64_t i = 0; i < n; ++i) present += b.has_mask(i);
  CHECK(present == 25);

  auto ces = make_counterexamples(decoy, fb, CeStrategy::randomize, 1, 9);
  Batch aug = ce_revise(b, ces);
  CHECK(aug.n() == 2 * n);
  CHECK_FALSE(aug.masks.defined());
  Batch same = ce_revise(b, {});
  CHECK(same.n() == n);
}

TEST_CASE("fit: loss decreases and the json-lines log is well-formed") {
  Rng rng(77);
  int64_t n = 128;
  std::vector<double> px(n * kImgPixels, 0.0);
  std::vector<int64_t> labels(n);
  for (int64_t i = 0; i < n; ++i) {
    labels[i] = int64_t(rng.next_below(4));
    int r0 = (labels[i] / 2) * 14, c0 = (labels[i] % 2) * 14;
    for (int r = 0; r < 14; ++r)
      for (int c = 0; c < 14; ++c) px[i * kImgPixels + (r0 + r) * 28 + c0 + c] = 1.0;
  }
  Batch train;
  train.images = Tensor::from_data({n, 1, 28, 28}, std::move(px));
  train.labels = labels;

  auto log_path = (std::filesystem::temp_directory_path() / "t_fit.jsonl").string();
  FitConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.seed = 1;
  cfg.log_path = log_path;
  std::vector<EpochLog> logs;
  Model m = fit(init_model(Arch::MLP, 1), train, cfg, &logs);
  CHECK(logs.size() == 5);
  CHECK(logs.back().pred_loss < logs.front().pred_loss);
  CHECK(logs.back().train_acc > 0.9);

  std::ifstream in(log_path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.contains("pred_loss"));
    CHECK(j.contains("exp_loss"));
    CHECK(j.contains("clipped"));
    CHECK(j.contains("test_acc"));
    ++lines;
  }
  CHECK(lines == 5);
}

TEST_CASE("xil loop bookkeeping") {
  Rng rng(9);
  int64_t n = 60;
  std::vector<double> px(n * kImgPixels);
  std::vector<int64_t> labels(n);
  for (auto& v : px) v = rng.next_double();
  for (auto& l : labels) l = int64_t(rng.next_below(10));
  Batch pool;
  pool.images = Tensor::from_data({n, 1, 28, 28}, std::move(px));
  pool.labels = labels;

  TeacherFn teacher = [](int64_t) {
    Correction c;
    c.mask.mask.assign(kImgPixels, 0);
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) c.mask.mask[r * kImgW + col] = 1;
    c.mask.semantics = FeedbackSemantics::penalty;
    return c;
  };

  SUBCASE("zero budget returns the model untouched") {
    Model m = init_model(Arch::MLP, 2);
    auto before = m.params.at("fc1.w").buffer();
    LoopConfig cfg;
    cfg.budget = 0;
    LoopResult res = run_xil_loop(m.clone(), pool, teacher, cfg);
    CHECK(res.model.params.at("fc1.w").buffer() == before);
    CHECK(res.state.iteration == 0);
    CHECK(res.state.annotated.empty());
  }

  SUBCASE("set sizes and disjointness per iteration") {
    LoopConfig cfg;
    cfg.budget = 3;
    cfg.select_batch = 16;
    cfg.epochs_per_revise = 1;
    cfg.xil.method = Method::RRR;
    cfg.xil.lambda = 1;
    cfg.seed = 4;
    LoopResult res = run_xil_loop(init_model(Arch::MLP, 2), pool, teacher, cfg);
    CHECK(res.state.iteration == 3);
    CHECK(res.state.annotated.size() == 48);
    CHECK(res.state.unannotated.size() == size_t(n) - 48);
    std::vector<int64_t> a = res.state.annotated, u = res.state.unannotated;
    std::sort(a.begin(), a.end());
    std::sort(u.begin(), u.end());
    std::vector<int64_t> inter;
    std::set_intersection(a.begin(), a.end(), u.begin(), u.end(),
                          std::back_inserter(inter));
    CHECK(inter.empty());
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());  // no duplicates
  }

  SUBCASE("pool exhaustion ends the loop early and is flagged") {
    LoopConfig cfg;
    cfg.budget = 100;
    cfg.select_batch = 32;
    cfg.xil.method = Method::VANILLA;
    LoopResult res = run_xil_loop(init_model(Arch::MLP, 2), pool, teacher, cfg);
    CHECK(res.exhausted_pool);
    CHECK(res.state.iteration == 2);  // 60 images / 32 per batch
    CHECK(res.state.unannotated.empty());
    CHECK(res.state.annotated.size() == size_t(n));
  }
}
