#include "xiltk/xil.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "xiltk/metrics.hpp"
#include "xiltk/rng.hpp"

namespace xiltk {

std::string method_name(Method m) {
  switch (m) {
    case Method::VANILLA: return "vanilla";
    case Method::RRR: return "rrr";
    case Method::RRRG: return "rrrg";
    case Method::RBR: return "rbr";
    case Method::CDEP: return "cdep";
    case Method::HINT: return "hint";
    case Method::CE: return "ce";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  if (s == "vanilla") return Method::VANILLA;
  if (s == "rrr") return Method::RRR;
  if (s == "rrrg") return Method::RRRG;
  if (s == "rbr") return Method::RBR;
  if (s == "cdep") return Method::CDEP;
  if (s == "hint") return Method::HINT;
  if (s == "ce") return Method::CE;
  throw TensorError("unknown method '" + s + "'");
}

double default_lambda(Method m, const std::string& dataset) {
  bool fashion = dataset.find("fmnist") != std::string::npos;
  switch (m) {
    case Method::RRR: return fashion ? 100 : 10;
    case Method::RRRG: return 1;
    case Method::RBR: return 1e5;
    case Method::CDEP: return 1e6;
    case Method::HINT: return fashion ? 0.1 : 1e3;
    case Method::VANILLA:
    case Method::CE: return 0;
  }
  return 0;
}

// ---------------------------------------------------------------------------

namespace {

void require_semantics(MaskSemantics got, MaskSemantics want, const char* loss) {
  XILTK_CHECK(got == want,
              std::string(loss) + (want == MaskSemantics::penalty
                                       ? " requires penalty-semantics masks"
                                       : " requires reward-semantics masks"));
}

}  // namespace

Tensor rrr_loss(const Model& model, const Tensor& x, const Tensor& mask,
                MaskSemantics semantics) {
  require_semantics(semantics, MaskSemantics::penalty, "rrr_loss");
  Tensor ig = input_gradients(model, x, /*create_graph=*/true).map;
  return sum(square(mul(ig, mask)));
}

Tensor rrrg_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics) {
  require_semantics(semantics, MaskSemantics::penalty, "rrrg_loss");
  Tensor cam = gradcam(model, x, {}, /*create_graph=*/true).map;
  return sum(square(mul(cam, mask)));
}

Tensor rbr_loss(const Model& model, const Tensor& x, const std::vector<int64_t>& labels,
                const Tensor& mask, MaskSemantics semantics) {
  require_semantics(semantics, MaskSemantics::penalty, "rbr_loss");
  Tensor xg = x.detach();
  xg.set_requires_grad(true);
  Tensor logits = model.forward(xg);
  Tensor pred = cross_entropy(logits, labels);

  std::vector<Tensor> params;
  params.reserve(model.params.size());
  for (const auto& [name, t] : model.params) params.push_back(t);

  // influence: gradient w.r.t. the input of the parameter-gradient norm
  Tensor influence = input_second_order(
      pred, params, xg,
      [](const std::vector<Tensor>& gs) {
        Tensor acc = sum(square(gs[0]));
        for (size_t i = 1; i < gs.size(); ++i) acc = add(acc, sum(square(gs[i])));
        return acc;
      },
      /*create_graph=*/true);

  Tensor ig = grad_of(backward(sum(log_softmax(logits)), /*create_graph=*/true), xg);
  return sum(square(mul(mul(mask, influence), ig)));
}

Tensor cdep_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics) {
  require_semantics(semantics, MaskSemantics::penalty, "cdep_loss");
  CDDecomposition cd = contextual_decomposition(model, x, mask);
  return l1norm(cd.beta_logits());
}

Tensor hint_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics) {
  require_semantics(semantics, MaskSemantics::reward, "hint_loss");
  Tensor cam = gradcam(model, x, {}, /*create_graph=*/true).map;
  return mean(square(sub(cam, mask)));
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kExplosionGuard = 1e12;

/// Sub-batch of the mask-bearing examples (images, labels, masks).
struct MaskedSubset {
  Tensor images, masks;
  std::vector<int64_t> labels;
  bool any = false;
};

MaskedSubset masked_subset(const Batch& batch) {
  MaskedSubset s;
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < batch.n(); ++i)
    if (batch.has_mask(i)) idx.push_back(i);
  if (idx.empty()) return s;
  int64_t k = static_cast<int64_t>(idx.size());
  std::vector<double> px(k * kImgPixels), ms(k * kImgPixels);
  s.labels.resize(k);
  for (int64_t j = 0; j < k; ++j) {
    std::memcpy(px.data() + j * kImgPixels, batch.images.data() + idx[j] * kImgPixels,
                kImgPixels * sizeof(double));
    std::memcpy(ms.data() + j * kImgPixels, batch.masks.data() + idx[j] * kImgPixels,
                kImgPixels * sizeof(double));
    s.labels[j] = batch.labels[idx[j]];
  }
  s.images = Tensor::from_data({k, 1, kImgH, kImgW}, std::move(px));
  s.masks = Tensor::from_data({k, 1, kImgH, kImgW}, std::move(ms));
  s.any = true;
  return s;
}

}  // namespace

Tensor combined_loss(const Model& model, const Batch& batch, const XilConfig& cfg,
                     StepStats& stats) {
  Tensor pred = cross_entropy(model.forward(batch.images), batch.labels);
  stats.pred_loss = pred.item();
  XILTK_CHECK(std::isfinite(stats.pred_loss),
              "combined_loss: prediction loss is non-finite");
  if (cfg.method == Method::VANILLA || cfg.method == Method::CE) return pred;

  XILTK_CHECK(batch.masks.defined(),
              "combined_loss: method " + method_name(cfg.method) + " needs masks");
  MaskedSubset sub = masked_subset(batch);
  if (!sub.any) return pred;

  Tensor exp_term;
  switch (cfg.method) {
    case Method::RRR:
      exp_term = rrr_loss(model, sub.images, sub.masks, batch.semantics);
      break;
    case Method::RRRG:
      exp_term = rrrg_loss(model, sub.images, sub.masks, batch.semantics);
      break;
    case Method::RBR:
      exp_term = rbr_loss(model, sub.images, sub.labels, sub.masks, batch.semantics);
      break;
    case Method::CDEP:
      exp_term = cdep_loss(model, sub.images, sub.masks, batch.semantics);
      break;
    case Method::HINT:
      exp_term = hint_loss(model, sub.images, sub.masks, batch.semantics);
      break;
    default:
      throw TensorError("combined_loss: unreachable method");
  }

  double v = exp_term.item();
  XILTK_CHECK(std::isfinite(v), "combined_loss: explanation term non-finite (pred=" +
                                    std::to_string(stats.pred_loss) + ", exp=" +
                                    std::to_string(v) + ")");
  double clip = cfg.rr_clip ? *cfg.rr_clip : std::numeric_limits<double>::infinity();
  if (v > kExplosionGuard) {
    static bool warned = false;
    if (!warned) {
      std::cerr << "warning: explanation loss " << v << " beyond guard, clipping\n";
      warned = true;
    }
    clip = std::min(clip, kExplosionGuard);
  }
  if (v > clip) {
    // detached constant: the term stops contributing gradient this step
    exp_term = Tensor::scalar(clip);
    stats.clipped = true;
  }
  stats.exp_loss = std::min(v, clip);
  return add(pred, mul_scalar(exp_term, cfg.lambda));
}

// ---------------------------------------------------------------------------

Batch to_batch(const DecoySet& set, const std::vector<int64_t>& idx) {
  std::vector<int64_t> all;
  const std::vector<int64_t>* use = &idx;
  if (idx.empty()) {
    all.resize(set.size());
    std::iota(all.begin(), all.end(), 0);
    use = &all;
  }
  int64_t n = static_cast<int64_t>(use->size());
  std::vector<double> px(n * kImgPixels);
  Batch b;
  b.labels.resize(n);
  for (int64_t j = 0; j < n; ++j) {
    auto img = set.decoyed_image((*use)[j]);
    for (int p = 0; p < kImgPixels; ++p) px[j * kImgPixels + p] = img[p] / 255.0;
    b.labels[j] = set.base.labels[(*use)[j]];
  }
  b.images = Tensor::from_data({n, 1, kImgH, kImgW}, std::move(px));
  return b;
}

void attach_feedback(Batch& batch, const FeedbackSet& feedback,
                     const std::vector<int64_t>& idx) {
  std::vector<int64_t> all;
  const std::vector<int64_t>* use = &idx;
  if (idx.empty()) {
    all.resize(batch.n());
    std::iota(all.begin(), all.end(), 0);
    use = &all;
  }
  XILTK_CHECK(static_cast<int64_t>(use->size()) == batch.n(),
              "attach_feedback: index count must match batch size");
  int64_t n = batch.n();
  std::vector<double> ms(n * kImgPixels);
  batch.mask_present.assign(n, 1);
  for (int64_t j = 0; j < n; ++j) {
    int64_t i = (*use)[j];
    const FeedbackMask& fm = feedback.masks.at(i);
    for (int p = 0; p < kImgPixels; ++p) ms[j * kImgPixels + p] = fm.mask[p];
    if (!feedback.present.empty()) batch.mask_present[j] = feedback.present[i];
  }
  batch.masks = Tensor::from_data({n, 1, kImgH, kImgW}, std::move(ms));
  batch.semantics = feedback.masks.empty() ? MaskSemantics::penalty
                    : feedback.masks.front().semantics == FeedbackSemantics::penalty
                        ? MaskSemantics::penalty
                        : MaskSemantics::reward;
}

Batch ce_revise(const Batch& train, const std::vector<Counterexample>& ces) {
  if (ces.empty()) return train;
  int64_t n = train.n(), m = static_cast<int64_t>(ces.size());
  std::vector<double> px(train.images.buffer());
  px.resize((n + m) * kImgPixels);
  Batch out;
  out.labels = train.labels;
  out.labels.reserve(n + m);
  for (int64_t j = 0; j < m; ++j) {
    for (int p = 0; p < kImgPixels; ++p)
      px[(n + j) * kImgPixels + p] = ces[j].image[p] / 255.0;
    out.labels.push_back(ces[j].label);
  }
  out.images = Tensor::from_data({n + m, 1, kImgH, kImgW}, std::move(px));
  return out;  // masks dropped: CE trains as Vanilla on the augmented set
}

// ---------------------------------------------------------------------------

namespace {

Batch slice(const Batch& data, const std::vector<int64_t>& idx) {
  int64_t k = static_cast<int64_t>(idx.size());
  Batch b;
  std::vector<double> px(k * kImgPixels);
  b.labels.resize(k);
  bool with_masks = data.masks.defined();
  std::vector<double> ms(with_masks ? k * kImgPixels : 0);
  if (!data.mask_present.empty()) b.mask_present.resize(k);
  for (int64_t j = 0; j < k; ++j) {
    std::memcpy(px.data() + j * kImgPixels, data.images.data() + idx[j] * kImgPixels,
                kImgPixels * sizeof(double));
    b.labels[j] = data.labels[idx[j]];
    if (with_masks)
      std::memcpy(ms.data() + j * kImgPixels, data.masks.data() + idx[j] * kImgPixels,
                  kImgPixels * sizeof(double));
    if (!data.mask_present.empty()) b.mask_present[j] = data.mask_present[idx[j]];
  }
  b.images = Tensor::from_data({k, 1, kImgH, kImgW}, std::move(px));
  if (with_masks) b.masks = Tensor::from_data({k, 1, kImgH, kImgW}, std::move(ms));
  b.semantics = data.semantics;
  return b;
}

/// One pass over the data in shuffled mini-batches.
StepStats run_epoch(Model& model, const Batch& data, const XilConfig& xil, Adam& adam,
                    Rng& rng, int64_t batch_size) {
  int64_t n = data.n();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  LossFn loss_fn = [&xil](const Model& m, const Batch& b, StepStats& st) {
    return combined_loss(m, b, xil, st);
  };
  StepStats agg;
  int64_t steps = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t m = std::min(batch_size, n - start);
    std::vector<int64_t> idx(order.begin() + start, order.begin() + start + m);
    StepStats st = train_step(model, slice(data, idx), loss_fn, adam);
    agg.pred_loss += st.pred_loss;
    agg.exp_loss += st.exp_loss;
    agg.clipped = agg.clipped || st.clipped;
    ++steps;
  }
  if (steps) {
    agg.pred_loss /= double(steps);
    agg.exp_loss /= double(steps);
  }
  return agg;
}

}  // namespace

Model fit(Model model, const Batch& train, const FitConfig& cfg,
          std::vector<EpochLog>* logs) {
  XILTK_CHECK(cfg.epochs >= 0, "fit: negative epoch count");
  Adam adam;
  Rng rng(cfg.seed);
  std::ofstream log_out;
  if (!cfg.log_path.empty()) {
    log_out.open(cfg.log_path);
    XILTK_CHECK(log_out.good(), cfg.log_path + ": cannot open for writing");
  }
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    StepStats agg = run_epoch(model, train, cfg.xil, adam, rng, cfg.batch_size);
    EpochLog el;
    el.epoch = epoch;
    el.pred_loss = agg.pred_loss;
    el.exp_loss = agg.exp_loss;
    el.clipped = agg.clipped;
    el.train_acc = cfg.eval_train_acc ? accuracy(model, train) : 0;
    el.test_acc = cfg.test ? accuracy(model, *cfg.test) : 0;
    if (log_out.is_open()) {
      nlohmann::json j{{"epoch", el.epoch},       {"pred_loss", el.pred_loss},
                       {"exp_loss", el.exp_loss}, {"clipped", el.clipped},
                       {"train_acc", el.train_acc}, {"test_acc", el.test_acc}};
      log_out << j.dump() << "\n";
    }
    if (logs) logs->push_back(el);
  }
  return model;
}

// ---------------------------------------------------------------------------

LoopResult run_xil_loop(Model model, const Batch& pool, const TeacherFn& teacher,
                        const LoopConfig& cfg) {
  LoopResult res;
  res.model = std::move(model);
  LoopState& st = res.state;
  st.unannotated.resize(pool.n());
  std::iota(st.unannotated.begin(), st.unannotated.end(), 0);

  Rng rng(cfg.seed);
  Adam adam;
  std::unordered_map<int64_t, FeedbackMask> mask_of;
  std::vector<Counterexample> ces;
  double best_val = -1;
  int stale = 0;

  while (st.iteration < cfg.budget && !st.unannotated.empty()) {
    // Select: random batch from the unannotated pool
    int64_t take = std::min<int64_t>(cfg.select_batch,
                                     static_cast<int64_t>(st.unannotated.size()));
    rng.shuffle(st.unannotated);
    std::vector<int64_t> chosen(st.unannotated.end() - take, st.unannotated.end());
    st.unannotated.resize(st.unannotated.size() - take);

    // Obtain: teacher corrections, appended to A
    for (int64_t i : chosen) {
      Correction c = teacher(i);
      st.annotated.push_back(i);
      if (cfg.xil.method == Method::CE)
        ces.insert(ces.end(), c.counterexamples.begin(), c.counterexamples.end());
      else
        mask_of[i] = std::move(c.mask);
    }
    ++st.iteration;

    // Revise: refit on the annotated set
    Batch annotated = slice(pool, st.annotated);
    if (cfg.xil.method == Method::CE) {
      annotated = ce_revise(annotated, ces);
    } else if (cfg.xil.method != Method::VANILLA) {
      int64_t k = annotated.n();
      std::vector<double> ms(k * kImgPixels);
      for (int64_t j = 0; j < k; ++j) {
        const FeedbackMask& fm = mask_of.at(st.annotated[j]);
        for (int p = 0; p < kImgPixels; ++p) ms[j * kImgPixels + p] = fm.mask[p];
      }
      annotated.masks = Tensor::from_data({k, 1, kImgH, kImgW}, std::move(ms));
      annotated.mask_present.clear();
      annotated.semantics =
          mask_of.at(st.annotated[0]).semantics == FeedbackSemantics::penalty
              ? MaskSemantics::penalty
              : MaskSemantics::reward;
    }
    for (int e = 0; e < cfg.epochs_per_revise; ++e)
      run_epoch(res.model, annotated, cfg.xil, adam, rng, cfg.batch_size);

    if (cfg.val) {
      double acc = accuracy(res.model, *cfg.val);
      res.val_acc_trace.push_back(acc);
      if (acc > best_val + 1e-3) {
        best_val = acc;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  res.exhausted_pool = st.unannotated.empty();
  if (res.exhausted_pool && st.iteration < cfg.budget)
    std::cerr << "run_xil_loop: pool exhausted after " << st.iteration
              << " iterations (budget " << cfg.budget << ")\n";
  return res;
}

}  // namespace xiltk
