#include "xiltk/explainers.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "xiltk/checkpoint.hpp"
#include "xiltk/datasets.hpp"
#include "xiltk/rng.hpp"

namespace xiltk {

std::string explainer_name(ExplainerTag t) {
  switch (t) {
    case ExplainerTag::IG: return "ig";
    case ExplainerTag::GRADCAM: return "gradcam";
    case ExplainerTag::LIME: return "lime";
    case ExplainerTag::CD: return "cd";
  }
  return "?";
}

ExplainerTag explainer_from_name(const std::string& s) {
  if (s == "ig") return ExplainerTag::IG;
  if (s == "gradcam") return ExplainerTag::GRADCAM;
  if (s == "lime") return ExplainerTag::LIME;
  if (s == "cd") return ExplainerTag::CD;
  throw TensorError("unknown explainer '" + s + "'");
}

// ---------------------------------------------------------------------------

Explanation input_gradients(const Model& model, const Tensor& x, bool create_graph) {
  XILTK_CHECK(grad_enabled(), "input_gradients: needs grad recording enabled");
  Tensor xg = x.detach();
  xg.set_requires_grad(true);
  Tensor logits = model.forward(xg);
  Tensor score = sum(log_softmax(logits));
  GradMap grads = backward(score, create_graph);
  Explanation e;
  e.map = grad_of(grads, xg);
  e.tag = ExplainerTag::IG;
  e.differentiable = create_graph;
  return e;
}

namespace {

std::vector<int64_t> argmax_rows(const Tensor& logits) {
  int64_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int64_t> out(n);
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (logits.data()[i * k + j] > logits.data()[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

/// Per-image min-max rescale of [N,1,H,W] into [0,1]; differentiable.
Tensor minmax_normalize(const Tensor& maps) {
  int64_t n = maps.dim(0), hw = maps.dim(2) * maps.dim(3);
  Tensor flat = reshape(maps, {n, hw});
  Tensor mn = row_min(flat);
  Tensor range = sub(row_max(flat), mn);
  Tensor scaled = mul(sub(flat, broadcast_cols(mn, hw)),
                      broadcast_cols(reciprocal(add_scalar(range, 1e-12)), hw));
  return reshape(scaled, maps.shape());
}

}  // namespace

Explanation gradcam(const Model& model, const Tensor& x, std::vector<int64_t> classes,
                    bool create_graph) {
  XILTK_CHECK(model.arch == Arch::SCNN, "GradCAM requires convolutional features");
  XILTK_CHECK(grad_enabled(), "gradcam: needs grad recording enabled");

  ForwardTrace trace;
  Tensor logits = model.forward(x, &trace);
  if (classes.empty()) classes = argmax_rows(logits);
  XILTK_CHECK(static_cast<int64_t>(classes.size()) == x.dim(0),
              "gradcam: one target class per image expected");
  Tensor score = sum(select_columns(logits, classes));

  const Tensor& feats = trace.conv_feats;
  XILTK_CHECK(feats.requires_grad(),
              "gradcam: forward pass carries no gradient graph");
  GradMap grads = backward(score, create_graph);
  Tensor gfeats = grad_of(grads, feats);

  auto build = [&](const Tensor& a, const Tensor& ga) {
    int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    Tensor weights = mul_scalar(row_sum(reshape(ga, {n * c, h * w})), 1.0 / (h * w));
    Tensor weighted = mul_colvec(reshape(a, {n * c, h * w}), weights);
    Tensor cam = relu(channel_sum(reshape(weighted, {n, c, h, w})));
    return minmax_normalize(upsample_bilinear(cam, kImgH, kImgW));
  };

  Explanation e;
  if (create_graph) {
    e.map = build(feats, gfeats);
  } else {
    NoGradGuard ng;
    e.map = build(feats.detach(), gfeats.detach());
  }
  e.tag = ExplainerTag::GRADCAM;
  e.classes = std::move(classes);
  e.differentiable = create_graph;
  return e;
}

// ---------------------------------------------------------------------------

Explanation lime(const Model& model, const Tensor& x, const LimeOptions& opt,
                 uint64_t seed, int64_t class_index) {
  XILTK_CHECK(x.ndim() == 4 && x.dim(0) == 1, "lime: expected a single image batch");
  XILTK_CHECK(opt.n_segments >= 4, "lime: need at least 4 segments");
  XILTK_CHECK(opt.n_samples >= opt.n_segments, "lime: need n_samples >= n_segments");
  int side = static_cast<int>(std::lround(std::sqrt(double(opt.n_segments))));
  XILTK_CHECK(side * side == opt.n_segments && kImgH % side == 0,
              "lime: n_segments must be a perfect square whose side divides 28");
  int block = kImgH / side;
  int S = opt.n_segments;

  NoGradGuard ng;
  double fill = opt.fill;
  if (fill < 0) {
    fill = 0;
    for (double v : x.buffer()) fill += v;
    fill /= double(x.size());
  }
  if (class_index < 0) class_index = argmax_rows(model.forward(x))[0];

  // segment id per pixel
  std::vector<int> seg_of(kImgPixels);
  for (int r = 0; r < kImgH; ++r)
    for (int c = 0; c < kImgW; ++c) seg_of[r * kImgW + c] = (r / block) * side + c / block;

  // binary indicator rows; sample 0 keeps everything on
  Rng rng(seed);
  int n = opt.n_samples;
  std::vector<uint8_t> z(size_t(n) * S, 1);
  for (int i = 1; i < n; ++i) {
    int off = static_cast<int>(rng.next_below(uint64_t(S) + 1));
    std::vector<int64_t> idx(S);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    for (int k = 0; k < off; ++k) z[size_t(i) * S + idx[k]] = 0;
  }

  // evaluate the model on the perturbed batch, in chunks
  std::vector<double> y(n);
  const int chunk = 256;
  for (int start = 0; start < n; start += chunk) {
    int m = std::min(chunk, n - start);
    std::vector<double> px(size_t(m) * kImgPixels);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < kImgPixels; ++p)
        px[size_t(i) * kImgPixels + p] =
            z[size_t(start + i) * S + seg_of[p]] ? x.data()[p] : fill;
    Tensor batch = Tensor::from_data({m, 1, kImgH, kImgW}, std::move(px));
    Tensor logits = model.forward(batch);
    for (int i = 0; i < m; ++i) y[start + i] = logits.data()[i * kClasses + class_index];
  }

  // exponential kernel on the Hamming distance to the unperturbed sample
  double width = opt.kernel_width > 0 ? opt.kernel_width : 0.25 * std::sqrt(double(S));
  std::vector<double> wts(n);
  for (int i = 0; i < n; ++i) {
    int ham = 0;
    for (int j = 0; j < S; ++j) ham += 1 - z[size_t(i) * S + j];
    wts[i] = std::exp(-double(ham) / (width * width));
  }

  // weighted ridge regression with intercept
  Eigen::MatrixXd design(n, S + 1);
  Eigen::VectorXd target(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < S; ++j) design(i, j) = z[size_t(i) * S + j];
    design(i, S) = 1.0;
    target(i) = y[i];
  }
  Eigen::MatrixXd wd = design;
  for (int i = 0; i < n; ++i) wd.row(i) *= wts[i];
  Eigen::MatrixXd gram = design.transpose() * wd;
  Eigen::VectorXd rhs = wd.transpose() * target;

  double ridge = opt.ridge;
  Eigen::VectorXd coef;
  for (int attempt = 0;; ++attempt) {
    Eigen::MatrixXd reg = gram;
    // the intercept stays unpenalized so constant responses fit exactly
    for (int j = 0; j < S; ++j) reg(j, j) += ridge;
    coef = reg.ldlt().solve(rhs);
    if (coef.allFinite()) break;
    XILTK_CHECK(attempt < 6, "lime: ridge regression stayed singular");
    ridge *= 10;
    std::cerr << "warning: lime regression singular, raising ridge to " << ridge << "\n";
  }

  std::vector<double> map(kImgPixels);
  for (int p = 0; p < kImgPixels; ++p) map[p] = coef(seg_of[p]);
  Explanation e;
  e.map = Tensor::from_data({1, 1, kImgH, kImgW}, std::move(map));
  e.tag = ExplainerTag::LIME;
  e.classes = {class_index};
  e.differentiable = false;
  return e;
}

// ---------------------------------------------------------------------------

namespace {

/// Constant 1/0 tensor marking where the combined activation is positive.
Tensor positive_mask(const Tensor& beta, const Tensor& gamma) {
  NoGradGuard ng;
  std::vector<double> m(beta.size());
  for (int64_t i = 0; i < beta.size(); ++i)
    m[i] = beta.data()[i] + gamma.data()[i] > 0 ? 1.0 : 0.0;
  return Tensor::from_data(beta.shape(), std::move(m));
}

Tensor ones_complement(const Tensor& region) {
  NoGradGuard ng;
  std::vector<double> m(region.size());
  for (int64_t i = 0; i < region.size(); ++i) {
    double v = region.data()[i];
    XILTK_CHECK(v == 0.0 || v == 1.0, "contextual_decomposition: region must be binary");
    m[i] = 1.0 - v;
  }
  return Tensor::from_data(region.shape(), std::move(m));
}

}  // namespace

CDDecomposition contextual_decomposition(const Model& model, const Tensor& x,
                                         const Tensor& region) {
  XILTK_CHECK(x.shape() == region.shape(),
              "contextual_decomposition: region shape must match input");
  CDDecomposition cd;
  cd.region = region;

  Tensor beta = mul(x.detach(), region);
  Tensor gamma = mul(x.detach(), ones_complement(region));
  auto record = [&](const std::string& name) {
    cd.layers.push_back({name, beta, gamma});
  };
  record("input");

  auto relu_split = [&]() {
    Tensor mask = positive_mask(beta, gamma);
    beta = mul(beta, mask);
    gamma = mul(gamma, mask);
  };
  auto pool_split = [&]() {
    PoolResult full = maxpool2d(add(beta, gamma), 2, 2);
    beta = pool_gather(beta, full.indices, full.out.shape());
    gamma = pool_gather(gamma, full.indices, full.out.shape());
  };

  const auto& P = model.params;
  if (model.arch == Arch::SCNN) {
    beta = conv2d(beta, P.at("conv1.w"));
    gamma = add_channel_bias(conv2d(gamma, P.at("conv1.w")), P.at("conv1.b"));
    relu_split();
    record("conv1");
    pool_split();
    record("pool1");
    beta = conv2d(beta, P.at("conv2.w"));
    gamma = add_channel_bias(conv2d(gamma, P.at("conv2.w")), P.at("conv2.b"));
    relu_split();
    record("conv2");
    pool_split();
    record("pool2");
    int64_t n = beta.dim(0);
    beta = reshape(beta, {n, beta.size() / n});
    gamma = reshape(gamma, {n, gamma.size() / n});
    beta = matmul(beta, P.at("fc1.w"));
    gamma = add_row_bias(matmul(gamma, P.at("fc1.w")), P.at("fc1.b"));
    relu_split();
    record("fc1");
    beta = matmul(beta, P.at("fc2.w"));
    gamma = add_row_bias(matmul(gamma, P.at("fc2.w")), P.at("fc2.b"));
    record("logits");
  } else if (model.arch == Arch::MLP) {
    int64_t n = beta.dim(0);
    beta = reshape(beta, {n, kImgPixels});
    gamma = reshape(gamma, {n, kImgPixels});
    beta = matmul(beta, P.at("fc1.w"));
    gamma = add_row_bias(matmul(gamma, P.at("fc1.w")), P.at("fc1.b"));
    relu_split();
    record("fc1");
    beta = matmul(beta, P.at("fc2.w"));
    gamma = add_row_bias(matmul(gamma, P.at("fc2.w")), P.at("fc2.b"));
    record("logits");
  } else {
    throw TensorError("contextual_decomposition: unsupported architecture");
  }
  return cd;
}

// ---------------------------------------------------------------------------

Tensor normalize_plus(const Tensor& map) {
  std::vector<double> out(map.size());
  double mx = 0;
  for (int64_t i = 0; i < map.size(); ++i) {
    double v = map.data()[i];
    XILTK_CHECK(!std::isnan(v), "normalize_plus: NaN in explanation map");
    out[i] = v > 0 ? v : 0.0;
    mx = std::max(mx, out[i]);
  }
  if (mx > 0)
    for (auto& v : out) v /= mx;
  return Tensor::from_data(map.shape(), std::move(out));
}

Explanation explain(const Model& model, ExplainerTag tag, const Tensor& x,
                    uint64_t seed) {
  switch (tag) {
    case ExplainerTag::IG: return input_gradients(model, x);
    case ExplainerTag::GRADCAM: return gradcam(model, x);
    case ExplainerTag::LIME: {
      // per-image fit; concatenate the maps
      int64_t n = x.dim(0);
      std::vector<double> maps;
      maps.reserve(size_t(n) * kImgPixels);
      LimeOptions opt;
      std::vector<int64_t> classes;
      for (int64_t i = 0; i < n; ++i) {
        std::vector<double> px(x.data() + i * kImgPixels,
                               x.data() + (i + 1) * kImgPixels);
        Tensor img = Tensor::from_data({1, 1, kImgH, kImgW}, std::move(px));
        Explanation one = lime(model, img, opt, seed + uint64_t(i));
        maps.insert(maps.end(), one.map.buffer().begin(), one.map.buffer().end());
        classes.push_back(one.classes[0]);
      }
      Explanation e;
      e.map = Tensor::from_data({n, 1, kImgH, kImgW}, std::move(maps));
      e.tag = tag;
      e.classes = std::move(classes);
      return e;
    }
    case ExplainerTag::CD:
      throw TensorError("explain: CD yields a decomposition, not a pixel map");
  }
  throw TensorError("explain: bad tag");
}

void write_pgm(const std::string& path, const Tensor& map) {
  XILTK_CHECK(map.ndim() == 2, "write_pgm: expected a 2-D map");
  int64_t h = map.dim(0), w = map.dim(1);
  std::ofstream out(path);
  XILTK_CHECK(out.good(), path + ": cannot open for writing");
  out << "P2\n" << w << " " << h << "\n255\n";
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      double v = map.data()[r * w + c];
      v = std::min(1.0, std::max(0.0, v));
      out << int(std::lround(v * 255)) << (c + 1 == w ? '\n' : ' ');
    }
  }
}

void save_explanation_arrays(const std::string& path, const Explanation& e) {
  ArrayFile file;
  file.meta["kind"] = "explanations";
  file.meta["explainer"] = explainer_name(e.tag);
  file.meta["classes"] = e.classes;
  file.arrays.push_back({"maps", e.map.shape(), e.map.buffer()});
  write_array_file(path, file);
}

}  // namespace xiltk
