#include "xiltk/metrics.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "xiltk/xil.hpp"

namespace xiltk {

double accuracy(const Model& model, const Batch& data) {
  XILTK_CHECK(data.n() > 0, "accuracy: empty evaluation set");
  NoGradGuard ng;
  int64_t n = data.n(), correct = 0;
  const int64_t chunk = 512;
  for (int64_t start = 0; start < n; start += chunk) {
    int64_t m = std::min(chunk, n - start);
    std::vector<double> px(data.images.data() + start * kImgPixels,
                           data.images.data() + (start + m) * kImgPixels);
    Tensor logits = model.forward(Tensor::from_data({m, 1, kImgH, kImgW}, std::move(px)));
    for (int64_t i = 0; i < m; ++i) {
      int64_t best = 0;
      for (int64_t k = 1; k < kClasses; ++k)
        if (logits.data()[i * kClasses + k] > logits.data()[i * kClasses + best]) best = k;
      correct += best == data.labels[start + i];
    }
  }
  return double(correct) / double(n);
}

std::vector<Tensor> normalized_maps(const Model& model, ExplainerTag tag,
                                    const Batch& data, const WrOptions& opt) {
  int64_t n = data.n();
  if (opt.max_images >= 0) n = std::min(n, opt.max_images);
  std::vector<Tensor> out;
  out.reserve(n);

  auto push_maps = [&](const Tensor& maps, int64_t count) {
    for (int64_t i = 0; i < count; ++i) {
      std::vector<double> one(maps.data() + i * kImgPixels,
                              maps.data() + (i + 1) * kImgPixels);
      out.push_back(normalize_plus(Tensor::from_data({kImgH, kImgW}, std::move(one))));
    }
  };

  if (tag == ExplainerTag::LIME) {
    LimeOptions lopt;
    lopt.n_samples = opt.lime_samples;
    NoGradGuard ng;
    for (int64_t i = 0; i < n; ++i) {
      std::vector<double> px(data.images.data() + i * kImgPixels,
                             data.images.data() + (i + 1) * kImgPixels);
      Tensor img = Tensor::from_data({1, 1, kImgH, kImgW}, std::move(px));
      Explanation e = lime(model, img, lopt, opt.seed + uint64_t(i));
      push_maps(e.map, 1);
    }
    return out;
  }

  const int64_t chunk = 256;
  for (int64_t start = 0; start < n; start += chunk) {
    int64_t m = std::min(chunk, n - start);
    std::vector<double> px(data.images.data() + start * kImgPixels,
                           data.images.data() + (start + m) * kImgPixels);
    Tensor batch = Tensor::from_data({m, 1, kImgH, kImgW}, std::move(px));
    Explanation e = tag == ExplainerTag::IG ? input_gradients(model, batch)
                                            : gradcam(model, batch);
    push_maps(e.map, m);
  }
  return out;
}

double wr_threshold(const Model& model, ExplainerTag tag, const Batch& test,
                    const WrOptions& opt, int64_t* excluded) {
  int64_t skipped = 0;
  double total = 0;
  int64_t pixels = 0;
  std::vector<Tensor> maps;
  try {
    maps = normalized_maps(model, tag, test, opt);
  } catch (const TensorError&) {
    throw;  // structural errors (e.g. GradCAM on MLP) propagate
  }
  for (auto& m : maps) {
    if (!m.all_finite()) {
      ++skipped;
      continue;
    }
    total = std::accumulate(m.buffer().begin(), m.buffer().end(), total);
    pixels += m.size();
  }
  if (excluded) *excluded = skipped;
  if (skipped > 0)
    std::cerr << "wr_threshold: excluded " << skipped << " images without explanations\n";
  XILTK_CHECK(pixels > 0, "wr_threshold: every explanation was excluded");
  return total / double(pixels);
}

double wr_score(const Tensor& map, const std::vector<uint8_t>& mask, double alpha) {
  XILTK_CHECK(map.size() == static_cast<int64_t>(mask.size()),
              "wr_score: map and mask sizes differ");
  int64_t mask_count = 0, hit = 0;
  Tensor norm = normalize_plus(map);
  for (size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    ++mask_count;
    if (norm.data()[p] > alpha) ++hit;  // strict binarization
  }
  XILTK_CHECK(mask_count > 0, "wr_score: mask has no marked pixels");
  return double(hit) / double(mask_count);
}

double wr_dataset(const Model& model, ExplainerTag tag, const DecoySet& test,
                  double alpha, const WrOptions& opt, int64_t* skipped) {
  Batch data = to_batch(test);
  std::vector<Tensor> maps = normalized_maps(model, tag, data, opt);
  double total = 0;
  int64_t n = 0, bad = 0;
  for (size_t i = 0; i < maps.size(); ++i) {
    auto dm = test.decoy_mask(int64_t(i));
    try {
      total += wr_score(maps[i], std::vector<uint8_t>(dm.begin(), dm.end()), alpha);
      ++n;
    } catch (const TensorError&) {
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  if (bad > 0) std::cerr << "wr_dataset: skipped " << bad << " images\n";
  XILTK_CHECK(n > 0, "wr_dataset: no scorable images");
  return total / double(n);
}

}  // namespace xiltk
