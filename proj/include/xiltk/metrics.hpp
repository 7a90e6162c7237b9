#pragma once

// Accuracy and the wrong-reason (WR) metric with threshold calibration.

#include <cstdint>
#include <string>
#include <vector>

#include "xiltk/datasets.hpp"
#include "xiltk/explainers.hpp"
#include "xiltk/nn.hpp"

namespace xiltk {

/// Argmax-match rate over the batch. Throws on an empty set.
double accuracy(const Model& model, const Batch& data);

struct WrConfig {
  double alpha = 0;
  ExplainerTag tag = ExplainerTag::IG;
};

struct WrOptions {
  int64_t max_images = -1;   // cap for expensive explainers; <0 = all
  int lime_samples = 200;
  uint64_t seed = 0;
};

/// Pixel-level mean over all normalized attribution maps of the test
/// set. Images whose explanation fails are skipped and counted.
double wr_threshold(const Model& model, ExplainerTag tag, const Batch& test,
                    const WrOptions& opt = {}, int64_t* excluded = nullptr);

/// Fraction of mask pixels whose normalized attribution exceeds alpha
/// (strict). `map` is one raw 28x28 attribution map.
double wr_score(const Tensor& map, const std::vector<uint8_t>& mask, double alpha);

/// Mean WR over the confounder masks of a decoy test set; per-image
/// failures are skipped and counted.
double wr_dataset(const Model& model, ExplainerTag tag, const DecoySet& test,
                  double alpha, const WrOptions& opt = {}, int64_t* skipped = nullptr);

/// Batched normalized maps for the given images (helper shared by the
/// threshold and scoring passes).
std::vector<Tensor> normalized_maps(const Model& model, ExplainerTag tag,
                                    const Batch& data, const WrOptions& opt);

}  // namespace xiltk
