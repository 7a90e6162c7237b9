#pragma once

// Attribution-map explainers: input gradients, GradCAM, LIME, and
// contextual decomposition.

#include <string>
#include <vector>

#include "xiltk/nn.hpp"
#include "xiltk/tensor.hpp"

namespace xiltk {

enum class ExplainerTag { IG, GRADCAM, LIME, CD };

std::string explainer_name(ExplainerTag t);
ExplainerTag explainer_from_name(const std::string& s);

/// A batch of attribution maps, one per input image.
struct Explanation {
  Tensor map;  // same shape as the input batch, [N,1,28,28]
  ExplainerTag tag = ExplainerTag::IG;
  std::vector<int64_t> classes;  // target class per image; empty for IG
  bool differentiable = false;   // true when the map is graph-connected
};

/// Gradient of the summed log class probabilities w.r.t. the input
/// pixels. With create_graph the map stays differentiable w.r.t. the
/// model parameters.
Explanation input_gradients(const Model& model, const Tensor& x,
                            bool create_graph = false);

/// Gradient-weighted class activation map at the last conv layer,
/// bilinearly upsampled to 28x28 and min-max normalized per image.
/// Empty `classes` targets each image's predicted class.
Explanation gradcam(const Model& model, const Tensor& x,
                    std::vector<int64_t> classes = {}, bool create_graph = false);

struct LimeOptions {
  int n_segments = 49;     // perfect square whose side divides 28
  int n_samples = 1000;
  double kernel_width = -1;  // <0 -> 0.25 * sqrt(n_segments)
  double ridge = 1e-3;
  double fill = -1;  // replacement value for masked segments; <0 -> image mean
};

/// Local surrogate: mask grid segments, fit a weighted ridge regression
/// of the class score on segment indicators, spread each weight over
/// its segment's pixels. `x` is a single image [1,1,28,28].
Explanation lime(const Model& model, const Tensor& x, const LimeOptions& opt,
                 uint64_t seed, int64_t class_index = -1);

struct CDLayer {
  std::string name;
  Tensor beta;   // contribution of the marked region
  Tensor gamma;  // remainder; beta + gamma == full activation
};

struct CDDecomposition {
  std::vector<CDLayer> layers;  // per stage, logits last
  Tensor region;

  const Tensor& beta_logits() const { return layers.back().beta; }
  const Tensor& gamma_logits() const { return layers.back().gamma; }
};

/// Layer-wise split of the forward pass into the marked region's
/// contribution and the remainder. Differentiable w.r.t. parameters.
CDDecomposition contextual_decomposition(const Model& model, const Tensor& x,
                                         const Tensor& region);

/// Zero the negatives, then scale the max to 1 (all-zero stays all-zero).
/// Returns a constant tensor; throws on NaN.
Tensor normalize_plus(const Tensor& map);

/// Convenience dispatcher for WR evaluation (IG, GRADCAM, LIME).
Explanation explain(const Model& model, ExplainerTag tag, const Tensor& x,
                    uint64_t seed = 0);

/// ASCII PGM (P2) heatmap of a single [0,1] map for visual inspection.
void write_pgm(const std::string& path, const Tensor& map);

/// Raw f64 maps in the array-file format, tagged with the explainer.
void save_explanation_arrays(const std::string& path, const Explanation& e);

}  // namespace xiltk
