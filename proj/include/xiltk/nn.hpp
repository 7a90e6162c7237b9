#pragma once

// Model zoo (small CNN and MLP for 28x28 grayscale, 10 classes), Adam,
// and the plain training step.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xiltk/tensor.hpp"

namespace xiltk {

enum class Arch { SCNN, MLP };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);

enum class MaskSemantics { penalty, reward };

/// One optimizer step's worth of data.
struct Batch {
  Tensor images;                       // [N,1,28,28], values in [0,1]
  std::vector<int64_t> labels;         // N
  Tensor masks;                        // [N,1,28,28] binary; undefined when unused
  std::vector<uint8_t> mask_present;   // per-example flag; empty = all present
  MaskSemantics semantics = MaskSemantics::penalty;

  int64_t n() const { return images.dim(0); }
  bool has_mask(int64_t i) const {
    return masks.defined() && (mask_present.empty() || mask_present[i]);
  }
};

/// Intermediate activations captured during forward, for explainers.
struct ForwardTrace {
  Tensor input;       // the (possibly grad-enabled) input tensor
  Tensor conv_feats;  // last conv layer activation (post-ReLU), SCNN only
  Tensor logits;
};

struct Model {
  Arch arch = Arch::SCNN;
  // ordered for deterministic iteration
  std::map<std::string, Tensor> params;

  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) const;
  int64_t param_count() const;
  Model clone() const;
};

/// CNN: conv(1->20,k5) ReLU pool2 | conv(20->50,k5) ReLU pool2 | fc(800->128)
/// ReLU | fc(128->10). MLP: 784 -> 128 -> 10.
Model init_model(Arch arch, uint64_t seed);

constexpr int64_t kScnnHidden = 128;
constexpr int64_t kMlpHidden = 128;
constexpr int64_t kClasses = 10;

/// Mean cross-entropy of logits [N,K] against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m, v;

  void step(Model& model, const GradMap& grads);
};

struct StepStats {
  double pred_loss = 0;
  double exp_loss = 0;
  bool clipped = false;
};

/// Loss callback: returns the total scalar loss and fills stats.
using LossFn = std::function<Tensor(const Model&, const Batch&, StepStats&)>;

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One forward/backward/Adam update. Throws TrainError on non-finite loss.
StepStats train_step(Model& model, const Batch& batch, const LossFn& loss_fn, Adam& adam);

// Checkpoints: flat binary f64 arrays + JSON header (names, shapes, arch_tag).
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace xiltk
