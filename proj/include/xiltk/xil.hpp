#pragma once

// Model-revision strategies (loss-based and counterexample-based) and
// the interactive teaching loop.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xiltk/datasets.hpp"
#include "xiltk/explainers.hpp"
#include "xiltk/nn.hpp"

namespace xiltk {

enum class Method { VANILLA, RRR, RRRG, RBR, CDEP, HINT, CE };

std::string method_name(Method m);
Method method_from_name(const std::string& s);

struct XilConfig {
  Method method = Method::VANILLA;
  double lambda = 0;  // ignored for VANILLA/CE
  std::optional<double> rr_clip;
  CeStrategy ce_strategy = CeStrategy::randomize;
  int copies = 1;
};

/// Per-method regularization strengths that work out of the box.
double default_lambda(Method m, const std::string& dataset);

// ---------------------------------------------------------------------------
// Explanation losses. Each is >= 0, graph-connected to the parameters,
// and exactly zero under its stated zero-condition.

/// Sum of squared masked input gradients (penalty mask).
Tensor rrr_loss(const Model& model, const Tensor& x, const Tensor& mask,
                MaskSemantics semantics);

/// Sum of squared masked normalized GradCAM values (penalty mask).
Tensor rrrg_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics);

/// Influence-weighted input gradients, masked, squared, summed. Second
/// order: differentiates the parameter-gradient norm w.r.t. the input.
Tensor rbr_loss(const Model& model, const Tensor& x, const std::vector<int64_t>& labels,
                const Tensor& mask, MaskSemantics semantics);

/// L1 norm of the logit-level marked-region contribution (target zero).
Tensor cdep_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics);

/// Mean squared error between the normalized GradCAM map and a reward mask.
Tensor hint_loss(const Model& model, const Tensor& x, const Tensor& mask,
                 MaskSemantics semantics);

/// Prediction loss plus lambda * min(explanation loss, clip). Examples
/// without masks contribute only the prediction term.
Tensor combined_loss(const Model& model, const Batch& batch, const XilConfig& cfg,
                     StepStats& stats);

// ---------------------------------------------------------------------------
// Dataset plumbing.

/// Decoy images (scaled to [0,1]) and labels as a training batch.
/// Empty idx selects everything.
Batch to_batch(const DecoySet& set, const std::vector<int64_t>& idx = {});

/// Attach simulated-teacher masks to a batch built by to_batch.
void attach_feedback(Batch& batch, const FeedbackSet& feedback,
                     const std::vector<int64_t>& idx = {});

/// Counterexample augmentation: corrected copies appended to the set.
/// The strategy trains as Vanilla afterwards; no loss term involved.
Batch ce_revise(const Batch& train, const std::vector<Counterexample>& ces);

// ---------------------------------------------------------------------------
// Training.

struct EpochLog {
  int epoch = 0;
  double pred_loss = 0;
  double exp_loss = 0;
  bool clipped = false;
  double train_acc = 0;
  double test_acc = 0;
};

struct FitConfig {
  int epochs = 15;
  int64_t batch_size = 256;
  uint64_t seed = 0;
  XilConfig xil;
  const Batch* test = nullptr;   // per-epoch test accuracy when present
  std::string log_path;          // JSON-lines per-epoch log when non-empty
  bool eval_train_acc = true;
};

/// Epoch loop: shuffle, slice, combined_loss, Adam. Returns the trained
/// model; fills `logs` when given.
Model fit(Model model, const Batch& train, const FitConfig& cfg,
          std::vector<EpochLog>* logs = nullptr);

// ---------------------------------------------------------------------------
// Interactive loop.

/// Teacher answer for one queried image.
struct Correction {
  FeedbackMask mask;                            // loss-based methods
  std::vector<Counterexample> counterexamples;  // CE method
  int64_t corrected_label = -1;
};

using TeacherFn = std::function<Correction(int64_t index)>;

struct LoopConfig {
  int64_t budget = 10;        // iterations T
  int64_t select_batch = 32;  // images queried per iteration
  int epochs_per_revise = 1;
  int64_t batch_size = 256;
  uint64_t seed = 0;
  XilConfig xil;
  const Batch* val = nullptr;     // enables the plateau early stop
  int early_stop_patience = 5;
};

struct LoopState {
  std::vector<int64_t> annotated;    // A
  std::vector<int64_t> unannotated;  // N
  int64_t iteration = 0;
};

struct LoopResult {
  Model model;
  LoopState state;
  std::vector<double> val_acc_trace;
  bool exhausted_pool = false;
};

/// Select (random from N) -> Explain/Obtain (teacher) -> A u= batch ->
/// Revise (refit on A) -> N \= batch, until the budget or the pool runs
/// out. A and N stay disjoint throughout.
LoopResult run_xil_loop(Model model, const Batch& pool, const TeacherFn& teacher,
                        const LoopConfig& cfg);

}  // namespace xiltk
