#pragma once

// Benchmark harness: named training runs persisted as JSON-lines
// records, the five experiment suites, and report generation.

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "xiltk/datasets.hpp"
#include "xiltk/metrics.hpp"
#include "xiltk/xil.hpp"

namespace xiltk {

/// One completed (or failed) training run. Serializes losslessly to a
/// single JSON line; `id` is a pure function of the configuration so
/// identical runs are cached.
struct RunRecord {
  std::string id;
  std::string task;     // q1 | robustness | efficiency | switch | sweep
  std::string dataset;  // decoy_mnist | decoy_fmnist
  std::string method;   // vanilla | rrr | ... | ce | wo_decoy
  uint64_t seed = 0;
  double lambda = 0;
  std::string feedback_quality;  // empty when not applicable
  int64_t k = -1;                // interaction budget; -1 = all feedback
  int switch_epoch = -1;         // -1 = no switch phase
  std::vector<double> epoch_test_acc;
  double final_train_acc = 0;
  double final_test_acc = 0;
  std::map<std::string, double> wr;  // explainer name -> WR score
  double wall_seconds = 0;
  bool failed = false;
  std::string error;
};

std::string record_to_json(const RunRecord& r);
RunRecord record_from_json(const std::string& line);

struct BenchConfig {
  std::string dataset = "decoy_mnist";  // or decoy_fmnist
  int64_t subsample = 10000;            // train images; <=0 = all
  int64_t test_subsample = 2000;        // test images; <=0 = all
  int epochs = 15;
  std::vector<Method> methods = {Method::VANILLA, Method::RRR,  Method::RRRG,
                                 Method::RBR,     Method::CDEP, Method::HINT,
                                 Method::CE};
  std::vector<uint64_t> seeds = {1, 10, 100};
  std::string out_dir = "bench_out";
  std::string data_dir;  // empty -> $XILBENCH_DATA, else "data"
  bool full = false;     // 50 epochs, 5 seeds, no subsampling
  int jobs = 1;
  std::optional<double> lambda_override;
  std::optional<double> rr_clip;
  FeedbackQuality feedback_quality = FeedbackQuality::correct;
  int64_t batch_size = 256;
  int64_t wr_max_images = 256;  // explanation-map cap for WR scoring
  int64_t wr_lime_images = 64;  // tighter cap for the sampling explainer
};

/// Plain key=value file ('#' comments); keys mirror the CLI flags.
BenchConfig load_bench_config(const std::string& path);

/// Applies the full-scale profile: 50 epochs, seeds {1,10,100,1000,10000},
/// all training data.
void apply_full_scale(BenchConfig& cfg);

/// $XILBENCH_DATA when set, otherwise "data".
std::string default_data_dir();

/// Everything the experiment suites consume, derived deterministically
/// from the IDX files and fixed generator seeds.
struct BenchData {
  std::string name;  // decoy_mnist | decoy_fmnist
  DecoySet train;
  DecoySet test;
  Batch train_batch;  // confounded, no masks attached
  Batch test_batch;
  Batch clean_train;  // original images (confounder-free baseline)
  Batch clean_test;
};

/// Loads <base>_{train,test}_{images,labels}.idx from the data dir
/// (base = mnist|fmnist), subsamples deterministically, injects decoys.
BenchData load_bench_data(const BenchConfig& cfg);

/// Generate the decoy datasets and cache manifests under out_dir.
void gen_data(const BenchConfig& cfg);

/// JSON-lines store keyed by record id; appends are serialized so
/// parallel runs share one file.
class RecordStore {
 public:
  explicit RecordStore(std::string path);

  const RunRecord* find(const std::string& id) const;
  void put(const RunRecord& r);
  std::vector<RunRecord> all() const;  // sorted by id
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::map<std::string, RunRecord> records_;
  mutable std::mutex mu_;
};

std::vector<RunRecord> load_records(const std::string& path);

// ---------------------------------------------------------------------------
// Experiment suites. Each returns the records it is responsible for,
// reusing cached ones from the store; failed runs are recorded, not
// rethrown.

/// Confounder fooling and revision: w/o-decoy baseline, Vanilla, and
/// every configured method; WR scores per explainer on the trained
/// models.
std::vector<RunRecord> run_q1(const BenchConfig& cfg, const BenchData& data,
                              RecordStore& store);

/// Feedback-quality grid {correct, arbitrary, incomplete, empty} for
/// every mask-consuming method, plus the Vanilla baseline the deltas
/// are taken against.
std::vector<RunRecord> run_feedback_robustness(const BenchConfig& cfg,
                                               const BenchData& data,
                                               RecordStore& store);

/// Accuracy as a function of the number of feedback annotations k.
/// Empty grid defaults to {10, 50, 100, 1000, full}. k > N is skipped
/// with a warning.
std::vector<RunRecord> run_interaction_efficiency(const BenchConfig& cfg,
                                                  const BenchData& data,
                                                  RecordStore& store,
                                                  std::vector<int64_t> k_grid = {});

/// Confounded pre-training for `switch_epoch` epochs, then the revision
/// method for cfg.epochs more; the full per-epoch trace is persisted.
/// switch_epoch < 0 defaults to cfg.epochs.
std::vector<RunRecord> run_switch_xil_on(const BenchConfig& cfg, const BenchData& data,
                                         RecordStore& store, int switch_epoch = -1);

/// Test accuracy per (method, lambda) over the grid; crashes become
/// failed records. Empty grid defaults to {1e-2, 1, 1e2, 1e4, 1e6}.
std::vector<RunRecord> run_lambda_sweep(const BenchConfig& cfg, const BenchData& data,
                                        RecordStore& store,
                                        std::vector<double> grid = {});

// ---------------------------------------------------------------------------
// Reporting.

struct CellStat {
  double mean = 0;
  std::optional<double> stddev;  // absent for single-seed cells
  int count = 0;
  std::vector<std::string> record_ids;  // traceability
};

/// Mean +/- sample std over seeds of final test accuracy (and WR where
/// present), grouped per task. Writes CSV tables, x/y plot data for the
/// efficiency and switch curves, PGM heatmaps of the accuracy matrices,
/// and a JSON summary that reloads to the identical records. Throws if
/// one table would mix datasets.
void report(const std::vector<RunRecord>& records, const std::string& out_dir);

/// Inverse of the summary written by report().
std::vector<RunRecord> load_report_summary(const std::string& path);

}  // namespace xiltk
