// Benchmark CLI: dataset generation, the five experiment suites, and
// report generation over persisted run records.

#include <CLI11.hpp>

#include <iostream>

#include "xiltk/bench.hpp"

using namespace xiltk;

namespace {

struct CommonArgs {
  std::string config_path;
  BenchConfig cfg;
  std::string methods_csv, seeds_csv, quality;
  double lambda = -1;
  bool full = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value config file (flags override)");
  cmd->add_option("--dataset", a.cfg.dataset, "decoy_mnist | decoy_fmnist");
  cmd->add_option("--method", a.methods_csv, "comma list: vanilla,rrr,rrrg,rbr,cdep,hint,ce");
  cmd->add_option("--lambda", a.lambda, "override the per-method default strength");
  cmd->add_option("--seed", a.seeds_csv, "comma list of seeds");
  cmd->add_option("--epochs", a.cfg.epochs, "training epochs per run");
  cmd->add_option("--subsample", a.cfg.subsample, "training images (<=0: all)");
  cmd->add_option("--test-subsample", a.cfg.test_subsample, "test images (<=0: all)");
  cmd->add_option("--out", a.cfg.out_dir, "output directory");
  cmd->add_option("--data-dir", a.cfg.data_dir, "IDX directory (default $XILBENCH_DATA)");
  cmd->add_option("--jobs", a.cfg.jobs, "parallel runs");
  cmd->add_option("--feedback-quality", a.quality, "correct|arbitrary|incomplete|empty");
  cmd->add_flag("--full", a.full, "full scale: 50 epochs, 5 seeds, all data");
}

BenchConfig resolve(const CommonArgs& a, const CLI::App* cmd) {
  BenchConfig cfg = a.config_path.empty() ? BenchConfig{} : load_bench_config(a.config_path);
  auto passed = [&](const std::string& flag) { return cmd->count(flag) > 0; };
  if (passed("--dataset")) cfg.dataset = a.cfg.dataset;
  if (passed("--epochs")) cfg.epochs = a.cfg.epochs;
  if (passed("--subsample")) cfg.subsample = a.cfg.subsample;
  if (passed("--test-subsample")) cfg.test_subsample = a.cfg.test_subsample;
  if (passed("--out")) cfg.out_dir = a.cfg.out_dir;
  if (passed("--data-dir")) cfg.data_dir = a.cfg.data_dir;
  if (passed("--jobs")) cfg.jobs = a.cfg.jobs;
  if (passed("--lambda")) cfg.lambda_override = a.lambda;
  if (passed("--feedback-quality")) cfg.feedback_quality = quality_from_name(a.quality);
  if (passed("--method")) {
    cfg.methods.clear();
    std::stringstream ss(a.methods_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.methods.push_back(method_from_name(item));
  }
  if (passed("--seed")) {
    cfg.seeds.clear();
    std::stringstream ss(a.seeds_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.seeds.push_back(std::stoull(item));
  }
  if (a.full) apply_full_scale(cfg);
  XILTK_CHECK(cfg.epochs >= 1, "epochs must be >= 1");
  return cfg;
}

int run_suite(const CommonArgs& args, const CLI::App* cmd, const std::string& task,
              const std::vector<int64_t>& k_grid, int switch_epoch,
              const std::vector<double>& lambda_grid) {
  BenchConfig cfg = resolve(args, cmd);
  BenchData data = load_bench_data(cfg);
  RecordStore store(cfg.out_dir + "/records.jsonl");
  std::vector<RunRecord> records;
  if (task == "q1") {
    records = run_q1(cfg, data, store);
  } else if (task == "robustness") {
    records = run_feedback_robustness(cfg, data, store);
  } else if (task == "efficiency") {
    records = run_interaction_efficiency(cfg, data, store, k_grid);
  } else if (task == "switch") {
    records = run_switch_xil_on(cfg, data, store, switch_epoch);
  } else if (task == "sweep") {
    records = run_lambda_sweep(cfg, data, store, lambda_grid);
  }
  int failed = 0;
  for (auto& r : records) failed += r.failed;
  std::cout << task << ": " << records.size() << " runs, " << failed
            << " failed; records in " << store.path() << "\n";
  return failed > 0 ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decoy-benchmark harness for explanation-guided model revision"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<int64_t> k_grid;
  int switch_epoch = -1;
  std::vector<double> lambda_grid;
  std::string records_path, report_dataset;

  CLI::App* gen = app.add_subcommand("gen-data", "generate and cache the decoy datasets");
  add_common(gen, args);

  CLI::App* q1 = app.add_subcommand("q1", "accuracy + WR table (all methods, w/o-decoy)");
  add_common(q1, args);

  CLI::App* rob = app.add_subcommand("robustness", "feedback-quality grid");
  add_common(rob, args);

  CLI::App* eff = app.add_subcommand("efficiency", "accuracy vs feedback count k");
  add_common(eff, args);
  eff->add_option("--k", k_grid, "k grid, ascending (-1 = all feedback)");

  CLI::App* sw = app.add_subcommand("switch", "confounded warm-up, then revision");
  add_common(sw, args);
  sw->add_option("--switch-epoch", switch_epoch, "warm-up epochs (default: --epochs)");

  CLI::App* sweep = app.add_subcommand("sweep", "lambda stability grid");
  add_common(sweep, args);
  sweep->add_option("--grid", lambda_grid, "lambda grid (default 1e-2..1e6)");

  CLI::App* rep = app.add_subcommand("report", "CSV/plot/PGM report from records");
  rep->add_option("--records", records_path, "records.jsonl path")->required();
  rep->add_option("--dataset", report_dataset, "keep only this dataset");
  rep->add_option("--out", args.cfg.out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      gen_data(resolve(args, gen));
      return 0;
    }
    if (q1->parsed()) return run_suite(args, q1, "q1", {}, -1, {});
    if (rob->parsed()) return run_suite(args, rob, "robustness", {}, -1, {});
    if (eff->parsed()) return run_suite(args, eff, "efficiency", k_grid, -1, {});
    if (sw->parsed()) return run_suite(args, sw, "switch", {}, switch_epoch, {});
    if (sweep->parsed()) return run_suite(args, sweep, "sweep", {}, -1, lambda_grid);
    if (rep->parsed()) {
      std::vector<RunRecord> records = load_records(records_path);
      if (!report_dataset.empty())
        std::erase_if(records,
                      [&](const RunRecord& r) { return r.dataset != report_dataset; });
      std::string out = rep->count("--out") ? args.cfg.out_dir : "report_out";
      report(records, out);
      std::cout << "report: " << records.size() << " records -> " << out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
