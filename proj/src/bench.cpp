#include "xiltk/bench.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "xiltk/explainers.hpp"
#include "xiltk/rng.hpp"

namespace xiltk {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RunRecord JSON

std::string record_to_json(const RunRecord& r) {
  json j;
  j["id"] = r.id;
  j["task"] = r.task;
  j["dataset"] = r.dataset;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["lambda"] = r.lambda;
  j["feedback_quality"] = r.feedback_quality;
  j["k"] = r.k;
  j["switch_epoch"] = r.switch_epoch;
  j["epoch_test_acc"] = r.epoch_test_acc;
  j["final_train_acc"] = r.final_train_acc;
  j["final_test_acc"] = r.final_test_acc;
  j["wr"] = r.wr;
  j["wall_seconds"] = r.wall_seconds;
  j["failed"] = r.failed;
  j["error"] = r.error;
  return j.dump();
}

RunRecord record_from_json(const std::string& line) {
  json j = json::parse(line);
  RunRecord r;
  r.id = j.at("id").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.lambda = j.at("lambda").get<double>();
  r.feedback_quality = j.at("feedback_quality").get<std::string>();
  r.k = j.at("k").get<int64_t>();
  r.switch_epoch = j.at("switch_epoch").get<int>();
  r.epoch_test_acc = j.at("epoch_test_acc").get<std::vector<double>>();
  r.final_train_acc = j.at("final_train_acc").get<double>();
  r.final_test_acc = j.at("final_test_acc").get<double>();
  r.wr = j.at("wr").get<std::map<std::string, double>>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.failed = j.at("failed").get<bool>();
  r.error = j.at("error").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------
// Config

std::string default_data_dir() {
  const char* env = std::getenv("XILBENCH_DATA");
  return env && *env ? std::string(env) : std::string("data");
}

void apply_full_scale(BenchConfig& cfg) {
  cfg.full = true;
  cfg.epochs = 50;
  cfg.seeds = {1, 10, 100, 1000, 10000};
  cfg.subsample = 0;
  cfg.test_subsample = 0;
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

BenchConfig load_bench_config(const std::string& path) {
  std::ifstream in(path);
  XILTK_CHECK(in.good(), "config file not found: " + path);
  BenchConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    size_t eq = stripped.find('=');
    XILTK_CHECK(eq != std::string::npos,
                "config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key == "dataset") {
      cfg.dataset = value;
    } else if (key == "subsample") {
      cfg.subsample = std::stoll(value);
    } else if (key == "test_subsample") {
      cfg.test_subsample = std::stoll(value);
    } else if (key == "epochs") {
      cfg.epochs = std::stoi(value);
    } else if (key == "methods") {
      cfg.methods.clear();
      for (auto& name : split_list(value)) cfg.methods.push_back(method_from_name(name));
    } else if (key == "seeds") {
      cfg.seeds.clear();
      for (auto& s : split_list(value)) cfg.seeds.push_back(std::stoull(s));
    } else if (key == "out") {
      cfg.out_dir = value;
    } else if (key == "data_dir") {
      cfg.data_dir = value;
    } else if (key == "full") {
      if (value == "1" || value == "true") apply_full_scale(cfg);
    } else if (key == "jobs") {
      cfg.jobs = std::stoi(value);
    } else if (key == "lambda") {
      cfg.lambda_override = std::stod(value);
    } else if (key == "rr_clip") {
      cfg.rr_clip = std::stod(value);
    } else if (key == "feedback_quality") {
      cfg.feedback_quality = quality_from_name(value);
    } else if (key == "batch_size") {
      cfg.batch_size = std::stoll(value);
    } else if (key == "wr_max_images") {
      cfg.wr_max_images = std::stoll(value);
    } else if (key == "wr_lime_images") {
      cfg.wr_lime_images = std::stoll(value);
    } else {
      throw TensorError("config line " + std::to_string(lineno) + ": unknown key '" +
                        key + "'");
    }
  }
  XILTK_CHECK(cfg.epochs >= 1, "config: epochs must be >= 1");
  return cfg;
}

// ---------------------------------------------------------------------------
// Data loading

namespace {

constexpr uint64_t kDecoySeedTrain = 9;
constexpr uint64_t kDecoySeedTest = 10;
constexpr uint64_t kSubsampleSeed = 17;

std::string base_name(const std::string& dataset) {
  if (dataset == "decoy_mnist") return "mnist";
  if (dataset == "decoy_fmnist") return "fmnist";
  throw TensorError("unknown dataset '" + dataset +
                    "' (expected decoy_mnist or decoy_fmnist)");
}

ImageSet subsample_set(const ImageSet& set, int64_t n, uint64_t seed) {
  if (n <= 0 || n >= set.size()) return set;
  std::vector<int64_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int64_t i = set.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.next_below(uint64_t(i + 1))]);
  idx.resize(n);
  ImageSet out;
  out.split = set.split;
  out.labels.reserve(n);
  out.images.reserve(n * kImgPixels);
  for (int64_t i : idx) {
    out.labels.push_back(set.labels[i]);
    out.images.insert(out.images.end(), set.image(i), set.image(i) + kImgPixels);
  }
  return out;
}

Batch clean_batch(const ImageSet& set) {
  int64_t n = set.size();
  std::vector<double> px(n * kImgPixels);
  for (int64_t i = 0; i < n * kImgPixels; ++i) px[i] = set.images[i] / 255.0;
  Batch b;
  b.images = Tensor::from_data({n, 1, kImgH, kImgW}, std::move(px));
  b.labels.assign(set.labels.begin(), set.labels.end());
  return b;
}

}  // namespace

BenchData load_bench_data(const BenchConfig& cfg) {
  std::string dir = cfg.data_dir.empty() ? default_data_dir() : cfg.data_dir;
  std::string base = base_name(cfg.dataset);
  auto p = [&](const std::string& suffix) { return dir + "/" + base + suffix; };

  ImageSet train = load_idx(p("_train_images.idx"), p("_train_labels.idx"), Split::train);
  ImageSet test = load_idx(p("_test_images.idx"), p("_test_labels.idx"), Split::test);
  train = subsample_set(train, cfg.subsample, kSubsampleSeed);
  test = subsample_set(test, cfg.test_subsample, kSubsampleSeed + 1);

  BenchData data;
  data.name = cfg.dataset;
  data.train = make_decoy(train, kDecoySeedTrain);
  data.test = make_decoy(test, kDecoySeedTest);
  data.train_batch = to_batch(data.train);
  data.test_batch = to_batch(data.test);
  data.clean_train = clean_batch(train);
  data.clean_test = clean_batch(test);
  return data;
}

void gen_data(const BenchConfig& cfg) {
  BenchData data = load_bench_data(cfg);
  fs::create_directories(cfg.out_dir);
  std::string base = base_name(cfg.dataset);
  save_decoy_cache(cfg.out_dir + "/" + cfg.dataset + "_train.cache", data.train, base);
  save_decoy_cache(cfg.out_dir + "/" + cfg.dataset + "_test.cache", data.test, base);

  // decoyed images as IDX for external inspection
  for (auto* split : {&data.train, &data.test}) {
    ImageSet stamped = split->base;
    for (int64_t i = 0; i < split->size(); ++i) {
      auto img = split->decoyed_image(i);
      std::copy(img.begin(), img.end(), stamped.images.begin() + i * kImgPixels);
    }
    std::string tag = split == &data.train ? "train" : "test";
    save_idx(cfg.out_dir + "/" + cfg.dataset + "_" + tag + "_images.idx",
             cfg.out_dir + "/" + cfg.dataset + "_" + tag + "_labels.idx", stamped);
  }
  std::cout << "gen-data: " << cfg.dataset << " train=" << data.train.size()
            << " test=" << data.test.size() << " -> " << cfg.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// Record store

RecordStore::RecordStore(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    RunRecord r = record_from_json(line);
    records_[r.id] = std::move(r);
  }
}

const RunRecord* RecordStore::find(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = records_.find(id);
  return it == records_.end() ? nullptr : &it->second;
}

void RecordStore::put(const RunRecord& r) {
  std::lock_guard<std::mutex> lock(mu_);
  records_[r.id] = r;
  if (auto dir = fs::path(path_).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream out(path_, std::ios::app);
  out << record_to_json(r) << "\n";
}

std::vector<RunRecord> RecordStore::all() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<RunRecord> out;
  out.reserve(records_.size());
  for (auto& [id, r] : records_) out.push_back(r);
  return out;
}

std::vector<RunRecord> load_records(const std::string& path) {
  return RecordStore(path).all();
}

// ---------------------------------------------------------------------------
// Run execution

namespace {

struct RunSpec {
  std::string task;
  std::string label;  // method name or "wo_decoy"
  Method method = Method::VANILLA;
  bool wo_decoy = false;
  uint64_t seed = 0;
  double lambda = 0;
  FeedbackQuality quality = FeedbackQuality::correct;
  int64_t k = -1;
  int switch_epoch = -1;
  bool compute_wr = false;
};

std::string fmt_g(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

std::string spec_id(const BenchConfig& cfg, const RunSpec& s) {
  std::ostringstream ss;
  ss << cfg.dataset << "|" << s.label << "|s" << s.seed << "|ep" << cfg.epochs << "|n"
     << cfg.subsample << "|lam" << fmt_g(s.lambda) << "|q" << quality_name(s.quality)
     << "|k" << s.k << "|sw" << s.switch_epoch;
  return ss.str();
}

double method_lambda(const BenchConfig& cfg, Method m) {
  if (m == Method::VANILLA || m == Method::CE) return 0;
  if (cfg.lambda_override) return *cfg.lambda_override;
  return default_lambda(m, cfg.dataset);
}

FeedbackSemantics semantics_for(Method m) {
  return m == Method::HINT ? FeedbackSemantics::reward : FeedbackSemantics::penalty;
}

/// Training batch for one spec: feedback attached for loss-based
/// methods, counterexamples appended for CE, untouched otherwise.
Batch build_train_batch(const BenchData& data, const RunSpec& s) {
  if (s.wo_decoy) return data.clean_train;
  if (s.method == Method::VANILLA) return data.train_batch;

  std::vector<FeedbackMask> masks =
      make_feedback(data.train, s.quality, semantics_for(s.method));
  FeedbackSet fs;
  if (s.k >= 0) {
    fs = sample_feedback_subset(masks, s.k, s.seed);
  } else {
    fs.masks = std::move(masks);
  }

  if (s.method == Method::CE) {
    std::vector<Counterexample> ces =
        make_counterexamples(data.train, fs.masks, CeStrategy::randomize, 1, s.seed);
    if (!fs.present.empty()) {
      std::erase_if(ces, [&](const Counterexample& ce) {
        return !fs.present[ce.source_index];
      });
    }
    return ce_revise(data.train_batch, ces);
  }

  Batch b = data.train_batch;
  attach_feedback(b, fs);
  return b;
}

void compute_wr_scores(RunRecord& rec, const Model& model, const BenchConfig& cfg,
                       const BenchData& data) {
  std::vector<ExplainerTag> tags = {ExplainerTag::IG, ExplainerTag::LIME};
  if (model.arch == Arch::SCNN) tags.insert(tags.begin() + 1, ExplainerTag::GRADCAM);
  for (ExplainerTag tag : tags) {
    WrOptions opt;
    opt.max_images =
        tag == ExplainerTag::LIME ? cfg.wr_lime_images : cfg.wr_max_images;
    opt.lime_samples = 200;
    double alpha = wr_threshold(model, tag, data.test_batch, opt);
    rec.wr[explainer_name(tag)] = wr_dataset(model, tag, data.test, alpha, opt);
  }
}

void dump_heatmap(const RunRecord& rec, const Model& model, const BenchConfig& cfg,
                  const BenchData& data) {
  fs::create_directories(cfg.out_dir + "/heatmaps");
  int64_t n = std::min<int64_t>(8, data.test_batch.n());
  std::vector<double> px(data.test_batch.images.data(),
                         data.test_batch.images.data() + n * kImgPixels);
  Explanation e =
      input_gradients(model, Tensor::from_data({n, 1, kImgH, kImgW}, std::move(px)));
  std::vector<double> mean(kImgPixels, 0);
  for (int64_t i = 0; i < n; ++i) {
    Tensor one = normalize_plus(Tensor::from_data(
        {kImgH, kImgW}, std::vector<double>(e.map.data() + i * kImgPixels,
                                            e.map.data() + (i + 1) * kImgPixels)));
    for (int p = 0; p < kImgPixels; ++p) mean[p] += one.data()[p] / double(n);
  }
  std::string name = rec.id;
  std::replace(name.begin(), name.end(), '|', '_');
  write_pgm(cfg.out_dir + "/heatmaps/" + name + "_ig.pgm",
            Tensor::from_data({kImgH, kImgW}, std::move(mean)));
}

RunRecord execute_run(const BenchConfig& cfg, const BenchData& data, const RunSpec& s) {
  RunRecord rec;
  rec.id = spec_id(cfg, s);
  rec.task = s.task;
  rec.dataset = cfg.dataset;
  rec.method = s.label;
  rec.seed = s.seed;
  rec.lambda = s.lambda;
  rec.feedback_quality =
      s.method == Method::VANILLA || s.wo_decoy ? "" : quality_name(s.quality);
  rec.k = s.k;
  rec.switch_epoch = s.switch_epoch;

  auto t0 = std::chrono::steady_clock::now();
  try {
    const Batch& test = s.wo_decoy ? data.clean_test : data.test_batch;
    Batch train = build_train_batch(data, s);

    XilConfig xil;
    xil.method = s.wo_decoy || s.method == Method::CE ? Method::VANILLA : s.method;
    xil.lambda = s.lambda;
    xil.rr_clip = cfg.rr_clip;

    FitConfig fc;
    fc.epochs = cfg.epochs;
    fc.batch_size = cfg.batch_size;
    fc.seed = s.seed;
    fc.test = &test;
    fc.eval_train_acc = false;

    Model model = init_model(Arch::SCNN, s.seed);
    std::vector<EpochLog> logs;

    if (s.switch_epoch >= 0) {
      // confounded warm-up with no revision, then the method takes over
      FitConfig pre = fc;
      pre.epochs = s.switch_epoch;
      pre.xil = XilConfig{};
      if (pre.epochs > 0) model = fit(std::move(model), data.train_batch, pre, &logs);
      for (auto& l : logs) rec.epoch_test_acc.push_back(l.test_acc);
      logs.clear();
    }
    fc.xil = xil;
    model = fit(std::move(model), train, fc, &logs);
    for (auto& l : logs) rec.epoch_test_acc.push_back(l.test_acc);

    rec.final_train_acc = accuracy(model, train);
    rec.final_test_acc = accuracy(model, test);
    if (s.compute_wr && !s.wo_decoy) {
      compute_wr_scores(rec, model, cfg, data);
      dump_heatmap(rec, model, cfg, data);
    }
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.error = e.what();
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Work queue: cached non-failed records are reused; everything else is
/// executed on up to cfg.jobs threads and appended to the store.
std::vector<RunRecord> run_specs(const BenchConfig& cfg, const BenchData& data,
                                 RecordStore& store, const std::vector<RunSpec>& specs) {
  std::vector<RunRecord> results(specs.size());
  std::vector<size_t> todo;
  for (size_t i = 0; i < specs.size(); ++i) {
    if (const RunRecord* cached = store.find(spec_id(cfg, specs[i]));
        cached && !cached->failed) {
      results[i] = *cached;
    } else {
      todo.push_back(i);
    }
  }

  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (;;) {
      size_t t = next.fetch_add(1);
      if (t >= todo.size()) return;
      size_t i = todo[t];
      RunRecord rec = execute_run(cfg, data, specs[i]);
      store.put(rec);
      results[i] = std::move(rec);
      std::cerr << "[" << results[i].task << "] " << results[i].id
                << (results[i].failed ? " FAILED: " + results[i].error
                                      : " acc=" + fmt_g(results[i].final_test_acc))
                << " (" << fmt_g(results[i].wall_seconds) << "s)\n";
    }
  };
  int n_threads = std::max(1, std::min<int>(cfg.jobs, int(todo.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return results;
}

std::vector<Method> mask_methods(const BenchConfig& cfg) {
  std::vector<Method> out;
  for (Method m : cfg.methods)
    if (m != Method::VANILLA) out.push_back(m);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiment suites

std::vector<RunRecord> run_q1(const BenchConfig& cfg, const BenchData& data,
                              RecordStore& store) {
  std::vector<RunSpec> specs;
  for (uint64_t seed : cfg.seeds) {
    RunSpec wo;
    wo.task = "q1";
    wo.label = "wo_decoy";
    wo.wo_decoy = true;
    wo.seed = seed;
    specs.push_back(wo);
    for (Method m : cfg.methods) {
      RunSpec s;
      s.task = "q1";
      s.label = method_name(m);
      s.method = m;
      s.seed = seed;
      s.lambda = method_lambda(cfg, m);
      s.quality = cfg.feedback_quality;
      s.compute_wr = true;
      specs.push_back(s);
    }
  }
  return run_specs(cfg, data, store, specs);
}

std::vector<RunRecord> run_feedback_robustness(const BenchConfig& cfg,
                                               const BenchData& data,
                                               RecordStore& store) {
  std::vector<RunSpec> specs;
  for (uint64_t seed : cfg.seeds) {
    RunSpec vanilla;  // the baseline every delta is taken against
    vanilla.task = "robustness";
    vanilla.label = "vanilla";
    vanilla.seed = seed;
    specs.push_back(vanilla);
    for (Method m : mask_methods(cfg)) {
      for (FeedbackQuality q : {FeedbackQuality::correct, FeedbackQuality::arbitrary,
                                FeedbackQuality::incomplete, FeedbackQuality::empty}) {
        RunSpec s;
        s.task = "robustness";
        s.label = method_name(m);
        s.method = m;
        s.seed = seed;
        s.lambda = method_lambda(cfg, m);
        s.quality = q;
        specs.push_back(s);
      }
    }
  }
  return run_specs(cfg, data, store, specs);
}

std::vector<RunRecord> run_interaction_efficiency(const BenchConfig& cfg,
                                                  const BenchData& data,
                                                  RecordStore& store,
                                                  std::vector<int64_t> k_grid) {
  if (k_grid.empty()) k_grid = {10, 50, 100, 1000, -1};
  XILTK_CHECK(std::is_sorted(k_grid.begin(), k_grid.end(),
                             [](int64_t a, int64_t b) {
                               // full (-1) sorts last
                               if (a < 0) return false;
                               if (b < 0) return true;
                               return a < b;
                             }),
              "efficiency: k grid must be ascending");
  std::vector<RunSpec> specs;
  for (uint64_t seed : cfg.seeds)
    for (Method m : mask_methods(cfg))
      for (int64_t k : k_grid) {
        if (k > data.train.size()) {
          std::cerr << "efficiency: skipping k=" << k << " > train size "
                    << data.train.size() << "\n";
          continue;
        }
        RunSpec s;
        s.task = "efficiency";
        s.label = method_name(m);
        s.method = m;
        s.seed = seed;
        s.lambda = method_lambda(cfg, m);
        s.quality = cfg.feedback_quality;
        s.k = k;
        specs.push_back(s);
      }
  return run_specs(cfg, data, store, specs);
}

std::vector<RunRecord> run_switch_xil_on(const BenchConfig& cfg, const BenchData& data,
                                         RecordStore& store, int switch_epoch) {
  if (switch_epoch < 0) switch_epoch = cfg.epochs;
  std::vector<RunSpec> specs;
  for (uint64_t seed : cfg.seeds)
    for (Method m : mask_methods(cfg)) {
      RunSpec s;
      s.task = "switch";
      s.label = method_name(m);
      s.method = m;
      s.seed = seed;
      s.lambda = method_lambda(cfg, m);
      s.quality = cfg.feedback_quality;
      s.switch_epoch = switch_epoch;
      specs.push_back(s);
    }
  return run_specs(cfg, data, store, specs);
}

std::vector<RunRecord> run_lambda_sweep(const BenchConfig& cfg, const BenchData& data,
                                        RecordStore& store, std::vector<double> grid) {
  if (grid.empty()) grid = {1e-2, 1, 1e2, 1e4, 1e6};
  for (double l : grid) XILTK_CHECK(l > 0, "sweep: lambda grid must be positive");
  std::vector<RunSpec> specs;
  for (uint64_t seed : cfg.seeds)
    for (Method m : mask_methods(cfg)) {
      if (m == Method::CE) continue;  // no loss term to scale
      for (double lambda : grid) {
        RunSpec s;
        s.task = "sweep";
        s.label = method_name(m);
        s.method = m;
        s.seed = seed;
        s.lambda = lambda;
        s.quality = cfg.feedback_quality;
        specs.push_back(s);
      }
    }
  return run_specs(cfg, data, store, specs);
}

// ---------------------------------------------------------------------------
// Reporting

namespace {

CellStat aggregate(const std::vector<const RunRecord*>& rs,
                   const std::function<double(const RunRecord&)>& get) {
  CellStat c;
  double sum = 0;
  for (auto* r : rs) {
    sum += get(*r);
    c.record_ids.push_back(r->id);
    ++c.count;
  }
  if (c.count == 0) return c;
  c.mean = sum / c.count;
  if (c.count > 1) {
    double ss = 0;
    for (auto* r : rs) ss += (get(*r) - c.mean) * (get(*r) - c.mean);
    c.stddev = std::sqrt(ss / (c.count - 1));
  }
  return c;
}

std::string cell_str(const CellStat& c) {
  if (c.count == 0) return ",";
  std::ostringstream ss;
  ss << std::setprecision(17) << c.mean << ",";
  if (c.stddev) ss << *c.stddev;
  return ss.str();
}

/// CSV/plot streams carry full double precision so aggregates survive a
/// parse round trip.
std::ofstream open_report_file(const std::string& path) {
  std::ofstream out(path);
  out << std::setprecision(17);
  return out;
}

std::string ids_str(const CellStat& c) {
  std::string out;
  for (auto& id : c.record_ids) {
    if (!out.empty()) out += ';';
    out += id;
  }
  return out;
}

// group key -> records, preserving first-seen key order for determinism
template <class Key>
std::vector<std::pair<Key, std::vector<const RunRecord*>>> group_by(
    const std::vector<const RunRecord*>& rs, const std::function<Key(const RunRecord&)>& key) {
  std::vector<std::pair<Key, std::vector<const RunRecord*>>> out;
  for (auto* r : rs) {
    Key k = key(*r);
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const auto& p) { return p.first == k; });
    if (it == out.end()) {
      out.push_back({k, {r}});
    } else {
      it->second.push_back(r);
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

const std::vector<std::string> kMethodOrder = {"wo_decoy", "vanilla", "rrr",  "rrrg",
                                               "rbr",      "cdep",    "hint", "ce"};

int method_rank(const std::string& m) {
  auto it = std::find(kMethodOrder.begin(), kMethodOrder.end(), m);
  return it == kMethodOrder.end() ? int(kMethodOrder.size()) : int(it - kMethodOrder.begin());
}

void write_accuracy_heatmap(const std::string& path,
                            const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows[0].empty()) return;
  int64_t h = int64_t(rows.size()), w = int64_t(rows[0].size());
  std::vector<double> px(h * w, 0);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w && j < int64_t(rows[i].size()); ++j)
      px[i * w + j] = std::clamp(rows[i][j], 0.0, 1.0);
  write_pgm(path, Tensor::from_data({h, w}, std::move(px)));
}

}  // namespace

void report(const std::vector<RunRecord>& records, const std::string& out_dir) {
  XILTK_CHECK(!records.empty(), "report: no records");
  fs::create_directories(out_dir);

  std::vector<RunRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end(),
            [](const RunRecord& a, const RunRecord& b) { return a.id < b.id; });

  const std::string dataset = sorted.front().dataset;
  for (auto& r : sorted)
    XILTK_CHECK(r.dataset == dataset,
                "report: records mix datasets ('" + dataset + "' vs '" + r.dataset +
                    "'); filter to one dataset per report");

  // the JSON summary is the lossless form: reloads to identical records
  {
    json arr = json::array();
    for (auto& r : sorted) arr.push_back(json::parse(record_to_json(r)));
    std::ofstream out(out_dir + "/summary.json");
    out << arr.dump(1) << "\n";
  }

  std::vector<const RunRecord*> ok;
  std::vector<const RunRecord*> failed;
  for (auto& r : sorted) (r.failed ? failed : ok).push_back(&r);
  if (!failed.empty()) {
    std::ofstream out = open_report_file(out_dir + "/failures.csv");
    out << "id,error\n";
    for (auto* r : failed) out << r->id << ",\"" << r->error << "\"\n";
  }

  auto by_task = group_by<std::string>(ok, [](const RunRecord& r) { return r.task; });
  auto acc = [](const RunRecord& r) { return r.final_test_acc; };

  for (auto& [task, rs] : by_task) {
    if (task == "q1") {
      auto rows = group_by<std::string>(rs, [](const RunRecord& r) { return r.method; });
      std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return method_rank(a.first) < method_rank(b.first);
      });
      std::ofstream out = open_report_file(out_dir + "/q1_accuracy.csv");
      out << "method,test_acc_mean,test_acc_std,train_acc_mean,records\n";
      std::vector<std::vector<double>> heat;
      for (auto& [method, group] : rows) {
        CellStat test = aggregate(group, acc);
        CellStat train =
            aggregate(group, [](const RunRecord& r) { return r.final_train_acc; });
        out << method << "," << cell_str(test) << "," << train.mean << ","
            << ids_str(test) << "\n";
        heat.push_back({test.mean, train.mean});
      }
      write_accuracy_heatmap(out_dir + "/q1_accuracy.pgm", heat);

      std::vector<std::string> tags;
      for (auto* r : rs)
        for (auto& [tag, v] : r->wr)
          if (std::find(tags.begin(), tags.end(), tag) == tags.end()) tags.push_back(tag);
      std::sort(tags.begin(), tags.end());
      if (!tags.empty()) {
        std::ofstream wrout = open_report_file(out_dir + "/q1_wr.csv");
        wrout << "method";
        for (auto& t : tags) wrout << "," << t << "_mean," << t << "_std";
        wrout << ",records\n";
        for (auto& [method, group] : rows) {
          std::vector<const RunRecord*> with_wr;
          for (auto* r : group)
            if (!r->wr.empty()) with_wr.push_back(r);
          if (with_wr.empty()) continue;
          wrout << method;
          CellStat last;
          for (auto& t : tags) {
            last = aggregate(with_wr, [&t](const RunRecord& r) {
              auto it = r.wr.find(t);
              return it == r.wr.end() ? 0.0 : it->second;
            });
            wrout << "," << cell_str(last);
          }
          wrout << "," << ids_str(last) << "\n";
        }
      }
    } else if (task == "robustness") {
      auto vanilla = aggregate(
          [&] {
            std::vector<const RunRecord*> v;
            for (auto* r : rs)
              if (r->method == "vanilla") v.push_back(r);
            return v;
          }(),
          acc);
      auto rows = group_by<std::string>(rs, [](const RunRecord& r) {
        return r.method + "|" + r.feedback_quality;
      });
      std::ofstream out = open_report_file(out_dir + "/robustness.csv");
      out << "method,quality,test_acc_mean,test_acc_std,delta_vs_vanilla,records\n";
      for (auto& [key, group] : rows) {
        if (group.front()->method == "vanilla") continue;
        CellStat c = aggregate(group, acc);
        out << group.front()->method << "," << group.front()->feedback_quality << ","
            << cell_str(c) << "," << (c.mean - vanilla.mean) << "," << ids_str(c)
            << "\n";
      }
    } else if (task == "efficiency") {
      auto methods =
          group_by<std::string>(rs, [](const RunRecord& r) { return r.method; });
      std::ofstream out = open_report_file(out_dir + "/efficiency.csv");
      out << "method,k,test_acc_mean,test_acc_std,records\n";
      for (auto& [method, group] : methods) {
        auto by_k = group_by<int64_t>(group, [](const RunRecord& r) { return r.k; });
        std::ofstream dat = open_report_file(out_dir + "/efficiency_" + method + ".dat");
        dat << "# k test_acc_mean test_acc_std\n";
        for (auto& [k, cell] : by_k) {
          CellStat c = aggregate(cell, acc);
          out << method << "," << k << "," << cell_str(c) << "," << ids_str(c) << "\n";
          dat << k << " " << c.mean << " " << (c.stddev ? *c.stddev : 0.0) << "\n";
        }
      }
    } else if (task == "switch") {
      auto methods =
          group_by<std::string>(rs, [](const RunRecord& r) { return r.method; });
      std::ofstream out = open_report_file(out_dir + "/switch.csv");
      out << "method,switch_epoch,final_test_acc_mean,final_test_acc_std,records\n";
      for (auto& [method, group] : methods) {
        CellStat c = aggregate(group, acc);
        out << method << "," << group.front()->switch_epoch << "," << cell_str(c) << ","
            << ids_str(c) << "\n";
        size_t epochs = 0;
        for (auto* r : group) epochs = std::max(epochs, r->epoch_test_acc.size());
        std::ofstream dat = open_report_file(out_dir + "/switch_" + method + ".dat");
        dat << "# epoch test_acc_mean\n";
        for (size_t e = 0; e < epochs; ++e) {
          double sum = 0;
          int n = 0;
          for (auto* r : group)
            if (e < r->epoch_test_acc.size()) {
              sum += r->epoch_test_acc[e];
              ++n;
            }
          dat << (e + 1) << " " << (n ? sum / n : 0.0) << "\n";
        }
      }
    } else if (task == "sweep") {
      auto methods =
          group_by<std::string>(rs, [](const RunRecord& r) { return r.method; });
      std::ofstream out = open_report_file(out_dir + "/sweep.csv");
      out << "method,lambda,test_acc_mean,test_acc_std,records\n";
      for (auto& [method, group] : methods) {
        auto by_l =
            group_by<double>(group, [](const RunRecord& r) { return r.lambda; });
        std::ofstream dat = open_report_file(out_dir + "/sweep_" + method + ".dat");
        dat << "# lambda test_acc_mean test_acc_std\n";
        double best_acc = -1, best_lambda = 0;
        for (auto& [lambda, cell] : by_l) {
          CellStat c = aggregate(cell, acc);
          out << method << "," << lambda << "," << cell_str(c) << "," << ids_str(c)
              << "\n";
          dat << lambda << " " << c.mean << " " << (c.stddev ? *c.stddev : 0.0) << "\n";
          if (c.mean > best_acc) {
            best_acc = c.mean;
            best_lambda = lambda;
          }
        }
        out << method << "_best," << best_lambda << "," << best_acc << ",,\n";
      }
    }
  }

  // relative-cost sanity: second-order training should dominate
  auto mean_wall = [&](const std::string& m) -> std::optional<double> {
    double sum = 0;
    int n = 0;
    for (auto* r : ok)
      if (r->method == m && r->task == "q1") {
        sum += r->wall_seconds;
        ++n;
      }
    return n ? std::optional<double>(sum / n) : std::nullopt;
  };
  auto v = mean_wall("vanilla"), rr = mean_wall("rrr"), rb = mean_wall("rbr");
  if (v && rr && rb && !(*rb > *rr && *rr > *v))
    std::cerr << "report: unexpected wall-clock ordering (rbr=" << *rb
              << "s rrr=" << *rr << "s vanilla=" << *v << "s)\n";
}

std::vector<RunRecord> load_report_summary(const std::string& path) {
  std::ifstream in(path);
  XILTK_CHECK(in.good(), "summary not found: " + path);
  json arr = json::parse(in);
  std::vector<RunRecord> out;
  out.reserve(arr.size());
  for (auto& j : arr) out.push_back(record_from_json(j.dump()));
  return out;
}

}  // namespace xiltk
