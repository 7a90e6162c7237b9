#include "xiltk/nn.hpp"

#include <cmath>

#include "xiltk/checkpoint.hpp"
#include "xiltk/rng.hpp"

namespace xiltk {

std::string arch_name(Arch a) { return a == Arch::SCNN ? "SCNN" : "MLP"; }

Arch arch_from_name(const std::string& s) {
  if (s == "SCNN") return Arch::SCNN;
  if (s == "MLP") return Arch::MLP;
  throw TensorError("unknown arch tag '" + s + "'");
}

namespace {

Tensor init_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / double(fan_in));
  int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data)).set_requires_grad(true);
}

Tensor init_zeros(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model init_model(Arch arch, uint64_t seed) {
  Rng rng(seed);
  Model m;
  m.arch = arch;
  if (arch == Arch::SCNN) {
    m.params["conv1.w"] = init_uniform({20, 1, 5, 5}, 1 * 5 * 5, rng);
    m.params["conv1.b"] = init_zeros({20});
    m.params["conv2.w"] = init_uniform({50, 20, 5, 5}, 20 * 5 * 5, rng);
    m.params["conv2.b"] = init_zeros({50});
    m.params["fc1.w"] = init_uniform({50 * 4 * 4, kScnnHidden}, 50 * 4 * 4, rng);
    m.params["fc1.b"] = init_zeros({kScnnHidden});
    m.params["fc2.w"] = init_uniform({kScnnHidden, kClasses}, kScnnHidden, rng);
    m.params["fc2.b"] = init_zeros({kClasses});
  } else {
    m.params["fc1.w"] = init_uniform({28 * 28, kMlpHidden}, 28 * 28, rng);
    m.params["fc1.b"] = init_zeros({kMlpHidden});
    m.params["fc2.w"] = init_uniform({kMlpHidden, kClasses}, kMlpHidden, rng);
    m.params["fc2.b"] = init_zeros({kClasses});
  }
  return m;
}

Tensor Model::forward(const Tensor& x, ForwardTrace* trace) const {
  Tensor logits;
  if (arch == Arch::SCNN) {
    XILTK_CHECK(x.ndim() == 4 && x.dim(1) == 1 && x.dim(2) == 28 && x.dim(3) == 28,
                "SCNN forward: expected [N,1,28,28], got " + shape_str(x.shape()));
    Tensor a1 = relu(add_channel_bias(conv2d(x, params.at("conv1.w")), params.at("conv1.b")));
    Tensor p1 = maxpool2d(a1, 2, 2).out;
    Tensor a2 = relu(add_channel_bias(conv2d(p1, params.at("conv2.w")), params.at("conv2.b")));
    Tensor p2 = maxpool2d(a2, 2, 2).out;
    Tensor flat = reshape(p2, {x.dim(0), 50 * 4 * 4});
    Tensor h = relu(add_row_bias(matmul(flat, params.at("fc1.w")), params.at("fc1.b")));
    logits = add_row_bias(matmul(h, params.at("fc2.w")), params.at("fc2.b"));
    if (trace) trace->conv_feats = a2;
  } else {
    Tensor flat = x.ndim() == 2 ? x : reshape(x, {x.dim(0), 28 * 28});
    Tensor h = relu(add_row_bias(matmul(flat, params.at("fc1.w")), params.at("fc1.b")));
    logits = add_row_bias(matmul(h, params.at("fc2.w")), params.at("fc2.b"));
  }
  if (trace) {
    trace->input = x;
    trace->logits = logits;
  }
  return logits;
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const auto& [_, p] : params) n += p.size();
  return n;
}

Model Model::clone() const {
  Model m;
  m.arch = arch;
  for (const auto& [name, p] : params) {
    Tensor copy = Tensor::from_data(p.shape(), p.buffer());
    copy.set_requires_grad(true);
    m.params[name] = copy;
  }
  return m;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  XILTK_CHECK(logits.ndim() == 2 && logits.dim(0) == int64_t(labels.size()),
              "cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                  std::to_string(labels.size()) + " labels");
  return neg(mean(select_columns(log_softmax(logits), labels)));
}

void Adam::step(Model& model, const GradMap& grads) {
  NoGradGuard ng;
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, double(step_count));
  double bc2 = 1.0 - std::pow(beta2, double(step_count));
  for (auto& [name, p] : model.params) {
    Tensor g = grad_of(grads, p);
    auto& mi = m[name];
    auto& vi = v[name];
    if (mi.empty()) mi.assign(p.size(), 0.0);
    if (vi.empty()) vi.assign(p.size(), 0.0);
    double* pd = p.data();
    const double* gd = g.data();
    for (int64_t i = 0; i < p.size(); ++i) {
      mi[i] = beta1 * mi[i] + (1 - beta1) * gd[i];
      vi[i] = beta2 * vi[i] + (1 - beta2) * gd[i] * gd[i];
      pd[i] -= lr * (mi[i] / bc1) / (std::sqrt(vi[i] / bc2) + eps);
    }
  }
}

StepStats train_step(Model& model, const Batch& batch, const LossFn& loss_fn, Adam& adam) {
  StepStats stats;
  Tensor loss = loss_fn(model, batch, stats);
  if (!std::isfinite(loss.item()))
    throw TrainError("non-finite loss (pred=" + std::to_string(stats.pred_loss) +
                     ", exp=" + std::to_string(stats.exp_loss) + ")");
  GradMap grads = backward(loss, /*create_graph=*/false);
  adam.step(model, grads);
  return stats;
}

void save_checkpoint(const std::string& path, const Model& model) {
  ArrayFile file;
  file.meta["arch_tag"] = arch_name(model.arch);
  for (const auto& [name, p] : model.params)
    file.arrays.push_back({name, p.shape(), p.buffer()});
  write_array_file(path, file);
}

Model load_checkpoint(const std::string& path) {
  ArrayFile file = read_array_file(path);
  Model m;
  m.arch = arch_from_name(file.meta.at("arch_tag").get<std::string>());
  for (auto& a : file.arrays) {
    Tensor t = Tensor::from_data(a.shape, std::move(a.data));
    t.set_requires_grad(true);
    m.params[a.name] = t;
  }
  return m;
}

}  // namespace xiltk
