#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// Every op is recorded as a graph node whose backward closure is itself
// built from the same ops, so gradients produced with create_graph=true
// are graph-connected tensors that can be differentiated again (double
// backward, needed for second-order losses).

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace xiltk {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

/// Error type carrying the op name and offending shapes.
struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

#define XILTK_CHECK(cond, msg)                          \
  do {                                                  \
    if (!(cond)) throw ::xiltk::TensorError(msg);       \
  } while (0)

class Tensor;
struct Node;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // set only for op results recorded on the graph
  uint64_t id = 0;
};

struct Node {
  const char* op = "";
  std::vector<Tensor> parents;
  // Maps the upstream gradient to per-parent gradients. Entries may be
  // undefined tensors for parents that do not require grad.
  std::function<std::vector<Tensor>(const Tensor&)> backward;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t size() const;
  int64_t dim(int i) const { return impl_->shape.at(i); }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }

  double* data() { return impl_->data->data(); }
  const double* data() const { return impl_->data->data(); }
  std::vector<double>& buffer() { return *impl_->data; }
  const std::vector<double>& buffer() const { return *impl_->data; }

  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  uint64_t id() const { return impl_->id; }
  const std::shared_ptr<Node>& node() const { return impl_->node; }
  TensorImpl* impl() const { return impl_.get(); }

  /// Same data, no graph linkage.
  Tensor detach() const;

  bool all_finite() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(Shape, std::shared_ptr<std::vector<double>>);
};

Tensor make_tensor(Shape shape, std::shared_ptr<std::vector<double>> data);

/// RAII switch that disables graph recording in scope (used by plain
/// backward passes and inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Primitives. All record graph nodes when grad recording is on and any
// input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

/// Broadcast a scalar tensor against every element of `a`.
Tensor add_bcast(const Tensor& a, const Tensor& s);
Tensor sub_bcast(const Tensor& a, const Tensor& s);
Tensor mul_bcast(const Tensor& a, const Tensor& s);
Tensor div_bcast(const Tensor& a, const Tensor& s);

Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor reciprocal(const Tensor& a);

Tensor sum(const Tensor& a);                 // -> scalar
Tensor mean(const Tensor& a);                // -> scalar
Tensor l1norm(const Tensor& a);              // sum of |a|, scalar
Tensor max_all(const Tensor& a);             // grad routed to first argmax
Tensor min_all(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);  // shares the buffer

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

// Row-wise helpers on [N,K] matrices.
Tensor row_sum(const Tensor& a);                       // -> [N]
Tensor broadcast_cols(const Tensor& v, int64_t cols);  // [N] -> [N,cols]
Tensor mul_colvec(const Tensor& a, const Tensor& v);   // scale row i by v[i]
Tensor select_columns(const Tensor& a, const std::vector<int64_t>& idx);  // -> [N]
Tensor row_max(const Tensor& a);  // grad to first per-row argmax
Tensor row_min(const Tensor& a);
Tensor softmax(const Tensor& a);      // row-wise
Tensor log_softmax(const Tensor& a);  // row-wise, numerically stable

// Bias adds with their reductions as adjoints.
Tensor add_row_bias(const Tensor& a, const Tensor& b);      // [N,K] + [K]
Tensor add_channel_bias(const Tensor& a, const Tensor& b);  // [N,C,H,W] + [C]

// Convolution, NCHW, valid padding, stride 1.
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int64_t h, int64_t w_in);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int64_t kh, int64_t kw);

struct PoolResult {
  Tensor out;
  std::shared_ptr<std::vector<int64_t>> indices;  // flat input index per output cell
};
PoolResult maxpool2d(const Tensor& x, int64_t k, int64_t stride);
Tensor pool_gather(const Tensor& x, const std::shared_ptr<std::vector<int64_t>>& idx,
                   Shape out_shape);
Tensor pool_scatter(const Tensor& g, const std::shared_ptr<std::vector<int64_t>>& idx,
                    Shape in_shape);

// Channel reduction on NCHW, each the other's adjoint.
Tensor channel_sum(const Tensor& a);                 // [N,C,H,W] -> [N,1,H,W]
Tensor channel_repeat(const Tensor& a, int64_t c);   // [N,1,H,W] -> [N,C,H,W]

/// Bilinear resize on [N,C,h,w] -> [N,C,H,W] (align_corners semantics).
Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor upsample_bilinear_adjoint(const Tensor& g, int64_t in_h, int64_t in_w);

// ---------------------------------------------------------------------------
// Backward.

using GradMap = std::unordered_map<const TensorImpl*, Tensor>;

/// Reverse-mode sweep from a scalar loss. Returns d loss / d t for every
/// requires_grad tensor reachable in the graph. With create_graph the
/// returned gradients are themselves graph-connected.
GradMap backward(const Tensor& loss, bool create_graph = false);

/// Gradient of a scalar w.r.t. one tensor; zero tensor if unreachable.
Tensor grad_of(const GradMap& grads, const Tensor& t);

/// Differentiate through a gradient computation: gradients of `loss`
/// w.r.t. `params` are fed to `scalar_fn`, and the result is
/// differentiated w.r.t. `x`. Requires a second-order-capable graph.
Tensor input_second_order(
    const Tensor& loss, const std::vector<Tensor>& params, const Tensor& x,
    const std::function<Tensor(const std::vector<Tensor>&)>& scalar_fn,
    bool create_graph = false);

// Spec-facing generic dispatcher over the primitive kinds.
enum class OpKind {
  Add, Mul, Matmul, Conv2d, Maxpool2d, Relu, Log, Exp, Softmax, Sum, Mean,
  Square, L1norm
};
Tensor op_forward(OpKind kind, const std::vector<Tensor>& inputs);

}  // namespace xiltk
