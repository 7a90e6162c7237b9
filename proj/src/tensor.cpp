#include "xiltk/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace xiltk {

namespace {

// Training allocates and frees multi-megabyte activation buffers every batch.
// With glibc defaults those go through mmap/munmap, so every batch pays page
// faults and zeroing; keeping them on the heap roughly halves step time.
[[maybe_unused]] const bool g_malloc_tuned = [] {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  return true;
}();

std::atomic<uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor make_result(Shape shape, std::shared_ptr<std::vector<double>> data,
                   const char* op, std::vector<Tensor> parents,
                   std::function<std::vector<Tensor>(const Tensor&)> bw) {
  Tensor t = make_tensor(std::move(shape), std::move(data));
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) needs = true;
  }
  if (needs) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
    t.impl()->node = node;
    t.impl()->requires_grad = true;
  }
  return t;
}

std::shared_ptr<std::vector<double>> alloc(int64_t n, double fill = 0.0) {
  return std::make_shared<std::vector<double>>(n, fill);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  XILTK_CHECK(a.shape() == b.shape(),
              std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                  " vs " + shape_str(b.shape()));
}

// Internal linear primitives used by backward closures -----------------------

Tensor broadcast_full(const Tensor& s, Shape shape);
Tensor col_sum(const Tensor& a);
Tensor broadcast_rows(const Tensor& v, int64_t rows);
Tensor sum_nhw(const Tensor& a);
Tensor broadcast_channels(const Tensor& c, Shape shape);
Tensor transpose(const Tensor& a);
Tensor select_flat(const Tensor& a, int64_t i);
Tensor scatter_flat(const Tensor& s, int64_t i, Shape shape);

Tensor broadcast_full(const Tensor& s, Shape shape) {
  XILTK_CHECK(s.size() == 1, "broadcast_full: source must be scalar");
  auto out = alloc(numel(shape), s.data()[0]);
  return make_result(shape, out, "broadcast_full", {s},
                     [](const Tensor& g) -> std::vector<Tensor> { return {sum(g)}; });
}

Tensor broadcast_rows(const Tensor& v, int64_t rows) {
  XILTK_CHECK(v.ndim() == 1, "broadcast_rows: expected vector");
  int64_t k = v.dim(0);
  auto out = alloc(rows * k);
  for (int64_t i = 0; i < rows; ++i)
    std::memcpy(out->data() + i * k, v.data(), k * sizeof(double));
  return make_result({rows, k}, out, "broadcast_rows", {v},
                     [](const Tensor& g) -> std::vector<Tensor> { return {col_sum(g)}; });
}

Tensor col_sum(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "col_sum: expected matrix");
  int64_t n = a.dim(0), k = a.dim(1);
  auto out = alloc(k);
  const double* src = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j) (*out)[j] += src[i * k + j];
  return make_result({k}, out, "col_sum", {a}, [n](const Tensor& g) -> std::vector<Tensor> {
    return {broadcast_rows(g, n)};
  });
}

Tensor broadcast_channels(const Tensor& c, Shape shape) {
  XILTK_CHECK(c.ndim() == 1 && shape.size() == 4 && c.dim(0) == shape[1],
              "broadcast_channels: bad shapes");
  int64_t n = shape[0], ch = shape[1], hw = shape[2] * shape[3];
  auto out = alloc(numel(shape));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < ch; ++j)
      std::fill_n(out->data() + (i * ch + j) * hw, hw, c.data()[j]);
  return make_result(shape, out, "broadcast_channels", {c},
                     [](const Tensor& g) -> std::vector<Tensor> { return {sum_nhw(g)}; });
}

Tensor sum_nhw(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 4, "sum_nhw: expected NCHW");
  int64_t n = a.dim(0), ch = a.dim(1), hw = a.dim(2) * a.dim(3);
  auto out = alloc(ch);
  const double* src = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < ch; ++j) {
      double acc = 0;
      const double* p = src + (i * ch + j) * hw;
      for (int64_t q = 0; q < hw; ++q) acc += p[q];
      (*out)[j] += acc;
    }
  Shape shp = a.shape();
  return make_result({ch}, out, "sum_nhw", {a},
                     [shp](const Tensor& g) -> std::vector<Tensor> {
                       return {broadcast_channels(g, shp)};
                     });
}

Tensor transpose(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "transpose: expected matrix");
  int64_t m = a.dim(0), n = a.dim(1);
  auto out = alloc(m * n);
  CMapR src(a.data(), m, n);
  MapR dst(out->data(), n, m);
  dst = src.transpose();
  return make_result({n, m}, out, "transpose", {a},
                     [](const Tensor& g) -> std::vector<Tensor> { return {transpose(g)}; });
}

Tensor select_flat(const Tensor& a, int64_t i) {
  auto out = alloc(1, a.data()[i]);
  Shape shp = a.shape();
  return make_result({}, out, "select_flat", {a},
                     [i, shp](const Tensor& g) -> std::vector<Tensor> {
                       return {scatter_flat(g, i, shp)};
                     });
}

Tensor scatter_flat(const Tensor& s, int64_t i, Shape shape) {
  auto out = alloc(numel(shape));
  (*out)[i] = s.data()[0];
  return make_result(shape, out, "scatter_flat", {s},
                     [i](const Tensor& g) -> std::vector<Tensor> {
                       return {select_flat(g, i)};
                     });
}

Tensor scatter_columns(const Tensor& v, const std::vector<int64_t>& idx, int64_t cols);

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, std::shared_ptr<std::vector<double>> data) {
  XILTK_CHECK(static_cast<int64_t>(data->size()) == numel(shape),
              "tensor: data size " + std::to_string(data->size()) +
                  " does not match shape " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return t;
}

Tensor Tensor::zeros(Shape shape) {
  auto n = numel(shape);
  return make_tensor(std::move(shape), alloc(n));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel(shape);
  return make_tensor(std::move(shape), alloc(n, value));
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape),
                     std::make_shared<std::vector<double>>(std::move(values)));
}

int64_t Tensor::size() const { return numel(impl_->shape); }

double Tensor::item() const {
  XILTK_CHECK(size() == 1, "item(): tensor is not scalar, shape " + shape_str(shape()));
  return data()[0];
}

Tensor Tensor::detach() const {
  Tensor t = make_tensor(impl_->shape, impl_->data);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Pointwise ops

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = alloc(a.size());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] + pb[i];
  return make_result(a.shape(), out, "add", {a, b},
                     [](const Tensor& g) -> std::vector<Tensor> { return {g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = alloc(a.size());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] - pb[i];
  return make_result(a.shape(), out, "sub", {a, b},
                     [](const Tensor& g) -> std::vector<Tensor> { return {g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = alloc(a.size());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] * pb[i];
  return make_result(a.shape(), out, "mul", {a, b},
                     [a, b](const Tensor& g) -> std::vector<Tensor> {
                       return {mul(g, b), mul(g, a)};
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  auto out = alloc(a.size());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] / pb[i];
  return make_result(a.shape(), out, "div", {a, b},
                     [a, b](const Tensor& g) -> std::vector<Tensor> {
                       // d/da = g/b ; d/db = -g*a/b^2
                       return {div(g, b), neg(div(mul(g, a), mul(b, b)))};
                     });
}

Tensor neg(const Tensor& a) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = -pa[i];
  return make_result(a.shape(), out, "neg", {a},
                     [](const Tensor& g) -> std::vector<Tensor> { return {neg(g)}; });
}

Tensor add_scalar(const Tensor& a, double c) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] + c;
  return make_result(a.shape(), out, "add_scalar", {a},
                     [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] * c;
  return make_result(a.shape(), out, "mul_scalar", {a},
                     [c](const Tensor& g) -> std::vector<Tensor> {
                       return {mul_scalar(g, c)};
                     });
}

Tensor add_bcast(const Tensor& a, const Tensor& s) {
  return add(a, broadcast_full(s, a.shape()));
}
Tensor sub_bcast(const Tensor& a, const Tensor& s) {
  return sub(a, broadcast_full(s, a.shape()));
}
Tensor mul_bcast(const Tensor& a, const Tensor& s) {
  return mul(a, broadcast_full(s, a.shape()));
}
Tensor div_bcast(const Tensor& a, const Tensor& s) {
  return div(a, broadcast_full(s, a.shape()));
}

Tensor relu(const Tensor& a) {
  auto out = alloc(a.size());
  auto mask = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) {
    // derivative at 0 defined as 0
    if (pa[i] > 0) {
      (*out)[i] = pa[i];
      (*mask)[i] = 1.0;
    }
  }
  Tensor mask_t = make_tensor(a.shape(), mask);
  return make_result(a.shape(), out, "relu", {a},
                     [mask_t](const Tensor& g) -> std::vector<Tensor> {
                       return {mul(g, mask_t)};
                     });
}

Tensor log(const Tensor& a) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = std::log(pa[i]);
  return make_result(a.shape(), out, "log", {a},
                     [a](const Tensor& g) -> std::vector<Tensor> { return {div(g, a)}; });
}

Tensor exp(const Tensor& a) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = std::exp(pa[i]);
  return make_result(a.shape(), out, "exp", {a},
                     [a](const Tensor& g) -> std::vector<Tensor> {
                       return {mul(g, exp(a))};
                     });
}

Tensor square(const Tensor& a) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = pa[i] * pa[i];
  return make_result(a.shape(), out, "square", {a},
                     [a](const Tensor& g) -> std::vector<Tensor> {
                       return {mul(g, mul_scalar(a, 2.0))};
                     });
}

Tensor abs(const Tensor& a) {
  auto out = alloc(a.size());
  auto sign = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) {
    (*out)[i] = std::fabs(pa[i]);
    (*sign)[i] = pa[i] > 0 ? 1.0 : (pa[i] < 0 ? -1.0 : 0.0);
  }
  Tensor sign_t = make_tensor(a.shape(), sign);
  return make_result(a.shape(), out, "abs", {a},
                     [sign_t](const Tensor& g) -> std::vector<Tensor> {
                       return {mul(g, sign_t)};
                     });
}

Tensor reciprocal(const Tensor& a) {
  auto out = alloc(a.size());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) (*out)[i] = 1.0 / pa[i];
  return make_result(a.shape(), out, "reciprocal", {a},
                     [a](const Tensor& g) -> std::vector<Tensor> {
                       return {neg(div(g, mul(a, a)))};
                     });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double acc = 0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  auto out = alloc(1, acc);
  Shape shp = a.shape();
  return make_result({}, out, "sum", {a},
                     [shp](const Tensor& g) -> std::vector<Tensor> {
                       return {broadcast_full(g, shp)};
                     });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / double(a.size())); }

Tensor l1norm(const Tensor& a) { return sum(abs(a)); }

Tensor max_all(const Tensor& a) {
  const double* pa = a.data();
  int64_t best = 0;
  for (int64_t i = 1; i < a.size(); ++i)
    if (pa[i] > pa[best]) best = i;
  return select_flat(a, best);
}

Tensor min_all(const Tensor& a) {
  const double* pa = a.data();
  int64_t best = 0;
  for (int64_t i = 1; i < a.size(); ++i)
    if (pa[i] < pa[best]) best = i;
  return select_flat(a, best);
}

Tensor reshape(const Tensor& a, Shape shape) {
  XILTK_CHECK(numel(shape) == a.size(),
              "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Shape orig = a.shape();
  // shares the underlying buffer
  return make_result(std::move(shape), a.impl()->data, "reshape", {a},
                     [orig](const Tensor& g) -> std::vector<Tensor> {
                       return {reshape(g, orig)};
                     });
}

// ---------------------------------------------------------------------------
// Matrix / row-wise ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  XILTK_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
              "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = alloc(m * n);
  CMapR ma(a.data(), m, k);
  CMapR mb(b.data(), k, n);
  MapR mo(out->data(), m, n);
  mo.noalias() = ma * mb;
  return make_result({m, n}, out, "matmul", {a, b},
                     [a, b](const Tensor& g) -> std::vector<Tensor> {
                       return {matmul(g, transpose(b)), matmul(transpose(a), g)};
                     });
}

Tensor row_sum(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "row_sum: expected matrix");
  int64_t n = a.dim(0), k = a.dim(1);
  auto out = alloc(n);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < k; ++j) acc += pa[i * k + j];
    (*out)[i] = acc;
  }
  return make_result({n}, out, "row_sum", {a},
                     [k](const Tensor& g) -> std::vector<Tensor> {
                       return {broadcast_cols(g, k)};
                     });
}

Tensor broadcast_cols(const Tensor& v, int64_t cols) {
  XILTK_CHECK(v.ndim() == 1, "broadcast_cols: expected vector");
  int64_t n = v.dim(0);
  auto out = alloc(n * cols);
  const double* pv = v.data();
  for (int64_t i = 0; i < n; ++i) std::fill_n(out->data() + i * cols, cols, pv[i]);
  return make_result({n, cols}, out, "broadcast_cols", {v},
                     [](const Tensor& g) -> std::vector<Tensor> { return {row_sum(g)}; });
}

Tensor mul_colvec(const Tensor& a, const Tensor& v) {
  return mul(a, broadcast_cols(v, a.dim(1)));
}

Tensor select_columns(const Tensor& a, const std::vector<int64_t>& idx) {
  XILTK_CHECK(a.ndim() == 2 && static_cast<int64_t>(idx.size()) == a.dim(0),
              "select_columns: index count must match rows");
  int64_t n = a.dim(0), k = a.dim(1);
  auto out = alloc(n);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) {
    XILTK_CHECK(idx[i] >= 0 && idx[i] < k, "select_columns: index out of range");
    (*out)[i] = pa[i * k + idx[i]];
  }
  return make_result({n}, out, "select_columns", {a},
                     [idx, k](const Tensor& g) -> std::vector<Tensor> {
                       return {scatter_columns(g, idx, k)};
                     });
}

namespace {
Tensor scatter_columns(const Tensor& v, const std::vector<int64_t>& idx, int64_t cols) {
  int64_t n = v.dim(0);
  auto out = alloc(n * cols);
  const double* pv = v.data();
  for (int64_t i = 0; i < n; ++i) (*out)[i * cols + idx[i]] = pv[i];
  return make_result({n, cols}, out, "scatter_columns", {v},
                     [idx](const Tensor& g) -> std::vector<Tensor> {
                       return {select_columns(g, idx)};
                     });
}
}  // namespace

Tensor row_max(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "row_max: expected matrix");
  int64_t n = a.dim(0), k = a.dim(1);
  std::vector<int64_t> idx(n, 0);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 1; j < k; ++j)
      if (pa[i * k + j] > pa[i * k + idx[i]]) idx[i] = j;
  return select_columns(a, idx);
}

Tensor row_min(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "row_min: expected matrix");
  int64_t n = a.dim(0), k = a.dim(1);
  std::vector<int64_t> idx(n, 0);
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 1; j < k; ++j)
      if (pa[i * k + j] < pa[i * k + idx[i]]) idx[i] = j;
  return select_columns(a, idx);
}

Tensor softmax(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "softmax: expected [N,K] logits");
  Tensor shift = broadcast_cols(row_max(a).detach(), a.dim(1));
  Tensor e = exp(sub(a, shift));
  Tensor s = row_sum(e);
  return mul(e, broadcast_cols(reciprocal(s), a.dim(1)));
}

Tensor log_softmax(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 2, "log_softmax: expected [N,K] logits");
  Tensor shift = broadcast_cols(row_max(a).detach(), a.dim(1));
  Tensor z = sub(a, shift);
  Tensor lse = log(row_sum(exp(z)));
  return sub(z, broadcast_cols(lse, a.dim(1)));
}

Tensor add_row_bias(const Tensor& a, const Tensor& b) {
  XILTK_CHECK(a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0),
              "add_row_bias: shape mismatch " + shape_str(a.shape()) + " + " +
                  shape_str(b.shape()));
  return add(a, broadcast_rows(b, a.dim(0)));
}

Tensor add_channel_bias(const Tensor& a, const Tensor& b) {
  XILTK_CHECK(a.ndim() == 4 && b.ndim() == 1 && a.dim(1) == b.dim(0),
              "add_channel_bias: shape mismatch " + shape_str(a.shape()) + " + " +
                  shape_str(b.shape()));
  return add(a, broadcast_channels(b, a.shape()));
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, valid, stride 1) via im2col + GEMM

namespace {

// cols: (C*KH*KW) x (N*OH*OW), row-major
void im2col(const double* x, int64_t n, int64_t c, int64_t h, int64_t w,
            int64_t kh, int64_t kw, double* cols) {
  int64_t oh = h - kh + 1, ow = w - kw + 1;
  int64_t m = n * oh * ow;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        double* dst = cols + ((ci * kh + ki) * kw + kj) * m;
        for (int64_t ni = 0; ni < n; ++ni) {
          const double* img = x + (ni * c + ci) * h * w;
          for (int64_t oi = 0; oi < oh; ++oi)
            std::memcpy(dst + (ni * oh + oi) * ow, img + (oi + ki) * w + kj,
                        ow * sizeof(double));
        }
      }
}

void col2im_add(const double* cols, int64_t n, int64_t c, int64_t h, int64_t w,
                int64_t kh, int64_t kw, double* x) {
  int64_t oh = h - kh + 1, ow = w - kw + 1;
  int64_t m = n * oh * ow;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const double* src = cols + ((ci * kh + ki) * kw + kj) * m;
        for (int64_t ni = 0; ni < n; ++ni) {
          double* img = x + (ni * c + ci) * h * w;
          for (int64_t oi = 0; oi < oh; ++oi) {
            const double* s = src + (ni * oh + oi) * ow;
            double* d = img + (oi + ki) * w + kj;
            for (int64_t oj = 0; oj < ow; ++oj) d[oj] += s[oj];
          }
        }
      }
}

// y[N,OC,OH,OW] <- mat (OC x N*OH*OW)
void gemm_out_to_nchw(const double* mat, int64_t n, int64_t oc, int64_t ohw, double* y) {
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t c = 0; c < oc; ++c)
      std::memcpy(y + (ni * oc + c) * ohw, mat + c * n * ohw + ni * ohw,
                  ohw * sizeof(double));
}

// mat (OC x N*OH*OW) <- g[N,OC,OH,OW]
void nchw_to_gemm(const double* g, int64_t n, int64_t oc, int64_t ohw, double* mat) {
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t c = 0; c < oc; ++c)
      std::memcpy(mat + c * n * ohw + ni * ohw, g + (ni * oc + c) * ohw,
                  ohw * sizeof(double));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w) {
  XILTK_CHECK(x.ndim() == 4 && w.ndim() == 4 && x.dim(1) == w.dim(1),
              "conv2d: incompatible shapes " + shape_str(x.shape()) + " * " +
                  shape_str(w.shape()));
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  XILTK_CHECK(h >= kh && wd >= kw, "conv2d: kernel larger than input, " +
                                       shape_str(x.shape()) + " * " + shape_str(w.shape()));
  int64_t oh = h - kh + 1, ow = wd - kw + 1;
  int64_t k = c * kh * kw, m = n * oh * ow;
  std::vector<double> cols(k * m);
  im2col(x.data(), n, c, h, wd, kh, kw, cols.data());
  std::vector<double> prod(oc * m);
  {
    CMapR mw(w.data(), oc, k);
    CMapR mc(cols.data(), k, m);
    MapR mp(prod.data(), oc, m);
    mp.noalias() = mw * mc;
  }
  auto out = alloc(n * oc * oh * ow);
  gemm_out_to_nchw(prod.data(), n, oc, oh * ow, out->data());
  return make_result({n, oc, oh, ow}, out, "conv2d", {x, w},
                     [x, w, h, wd, kh, kw](const Tensor& g) -> std::vector<Tensor> {
                       return {conv2d_input_grad(g, w, h, wd),
                               conv2d_weight_grad(x, g, kh, kw)};
                     });
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int64_t h, int64_t w_in) {
  XILTK_CHECK(g.ndim() == 4 && w.ndim() == 4 && g.dim(1) == w.dim(0),
              "conv2d_input_grad: incompatible shapes");
  int64_t n = g.dim(0), oc = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  int64_t c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  int64_t k = c * kh * kw, m = n * oh * ow;
  std::vector<double> gmat(oc * m);
  nchw_to_gemm(g.data(), n, oc, oh * ow, gmat.data());
  std::vector<double> gcols(k * m);
  {
    CMapR mw(w.data(), oc, k);
    CMapR mg(gmat.data(), oc, m);
    MapR mc(gcols.data(), k, m);
    mc.noalias() = mw.transpose() * mg;
  }
  auto out = alloc(n * c * h * w_in);
  col2im_add(gcols.data(), n, c, h, w_in, kh, kw, out->data());
  return make_result({n, c, h, w_in}, out, "conv2d_input_grad", {g, w},
                     [g, w, kh, kw](const Tensor& gg) -> std::vector<Tensor> {
                       return {conv2d(gg, w), conv2d_weight_grad(gg, g, kh, kw)};
                     });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int64_t kh, int64_t kw) {
  XILTK_CHECK(x.ndim() == 4 && g.ndim() == 4 && x.dim(0) == g.dim(0),
              "conv2d_weight_grad: incompatible shapes");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t oc = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  XILTK_CHECK(oh == h - kh + 1 && ow == wd - kw + 1,
              "conv2d_weight_grad: output dims do not match kernel size");
  int64_t k = c * kh * kw, m = n * oh * ow;
  std::vector<double> cols(k * m);
  im2col(x.data(), n, c, h, wd, kh, kw, cols.data());
  std::vector<double> gmat(oc * m);
  nchw_to_gemm(g.data(), n, oc, oh * ow, gmat.data());
  auto out = alloc(oc * k);
  {
    CMapR mg(gmat.data(), oc, m);
    CMapR mc(cols.data(), k, m);
    MapR mo(out->data(), oc, k);
    mo.noalias() = mg * mc.transpose();
  }
  int64_t hh = h, ww = wd;
  return make_result({oc, c, kh, kw}, out, "conv2d_weight_grad", {x, g},
                     [x, g, hh, ww, kh, kw](const Tensor& gw) -> std::vector<Tensor> {
                       return {conv2d_input_grad(g, gw, hh, ww), conv2d(x, gw)};
                     });
}

// ---------------------------------------------------------------------------
// Max pooling

PoolResult maxpool2d(const Tensor& x, int64_t k, int64_t stride) {
  XILTK_CHECK(x.ndim() == 4, "maxpool2d: expected NCHW, got " + shape_str(x.shape()));
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  auto idx = std::make_shared<std::vector<int64_t>>(n * c * oh * ow);
  auto out = alloc(n * c * oh * ow);
  const double* px = x.data();
  int64_t o = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* img = px + (ni * c + ci) * h * w;
      int64_t base = (ni * c + ci) * h * w;
      for (int64_t oi = 0; oi < oh; ++oi)
        for (int64_t oj = 0; oj < ow; ++oj, ++o) {
          int64_t bi = oi * stride, bj = oj * stride;
          int64_t best = bi * w + bj;
          // ties go to the first (row-major) max index
          for (int64_t di = 0; di < k; ++di)
            for (int64_t dj = 0; dj < k; ++dj) {
              int64_t p = (bi + di) * w + (bj + dj);
              if (img[p] > img[best]) best = p;
            }
          (*idx)[o] = base + best;
          (*out)[o] = img[best];
        }
    }
  Shape in_shape = x.shape();
  Tensor res = make_result({n, c, oh, ow}, out, "maxpool2d", {x},
                           [idx, in_shape](const Tensor& g) -> std::vector<Tensor> {
                             return {pool_scatter(g, idx, in_shape)};
                           });
  return {res, idx};
}

Tensor pool_gather(const Tensor& x, const std::shared_ptr<std::vector<int64_t>>& idx,
                   Shape out_shape) {
  auto out = alloc(numel(out_shape));
  const double* px = x.data();
  for (size_t i = 0; i < idx->size(); ++i) (*out)[i] = px[(*idx)[i]];
  Shape in_shape = x.shape();
  return make_result(std::move(out_shape), out, "pool_gather", {x},
                     [idx, in_shape](const Tensor& g) -> std::vector<Tensor> {
                       return {pool_scatter(g, idx, in_shape)};
                     });
}

Tensor pool_scatter(const Tensor& g, const std::shared_ptr<std::vector<int64_t>>& idx,
                    Shape in_shape) {
  auto out = alloc(numel(in_shape));
  const double* pg = g.data();
  for (size_t i = 0; i < idx->size(); ++i) (*out)[(*idx)[i]] += pg[i];
  Shape g_shape = g.shape();
  return make_result(std::move(in_shape), out, "pool_scatter", {g},
                     [idx, g_shape](const Tensor& gg) -> std::vector<Tensor> {
                       return {pool_gather(gg, idx, g_shape)};
                     });
}

// ---------------------------------------------------------------------------
// Bilinear resize

namespace {
struct LerpCoef {
  int64_t lo, hi;
  double w_hi;
};
std::vector<LerpCoef> lerp_coefs(int64_t in, int64_t out) {
  std::vector<LerpCoef> c(out);
  for (int64_t i = 0; i < out; ++i) {
    double src = (out > 1 && in > 1) ? double(i) * double(in - 1) / double(out - 1) : 0.0;
    int64_t lo = static_cast<int64_t>(src);
    if (lo >= in - 1) lo = in > 1 ? in - 2 : 0;
    double f = src - double(lo);
    c[i] = {lo, in > 1 ? lo + 1 : 0, f};
  }
  return c;
}
}  // namespace

Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  XILTK_CHECK(x.ndim() == 4, "upsample_bilinear: expected NCHW");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ch = lerp_coefs(h, out_h);
  auto cw = lerp_coefs(w, out_w);
  auto out = alloc(n * c * out_h * out_w);
  const double* px = x.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* img = px + nc * h * w;
    double* dst = out->data() + nc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i)
      for (int64_t j = 0; j < out_w; ++j) {
        const auto &ri = ch[i], &rj = cw[j];
        double top = img[ri.lo * w + rj.lo] * (1 - rj.w_hi) + img[ri.lo * w + rj.hi] * rj.w_hi;
        double bot = img[ri.hi * w + rj.lo] * (1 - rj.w_hi) + img[ri.hi * w + rj.hi] * rj.w_hi;
        dst[i * out_w + j] = top * (1 - ri.w_hi) + bot * ri.w_hi;
      }
  }
  return make_result({n, c, out_h, out_w}, out, "upsample_bilinear", {x},
                     [h, w](const Tensor& g) -> std::vector<Tensor> {
                       return {upsample_bilinear_adjoint(g, h, w)};
                     });
}

Tensor upsample_bilinear_adjoint(const Tensor& g, int64_t in_h, int64_t in_w) {
  XILTK_CHECK(g.ndim() == 4, "upsample_bilinear_adjoint: expected NCHW");
  int64_t n = g.dim(0), c = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  auto ch = lerp_coefs(in_h, oh);
  auto cw = lerp_coefs(in_w, ow);
  auto out = alloc(n * c * in_h * in_w);
  const double* pg = g.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* src = pg + nc * oh * ow;
    double* img = out->data() + nc * in_h * in_w;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        const auto &ri = ch[i], &rj = cw[j];
        double v = src[i * ow + j];
        img[ri.lo * in_w + rj.lo] += v * (1 - ri.w_hi) * (1 - rj.w_hi);
        img[ri.lo * in_w + rj.hi] += v * (1 - ri.w_hi) * rj.w_hi;
        img[ri.hi * in_w + rj.lo] += v * ri.w_hi * (1 - rj.w_hi);
        img[ri.hi * in_w + rj.hi] += v * ri.w_hi * rj.w_hi;
      }
  }
  return make_result({n, c, in_h, in_w}, out, "upsample_bilinear_adjoint", {g},
                     [oh, ow](const Tensor& gg) -> std::vector<Tensor> {
                       return {upsample_bilinear(gg, oh, ow)};
                     });
}

Tensor channel_sum(const Tensor& a) {
  XILTK_CHECK(a.ndim() == 4, "channel_sum: expected NCHW, got " + shape_str(a.shape()));
  int64_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  auto out = alloc(n * hw);
  const double* src = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      const double* p = src + (i * c + j) * hw;
      double* q = out->data() + i * hw;
      for (int64_t k = 0; k < hw; ++k) q[k] += p[k];
    }
  return make_result({n, 1, a.dim(2), a.dim(3)}, out, "channel_sum", {a},
                     [c](const Tensor& g) -> std::vector<Tensor> {
                       return {channel_repeat(g, c)};
                     });
}

Tensor channel_repeat(const Tensor& a, int64_t c) {
  XILTK_CHECK(a.ndim() == 4 && a.dim(1) == 1,
              "channel_repeat: expected [N,1,H,W], got " + shape_str(a.shape()));
  int64_t n = a.dim(0), hw = a.dim(2) * a.dim(3);
  auto out = alloc(n * c * hw);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j)
      std::memcpy(out->data() + (i * c + j) * hw, a.data() + i * hw, hw * sizeof(double));
  return make_result({n, c, a.dim(2), a.dim(3)}, out, "channel_repeat", {a},
                     [](const Tensor& g) -> std::vector<Tensor> {
                       return {channel_sum(g)};
                     });
}

// ---------------------------------------------------------------------------
// Backward

GradMap backward(const Tensor& loss, bool create_graph) {
  XILTK_CHECK(loss.defined(), "backward: undefined loss");
  XILTK_CHECK(loss.size() == 1,
              "backward: seed must be scalar, got shape " + shape_str(loss.shape()));

  // reverse topological order via iterative post-order DFS
  std::vector<const TensorImpl*> order;
  std::unordered_map<const TensorImpl*, int> state;  // 0=unseen 1=open 2=done
  std::vector<const TensorImpl*> stack{loss.impl()};
  while (!stack.empty()) {
    const TensorImpl* t = stack.back();
    int& st = state[t];
    if (st == 0) {
      st = 1;
      if (t->node) {
        for (const auto& p : t->node->parents)
          if (p.defined() && p.requires_grad() && state[p.impl()] == 0)
            stack.push_back(p.impl());
      }
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(t);
      }
    }
  }
  // order: parents first; iterate in reverse so consumers run before producers
  GradMap grads;
  grads[loss.impl()] = Tensor::scalar(1.0);

  auto run = [&]() {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const TensorImpl* t = *it;
      if (!t->node) continue;
      auto git = grads.find(t);
      if (git == grads.end()) continue;
      std::vector<Tensor> pgrads = t->node->backward(git->second);
      const auto& parents = t->node->parents;
      XILTK_CHECK(pgrads.size() == parents.size(), "backward: arity mismatch in op");
      for (size_t i = 0; i < parents.size(); ++i) {
        if (!parents[i].defined() || !parents[i].requires_grad() || !pgrads[i].defined())
          continue;
        auto pit = grads.find(parents[i].impl());
        if (pit == grads.end())
          grads[parents[i].impl()] = pgrads[i];
        else
          pit->second = add(pit->second, pgrads[i]);
      }
    }
  };
  if (create_graph) {
    run();
  } else {
    NoGradGuard ng;
    run();
  }
  return grads;
}

Tensor grad_of(const GradMap& grads, const Tensor& t) {
  auto it = grads.find(t.impl());
  if (it == grads.end()) return Tensor::zeros(t.shape());
  return it->second;
}

Tensor input_second_order(
    const Tensor& loss, const std::vector<Tensor>& params, const Tensor& x,
    const std::function<Tensor(const std::vector<Tensor>&)>& scalar_fn,
    bool create_graph) {
  XILTK_CHECK(loss.node() != nullptr,
              "input_second_order: loss carries no graph (was it built under "
              "NoGradGuard?)");
  GradMap first = backward(loss, /*create_graph=*/true);
  std::vector<Tensor> param_grads;
  param_grads.reserve(params.size());
  for (const auto& p : params) param_grads.push_back(grad_of(first, p));
  Tensor s = scalar_fn(param_grads);
  XILTK_CHECK(s.size() == 1, "input_second_order: scalar_fn must return a scalar");
  if (!s.requires_grad()) return Tensor::zeros(x.shape());
  GradMap second = backward(s, create_graph);
  return grad_of(second, x);
}

// ---------------------------------------------------------------------------

Tensor op_forward(OpKind kind, const std::vector<Tensor>& inputs) {
  auto want = [&](size_t n) {
    XILTK_CHECK(inputs.size() == n, "op_forward: wrong input count");
  };
  switch (kind) {
    case OpKind::Add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::Mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::Matmul: want(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Conv2d: want(2); return conv2d(inputs[0], inputs[1]);
    case OpKind::Maxpool2d: want(1); return maxpool2d(inputs[0], 2, 2).out;
    case OpKind::Relu: want(1); return relu(inputs[0]);
    case OpKind::Log: want(1); return log(inputs[0]);
    case OpKind::Exp: want(1); return exp(inputs[0]);
    case OpKind::Softmax: want(1); return softmax(inputs[0]);
    case OpKind::Sum: want(1); return sum(inputs[0]);
    case OpKind::Mean: want(1); return mean(inputs[0]);
    case OpKind::Square: want(1); return square(inputs[0]);
    case OpKind::L1norm: want(1); return l1norm(inputs[0]);
  }
  throw TensorError("op_forward: unknown op kind");
}

}  // namespace xiltk
