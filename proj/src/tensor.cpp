#include "splab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace splab {

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool tracked = false;
};
}  // namespace detail

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using CVecMap = Eigen::Map<const Eigen::VectorXf>;

thread_local Tape* g_active_tape = nullptr;

Tape* recording(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->tracked()) return g_active_tape;
  }
  return nullptr;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

/// Returns true when b broadcasts over a's batch dim, false when shapes match.
bool binary_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return false;
  if (a.rank() == b.rank() + 1 && std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1)) {
    return true;
  }
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->tracked = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<float> data(shape_numel(shape), 0.0f);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::vector<float> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng) {
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = rng.normal();
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) throw DimensionError("tensor: dim index out of range");
  return impl_->shape[i];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::per_sample() const {
  const auto& s = shape();
  if (s.empty() || s[0] == 0) return 0;
  return numel() / s[0];
}

std::span<float> Tensor::data() { return impl_->data; }
std::span<const float> Tensor::data() const { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("tensor: item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  impl_->tracked = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::tracked() const { return impl_ && impl_->tracked; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::grad_mut() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

void mark_tracked(Tensor& t) { t.impl_->tracked = true; }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("reshape: " + shape_str(shape()) + " -> " + shape_str(new_shape));
  }
  Tensor out(std::move(new_shape), impl_->data);
  const Tensor& self = *this;
  if (auto* tape = recording({&self})) {
    mark_tracked(out);
    tape->record({self}, out, [a = self, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  if (!loss.tracked()) throw ContractError("backward: loss is not on the tape");
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---------------------------------------------------------------------------
// Dense algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  MapR(out.data().data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, m, k, n]() mutable {
      CMapR g(out.grad().data(), m, n);
      if (a.tracked()) {
        MapR(a.grad_mut().data(), m, k).noalias() += g * CMapR(b.data().data(), k, n).transpose();
      }
      if (b.tracked()) {
        MapR(b.grad_mut().data(), k, n).noalias() += CMapR(a.data().data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_rank(b, 1, "linear");
  const auto batch = x.dim(0), in = x.dim(1), outn = w.dim(1);
  if (w.dim(0) != in || b.dim(0) != outn) {
    throw DimensionError("linear: " + shape_str(x.shape()) + " * " + shape_str(w.shape()) + " + " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({batch, outn});
  MapR y(out.data().data(), batch, outn);
  y.noalias() = CMapR(x.data().data(), batch, in) * CMapR(w.data().data(), in, outn);
  y.rowwise() += CMapR(b.data().data(), 1, outn).row(0);
  if (auto* tape = recording({&x, &w, &b})) {
    mark_tracked(out);
    tape->record({x, w, b}, out, [x, w, b, out, batch, in, outn]() mutable {
      CMapR g(out.grad().data(), batch, outn);
      if (x.tracked()) {
        MapR(x.grad_mut().data(), batch, in).noalias() += g * CMapR(w.data().data(), in, outn).transpose();
      }
      if (w.tracked()) {
        MapR(w.grad_mut().data(), in, outn).noalias() += CMapR(x.data().data(), batch, in).transpose() * g;
      }
      if (b.tracked()) {
        // Plain row-order loop: Eigen's colwise reduction order depends on buffer alignment.
        std::vector<float> acc(outn, 0.0f);
        const float* gd = out.grad().data();
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t j = 0; j < outn; ++j) acc[j] += gd[r * outn + j];
        auto gb = b.grad_mut();
        for (std::size_t j = 0; j < outn; ++j) gb[j] += acc[j];
      }
    });
  }
  return out;
}

namespace {

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const bool bcast = binary_broadcast(a, b, name);
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const float bv = bd[bcast ? i % inner : i];
    switch (kind) {
      case BinaryKind::Add: o[i] = ad[i] + bv; break;
      case BinaryKind::Sub: o[i] = ad[i] - bv; break;
      case BinaryKind::Mul: o[i] = ad[i] * bv; break;
    }
  }
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, bcast, n, inner, kind]() mutable {
      auto g = out.grad();
      if (a.tracked()) {
        auto ga = a.grad_mut();
        auto bd = b.data();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += kind == BinaryKind::Mul ? g[i] * bd[bcast ? i % inner : i] : g[i];
        }
      }
      if (b.tracked()) {
        auto gb = b.grad_mut();
        auto ad = a.data();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = bcast ? i % inner : i;
          switch (kind) {
            case BinaryKind::Add: gb[j] += g[i]; break;
            case BinaryKind::Sub: gb[j] -= g[i]; break;
            case BinaryKind::Mul: gb[j] += g[i] * ad[i]; break;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& a, float s) {
  require_defined(a, "scale");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * s;
  if (auto* tape = recording({&a})) {
    mark_tracked(out);
    tape->record({a}, out, [a, out, s]() mutable {
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor silu(const Tensor& a) {
  require_defined(a, "silu");
  Tensor out = Tensor::zeros(a.shape());
  const auto n = static_cast<long>(a.numel());
  const auto x = CVecMap(a.data().data(), n).array();
  // Evaluated into an aligned temporary so the vectorized/scalar split of exp
  // (and therefore every bit of the result) does not depend on buffer addresses.
  const Eigen::ArrayXf y = x / (1.0f + (-x).exp());
  VecMap(out.data().data(), n) = y.matrix();
  if (auto* tape = recording({&a})) {
    mark_tracked(out);
    tape->record({a}, out, [a, out, n]() mutable {
      const auto x = CVecMap(a.data().data(), n).array();
      const Eigen::ArrayXf s = 1.0f / (1.0f + (-x).exp());
      VecMap(a.grad_mut().data(), n).array() +=
          CVecMap(out.grad().data(), n).array() * s * (1.0f + x * (1.0f - s));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor mse_reduce(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_reduce");
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mse_reduce: empty input");
  auto ad = a.data();
  auto bd = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(ad[i]) - bd[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, n]() mutable {
      const float g = out.grad()[0] * 2.0f / static_cast<float>(n);
      auto ad = a.data();
      auto bd = b.data();
      if (a.tracked()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * (ad[i] - bd[i]);
      }
      if (b.tracked()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (ad[i] - bd[i]);
      }
    });
  }
  return out;
}

Tensor mae_reduce(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mae_reduce");
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mae_reduce: empty input");
  auto ad = a.data();
  auto bd = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(ad[i]) - bd[i]);
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, n]() mutable {
      const float g = out.grad()[0] / static_cast<float>(n);
      auto ad = a.data();
      auto bd = b.data();
      auto sign = [](float d) { return d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f); };
      if (a.tracked()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * sign(ad[i] - bd[i]);
      }
      if (b.tracked()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g * sign(ad[i] - bd[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (auto* tape = recording({&a})) {
    mark_tracked(out);
    tape->record({a}, out, [a, out]() mutable {
      const float g = out.grad()[0];
      for (auto& v : a.grad_mut()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw DimensionError("mean: empty input");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

/// Shared normalization kernel. Elements of sample b, group g are the
/// contiguous run [b*per_sample + g*group_size, +group_size); the affine
/// parameter for element e within a sample is param_index(e).
template <typename ParamIndex>
Tensor normalize_groups(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                        float eps, ParamIndex param_index) {
  const std::size_t batch = x.dim(0);
  const std::size_t per = x.per_sample();
  const std::size_t group_size = per / groups;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<float>>(batch * groups);
  auto xd = x.data();
  auto o = out.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = b * per + g * group_size;
      double m = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) m += xd[base + i];
      m /= static_cast<double>(group_size);
      double var = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) {
        const double d = xd[base + i] - m;
        var += d * d;
      }
      var /= static_cast<double>(group_size);
      const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
      (*rstd)[b * groups + g] = r;
      for (std::size_t i = 0; i < group_size; ++i) {
        const float xh = static_cast<float>(xd[base + i] - m) * r;
        (*xhat)[base + i] = xh;
        const std::size_t p = param_index(g * group_size + i);
        o[base + i] = xh * gd[p] + bd[p];
      }
    }
  }
  if (auto* tape = recording({&x, &gamma, &beta})) {
    mark_tracked(out);
    tape->record({x, gamma, beta}, out,
                 [x, gamma, beta, out, xhat, rstd, batch, per, groups, group_size, param_index]() mutable {
                   auto g = out.grad();
                   auto gd = gamma.data();
                   if (gamma.tracked() || beta.tracked()) {
                     auto gg = gamma.tracked() ? gamma.grad_mut() : std::span<float>{};
                     auto gb = beta.tracked() ? beta.grad_mut() : std::span<float>{};
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t e = 0; e < per; ++e) {
                         const std::size_t p = param_index(e);
                         if (!gg.empty()) gg[p] += g[b * per + e] * (*xhat)[b * per + e];
                         if (!gb.empty()) gb[p] += g[b * per + e];
                       }
                     }
                   }
                   if (!x.tracked()) return;
                   auto gx = x.grad_mut();
                   std::vector<float> dxhat(group_size);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t grp = 0; grp < groups; ++grp) {
                       const std::size_t base = b * per + grp * group_size;
                       double mean_d = 0.0, mean_dx = 0.0;
                       for (std::size_t i = 0; i < group_size; ++i) {
                         dxhat[i] = g[base + i] * gd[param_index(grp * group_size + i)];
                         mean_d += dxhat[i];
                         mean_dx += static_cast<double>(dxhat[i]) * (*xhat)[base + i];
                       }
                       mean_d /= static_cast<double>(group_size);
                       mean_dx /= static_cast<double>(group_size);
                       const float r = (*rstd)[b * groups + grp];
                       for (std::size_t i = 0; i < group_size; ++i) {
                         gx[base + i] += r * static_cast<float>(dxhat[i] - mean_d - (*xhat)[base + i] * mean_dx);
                       }
                     }
                   }
                 });
  }
  return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_defined(x, "layer_norm");
  if (x.rank() < 2) throw DimensionError("layer_norm: expected a batched tensor");
  const Shape feature(x.shape().begin() + 1, x.shape().end());
  if (gamma.shape() != feature || beta.shape() != feature) {
    throw DimensionError("layer_norm: affine shape must be " + shape_str(feature));
  }
  return normalize_groups(x, gamma, beta, 1, eps, [](std::size_t e) { return e; });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, float eps) {
  require_rank(x, 4, "group_norm");
  const std::size_t channels = x.dim(1);
  if (groups == 0 || channels % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("group_norm: affine shape must be [C]");
  }
  const std::size_t hw = x.dim(2) * x.dim(3);
  return normalize_groups(x, gamma, beta, groups, eps, [hw](std::size_t e) { return e / hw; });
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, hout, wout;
  int stride;
};

// Output columns [lo, hi) whose input column ox * stride + kx - 1 lies inside the image.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, int kx) {
  std::size_t lo = 0, hi = g.wout;
  while (lo < hi && static_cast<long>(lo) * g.stride + kx - 1 < 0) ++lo;
  while (hi > lo && static_cast<long>(hi - 1) * g.stride + kx - 1 >= static_cast<long>(g.w)) --hi;
  return {lo, hi};
}

// Unfolds one sample into rows of `ld` floats (row r = channel r / 9, tap r % 9).
void im2col(const float* x, const ConvGeometry& g, float* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    const float* plane = x + c * g.h * g.w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * ld;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          float* dst = row + oy * g.wout;
          const long iy = static_cast<long>(oy) * g.stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wout, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * g.w + kx - 1;
          std::fill(dst, dst + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[2 * ox];
          }
          std::fill(dst + hi, dst + g.wout, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvGeometry& g, float* dx, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    float* plane = dx + c * g.h * g.w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * ld;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const float* src = row + oy * g.wout;
          float* dst = plane + static_cast<std::size_t>(iy) * g.w + kx - 1;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * static_cast<std::size_t>(g.stride)] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride) {
  require_defined(x, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (x.rank() == 3) {
    return conv2d(x.reshape({1, x.dim(0), x.dim(1), x.dim(2)}), kernel, stride)
        .reshape({kernel.dim(0), (x.dim(1) + stride - 1) / stride, (x.dim(2) + stride - 1) / stride});
  }
  require_rank(x, 4, "conv2d");
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3) throw DimensionError("conv2d: kernel must be 3x3");
  const std::size_t batch = x.dim(0);
  const std::size_t cout = kernel.dim(0);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), 0, 0, stride};
  if (kernel.dim(1) != g.cin) {
    throw DimensionError("conv2d: input has " + std::to_string(g.cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  g.hout = (g.h + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
  g.wout = (g.w + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
  const std::size_t hw_out = g.hout * g.wout;
  const std::size_t kdim = g.cin * 9;
  Tensor out = Tensor::zeros({batch, cout, g.hout, g.wout});
  // Samples are unfolded side by side in chunks of about kChunkColumns so
  // each GEMM is wide but its operands stay cache-sized.
  constexpr std::size_t kChunkColumns = 1024;
  const std::size_t chunk = std::max<std::size_t>(1, kChunkColumns / hw_out);
  const std::size_t in_size = g.cin * g.h * g.w;
  {
    std::vector<float> cols(kdim * chunk * hw_out);
    MatR y;
    CMapR k(kernel.data().data(), cout, kdim);
    for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, batch - b0);
      const std::size_t ld = nb * hw_out;
      for (std::size_t b = 0; b < nb; ++b) im2col(x.data().data() + (b0 + b) * in_size, g, cols.data() + b * hw_out, ld);
      y.noalias() = k * CMapR(cols.data(), kdim, ld);
      for (std::size_t b = 0; b < nb; ++b) {
        MapR(out.data().data() + (b0 + b) * cout * hw_out, cout, hw_out) =
            y.middleCols(static_cast<long>(b * hw_out), static_cast<long>(hw_out));
      }
    }
  }
  if (auto* tape = recording({&x, &kernel})) {
    mark_tracked(out);
    tape->record({x, kernel}, out, [x, kernel, out, g, batch, cout, hw_out, kdim, chunk, in_size]() mutable {
      std::vector<float> cols(kdim * chunk * hw_out);
      std::vector<float> dcols(kdim * chunk * hw_out);
      MatR gout;
      CMapR k(kernel.data().data(), cout, kdim);
      for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
        const std::size_t nb = std::min(chunk, batch - b0);
        const std::size_t ld = nb * hw_out;
        gout.resize(static_cast<long>(cout), static_cast<long>(ld));
        for (std::size_t b = 0; b < nb; ++b) {
          gout.middleCols(static_cast<long>(b * hw_out), static_cast<long>(hw_out)) =
              CMapR(out.grad().data() + (b0 + b) * cout * hw_out, cout, hw_out);
        }
        if (kernel.tracked()) {
          for (std::size_t b = 0; b < nb; ++b) im2col(x.data().data() + (b0 + b) * in_size, g, cols.data() + b * hw_out, ld);
          MapR(kernel.grad_mut().data(), cout, kdim).noalias() += gout * CMapR(cols.data(), kdim, ld).transpose();
        }
        if (x.tracked()) {
          MapR(dcols.data(), kdim, ld).noalias() = k.transpose() * gout;
          for (std::size_t b = 0; b < nb; ++b) {
            col2im_add(dcols.data() + b * hw_out, g, x.grad_mut().data() + (b0 + b) * in_size, ld);
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.dim(0) != channels) throw DimensionError("add_channel_bias: bias must be [C]");
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t j = (b * channels + c) * hw + i;
        o[j] = xd[j] + bd[c];
      }
  if (auto* tape = recording({&x, &bias})) {
    mark_tracked(out);
    tape->record({x, bias}, out, [x, bias, out, batch, channels, hw]() mutable {
      auto g = out.grad();
      if (x.tracked()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.tracked()) {
        auto gb = bias.grad_mut();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            float acc = 0.0f;
            for (std::size_t i = 0; i < hw; ++i) acc += g[(b * channels + c) * hw + i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

Tensor add_channel_embedding(const Tensor& x, const Tensor& e) {
  require_rank(x, 4, "add_channel_embedding");
  require_rank(e, 2, "add_channel_embedding");
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (e.dim(0) != batch || e.dim(1) != channels) {
    throw DimensionError("add_channel_embedding: embedding must be [B, C], got " + shape_str(e.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xd = x.data();
  auto ed = e.data();
  for (std::size_t bc = 0; bc < batch * channels; ++bc)
    for (std::size_t i = 0; i < hw; ++i) o[bc * hw + i] = xd[bc * hw + i] + ed[bc];
  if (auto* tape = recording({&x, &e})) {
    mark_tracked(out);
    tape->record({x, e}, out, [x, e, out, batch, channels, hw]() mutable {
      auto g = out.grad();
      if (x.tracked()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (e.tracked()) {
        auto ge = e.grad_mut();
        for (std::size_t bc = 0; bc < batch * channels; ++bc) {
          float acc = 0.0f;
          for (std::size_t i = 0; i < hw; ++i) acc += g[bc * hw + i];
          ge[bc] += acc;
        }
      }
    });
  }
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), 2 * h, 2 * w});
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        o[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
  if (auto* tape = recording({&x})) {
    mark_tracked(out);
    tape->record({x}, out, [x, out, bc, h, w]() mutable {
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx)
            gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
    });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2)) {
    throw DimensionError("concat: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  const std::size_t batch = a.dim(0), na = a.per_sample(), nb = b.per_sample();
  Tensor out = Tensor::zeros(shape);
  auto o = out.data();
  for (std::size_t i = 0; i < batch; ++i) {
    std::copy_n(a.data().begin() + static_cast<long>(i * na), na, o.begin() + static_cast<long>(i * (na + nb)));
    std::copy_n(b.data().begin() + static_cast<long>(i * nb), nb, o.begin() + static_cast<long>(i * (na + nb) + na));
  }
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, batch, na, nb]() mutable {
      auto g = out.grad();
      if (a.tracked()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * (na + nb) + j];
      }
      if (b.tracked()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * (na + nb) + na + j];
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> indices) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  Tensor out = Tensor::zeros({idx.size(), width});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw ContractError("embedding: index " + std::to_string(idx[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<long>(static_cast<std::size_t>(idx[i]) * width), width,
                out.data().begin() + static_cast<long>(i * width));
  }
  if (auto* tape = recording({&table})) {
    mark_tracked(out);
    tape->record({table}, out, [table, out, idx, width]() mutable {
      auto g = out.grad();
      auto gt = table.grad_mut();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) gt[static_cast<std::size_t>(idx[i]) * width + j] += g[i * width + j];
    });
  }
  return out;
}

Tensor lincomb_rows(const Tensor& a, std::span<const float> ca, const Tensor& b, std::span<const float> cb) {
  require_same_shape(a, b, "lincomb_rows");
  if (a.rank() == 0 || ca.size() != a.dim(0) || cb.size() != a.dim(0)) {
    throw DimensionError("lincomb_rows: need one coefficient per leading index");
  }
  const std::size_t rows = a.dim(0), per = a.per_sample();
  std::vector<float> ka(ca.begin(), ca.end()), kb(cb.begin(), cb.end());
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < per; ++j) o[r * per + j] = ka[r] * ad[r * per + j] + kb[r] * bd[r * per + j];
  if (auto* tape = recording({&a, &b})) {
    mark_tracked(out);
    tape->record({a, b}, out, [a, b, out, ka, kb, rows, per]() mutable {
      auto g = out.grad();
      if (a.tracked()) {
        auto ga = a.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < per; ++j) ga[r * per + j] += ka[r] * g[r * per + j];
      }
      if (b.tracked()) {
        auto gb = b.grad_mut();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < per; ++j) gb[r * per + j] += kb[r] * g[r * per + j];
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& a, std::span<const float> c) {
  require_defined(a, "scale_rows");
  if (a.rank() == 0 || c.size() != a.dim(0)) throw DimensionError("scale_rows: need one coefficient per row");
  const std::size_t rows = a.dim(0), per = a.per_sample();
  std::vector<float> k(c.begin(), c.end());
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < per; ++j) o[r * per + j] = k[r] * ad[r * per + j];
  if (auto* tape = recording({&a})) {
    mark_tracked(out);
    tape->record({a}, out, [a, out, k, rows, per]() mutable {
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < per; ++j) ga[r * per + j] += k[r] * g[r * per + j];
    });
  }
  return out;
}

}  // namespace splab
