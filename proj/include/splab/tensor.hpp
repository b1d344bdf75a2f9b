#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "splab/errors.hpp"
#include "splab/rng.hpp"

namespace splab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major f32 tensor handle. Copies share storage; use clone() for
/// an independent copy. Tensors produced by operations while a Tape is active
/// are "tracked" and receive gradients during Tape::backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng);
  static Tensor scalar(float value);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;
  /// Elements per leading-dimension slice.
  std::size_t per_sample() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  /// True when gradients propagate into this tensor (leaf with requires_grad,
  /// or a recorded intermediate).
  bool tracked() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  /// Gradient buffer, allocated as zeros on first access.
  std::span<float> grad_mut() const;
  void zero_grad();

  /// Untracked copy of the values.
  Tensor detach() const;
  /// Deep copy that keeps requires_grad but drops any gradient.
  Tensor clone() const;
  /// Copy of the same values with a different shape of equal size.
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  friend void mark_tracked(Tensor&);
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Operations record onto the
/// tape installed by a Tape::Scope on the current thread, and only when at
/// least one input is tracked.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  /// Installs a tape as the recording target for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  /// Populates gradients of every tracked tensor reachable from a scalar loss.
  /// Leaf gradients accumulate across calls until zero_grad().
  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();
  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

void backward(const Tensor& loss, Tape& tape);

/// Marks an op output as tracked; used by op implementations.
void mark_tracked(Tensor& t);

// ---------------------------------------------------------------------------
// Operations. Shapes must match exactly, except where a second operand may be
// broadcast over the leading (batch) dimension: b.shape == a.shape[1:].

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor silu(const Tensor& a);

/// x[B, in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Mean of (a - b)^2 over all elements.
Tensor mse_reduce(const Tensor& a, const Tensor& b);
/// Mean of |a - b| over all elements.
Tensor mae_reduce(const Tensor& a, const Tensor& b);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);

/// Normalizes each sample over all non-batch dims; gamma/beta have shape a.shape[1:].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
/// x[B, C, H, W]; statistics per (sample, group); gamma/beta have shape [C].
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

/// 3x3 convolution with padding 1. x is [C_in, H, W] or [B, C_in, H, W];
/// kernel is [C_out, C_in, 3, 3]. Output spatial size is ceil(H / stride).
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride);
/// x[B, C, H, W] + bias[C] broadcast over space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// x[B, C, H, W] + e[B, C] broadcast over space.
Tensor add_channel_embedding(const Tensor& x, const Tensor& e);
Tensor upsample_nearest2x(const Tensor& x);
/// Concatenates along axis 1; all other dims must agree.
Tensor concat(const Tensor& a, const Tensor& b);
/// Gathers rows of table[V, D] -> [indices.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> indices);

/// out_i = ca[i] * a_i + cb[i] * b_i where i indexes the leading dimension.
/// Either input may be untracked; the coefficients are constants.
Tensor lincomb_rows(const Tensor& a, std::span<const float> ca, const Tensor& b,
                    std::span<const float> cb);
/// out_i = c[i] * a_i
Tensor scale_rows(const Tensor& a, std::span<const float> c);

}  // namespace splab
