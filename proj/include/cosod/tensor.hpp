#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cosod {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ComputationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
struct TensorStorage {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;

  void accumulate_grad(std::size_t i, Scalar g) {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    grad[i] += g;
  }
  std::vector<Scalar>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    return grad;
  }
};

// Dense row-major tensor handle. Copies share storage; operations never
// mutate their inputs, so a produced tensor is immutable from the caller's
// point of view. Leaf parameters are updated in place by the optimizer.
template <typename Scalar>
class Tensor {
 public:
  using Storage = TensorStorage<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Storage> storage) : storage_(std::move(storage)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor constant(const Shape& shape, Scalar value);
  static Tensor uniform(const Shape& shape, Scalar lo, Scalar hi, std::uint64_t seed);
  static Tensor from_data(const Shape& shape, std::vector<Scalar> data);
  static Tensor scalar(Scalar value) { return constant({1}, value); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  int rank() const { return static_cast<int>(storage_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return storage_->data.size(); }

  std::span<const Scalar> data() const { return storage_->data; }
  std::span<Scalar> mutable_data() { return storage_->data; }
  const Scalar& operator[](std::size_t i) const { return storage_->data[i]; }
  Scalar item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    storage_->requires_grad = flag;
    return *this;
  }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const Scalar> grad() const { return storage_->grad; }
  std::span<Scalar> mutable_grad() { return storage_->grad_buffer(); }
  void clear_grad() { storage_->grad.clear(); }

  // Fresh storage with the same values and no autograd history.
  Tensor detach() const;
  // Same values converted to another scalar type.
  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(numel());
    for (std::size_t i = 0; i < numel(); ++i) out[i] = static_cast<Other>(storage_->data[i]);
    return Tensor<Other>::from_data(shape(), std::move(out));
  }

  const std::shared_ptr<Storage>& storage() const { return storage_; }

 private:
  std::shared_ptr<Storage> storage_;
};

// Ordered record of differentiable applications for one scalar type. Each
// thread owns its own tape.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    std::shared_ptr<TensorStorage<Scalar>> output;
    std::function<void(const std::vector<Scalar>&)> backward;
  };

  static Tape& current();

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  static bool enabled();

  // Replays the recorded nodes in reverse order, then clears the tape.
  void run_backward();

 private:
  std::vector<Node> nodes_;
};

// Disables recording for both scalar types while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

// ---------------------------------------------------------------------------
// Elementwise. Binary ops accept equal shapes, or a right operand that is a
// single element or whose shape is a trailing suffix of the left shape.

template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar> Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c);
template <typename Scalar> Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, Scalar c);
// c / a
template <typename Scalar> Tensor<Scalar> rdiv_scalar(Scalar c, const Tensor<Scalar>& a);

template <typename Scalar> Tensor<Scalar> neg(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> log(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> sqrt(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> square(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> clamp(const Tensor<Scalar>& a, Scalar lo, Scalar hi);

// ---------------------------------------------------------------------------
// Linear algebra and structure.

template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> transpose(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& a, const Shape& shape);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, int axis, int start, int length);

// ---------------------------------------------------------------------------
// Reductions.

template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a, int axis);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a, int axis);
// log Σ exp over every element, max-shifted.
template <typename Scalar> Tensor<Scalar> logsumexp(const Tensor<Scalar>& a);

// ---------------------------------------------------------------------------
// Neural-network primitives.

template <typename Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& a, int axis);

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5));

// Rows along the last axis scaled to unit L2 norm; eps is added to the norm.
template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-12));

// x: [C_in,H,W], w: [C_out,C_in,kH,kW], bias: [C_out] (may be undefined).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias,
                      int stride = 1, int pad = 0);

// 2x2 window, stride 2. Requires even H and W.
template <typename Scalar> Tensor<Scalar> maxpool2(const Tensor<Scalar>& x);

// Bilinear resize of [C,H,W] with half-pixel centers (align_corners = false).
template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& x, int out_h, int out_w);
template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& x, int factor) {
  return upsample_bilinear(x, x.dim(1) * factor, x.dim(2) * factor);
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return neg(a); }

}  // namespace cosod
