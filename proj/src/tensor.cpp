#include "cosod/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cosod/rng.hpp"

namespace cosod {

namespace {

thread_local int no_grad_depth = 0;

template <typename Scalar>
using StoragePtr = std::shared_ptr<TensorStorage<Scalar>>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
bool tracks(std::initializer_list<const Tensor<Scalar>*> inputs) {
  if (!Tape<Scalar>::enabled()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Builds the output tensor and, when any input is tracked, records its
// backward rule on the tape.
template <typename Scalar>
Tensor<Scalar> emit(Shape shape, std::vector<Scalar> data, bool track,
                    std::function<void(const std::vector<Scalar>&)> rule) {
  auto out = std::make_shared<TensorStorage<Scalar>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  out->requires_grad = track;
  if (track) Tape<Scalar>::current().record({out, std::move(rule)});
  return Tensor<Scalar>(std::move(out));
}

template <typename Scalar>
void require_defined(const Tensor<Scalar>& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  return axis;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Right operand broadcasts when it is a single element or a trailing suffix.
template <typename Scalar>
std::size_t broadcast_period(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (b.numel() == 1) return 1;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
    return b.numel();
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " +
                   shape_str(sb));
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename Scalar>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinaryKind kind,
                      const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  const std::size_t period = broadcast_period(a, b, name);
  const std::size_t n = a.numel();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<Scalar> out(n);
  switch (kind) {
    case BinaryKind::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % period];
      break;
    case BinaryKind::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % period];
      break;
    case BinaryKind::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % period];
      break;
    case BinaryKind::kDiv:
      for (std::size_t i = 0; i < period; ++i)
        if (bv[i] == Scalar(0)) throw ComputationError("div: division by zero");
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[i % period];
      break;
  }
  const bool track = tracks<Scalar>({&a, &b});
  StoragePtr<Scalar> sa = a.storage(), sb = b.storage();
  return emit<Scalar>(a.shape(), std::move(out), track,
                      [sa, sb, period, kind](const std::vector<Scalar>& g) {
                        const std::size_t n = g.size();
                        if (sa->requires_grad) {
                          auto& ga = sa->grad_buffer();
                          switch (kind) {
                            case BinaryKind::kAdd:
                            case BinaryKind::kSub:
                              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                              break;
                            case BinaryKind::kMul:
                              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * sb->data[i % period];
                              break;
                            case BinaryKind::kDiv:
                              for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / sb->data[i % period];
                              break;
                          }
                        }
                        if (sb->requires_grad) {
                          auto& gb = sb->grad_buffer();
                          switch (kind) {
                            case BinaryKind::kAdd:
                              for (std::size_t i = 0; i < n; ++i) gb[i % period] += g[i];
                              break;
                            case BinaryKind::kSub:
                              for (std::size_t i = 0; i < n; ++i) gb[i % period] -= g[i];
                              break;
                            case BinaryKind::kMul:
                              for (std::size_t i = 0; i < n; ++i) gb[i % period] += g[i] * sa->data[i];
                              break;
                            case BinaryKind::kDiv:
                              for (std::size_t i = 0; i < n; ++i) {
                                const Scalar bi = sb->data[i % period];
                                gb[i % period] -= g[i] * sa->data[i] / (bi * bi);
                              }
                              break;
                          }
                        }
                      });
}

// Unary op whose derivative is a function of (input, output).
template <typename Scalar, typename Forward, typename Deriv>
Tensor<Scalar> unary(const Tensor<Scalar>& a, const char* name, Forward fwd, Deriv deriv) {
  require_defined(a, name);
  const auto av = a.data();
  std::vector<Scalar> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  std::vector<Scalar> kept = track ? out : std::vector<Scalar>{};
  return emit<Scalar>(a.shape(), std::move(out), track,
                      [sa, kept = std::move(kept), deriv](const std::vector<Scalar>& g) {
                        auto& ga = sa->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          ga[i] += g[i] * deriv(sa->data[i], kept[i]);
                      });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
  for (int d : shape)
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape));
}
}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape) {
  return constant(shape, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::constant(const Shape& shape, Scalar value) {
  validate_shape(shape);
  return from_data(shape, std::vector<Scalar>(shape_numel(shape), value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::uniform(const Shape& shape, Scalar lo, Scalar hi, std::uint64_t seed) {
  validate_shape(shape);
  Rng rng(seed);
  std::vector<Scalar> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return from_data(shape, std::move(data));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_data(const Shape& shape, std::vector<Scalar> data) {
  validate_shape(shape);
  if (data.size() != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  auto s = std::make_shared<TensorStorage<Scalar>>();
  s->shape = shape;
  s->data = std::move(data);
  return Tensor(std::move(s));
}

template <typename Scalar>
int Tensor<Scalar>::dim(int axis) const {
  return storage_->shape[normalize_axis(axis, rank(), "dim")];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return from_data(shape(), storage_->data);
}

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
Tape<Scalar>& Tape<Scalar>::current() {
  thread_local Tape<Scalar> tape;
  return tape;
}

template <typename Scalar>
bool Tape<Scalar>::enabled() {
  return no_grad_depth == 0;
}

template <typename Scalar>
void Tape<Scalar>::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
  nodes_.clear();
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1)
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw UsageError("backward: loss was not produced through recorded operations");
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw ComputationError("backward: non-finite loss");
  loss.storage()->accumulate_grad(0, Scalar(1));
  Tape<Scalar>::current().run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinaryKind::kDiv, "div");
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  return unary(a, "add_scalar", [c](Scalar x) { return x + c; },
               [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, Scalar c) {
  return unary(a, "mul_scalar", [c](Scalar x) { return x * c; }, [c](Scalar, Scalar) { return c; });
}

template <typename Scalar>
Tensor<Scalar> rdiv_scalar(Scalar c, const Tensor<Scalar>& a) {
  for (Scalar v : a.data())
    if (v == Scalar(0)) throw ComputationError("rdiv_scalar: division by zero");
  return unary(a, "rdiv_scalar", [c](Scalar x) { return c / x; },
               [](Scalar x, Scalar y) { return -y / x; });
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& a) {
  return mul_scalar(a, Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return unary(a, "relu", [](Scalar x) { return x > Scalar(0) ? x : Scalar(0); },
               [](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  return unary(
      a, "sigmoid",
      [](Scalar x) {
        if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
        const Scalar e = std::exp(x);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  return unary(a, "exp", [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  for (Scalar v : a.data())
    if (!(v > Scalar(0))) throw ComputationError("log: non-positive argument");
  return unary(a, "log", [](Scalar x) { return std::log(x); },
               [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& a) {
  for (Scalar v : a.data())
    if (v < Scalar(0)) throw ComputationError("sqrt: negative argument");
  return unary(a, "sqrt", [](Scalar x) { return std::sqrt(x); },
               [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return unary(a, "square", [](Scalar x) { return x * x; },
               [](Scalar x, Scalar) { return Scalar(2) * x; });
}

template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& a, Scalar lo, Scalar hi) {
  return unary(a, "clamp", [lo, hi](Scalar x) { return std::clamp(x, lo, hi); },
               [lo, hi](Scalar x, Scalar) { return (x >= lo && x <= hi) ? Scalar(1) : Scalar(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<Scalar> out(static_cast<std::size_t>(m) * n);
  MatMap<Scalar>(out.data(), m, n).noalias() =
      ConstMatMap<Scalar>(a.data().data(), m, k) * ConstMatMap<Scalar>(b.data().data(), k, n);
  const bool track = tracks<Scalar>({&a, &b});
  StoragePtr<Scalar> sa = a.storage(), sb = b.storage();
  return emit<Scalar>({m, n}, std::move(out), track, [sa, sb, m, k, n](const std::vector<Scalar>& g) {
    ConstMatMap<Scalar> gm(g.data(), m, n);
    if (sa->requires_grad)
      MatMap<Scalar>(sa->grad_buffer().data(), m, k).noalias() +=
          gm * ConstMatMap<Scalar>(sb->data.data(), k, n).transpose();
    if (sb->requires_grad)
      MatMap<Scalar>(sb->grad_buffer().data(), k, n).noalias() +=
          ConstMatMap<Scalar>(sa->data.data(), m, k).transpose() * gm;
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 operand required");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<Scalar> out(a.numel());
  MatMap<Scalar>(out.data(), n, m) = ConstMatMap<Scalar>(a.data().data(), m, n).transpose();
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>({n, m}, std::move(out), track, [sa, m, n](const std::vector<Scalar>& g) {
    MatMap<Scalar>(sa->grad_buffer().data(), m, n) += ConstMatMap<Scalar>(g.data(), n, m).transpose();
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, const Shape& shape) {
  require_defined(a, "reshape");
  validate_shape(shape);
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>(shape, std::move(out), track, [sa](const std::vector<Scalar>& g) {
    auto& ga = sa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& ref = parts.front().shape();
  axis = normalize_axis(axis, static_cast<int>(ref.size()), "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(ref.size()))
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " +
                         shape_str(p.shape()));
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit whole = split_axis(out_shape, axis);
  std::vector<Scalar> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  bool track = false;
  std::vector<StoragePtr<Scalar>> storages;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto pv = p.data();
    for (std::size_t o = 0; o < whole.outer; ++o)
      std::copy_n(pv.begin() + o * len * whole.inner, len * whole.inner,
                  out.begin() + (o * whole.len + offset) * whole.inner);
    offsets.push_back(offset);
    offset += len;
    track = track || tracks<Scalar>({&p});
    storages.push_back(p.storage());
  }
  return emit<Scalar>(out_shape, std::move(out), track,
                      [storages, offsets, whole](const std::vector<Scalar>& g) {
                        for (std::size_t k = 0; k < storages.size(); ++k) {
                          const auto& s = storages[k];
                          if (!s->requires_grad) continue;
                          auto& gs = s->grad_buffer();
                          const std::size_t len = gs.size() / (whole.outer * whole.inner);
                          for (std::size_t o = 0; o < whole.outer; ++o) {
                            const Scalar* src = g.data() + (o * whole.len + offsets[k]) * whole.inner;
                            Scalar* dst = gs.data() + o * len * whole.inner;
                            for (std::size_t i = 0; i < len * whole.inner; ++i) dst[i] += src[i];
                          }
                        }
                      });
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, int axis, int start, int length) {
  require_defined(a, "slice");
  axis = normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 1 || start + length > a.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of size " +
                     std::to_string(a.shape()[axis]));
  const AxisSplit whole = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<Scalar> out(shape_numel(out_shape));
  const auto av = a.data();
  const std::size_t run = static_cast<std::size_t>(length) * whole.inner;
  for (std::size_t o = 0; o < whole.outer; ++o)
    std::copy_n(av.begin() + (o * whole.len + start) * whole.inner, run, out.begin() + o * run);
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>(out_shape, std::move(out), track,
                      [sa, whole, start, run](const std::vector<Scalar>& g) {
                        auto& ga = sa->grad_buffer();
                        for (std::size_t o = 0; o < whole.outer; ++o) {
                          Scalar* dst = ga.data() + (o * whole.len + start) * whole.inner;
                          const Scalar* src = g.data() + o * run;
                          for (std::size_t i = 0; i < run; ++i) dst[i] += src[i];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  require_defined(a, "sum");
  Scalar total(0);
  for (Scalar v : a.data()) total += v;
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>({1}, {total}, track, [sa](const std::vector<Scalar>& g) {
    for (auto& v : sa->grad_buffer()) v += g[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return mul_scalar(sum(a), Scalar(1) / static_cast<Scalar>(a.numel()));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a, int axis) {
  require_defined(a, "sum");
  axis = normalize_axis(axis, a.rank(), "sum");
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<Scalar> out(s.outer * s.inner, Scalar(0));
  const auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += av[(o * s.len + l) * s.inner + i];
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>(out_shape, std::move(out), track, [sa, s](const std::vector<Scalar>& g) {
    auto& ga = sa->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a, int axis) {
  const int ax = normalize_axis(axis, a.rank(), "mean");
  return mul_scalar(sum(a, ax), Scalar(1) / static_cast<Scalar>(a.shape()[ax]));
}

template <typename Scalar>
Tensor<Scalar> logsumexp(const Tensor<Scalar>& a) {
  require_defined(a, "logsumexp");
  const auto av = a.data();
  const Scalar mx = *std::max_element(av.begin(), av.end());
  Scalar acc(0);
  for (Scalar v : av) acc += std::exp(v - mx);
  const Scalar lse = mx + std::log(acc);
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  return emit<Scalar>({1}, {lse}, track, [sa, lse](const std::vector<Scalar>& g) {
    auto& ga = sa->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * std::exp(sa->data[i] - lse);
  });
}

// ---------------------------------------------------------------------------
// Neural-network primitives

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, int axis) {
  require_defined(a, "softmax");
  axis = normalize_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_axis(a.shape(), axis);
  const auto av = a.data();
  std::vector<Scalar> out(a.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      Scalar mx = av[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      Scalar total(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const Scalar e = std::exp(av[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  const bool track = tracks<Scalar>({&a});
  StoragePtr<Scalar> sa = a.storage();
  std::vector<Scalar> y = track ? out : std::vector<Scalar>{};
  return emit<Scalar>(a.shape(), std::move(out), track,
                      [sa, s, y = std::move(y)](const std::vector<Scalar>& g) {
                        auto& ga = sa->grad_buffer();
                        for (std::size_t o = 0; o < s.outer; ++o)
                          for (std::size_t i = 0; i < s.inner; ++i) {
                            const std::size_t base = o * s.len * s.inner + i;
                            Scalar dot(0);
                            for (std::size_t l = 0; l < s.len; ++l)
                              dot += g[base + l * s.inner] * y[base + l * s.inner];
                            for (std::size_t l = 0; l < s.len; ++l) {
                              const std::size_t k = base + l * s.inner;
                              ga[k] += y[k] * (g[k] - dot);
                            }
                          }
                      });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps) {
  require_defined(x, "layer_norm");
  require_defined(gain, "layer_norm");
  require_defined(bias, "layer_norm");
  const int d = x.shape().back();
  if (gain.numel() != static_cast<std::size_t>(d) || bias.numel() != static_cast<std::size_t>(d))
    throw ShapeError("layer_norm: gain/bias width does not match last dim " + std::to_string(d));
  if (!(eps > Scalar(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<Scalar> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data() + r * d;
    Scalar mu(0);
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<Scalar>(d);
    Scalar var(0);
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Scalar>(d);
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      const std::size_t k = r * d + j;
      xhat[k] = (row[j] - mu) * rstd[r];
      out[k] = xhat[k] * gv[j] + bv[j];
    }
  }
  const bool track = tracks<Scalar>({&x, &gain, &bias});
  StoragePtr<Scalar> sx = x.storage(), sg = gain.storage(), sb = bias.storage();
  if (!track) {
    xhat.clear();
    rstd.clear();
  }
  return emit<Scalar>(x.shape(), std::move(out), track,
                      [sx, sg, sb, d, rows, xhat = std::move(xhat),
                       rstd = std::move(rstd)](const std::vector<Scalar>& g) {
                        if (sg->requires_grad || sb->requires_grad) {
                          auto& gg = sg->grad_buffer();
                          auto& gb = sb->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (int j = 0; j < d; ++j) {
                              gg[j] += g[r * d + j] * xhat[r * d + j];
                              gb[j] += g[r * d + j];
                            }
                        }
                        if (!sx->requires_grad) return;
                        auto& gx = sx->grad_buffer();
                        std::vector<Scalar> dxhat(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          Scalar m1(0), m2(0);
                          for (int j = 0; j < d; ++j) {
                            dxhat[j] = g[r * d + j] * sg->data[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * d + j];
                          }
                          m1 /= static_cast<Scalar>(d);
                          m2 /= static_cast<Scalar>(d);
                          for (int j = 0; j < d; ++j)
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                      });
}

template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Scalar eps) {
  require_defined(x, "l2_normalize");
  const int d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<Scalar> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar ss(0);
    for (int j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(ss);
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / (norms[r] + eps);
  }
  const bool track = tracks<Scalar>({&x});
  StoragePtr<Scalar> sx = x.storage();
  return emit<Scalar>(x.shape(), std::move(out), track,
                      [sx, d, rows, eps, norms = std::move(norms)](const std::vector<Scalar>& g) {
                        auto& gx = sx->grad_buffer();
                        for (std::size_t r = 0; r < rows; ++r) {
                          const Scalar n = norms[r];
                          const Scalar s = n + eps;
                          const Scalar* xr = sx->data.data() + r * d;
                          Scalar xg(0);
                          for (int j = 0; j < d; ++j) xg += xr[j] * g[r * d + j];
                          const Scalar coef = n > Scalar(0) ? xg / (s * s * n) : Scalar(0);
                          for (int j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / s - xr[j] * coef;
                        }
                      });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias,
                      int stride, int pad) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d: expected x [C,H,W] and w [O,C,kH,kW], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d: bias width does not match output channels");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const int kdim = cin * kh * kw;
  const int pix = ho * wo;

  // im2col: rows index (c, ky, kx), columns index output pixels.
  std::vector<Scalar> cols(static_cast<std::size_t>(kdim) * pix, Scalar(0));
  const auto xv = x.data();
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        Scalar* row = cols.data() + static_cast<std::size_t>((c * kh + ky) * kw + kx) * pix;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const Scalar* src = xv.data() + (static_cast<std::size_t>(c) * h + iy) * wd;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < wd) row[oy * wo + ox] = src[ix];
          }
        }
      }

  std::vector<Scalar> out(static_cast<std::size_t>(cout) * pix);
  MatMap<Scalar> om(out.data(), cout, pix);
  ConstMatMap<Scalar> colm(cols.data(), kdim, pix);
  om.noalias() = ConstMatMap<Scalar>(w.data().data(), cout, kdim) * colm;
  if (bias.defined()) {
    const auto bv = bias.data();
    for (int o = 0; o < cout; ++o) om.row(o).array() += bv[o];
  }

  const bool track = tracks<Scalar>({&x, &w, &bias});
  StoragePtr<Scalar> sx = x.storage(), sw = w.storage();
  StoragePtr<Scalar> sb = bias.defined() ? bias.storage() : nullptr;
  if (!track) cols.clear();
  return emit<Scalar>(
      {cout, ho, wo}, std::move(out), track,
      [sx, sw, sb, cols = std::move(cols), cin, h, wd, cout, kh, kw, ho, wo, kdim, pix, stride,
       pad](const std::vector<Scalar>& g) {
        ConstMatMap<Scalar> gm(g.data(), cout, pix);
        if (sb && sb->requires_grad) {
          auto& gb = sb->grad_buffer();
          for (int o = 0; o < cout; ++o) gb[o] += gm.row(o).sum();
        }
        if (sw->requires_grad)
          MatMap<Scalar>(sw->grad_buffer().data(), cout, kdim).noalias() +=
              gm * ConstMatMap<Scalar>(cols.data(), kdim, pix).transpose();
        if (sx->requires_grad) {
          RowMatrix<Scalar> dcols = ConstMatMap<Scalar>(sw->data.data(), cout, kdim).transpose() * gm;
          auto& gx = sx->grad_buffer();
          for (int c = 0; c < cin; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const Scalar* row = dcols.data() + static_cast<std::size_t>((c * kh + ky) * kw + kx) * pix;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  Scalar* dst = gx.data() + (static_cast<std::size_t>(c) * h + iy) * wd;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < wd) dst[ix] += row[oy * wo + ox];
                  }
                }
              }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x) {
  require_defined(x, "maxpool2");
  if (x.rank() != 3) throw ShapeError("maxpool2: expected [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2)
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  std::vector<Scalar> out(static_cast<std::size_t>(c) * ho * wo);
  std::vector<std::uint32_t> arg(out.size());
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * oy) * w + 2 * ox;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t k = (static_cast<std::size_t>(ch) * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xv[k] > xv[best]) best = k;
          }
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + oy) * wo + ox;
        out[o] = xv[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  const bool track = tracks<Scalar>({&x});
  StoragePtr<Scalar> sx = x.storage();
  return emit<Scalar>({c, ho, wo}, std::move(out), track,
                      [sx, arg = std::move(arg)](const std::vector<Scalar>& g) {
                        auto& gx = sx->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                      });
}

namespace {
struct Tap {
  int i0, i1;
  double frac;
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& x, int out_h, int out_w) {
  require_defined(x, "upsample_bilinear");
  if (x.rank() != 3) throw ShapeError("upsample_bilinear: expected [C,H,W]");
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear: output size must be positive");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  std::vector<Scalar> out(static_cast<std::size_t>(c) * out_h * out_w);
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const Scalar* src = xv.data() + static_cast<std::size_t>(ch) * h * w;
    Scalar* dst = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      const Scalar fy = static_cast<Scalar>(a.frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const Scalar fx = static_cast<Scalar>(b.frac);
        const Scalar top = src[a.i0 * w + b.i0] * (1 - fx) + src[a.i0 * w + b.i1] * fx;
        const Scalar bot = src[a.i1 * w + b.i0] * (1 - fx) + src[a.i1 * w + b.i1] * fx;
        dst[oy * out_w + ox] = top * (1 - fy) + bot * fy;
      }
    }
  }
  const bool track = tracks<Scalar>({&x});
  StoragePtr<Scalar> sx = x.storage();
  return emit<Scalar>({c, out_h, out_w}, std::move(out), track,
                      [sx, c, h, w, out_h, out_w, ty = std::move(ty),
                       tx = std::move(tx)](const std::vector<Scalar>& g) {
                        auto& gx = sx->grad_buffer();
                        for (int ch = 0; ch < c; ++ch) {
                          Scalar* dst = gx.data() + static_cast<std::size_t>(ch) * h * w;
                          const Scalar* src = g.data() + static_cast<std::size_t>(ch) * out_h * out_w;
                          for (int oy = 0; oy < out_h; ++oy) {
                            const Tap& a = ty[oy];
                            const Scalar fy = static_cast<Scalar>(a.frac);
                            for (int ox = 0; ox < out_w; ++ox) {
                              const Tap& b = tx[ox];
                              const Scalar fx = static_cast<Scalar>(b.frac);
                              const Scalar go = src[oy * out_w + ox];
                              dst[a.i0 * w + b.i0] += go * (1 - fy) * (1 - fx);
                              dst[a.i0 * w + b.i1] += go * (1 - fy) * fx;
                              dst[a.i1 * w + b.i0] += go * fy * (1 - fx);
                              dst[a.i1 * w + b.i1] += go * fy * fx;
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Explicit instantiations.

#define COSOD_INSTANTIATE(S)                                                                   \
  template class Tensor<S>;                                                                   \
  template class Tape<S>;                                                                     \
  template void backward<S>(const Tensor<S>&);                                                \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> div<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                                      \
  template Tensor<S> mul_scalar<S>(const Tensor<S>&, S);                                      \
  template Tensor<S> rdiv_scalar<S>(S, const Tensor<S>&);                                     \
  template Tensor<S> neg<S>(const Tensor<S>&);                                                \
  template Tensor<S> relu<S>(const Tensor<S>&);                                               \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                            \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                \
  template Tensor<S> log<S>(const Tensor<S>&);                                                \
  template Tensor<S> sqrt<S>(const Tensor<S>&);                                               \
  template Tensor<S> square<S>(const Tensor<S>&);                                             \
  template Tensor<S> clamp<S>(const Tensor<S>&, S, S);                                        \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                           \
  template Tensor<S> transpose<S>(const Tensor<S>&);                                          \
  template Tensor<S> reshape<S>(const Tensor<S>&, const Shape&);                              \
  template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);                           \
  template Tensor<S> slice<S>(const Tensor<S>&, int, int, int);                               \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                \
  template Tensor<S> mean<S>(const Tensor<S>&);                                               \
  template Tensor<S> sum<S>(const Tensor<S>&, int);                                           \
  template Tensor<S> mean<S>(const Tensor<S>&, int);                                          \
  template Tensor<S> logsumexp<S>(const Tensor<S>&);                                          \
  template Tensor<S> softmax<S>(const Tensor<S>&, int);                                       \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);  \
  template Tensor<S> l2_normalize<S>(const Tensor<S>&, S);                                    \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int); \
  template Tensor<S> maxpool2<S>(const Tensor<S>&);                                           \
  template Tensor<S> upsample_bilinear<S>(const Tensor<S>&, int, int);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
