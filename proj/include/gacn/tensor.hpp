#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gacn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Thrown when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major float64 array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, so a weight held by a
/// WeightStore and the same weight captured by a Tape entry are one object.
/// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return s_->values.size(); }

  std::span<double> values() { return s_->values; }
  std::span<const double> values() const { return s_->values; }
  double& operator[](std::size_t i) { return s_->values[i]; }
  double operator[](std::size_t i) const { return s_->values[i]; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, zero-allocated on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  /// Writable gradient buffer through a const handle; used by backward rules,
  /// which only ever accumulate into it.
  std::span<double> grad_accum() const;
  void zero_grad();

  /// Deep copy of the values; the copy has no gradient and is untracked.
  Tensor clone() const;
  bool shares_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of backward rules for one forward pass.
///
/// Operations receive a `Tape*`; a null tape (or inputs that do not require
/// gradients) records nothing, which is the inference path.
class Tape {
 public:
  void record(std::function<void()> backward_rule);

  /// Seeds d(loss)/d(loss) = 1 and replays every rule in reverse order.
  /// Leaf gradients accumulate, so several backward passes over separate
  /// tapes sum into the same weight gradients.
  void backward(Tensor& loss);

  std::size_t size() const { return rules_.size(); }
  void clear() { rules_.clear(); }

 private:
  std::vector<std::function<void()>> rules_;
};

/// True when `tape` is live and at least one input requires a gradient.
template <typename... Ts>
bool tracking(const Tape* tape, const Ts&... inputs) {
  return tape != nullptr && (inputs.requires_grad() || ...);
}

}  // namespace gacn
