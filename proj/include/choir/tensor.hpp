#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "choir/error.hpp"

namespace choir {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

enum class Dtype { f64, f32 };

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  Dtype dtype = Dtype::f64;
};

// Reference-counted handle to a dense row-major array of reals.
//
// Copies share storage. Operations in ops.hpp never mutate their inputs; they
// allocate a new output and, when a Tape is active on the calling thread and
// any input requires a gradient, record a backward rule on that tape.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false,
         Dtype dtype = Dtype::f64);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }
  Dtype dtype() const { return impl_->dtype; }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access; only meaningful for leaf tensors (parameters, inputs).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy without autodiff history.
  Tensor clone() const;
  // Converts storage precision. f32 rounds every value to the nearest float.
  Tensor to(Dtype dtype) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_result(Shape, std::vector<double>, Dtype);
};

// Allocates an op result; rounds values when dtype is f32.
Tensor make_result(Shape shape, std::vector<double> values, Dtype dtype);

// Define-by-run record of primitive operations for reverse-mode gradients.
//
// One tape per thread may be active at a time (see TapeScope). Entries are
// replayed in reverse record order by backward().
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backward);
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

Tape* active_tape();

// Activates a tape on the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Runs backward on the thread's active tape.
void backward(const Tensor& loss);

}  // namespace choir
