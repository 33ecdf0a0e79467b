#include "choir/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace choir {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void round_to_float(std::vector<double>& values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

thread_local Tape* current_tape = nullptr;

}  // namespace

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad, Dtype dtype)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  if (dtype == Dtype::f32) round_to_float(values);
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
  impl_->dtype = dtype;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank does not match " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("index out of range for " + shape_str(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad, impl_->dtype);
}

Tensor Tensor::to(Dtype dtype) const {
  auto values = impl_->data;
  return Tensor(impl_->shape, std::move(values), false, dtype);
}

Tensor make_result(Shape shape, std::vector<double> values, Dtype dtype) {
  auto impl = std::make_shared<TensorImpl>();
  if (dtype == Dtype::f32) round_to_float(values);
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->dtype = dtype;
  return Tensor(std::move(impl));
}

void Tape::record(std::string op, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward) {
  Entry entry;
  entry.op = std::move(op);
  entry.inputs.reserve(inputs.size());
  for (auto& t : inputs) entry.inputs.push_back(t.impl());
  entry.output = output.impl();
  entry.backward = std::move(backward);
  entries_.push_back(std::move(entry));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  // Intermediate gradients are allocated by the first op that writes them.
  for (auto& e : entries_) e.output->grad.clear();
  auto& seed = loss.impl()->grad;
  seed.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = it->output->grad;
    if (g.empty() || std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
    it->backward();
  }
  for (auto& e : entries_) {
    for (auto& in : e.inputs) {
      if (in->requires_grad && in->grad.size() != in->data.size()) in->grad.assign(in->data.size(), 0.0);
    }
  }
}

Tape* active_tape() { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }

TapeScope::~TapeScope() { current_tape = previous_; }

void backward(const Tensor& loss) {
  if (!current_tape) throw std::logic_error("backward called without an active tape");
  current_tape->backward(loss);
}

}  // namespace choir
