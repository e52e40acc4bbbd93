#include "bdw/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bdw {

namespace {
std::atomic<std::uint64_t> next_id{1};
thread_local bool recording_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("value count " + std::to_string(values.size()) + " does not match shape " +
                                shape_str(shape));
  }
  auto data = std::make_shared<detail::TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  data->requires_grad = requires_grad;
  data->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(data));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : data_->shape[0]; }

std::size_t Tensor::cols() const { return rank() == 1 ? numel() : numel() / data_->shape[0]; }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor with shape " + shape_str(shape()));
  return data_->values[0];
}

std::span<double> Tensor::grad_storage() const {
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() const {
  if (!data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), data_->values, requires_grad); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  auto data = std::make_shared<detail::TensorData>(*data_);
  data->shape = std::move(shape);
  data->grad.clear();
  data->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(data));
}

void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(op) + " produced a non-finite value");
  }
}

void Tape::record(std::string op, std::vector<std::uint64_t> input_ids, Tensor output,
                  std::function<void()> backward) {
  nodes_.push_back(TapeNode{std::move(op), std::move(input_ids), std::move(output), std::move(backward)});
}

void Tape::backward(Tensor& loss, bool retain) {
  if (loss.numel() != 1) throw std::logic_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward() on a tensor that is not on the tape");
  loss.grad_storage()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
  if (!retain) nodes_.clear();
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void backward(Tensor& loss) { Tape::active().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(recording_enabled) { recording_enabled = false; }

NoGradGuard::~NoGradGuard() { recording_enabled = previous_; }

bool grad_enabled() { return recording_enabled; }

}  // namespace bdw
