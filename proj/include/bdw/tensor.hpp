#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bdw {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
};
}  // namespace detail

/// Shared handle to a dense row-major array of doubles. Copies alias the same
/// storage; use clone() for a deep copy. Constness applies to the handle, not
/// the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  std::size_t dim(std::size_t i) const { return data_->shape.at(i); }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  /// Leading dimension; for a rank-1 tensor this is 1.
  std::size_t rows() const;
  /// Product of trailing dimensions; for a rank-1 tensor this is numel().
  std::size_t cols() const;

  std::span<const double> values() const { return data_->values; }
  std::span<double> mutable_values() const { return data_->values; }
  double operator[](std::size_t i) const { return data_->values[i]; }
  double at(std::size_t r, std::size_t c) const { return data_->values[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool flag) const { data_->requires_grad = flag; }

  bool has_grad() const { return !data_->grad.empty(); }
  std::span<const double> grad() const { return data_->grad; }
  /// Grad storage, allocated (zero-filled) on first access.
  std::span<double> grad_storage() const;
  void zero_grad() const;
  void clear_grad() const { data_->grad.clear(); }

  std::uint64_t id() const { return data_->id; }
  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  /// Deep copy of values; the copy never carries grad.
  Tensor clone(bool requires_grad = false) const;
  Tensor reshaped(Shape shape) const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> data) : data_(std::move(data)) {}
  std::shared_ptr<detail::TensorData> data_;
};

void check_finite(std::span<const double> values, std::string_view op);

struct TapeNode {
  std::string op;
  std::vector<std::uint64_t> input_ids;
  Tensor output;
  std::function<void()> backward;
};

/// Ordered record of differentiable operations. Nodes are appended as ops
/// execute, so inputs always precede the nodes that consume them; backward()
/// walks the list strictly in reverse.
class Tape {
 public:
  void record(std::string op, std::vector<std::uint64_t> input_ids, Tensor output,
              std::function<void()> backward);
  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  /// Clears the tape afterwards unless retain is set.
  void backward(Tensor& loss, bool retain = false);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<TapeNode>& nodes() const { return nodes_; }

  /// Thread-local tape that ops record onto.
  static Tape& active();

 private:
  std::vector<TapeNode> nodes_;
};

void backward(Tensor& loss);

/// Disables recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace bdw
