#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace muffin::ad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

// Storage shared by every handle to the same tensor.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t producer = 0;  // serial of the recording tape, 0 for leaves
};

// Reference-semantics handle to a dense f64 array.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy detached from any tape.
  Tensor clone(bool requires_grad = false) const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& handle() const { return node_; }
  bool same(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend class Tape;
};

// Running statistics owned by a batch-norm layer.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : mean(channels, 0.0), var(channels, 1.0) {}
};

// Records primitive applications and replays their gradient rules in exact
// reverse order. A tape constructed with record=false builds no graph and is
// the inference path. One tape belongs to one thread.
class Tape {
 public:
  explicit Tape(bool record = true);

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return entries_.size(); }

  // Element-wise with numpy-style broadcasting.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  Tensor add_scalar(const Tensor& a, double offset);

  // (..., k) x (k, n) -> (..., n)
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);  // rank 2
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
  Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
  Tensor pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after);

  Tensor sigmoid(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor softmax(const Tensor& a);  // last axis

  // Normalizes over the last axis; gamma/beta have that axis' length.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);
  // x is (batch, length, channels); statistics per channel over batch and
  // length. Eval mode applies the running statistics as a fixed affine map.
  Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       BatchNormStats& stats, bool train);
  // Inverted dropout. Identity when !train or rate == 0.
  Tensor dropout(const Tensor& x, double rate, bool train, std::mt19937_64& rng);
  // x (batch, length, in), kernel (out, in, width) with odd width; zero
  // same-padding along length.
  Tensor conv1d(const Tensor& x, const Tensor& kernel);

  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor mean_axis(const Tensor& a, std::size_t axis);

  // Rows of table (vocab, dim) gathered to shape prefix + (dim).
  Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, Shape prefix);

  // Complex tensors carry a trailing axis of 2 holding (re, im).
  Tensor rfft(const Tensor& x);                 // (B, n, d) -> (B, m, d, 2)
  Tensor irfft(const Tensor& s, std::size_t n);  // (B, m, d, 2) -> (B, n, d)
  Tensor cmul(const Tensor& a, const Tensor& b);  // b may broadcast over leading axes
  Tensor amplitude(const Tensor& s);              // (..., 2) -> (...)

  // Mean over rows of -log softmax(logits)[target]. With mask_padding the
  // column 0 is excluded from the normalizer.
  Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                       bool mask_padding = true);

  void backward(const Tensor& loss);
  void clear();

 private:
  using Handle = std::shared_ptr<Node>;

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  Tensor emit(Shape shape, std::vector<double> values, bool needs_grad);
  void record(std::function<void()> rule) { entries_.push_back(std::move(rule)); }

  bool record_ = true;
  std::uint64_t serial_ = 0;
  std::vector<std::function<void()>> entries_;
};

}  // namespace muffin::ad
