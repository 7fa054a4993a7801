#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sff::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

// Generator used for dropout masks and parameter initialization. Uniform
// draws are built from raw 64-bit output so streams are reproducible
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();  // Box-Muller, standard normal
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct Node;

// Reference-semantics handle to a node of the computation graph. Copies
// share the underlying storage, like framework tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim(int axis) const;  // negative axes count from the end
  std::size_t rank() const { return shape().size(); }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  std::span<const double> grad() const;  // empty when no gradient has been accumulated
  std::span<double> mutable_grad();      // allocates a zero gradient if needed
  bool requires_grad() const;
  void zero_grad();
  double item() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// One recorded operation. The backward closure reads `grad` and accumulates
// into the parents' gradients.
struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

// Reverse-mode accumulation from a scalar. The graph below `loss` is
// released afterwards; a second call on the same loss throws.
void backward(const Tensor& loss);

// a[..., n, k] x b[k, m], or batched a[B, n, k] x b[B, k, m].
Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise sum; b may match the trailing dimensions of a (broadcast over the rest).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& a);  // over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);
Tensor relu(const Tensor& a);
// Last axis split into halves [a | b]; returns a * relu(b).
Tensor reglu(const Tensor& a);
// Inverted dropout: survivors scaled by 1/(1-p). Identity when !train or p == 0.
Tensor dropout(const Tensor& a, double p, bool train, Rng& rng);
Tensor mse_loss(const Tensor& prediction, const Tensor& target);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
// x[B, C], weight/bias[C, d], cls[d] -> [B, C+1, d] with row 0 = cls and
// row j+1 = x[:, j] * weight[j] + bias[j].
Tensor tokenize(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& cls);

namespace testing {
// Scales the incoming gradient of every node created by `op` by 1.01 during
// backward, so gradcheck harnesses can prove they detect broken kernels.
// Empty string disables.
void set_corrupted_op(std::string_view op);
}  // namespace testing

}  // namespace sff::ad
