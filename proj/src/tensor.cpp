#include "sfformer/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "sfformer/error.hpp"

namespace sff::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local std::string corrupted_op;

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error(ErrorKind::kUsage, std::string(op) + ": " + detail);
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.axis = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

using BackwardFn = std::function<void(Node&)>;

Tensor record(std::string op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  for (const auto& in : inputs) node->requires_grad |= in.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.shared());
    if (!corrupted_op.empty() && corrupted_op == node->op) {
      node->backward = [inner = std::move(fn)](Node& self) {
        for (auto& g : self.grad) g *= 1.01;
        inner(self);
      };
    } else {
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

bool wants_grad(const Node& n) { return n.requires_grad; }

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    shape_error("constant", "shape " + shape_string(shape) + " needs " + std::to_string(numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->op = "constant";
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->op = "parameter";
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return requires_grad ? parameter(std::move(shape), std::vector<double>(n, 0.0))
                       : constant(std::move(shape), std::vector<double>(n, 0.0));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank(), "dim")]; }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (size() != 1) shape_error("item", "tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->value.front();
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw Error(ErrorKind::kUsage, "backward: loss must be a scalar tensor");
  }
  Node* root = loss.node();
  if (root->consumed) throw Error(ErrorKind::kUsage, "backward: graph already consumed by a previous call");
  if (!root->requires_grad) throw Error(ErrorKind::kUsage, "backward: loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf) continue;
    if (n->grad.empty()) n->ensure_grad();
    if (n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2) shape_error("matmul", "left operand needs rank >= 2");
  const std::size_t n = a.dim(-2), k = a.dim(-1);
  if (b.rank() == 2) {
    if (b.dim(0) != k) shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
    const std::size_t m = b.dim(1);
    const std::size_t rows = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = m;
    std::vector<double> out(rows * m);
    MutMap(out.data(), rows, m).noalias() = ConstMap(a.data().data(), rows, k) * ConstMap(b.data().data(), k, m);
    return record("matmul", std::move(out_shape), std::move(out), {a, b}, [rows, k, m](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      ConstMap g(self.grad.data(), rows, m);
      if (wants_grad(pa)) MutMap(pa.ensure_grad().data(), rows, k).noalias() += g * ConstMap(pb.value.data(), k, m).transpose();
      if (wants_grad(pb)) MutMap(pb.ensure_grad().data(), k, m).noalias() += ConstMap(pa.value.data(), rows, k).transpose() * g;
    });
  }
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || b.dim(1) != k) {
    shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = b.dim(2);
  std::vector<double> out(batch * n * m);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * n * m, n, m).noalias() =
        ConstMap(a.data().data() + i * n * k, n, k) * ConstMap(b.data().data() + i * k * m, k, m);
  }
  return record("bmm", {batch, n, m}, std::move(out), {a, b}, [batch, n, k, m](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap g(self.grad.data() + i * n * m, n, m);
      if (wants_grad(pa)) {
        MutMap(pa.ensure_grad().data() + i * n * k, n, k).noalias() +=
            g * ConstMap(pb.value.data() + i * k * m, k, m).transpose();
      }
      if (wants_grad(pb)) {
        MutMap(pb.ensure_grad().data() + i * k * m, k, m).noalias() +=
            ConstMap(pa.value.data() + i * n * k, n, k).transpose() * g;
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return record("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
      for (auto* p : {self.parents[0].get(), self.parents[1].get()}) {
        if (!wants_grad(*p)) continue;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  // Broadcast b over the leading axes of a.
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    shape_error("add", "cannot broadcast " + shape_string(bs) + " onto " + shape_string(as));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = a.data()[o * inner + i] + b.data()[i];
  }
  return record("add_broadcast", as, std::move(out), {a, b}, [outer, inner](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return record("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return record("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return record("scale", a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) shape_error("concat", "rank mismatch");
    widths.push_back(s[ax]);
    out_shape[ax] += s[ax];
    s[ax] = first[ax];
    if (s != first) shape_error("concat", "shape mismatch " + shape_string(p.shape()) + " vs " + shape_string(first));
  }
  const AxisSplit split = split_at(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t w = widths[pi] * split.inner;
    const double* src = parts[pi].data().data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src + o * w, w, out.data() + o * split.axis * split.inner + offset);
    }
    offset += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return record("concat", std::move(out_shape), std::move(out), std::move(inputs), [split, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      const std::size_t w = widths[pi] * split.inner;
      Node& p = *self.parents[pi];
      if (wants_grad(p)) {
        auto& g = p.ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = self.grad.data() + o * split.axis * split.inner + offset;
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += src[i];
        }
      }
      offset += w;
    }
  });
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "slice");
  if (start + length > a.shape()[ax] || length == 0) {
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside axis of size " + std::to_string(a.shape()[ax]));
  }
  const AxisSplit split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  const std::size_t w = length * split.inner;
  const std::size_t src_stride = split.axis * split.inner;
  const std::size_t src_off = start * split.inner;
  std::vector<double> out(split.outer * w);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(a.data().data() + o * src_stride + src_off, w, out.data() + o * w);
  }
  return record("slice", std::move(out_shape), std::move(out), {a}, [split, w, src_stride, src_off](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t i = 0; i < w; ++i) g[o * src_stride + src_off + i] += self.grad[o * w + i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) shape_error("transpose", "needs rank >= 2");
  const std::size_t r = a.dim(-2), c = a.dim(-1);
  const std::size_t batch = a.size() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> out(a.size());
  for (std::size_t b = 0; b < batch; ++b) {
    MutMap(out.data() + b * r * c, c, r) = ConstMap(a.data().data() + b * r * c, r, c).transpose();
  }
  return record("transpose", std::move(out_shape), std::move(out), {a}, [batch, r, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      MutMap(g.data() + b * r * c, r, c) += ConstMap(self.grad.data() + b * r * c, c, r).transpose();
    }
  });
}

Tensor softmax(const Tensor& a) {
  const std::size_t width = a.dim(-1);
  const std::size_t rows = a.size() / width;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * width;
    double* y = out.data() + r * width;
    const double mx = *std::max_element(x, x + width);
    double total = 0.0;
    for (std::size_t i = 0; i < width; ++i) total += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < width; ++i) y[i] /= total;
  }
  return record("softmax", a.shape(), std::move(out), {a}, [rows, width](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* dy = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t i = 0; i < width; ++i) dot += dy[i] * y[i];
      for (std::size_t i = 0; i < width; ++i) g[r * width + i] += y[i] * (dy[i] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  const std::size_t width = x.dim(-1);
  if (gain.shape() != Shape{width} || shift.shape() != Shape{width}) {
    shape_error("layer_norm", "gain/shift must be [" + std::to_string(width) + "]");
  }
  const std::size_t rows = x.size() / width;
  std::vector<double> out(x.size());
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * width;
    double mu = 0.0;
    for (std::size_t i = 0; i < width; ++i) mu += in[i];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t i = 0; i < width; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < width; ++i) {
      const double h = (in[i] - mu) * is;
      (*normalized)[r * width + i] = h;
      out[r * width + i] = gain.data()[i] * h + shift.data()[i];
    }
  }
  return record("layer_norm", x.shape(), std::move(out), {x, gain, shift},
                [rows, width, normalized, inv_std](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pg = *self.parents[1];
                  Node& pb = *self.parents[2];
                  const auto& xh = *normalized;
                  if (wants_grad(pg) || wants_grad(pb)) {
                    auto& gg = pg.ensure_grad();
                    auto& gb = pb.ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t i = 0; i < width; ++i) {
                        gg[i] += self.grad[r * width + i] * xh[r * width + i];
                        gb[i] += self.grad[r * width + i];
                      }
                    }
                  }
                  if (!wants_grad(px)) return;
                  auto& gx = px.ensure_grad();
                  const double inv_w = 1.0 / static_cast<double>(width);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t i = 0; i < width; ++i) {
                      const double g = self.grad[r * width + i] * pg.value[i];
                      mean_g += g;
                      mean_gx += g * xh[r * width + i];
                    }
                    mean_g *= inv_w;
                    mean_gx *= inv_w;
                    for (std::size_t i = 0; i < width; ++i) {
                      const double g = self.grad[r * width + i] * pg.value[i];
                      gx[r * width + i] += (*inv_std)[r] * (g - mean_g - xh[r * width + i] * mean_gx);
                    }
                  }
                });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
  return record("relu", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor reglu(const Tensor& a) {
  const std::size_t width = a.dim(-1);
  if (width % 2 != 0) shape_error("reglu", "last dimension " + std::to_string(width) + " is odd");
  const std::size_t half = width / 2;
  const std::size_t rows = a.size() / width;
  Shape out_shape = a.shape();
  out_shape.back() = half;
  std::vector<double> out(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = a.data().data() + r * width;
    for (std::size_t i = 0; i < half; ++i) out[r * half + i] = in[i] * std::max(0.0, in[half + i]);
  }
  return record("reglu", std::move(out_shape), std::move(out), {a}, [rows, half](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    const std::size_t width = 2 * half;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = p.value.data() + r * width;
      for (std::size_t i = 0; i < half; ++i) {
        const double dy = self.grad[r * half + i];
        const double gate = in[half + i];
        if (gate > 0.0) {
          g[r * width + i] += dy * gate;
          g[r * width + half + i] += dy * in[i];
        }
      }
    }
  });
}

Tensor dropout(const Tensor& a, double p, bool train, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) shape_error("dropout", "probability must be in [0, 1)");
  if (!train || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(a.size());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = a.data()[i] * (*mask)[i];
  }
  return record("dropout", a.shape(), std::move(out), {a}, [mask](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape("mse_loss", prediction, target);
  const std::size_t n = prediction.size();
  if (n == 0) shape_error("mse_loss", "empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = prediction.data()[i] - target.data()[i];
    total += d * d;
  }
  return record("mse_loss", {1}, {total / static_cast<double>(n)}, {prediction, target}, [n](Node& self) {
    Node& pp = *self.parents[0];
    Node& pt = *self.parents[1];
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    if (wants_grad(pp)) {
      auto& g = pp.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += k * (pp.value[i] - pt.value[i]);
    }
    if (wants_grad(pt)) {
      auto& g = pt.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] -= k * (pp.value[i] - pt.value[i]);
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return record("sum", {1}, {total}, {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "mean");
  const AxisSplit split = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(split.outer * split.inner, 0.0);
  const double inv = 1.0 / static_cast<double>(split.axis);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < split.axis; ++k) {
      for (std::size_t i = 0; i < split.inner; ++i) {
        out[o * split.inner + i] += a.data()[(o * split.axis + k) * split.inner + i];
      }
    }
  }
  for (auto& v : out) v *= inv;
  return record("mean", std::move(out_shape), std::move(out), {a}, [split, inv](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t k = 0; k < split.axis; ++k) {
        for (std::size_t i = 0; i < split.inner; ++i) {
          g[(o * split.axis + k) * split.inner + i] += self.grad[o * split.inner + i] * inv;
        }
      }
    }
  });
}

Tensor tokenize(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& cls) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.shape() != bias.shape() || weight.dim(0) != x.dim(1) ||
      cls.shape() != Shape{weight.dim(1)}) {
    shape_error("tokenize", "x " + shape_string(x.shape()) + ", weight " + shape_string(weight.shape()) + ", bias " +
                                shape_string(bias.shape()) + ", cls " + shape_string(cls.shape()));
  }
  const std::size_t batch = x.dim(0), clusters = x.dim(1), d = weight.dim(1);
  const std::size_t tokens = clusters + 1;
  std::vector<double> out(batch * tokens * d);
  for (std::size_t b = 0; b < batch; ++b) {
    double* row = out.data() + b * tokens * d;
    std::copy_n(cls.data().data(), d, row);
    for (std::size_t j = 0; j < clusters; ++j) {
      const double xv = x.data()[b * clusters + j];
      const double* w = weight.data().data() + j * d;
      const double* bb = bias.data().data() + j * d;
      double* t = row + (j + 1) * d;
      for (std::size_t i = 0; i < d; ++i) t[i] = xv * w[i] + bb[i];
    }
  }
  return record("tokenize", {batch, tokens, d}, std::move(out), {x, weight, bias, cls},
                [batch, clusters, d, tokens](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pw = *self.parents[1];
                  Node& pb = *self.parents[2];
                  Node& pc = *self.parents[3];
                  for (std::size_t b = 0; b < batch; ++b) {
                    const double* g = self.grad.data() + b * tokens * d;
                    if (wants_grad(pc)) {
                      auto& gc = pc.ensure_grad();
                      for (std::size_t i = 0; i < d; ++i) gc[i] += g[i];
                    }
                    for (std::size_t j = 0; j < clusters; ++j) {
                      const double* gt = g + (j + 1) * d;
                      const double xv = px.value[b * clusters + j];
                      if (wants_grad(pw)) {
                        auto& gw = pw.ensure_grad();
                        for (std::size_t i = 0; i < d; ++i) gw[j * d + i] += xv * gt[i];
                      }
                      if (wants_grad(pb)) {
                        auto& gb = pb.ensure_grad();
                        for (std::size_t i = 0; i < d; ++i) gb[j * d + i] += gt[i];
                      }
                      if (wants_grad(px)) {
                        double dot = 0.0;
                        for (std::size_t i = 0; i < d; ++i) dot += pw.value[j * d + i] * gt[i];
                        px.ensure_grad()[b * clusters + j] += dot;
                      }
                    }
                  }
                });
}

namespace testing {
void set_corrupted_op(std::string_view op) { corrupted_op = std::string(op); }
}  // namespace testing

}  // namespace sff::ad
