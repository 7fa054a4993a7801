#include "sfformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "sfformer/model.hpp"
#include "sfformer/tensor.hpp"

namespace sff {
namespace {

using ad::Tensor;

struct Case {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> build;
};

std::vector<double> normals(ad::Rng& rng, std::size_t n, double scale = 0.8) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

Tensor param(ad::Rng& rng, ad::Shape shape, double scale = 0.8) {
  const std::size_t n = ad::numel(shape);
  return Tensor::parameter(std::move(shape), normals(rng, n, scale));
}

// Values bounded away from zero so relu kinks stay outside the difference stencil.
Tensor param_off_zero(ad::Rng& rng, ad::Shape shape) {
  const std::size_t n = ad::numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) {
    const double m = 0.2 + std::abs(rng.normal());
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor::parameter(std::move(shape), std::move(v));
}

class ScopedCorruption {
 public:
  explicit ScopedCorruption(const std::string& op) { ad::testing::set_corrupted_op(op); }
  ~ScopedCorruption() { ad::testing::set_corrupted_op(""); }
  ScopedCorruption(const ScopedCorruption&) = delete;
  ScopedCorruption& operator=(const ScopedCorruption&) = delete;
};

struct ModelCase {
  ModelConfig config;
  ModelParams params;
  Tensor primary, helper;
};

Case model_case(const std::string& name, FusionMode fusion, std::uint64_t seed) {
  auto mc = std::make_shared<ModelCase>();
  mc->config.cluster_count = 8;
  mc->config.token_dim = 16;
  mc->config.n_layers = 1;
  mc->config.dropout_attn = 0.1;
  mc->config.dropout_ffn = 0.1;
  mc->config.dropout_residual = 0.05;
  mc->config.fusion = fusion;
  mc->config.seed = seed;
  mc->params = init_params(mc->config);
  ad::Rng rng(seed + 1);
  mc->primary = Tensor::constant({3, 8}, normals(rng, 24, 1.0));
  mc->helper = Tensor::constant({3, 8}, normals(rng, 24, 1.0));
  Case c;
  c.name = name;
  for (const auto& nt : mc->params.named()) c.inputs.push_back(nt.tensor);
  c.build = [mc, seed](const std::vector<Tensor>&) {
    ad::Rng dropout_rng(seed + 2);
    const Tensor* helper = mc->config.fusion == FusionMode::kCrossFusion ? &mc->helper : nullptr;
    return forward(mc->params, mc->config, mc->primary, helper, true, dropout_rng);
  };
  return c;
}

std::vector<Case> make_cases(std::uint64_t seed) {
  ad::Rng rng(seed);
  std::vector<Case> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> inputs,
                      std::function<Tensor(const std::vector<Tensor>&)> build) {
    cases.push_back({std::move(name), std::move(inputs), std::move(build)});
  };
  add_case("matmul", {param(rng, {2, 3, 4}), param(rng, {4, 5})},
           [](const auto& in) { return ad::matmul(in[0], in[1]); });
  add_case("bmm", {param(rng, {2, 3, 4}), param(rng, {2, 4, 5})},
           [](const auto& in) { return ad::matmul(in[0], in[1]); });
  add_case("add", {param(rng, {3, 4}), param(rng, {3, 4})}, [](const auto& in) { return ad::add(in[0], in[1]); });
  add_case("add_broadcast", {param(rng, {2, 3, 4}), param(rng, {4})},
           [](const auto& in) { return ad::add(in[0], in[1]); });
  add_case("sub", {param(rng, {3, 4}), param(rng, {3, 4})}, [](const auto& in) { return ad::sub(in[0], in[1]); });
  add_case("mul", {param(rng, {3, 4}), param(rng, {3, 4})}, [](const auto& in) { return ad::mul(in[0], in[1]); });
  add_case("scale", {param(rng, {3, 4})}, [](const auto& in) { return ad::scale(in[0], -0.7); });
  add_case("concat", {param(rng, {2, 3, 2}), param(rng, {2, 3, 3})}, [](const auto& in) {
    const std::vector<Tensor> parts{in[0], in[1]};
    return ad::concat(parts, 2);
  });
  add_case("slice", {param(rng, {2, 5, 3})}, [](const auto& in) { return ad::slice(in[0], 1, 1, 3); });
  add_case("transpose", {param(rng, {2, 3, 4})}, [](const auto& in) { return ad::transpose(in[0]); });
  add_case("softmax", {param(rng, {3, 5}, 1.5)}, [](const auto& in) { return ad::softmax(in[0]); });
  add_case("layer_norm", {param(rng, {3, 6}), param(rng, {6}), param(rng, {6})},
           [](const auto& in) { return ad::layer_norm(in[0], in[1], in[2]); });
  add_case("relu", {param_off_zero(rng, {3, 4})}, [](const auto& in) { return ad::relu(in[0]); });
  add_case("reglu", {param_off_zero(rng, {3, 6})}, [](const auto& in) { return ad::reglu(in[0]); });
  const std::uint64_t mask_seed = rng.next();
  add_case("dropout", {param(rng, {4, 5})}, [mask_seed](const auto& in) {
    ad::Rng mask_rng(mask_seed);
    return ad::dropout(in[0], 0.3, true, mask_rng);
  });
  add_case("mse_loss", {param(rng, {4, 1}), param(rng, {4, 1})},
           [](const auto& in) { return ad::mse_loss(in[0], in[1]); });
  add_case("sum", {param(rng, {3, 4})}, [](const auto& in) { return ad::sum(in[0]); });
  add_case("mean", {param(rng, {2, 3, 4})}, [](const auto& in) { return ad::mean(in[0], 1); });
  add_case("tokenize", {param(rng, {2, 5}), param(rng, {5, 4}), param(rng, {5, 4}), param(rng, {4})},
           [](const auto& in) { return ad::tokenize(in[0], in[1], in[2], in[3]); });
  cases.push_back(model_case("sfformer_self_attention", FusionMode::kSelfBaseline, seed + 10));
  cases.push_back(model_case("sfformer_cross_fusion", FusionMode::kCrossFusion, seed + 20));
  return cases;
}

GradcheckEntry check(Case& c, const GradcheckOptions& options, std::uint64_t projection_seed) {
  const Tensor probe = c.build(c.inputs);
  ad::Rng rng(projection_seed);
  const Tensor projection = Tensor::constant(probe.shape(), normals(rng, probe.size(), 1.0));
  auto objective = [&]() {
    double total = 0.0;
    const Tensor out = c.build(c.inputs);
    for (std::size_t i = 0; i < out.size(); ++i) total += out.data()[i] * projection.data()[i];
    return total;
  };

  for (auto& t : c.inputs) t.zero_grad();
  ad::backward(ad::sum(ad::mul(c.build(c.inputs), projection)));

  GradcheckEntry entry;
  entry.op = c.name;
  for (auto& t : c.inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      double& x = t.mutable_data()[i];
      const double saved = x;
      x = saved + options.step;
      const double up = objective();
      x = saved - options.step;
      const double down = objective();
      x = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double err = std::abs(a - numeric) / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, std::isfinite(err) ? err : INFINITY);
      ++entry.checked;
    }
    t.zero_grad();
  }
  entry.passed = entry.max_rel_error < options.threshold;
  return entry;
}

}  // namespace

bool GradcheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

const std::vector<std::string>& gradcheck_cases() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& c : make_cases(0)) out.push_back(c.name);
    return out;
  }();
  return names;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  ScopedCorruption corruption(options.corrupt_op);
  GradcheckReport report;
  report.threshold = options.threshold;
  auto cases = make_cases(options.seed);
  for (std::size_t k = 0; k < cases.size(); ++k) {
    report.entries.push_back(check(cases[k], options, options.seed * 1000 + k));
  }
  return report;
}

std::string format_gradcheck(const GradcheckReport& report) {
  std::string out;
  char buf[160];
  for (const auto& e : report.entries) {
    std::snprintf(buf, sizeof buf, "%-26s %.3e %6zu %s\n", e.op.c_str(), e.max_rel_error, e.checked,
                  e.passed ? "PASS" : "FAIL");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%s (threshold %.0e)\n", report.passed() ? "all passed" : "FAILED", report.threshold);
  out += buf;
  return out;
}

}  // namespace sff
