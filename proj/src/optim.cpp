#include "sfformer/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>

#include "sfformer/error.hpp"

namespace sff::ad {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorKind::kData, "checkpoint truncated at byte " + std::to_string(pos_));
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

AdamState make_adam_state(std::span<const NamedTensor> params, const AdamConfig& config) {
  AdamState st;
  st.config = config;
  for (const auto& p : params) {
    st.first_moment.emplace_back(p.tensor.size(), 0.0);
    st.second_moment.emplace_back(p.tensor.size(), 0.0);
  }
  return st;
}

void adam_step(std::span<const NamedTensor> params, AdamState& state) {
  if (state.first_moment.size() != params.size()) {
    throw Error(ErrorKind::kUsage, "adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                                       " parameters, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw Error(ErrorKind::kNumeric, "non-finite gradient in parameter '" + p.name + "'");
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor tensor = params[k].tensor;
    auto value = tensor.mutable_data();
    const auto grad = tensor.grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != value.size()) throw Error(ErrorKind::kUsage, "adam_step: moment shape mismatch for " + params[k].name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      value[i] -= c.learning_rate * c.weight_decay * value[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      value[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

void zero_grad(std::span<const NamedTensor> params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::vector<std::uint8_t> write_checkpoint(std::span<const NamedTensor> params) {
  std::vector<std::uint8_t> out{'S', 'F', 'C', 'K'};
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put(out, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.data()) put(out, v);
  }
  return out;
}

std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (in.text(4) != "SFCK") throw Error(ErrorKind::kData, "not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kData, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.name = in.text(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
    const std::size_t n = numel(shape);
    in.need(n * 8);
    std::vector<double> values(n);
    for (auto& v : values) v = in.get<double>();
    nt.tensor = Tensor::parameter(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  if (!in.at_end()) throw Error(ErrorKind::kData, "trailing bytes after checkpoint tensors");
  return out;
}

void load_checkpoint_into(std::span<const NamedTensor> params, std::span<const NamedTensor> saved) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& s : saved) by_name[s.name] = &s;
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw Error(ErrorKind::kData, "checkpoint lacks parameter '" + p.name + "'");
    if (it->second->tensor.shape() != p.tensor.shape()) {
      throw Error(ErrorKind::kData, "checkpoint shape mismatch for '" + p.name + "'");
    }
    Tensor dst = p.tensor;
    std::ranges::copy(it->second->tensor.data(), dst.mutable_data().begin());
  }
}

}  // namespace sff::ad
