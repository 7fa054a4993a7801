#include "sfformer/model.hpp"

#include <charconv>
#include <cmath>
#include <map>

#include "sfformer/error.hpp"

namespace sff {
namespace {

using ad::Tensor;

std::vector<double> he_normal(ad::Rng& rng, std::size_t count, std::size_t fan_in) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.normal() * sd;
  return v;
}

LinearParams make_linear(ad::Rng& rng, std::size_t in, std::size_t out) {
  return {Tensor::parameter({in, out}, he_normal(rng, in * out, in)), Tensor::zeros({out}, true)};
}

LayerNormParams make_norm(std::size_t d) {
  return {Tensor::parameter({d}, std::vector<double>(d, 1.0)), Tensor::zeros({d}, true)};
}

StreamTokenizer make_tokenizer(ad::Rng& rng, std::size_t clusters, std::size_t d) {
  StreamTokenizer t;
  t.weight = Tensor::parameter({clusters, d}, he_normal(rng, clusters * d, d));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> b(clusters * d);
  for (auto& x : b) x = rng.uniform(-bound, bound);
  t.bias = Tensor::parameter({clusters, d}, std::move(b));
  return t;
}

Tensor linear(const Tensor& x, const LinearParams& p) { return ad::add(ad::matmul(x, p.weight), p.bias); }

Tensor norm(const Tensor& x, const LayerNormParams& p) { return ad::layer_norm(x, p.gain, p.shift); }

void add_named(std::vector<ad::NamedTensor>& out, const std::string& prefix, const LinearParams& p) {
  out.push_back({prefix + ".weight", p.weight});
  out.push_back({prefix + ".bias", p.bias});
}

void add_named(std::vector<ad::NamedTensor>& out, const std::string& prefix, const LayerNormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".shift", p.shift});
}

}  // namespace

std::size_t ModelConfig::ffn_hidden() const {
  return 2 * static_cast<std::size_t>(std::llround(static_cast<double>(2 * token_dim) / 3.0));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kUsage, "model config: " + m); };
  if (cluster_count < 1) fail("cluster_count must be >= 1");
  if (n_heads < 1 || token_dim < n_heads || token_dim % n_heads != 0) {
    fail("token_dim " + std::to_string(token_dim) + " not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (n_layers < 1 || n_layers > 4) fail("n_layers must be in [1, 4]");
  if (!(dropout_attn >= 0.0 && dropout_attn <= 0.5)) fail("dropout_attn must be in [0, 0.5]");
  if (!(dropout_ffn >= 0.0 && dropout_ffn <= 0.5)) fail("dropout_ffn must be in [0, 0.5]");
  if (!(dropout_residual >= 0.0 && dropout_residual <= 0.2)) fail("dropout_residual must be in [0, 0.2]");
}

std::string_view fusion_name(FusionMode mode) noexcept {
  return mode == FusionMode::kSelfBaseline ? "self" : "cross";
}

std::string write_model_config(const ModelConfig& c) {
  auto num = [](double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  };
  std::string out;
  out += "cluster_count=" + std::to_string(c.cluster_count) + "\n";
  out += "token_dim=" + std::to_string(c.token_dim) + "\n";
  out += "n_layers=" + std::to_string(c.n_layers) + "\n";
  out += "n_heads=" + std::to_string(c.n_heads) + "\n";
  out += "dropout_attn=" + num(c.dropout_attn) + "\n";
  out += "dropout_ffn=" + num(c.dropout_ffn) + "\n";
  out += "dropout_residual=" + num(c.dropout_residual) + "\n";
  out += "fusion=" + std::string(fusion_name(c.fusion)) + "\n";
  out += std::string("readout=") + (c.readout == Readout::kCls ? "cls" : "mean") + "\n";
  out += std::string("helper_evolves=") + (c.helper_evolves ? "1" : "0") + "\n";
  out += "seed=" + std::to_string(c.seed) + "\n";
  return out;
}

ModelConfig parse_model_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw Error(ErrorKind::kData, "model config line without '=': " + std::string(line));
    kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string* {
    const auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    if (auto v = get("cluster_count")) c.cluster_count = std::stoul(*v);
    if (auto v = get("token_dim")) c.token_dim = std::stoul(*v);
    if (auto v = get("n_layers")) c.n_layers = std::stoul(*v);
    if (auto v = get("n_heads")) c.n_heads = std::stoul(*v);
    if (auto v = get("dropout_attn")) c.dropout_attn = std::stod(*v);
    if (auto v = get("dropout_ffn")) c.dropout_ffn = std::stod(*v);
    if (auto v = get("dropout_residual")) c.dropout_residual = std::stod(*v);
    if (auto v = get("fusion")) c.fusion = *v == "cross" ? FusionMode::kCrossFusion : FusionMode::kSelfBaseline;
    if (auto v = get("readout")) c.readout = *v == "mean" ? Readout::kMeanPool : Readout::kCls;
    if (auto v = get("helper_evolves")) c.helper_evolves = *v == "1";
    if (auto v = get("seed")) c.seed = std::stoull(*v);
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::kData, "malformed model config value");
  }
  c.validate();
  return c;
}

std::vector<ad::NamedTensor> ModelParams::named() const {
  std::vector<ad::NamedTensor> out;
  out.push_back({"tokenizer.primary.weight", primary.weight});
  out.push_back({"tokenizer.primary.bias", primary.bias});
  if (helper.weight.defined()) {
    out.push_back({"tokenizer.helper.weight", helper.weight});
    out.push_back({"tokenizer.helper.bias", helper.bias});
  }
  out.push_back({"cls", cls});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l);
    const auto& L = layers[l];
    add_named(out, p + ".norm_attn", L.norm_attn);
    add_named(out, p + ".norm_kv", L.norm_kv);
    add_named(out, p + ".query", L.query);
    add_named(out, p + ".key", L.key);
    add_named(out, p + ".value", L.value);
    add_named(out, p + ".output", L.output);
    add_named(out, p + ".norm_ffn", L.norm_ffn);
    add_named(out, p + ".ffn_in", L.ffn_in);
    add_named(out, p + ".ffn_out", L.ffn_out);
  }
  add_named(out, "head.norm", head_norm);
  add_named(out, "head", head);
  return out;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ad::Rng rng(config.seed);
  const std::size_t d = config.token_dim;
  const std::size_t f = config.ffn_hidden();
  ModelParams p;
  p.primary = make_tokenizer(rng, config.cluster_count, d);
  if (config.fusion == FusionMode::kCrossFusion) p.helper = make_tokenizer(rng, config.cluster_count, d);
  p.cls = Tensor::parameter({d}, he_normal(rng, d, d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    EncoderLayerParams L;
    L.norm_attn = make_norm(d);
    L.norm_kv = make_norm(d);
    L.query = make_linear(rng, d, d);
    L.key = make_linear(rng, d, d);
    L.value = make_linear(rng, d, d);
    L.output = make_linear(rng, d, d);
    L.norm_ffn = make_norm(d);
    L.ffn_in = make_linear(rng, d, 2 * f);
    L.ffn_out = make_linear(rng, f, d);
    p.layers.push_back(std::move(L));
  }
  p.head_norm = make_norm(d);
  p.head = make_linear(rng, d, 1);
  return p;
}

Tensor tokenize_stream(const Tensor& x, const StreamTokenizer& tokenizer, const Tensor& cls) {
  return ad::tokenize(x, tokenizer.weight, tokenizer.bias, cls);
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const EncoderLayerParams& layer,
                            const ModelConfig& config, bool train, ad::Rng& rng,
                            std::vector<Tensor>* probabilities) {
  if (queries.rank() != 3 || keys_values.rank() != 3 || queries.dim(0) != keys_values.dim(0) ||
      queries.dim(2) != config.token_dim || keys_values.dim(2) != config.token_dim) {
    throw Error(ErrorKind::kUsage, "attention: query " + ad::shape_string(queries.shape()) + " vs key/value " +
                                       ad::shape_string(keys_values.shape()));
  }
  const Tensor q = linear(queries, layer.query);
  const Tensor k = linear(keys_values, layer.key);
  const Tensor v = linear(keys_values, layer.value);
  const std::size_t dh = config.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(config.n_heads);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    const Tensor qh = ad::slice(q, 2, h * dh, dh);
    const Tensor kh = ad::slice(k, 2, h * dh, dh);
    const Tensor vh = ad::slice(v, 2, h * dh, dh);
    Tensor probs = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    if (probabilities) probabilities->push_back(probs);
    probs = ad::dropout(probs, config.dropout_attn, train, rng);
    heads.push_back(ad::matmul(probs, vh));
  }
  return linear(ad::concat(heads, 2), layer.output);
}

Tensor encoder_layer(const Tensor& q_tokens, const Tensor& kv_tokens, const EncoderLayerParams& layer,
                     const ModelConfig& config, bool train, ad::Rng& rng) {
  const Tensor qn = norm(q_tokens, layer.norm_attn);
  const Tensor kvn = kv_tokens.defined() ? norm(kv_tokens, layer.norm_kv) : qn;
  const Tensor attended = multi_head_attention(qn, kvn, layer, config, train, rng);
  const Tensor u = ad::add(q_tokens, ad::dropout(attended, config.dropout_residual, train, rng));
  Tensor hidden = ad::reglu(linear(norm(u, layer.norm_ffn), layer.ffn_in));
  hidden = ad::dropout(hidden, config.dropout_ffn, train, rng);
  const Tensor ffn = linear(hidden, layer.ffn_out);
  return ad::add(u, ad::dropout(ffn, config.dropout_residual, train, rng));
}

Tensor forward(const ModelParams& params, const ModelConfig& config, const Tensor& primary, const Tensor* helper,
               bool train, ad::Rng& rng) {
  const bool cross = config.fusion == FusionMode::kCrossFusion;
  if (cross && helper == nullptr) throw Error(ErrorKind::kUsage, "cross fusion requires a helper feature");
  if (!cross && helper != nullptr) throw Error(ErrorKind::kUsage, "baseline model takes no helper feature");
  if (primary.rank() != 2 || primary.dim(1) != config.cluster_count) {
    throw Error(ErrorKind::kUsage, "primary input must be [B, " + std::to_string(config.cluster_count) + "], got " +
                                       ad::shape_string(primary.shape()));
  }
  if (cross && helper->shape() != primary.shape()) {
    throw Error(ErrorKind::kUsage, "helper input shape " + ad::shape_string(helper->shape()) + " != primary " +
                                       ad::shape_string(primary.shape()));
  }
  Tensor q = tokenize_stream(primary, params.primary, params.cls);
  Tensor kv;
  if (cross) kv = tokenize_stream(*helper, params.helper, params.cls);
  for (const auto& layer : params.layers) {
    const Tensor next_q = encoder_layer(q, kv, layer, config, train, rng);
    if (cross && config.helper_evolves) kv = encoder_layer(kv, Tensor(), layer, config, train, rng);
    q = next_q;
  }
  Tensor pooled = config.readout == Readout::kCls
                      ? ad::mean(ad::slice(q, 1, 0, 1), 1)
                      : ad::mean(ad::slice(q, 1, 1, config.cluster_count), 1);
  return linear(norm(pooled, params.head_norm), params.head);
}

}  // namespace sff
