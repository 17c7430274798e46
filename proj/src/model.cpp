#include "efsign/model.hpp"

#include <algorithm>
#include <cmath>

#include "efsign/attention.hpp"
#include "efsign/init.hpp"

namespace efsign {

using ops::Activation;

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::efficientsign: return "efficientsign";
    case ModelKind::resnet18: return "resnet18";
    case ModelKind::mobilenetv2: return "mobilenetv2";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "efficientsign") return ModelKind::efficientsign;
  if (name == "resnet18") return ModelKind::resnet18;
  if (name == "mobilenetv2") return ModelKind::mobilenetv2;
  throw ConfigError("unknown model kind '" + name + "' (known: efficientsign, resnet18, mobilenetv2)");
}

std::vector<std::string> known_presets() { return {"b0", "tiny"}; }

BackboneConfig backbone_preset(const std::string& name) {
  BackboneConfig cfg;
  cfg.preset = name;
  if (name == "b0") {
    cfg.stem_channels = 32;
    // expansion, channels, repeats, stride, kernel, SE ratio
    cfg.stages = {
        {1, 16, 1, 1, 3, 0.25},  {6, 24, 2, 2, 3, 0.25},  {6, 40, 2, 2, 5, 0.25},
        {6, 80, 3, 2, 3, 0.25},  {6, 112, 3, 1, 5, 0.25}, {6, 192, 4, 2, 5, 0.25},
        {6, 320, 1, 1, 3, 0.25},
    };
    cfg.head_channels = 1280;
    cfg.input_size = 224;
    return cfg;
  }
  if (name == "tiny") {
    cfg.stem_channels = 8;
    cfg.stages = {{1, 8, 1, 1, 3, 0.25}, {6, 16, 1, 2, 3, 0.25}};
    cfg.head_channels = 64;
    cfg.input_size = 32;
    return cfg;
  }
  std::string known;
  for (const auto& p : known_presets()) known += (known.empty() ? "" : ", ") + p;
  throw ConfigError("unknown backbone preset '" + name + "' (known presets: " + known + ")");
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must be in [0, 1)");
  if (!(bn_epsilon > 0.0) || !(bn_momentum >= 0.0 && bn_momentum <= 1.0)) {
    throw ConfigError("batch-norm epsilon must be positive and momentum in [0, 1]");
  }
  if (kind != ModelKind::efficientsign) return;
  if (se_reduction == 0) throw ConfigError("SE reduction must be positive");
  if (spatial_kernel == 0 || spatial_kernel % 2 == 0) throw ConfigError("spatial kernel must be odd");
  if (backbone.stages.empty() || backbone.stem_channels == 0 || backbone.head_channels == 0) {
    throw ConfigError("backbone '" + backbone.preset + "' needs a stem, stages and a head");
  }
  for (const auto& s : backbone.stages) {
    if (s.expansion == 0 || s.out_channels == 0 || s.repeats == 0) {
      throw ConfigError("MBConv stage fields must be positive");
    }
    if (s.stride != 1 && s.stride != 2) throw ConfigError("MBConv stride must be 1 or 2");
    if (s.kernel != 3 && s.kernel != 5) throw ConfigError("MBConv kernel must be 3 or 5");
    if (!(s.internal_se_ratio >= 0.0 && s.internal_se_ratio <= 1.0)) {
      throw ConfigError("MBConv SE ratio must be in [0, 1]");
    }
  }
}

std::size_t ModelSpec::feature_channels() const {
  switch (kind) {
    case ModelKind::efficientsign: return backbone.head_channels;
    case ModelKind::resnet18: return 512;
    case ModelKind::mobilenetv2: return 1280;
  }
  return 0;
}

std::size_t ModelSpec::input_size() const {
  return kind == ModelKind::efficientsign ? backbone.input_size : 224;
}

ModelSpec efficientsign_spec(const std::string& preset, std::size_t num_classes) {
  ModelSpec spec;
  spec.kind = ModelKind::efficientsign;
  spec.backbone = backbone_preset(preset);
  spec.num_classes = num_classes;
  return spec;
}

ModelSpec baseline_spec(ModelKind kind, std::size_t num_classes) {
  ModelSpec spec;
  spec.kind = kind;
  spec.num_classes = num_classes;
  if (kind != ModelKind::efficientsign) {
    spec.backbone = BackboneConfig{};
    spec.backbone.preset = model_kind_name(kind);
  }
  return spec;
}

template <typename T>
std::size_t BasicModelState<T>::param_index(const std::string& name) const {
  auto it = param_lookup_.find(name);
  if (it == param_lookup_.end()) throw ConfigError("model has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t BasicModelState<T>::batch_norm_index(const std::string& name) const {
  auto it = bn_lookup_.find(name);
  if (it == bn_lookup_.end()) throw ConfigError("model has no batch-norm layer '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<ManifestEntry> BasicModelState<T>::manifest() const {
  std::vector<ManifestEntry> out;
  out.reserve(parameters.size());
  for (const auto& p : parameters) out.push_back({p.name, p.value.shape()});
  return out;
}

template <typename T>
void BasicModelState<T>::zero_grad() {
  for (auto& p : parameters) p.zero_grad();
}

template <typename T>
void BasicModelState<T>::reindex() {
  param_lookup_.clear();
  bn_lookup_.clear();
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    if (!param_lookup_.emplace(parameters[i].name, i).second) {
      throw ConfigError("duplicate parameter name '" + parameters[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < batch_norms.size(); ++i) {
    if (!bn_lookup_.emplace(batch_norms[i].name, i).second) {
      throw ConfigError("duplicate batch-norm name '" + batch_norms[i].name + "'");
    }
  }
}

namespace {

template <typename V>
struct Outputs {
  V feature_map;
  V attended;
  V spatial_map;
  V features;
  V logits;
};

// The architecture is written once against a context. BuildContext
// tracks channel counts and registers parameters; GraphContext evaluates.

template <class Ctx>
typename Ctx::Value conv_bn_act(Ctx& ctx, const std::string& name, typename Ctx::Value x, std::size_t out,
                                std::size_t kernel, std::size_t stride, std::size_t groups, Activation act) {
  x = ctx.conv(name + ".conv", x, out, kernel, stride, groups, false);
  x = ctx.bn(name + ".bn", x);
  return ctx.act(x, act);
}

template <class Ctx>
typename Ctx::Value mbconv(Ctx& ctx, const std::string& name, typename Ctx::Value x, std::size_t in,
                           std::size_t out, std::size_t expansion, std::size_t kernel, std::size_t stride,
                           double se_ratio, Activation act) {
  typename Ctx::Value h = x;
  const std::size_t expanded = in * expansion;
  if (expansion != 1) h = conv_bn_act(ctx, name + ".expand", h, expanded, 1, 1, 1, act);
  h = conv_bn_act(ctx, name + ".depthwise", h, expanded, kernel, stride, expanded, act);
  if (se_ratio > 0.0) {
    const auto squeeze = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(in) * se_ratio));
    h = ctx.se(name + ".se", h, squeeze, act, false);
  }
  h = conv_bn_act(ctx, name + ".project", h, out, 1, 1, 1, Activation::identity);
  if (stride == 1 && in == out) h = ctx.add(h, x);
  return h;
}

template <class Ctx>
typename Ctx::Value basic_block(Ctx& ctx, const std::string& name, typename Ctx::Value x, std::size_t in,
                                std::size_t out, std::size_t stride) {
  auto h = conv_bn_act(ctx, name + ".conv1", x, out, 3, stride, 1, Activation::relu);
  h = ctx.conv(name + ".conv2.conv", h, out, 3, 1, 1, false);
  h = ctx.bn(name + ".conv2.bn", h);
  auto shortcut = x;
  if (stride != 1 || in != out) {
    shortcut = ctx.conv(name + ".downsample.conv", x, out, 1, stride, 1, false);
    shortcut = ctx.bn(name + ".downsample.bn", shortcut);
  }
  return ctx.act(ctx.add(h, shortcut), Activation::relu);
}

template <class Ctx>
Outputs<typename Ctx::Value> describe(Ctx& ctx, const ModelSpec& spec, typename Ctx::Value images) {
  Outputs<typename Ctx::Value> o;
  typename Ctx::Value x = images;
  switch (spec.kind) {
    case ModelKind::efficientsign: {
      const auto& bb = spec.backbone;
      x = conv_bn_act(ctx, "backbone.stem", x, bb.stem_channels, 3, 2, 1, Activation::silu);
      std::size_t in = bb.stem_channels;
      std::size_t block = 0;
      for (const auto& stage : bb.stages) {
        for (std::size_t r = 0; r < stage.repeats; ++r, ++block) {
          x = mbconv(ctx, "backbone.blocks." + std::to_string(block), x, in, stage.out_channels, stage.expansion,
                     stage.kernel, r == 0 ? stage.stride : 1, stage.internal_se_ratio, Activation::silu);
          in = stage.out_channels;
        }
      }
      x = conv_bn_act(ctx, "backbone.head", x, bb.head_channels, 1, 1, 1, Activation::silu);
      o.feature_map = x;
      const std::size_t hidden = BasicSEBlock<float>::hidden_for(bb.head_channels, spec.se_reduction);
      x = ctx.se("se", x, hidden, Activation::relu, true);
      auto sp = ctx.spatial("spatial", x, spec.spatial_kernel);
      o.attended = sp.first;
      o.spatial_map = sp.second;
      break;
    }
    case ModelKind::resnet18: {
      x = conv_bn_act(ctx, "backbone.stem", x, 64, 7, 2, 1, Activation::relu);
      x = ctx.maxpool(x, 3, 2, 1);
      const std::size_t widths[4] = {64, 128, 256, 512};
      std::size_t in = 64;
      for (std::size_t layer = 0; layer < 4; ++layer) {
        for (std::size_t b = 0; b < 2; ++b) {
          const std::size_t stride = (layer > 0 && b == 0) ? 2 : 1;
          x = basic_block(ctx, "backbone.layer" + std::to_string(layer + 1) + "." + std::to_string(b), x, in,
                          widths[layer], stride);
          in = widths[layer];
        }
      }
      o.feature_map = x;
      o.attended = x;
      break;
    }
    case ModelKind::mobilenetv2: {
      x = conv_bn_act(ctx, "backbone.stem", x, 32, 3, 2, 1, Activation::relu6);
      // expansion, channels, repeats, stride
      const std::size_t plan[7][4] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2},  {6, 64, 4, 2},
                                      {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
      std::size_t in = 32;
      std::size_t block = 0;
      for (const auto& st : plan) {
        for (std::size_t r = 0; r < st[2]; ++r, ++block) {
          x = mbconv(ctx, "backbone.blocks." + std::to_string(block), x, in, st[1], st[0], 3, r == 0 ? st[3] : 1,
                     0.0, Activation::relu6);
          in = st[1];
        }
      }
      x = conv_bn_act(ctx, "backbone.head", x, 1280, 1, 1, 1, Activation::relu6);
      o.feature_map = x;
      o.attended = x;
      break;
    }
  }
  o.features = ctx.gap(o.attended);
  auto h = o.features;
  if (spec.kind != ModelKind::resnet18) h = ctx.dropout(h, spec.dropout_p);
  o.logits = ctx.linear("head", h, spec.num_classes);
  return o;
}

struct BuildContext {
  using Value = std::size_t;  // channel count

  ModelState& model;
  Rng& rng;

  void register_param(const std::string& name, Tensor value) {
    model.parameters.emplace_back(name, std::move(value));
  }

  Value conv(const std::string& name, Value in, std::size_t out, std::size_t k, std::size_t /*stride*/,
             std::size_t groups, bool bias) {
    const std::size_t fan_in = in / groups * k * k;
    register_param(name + ".weight", kaiming_uniform<float>({out, in / groups, k, k}, fan_in, rng));
    if (bias) register_param(name + ".bias", Tensor({out}));
    return out;
  }
  Value bn(const std::string& name, Value c) {
    register_param(name + ".gamma", Tensor({c}, 1.0f));
    register_param(name + ".beta", Tensor({c}));
    NamedBatchNorm<float> b;
    b.name = name;
    b.stats = ops::BatchNormStats<float>(c);
    b.stats.momentum = static_cast<float>(model.spec.bn_momentum);
    b.stats.epsilon = static_cast<float>(model.spec.bn_epsilon);
    model.batch_norms.push_back(std::move(b));
    return c;
  }
  Value act(Value x, Activation) { return x; }
  Value add(Value a, Value b) {
    if (a != b) throw ConfigError("residual add between " + std::to_string(a) + " and " + std::to_string(b) + " channels");
    return a;
  }
  Value maxpool(Value x, std::size_t, std::size_t, std::size_t) { return x; }
  Value gap(Value x) { return x; }
  Value dropout(Value x, double) { return x; }
  Value se(const std::string& name, Value c, std::size_t hidden, Activation, bool) {
    register_param(name + ".w1", kaiming_uniform<float>({hidden, c}, c, rng));
    register_param(name + ".b1", Tensor({hidden}));
    register_param(name + ".w2", kaiming_uniform<float>({c, hidden}, hidden, rng));
    register_param(name + ".b2", Tensor({c}));
    return c;
  }
  std::pair<Value, Value> spatial(const std::string& name, Value c, std::size_t k) {
    register_param(name + ".kernel", kaiming_uniform<float>({1, 2, k, k}, 2 * k * k, rng));
    register_param(name + ".bias", Tensor({1}));
    return {c, 1};
  }
  Value linear(const std::string& name, Value in, std::size_t out) {
    register_param(name + ".weight", kaiming_uniform<float>({out, in}, in, rng, 1.0 / std::sqrt(3.0)));
    register_param(name + ".bias", Tensor({out}));
    return out;
  }
};

template <typename T>
struct GraphContext {
  using Value = Var<T>;

  const BasicModelState<T>& model;
  std::vector<NamedBatchNorm<T>>* train_stats;  // non-null only in train mode
  Mode mode;
  Rng& rng;
  ForwardOptions options;
  std::vector<Var<T>> leaves;

  const Var<T>& p(const std::string& name) const { return leaves[model.param_index(name)]; }

  Value conv(const std::string& name, const Value& x, std::size_t, std::size_t k, std::size_t stride,
             std::size_t groups, bool bias) {
    const std::size_t pad = k / 2;
    if (ops::conv_output_dim(x.dim(2), k, stride, pad) == 0 || ops::conv_output_dim(x.dim(3), k, stride, pad) == 0) {
      throw ConfigError("input size incompatible with stage '" + name + "': feature map " + shape_str(x.shape()) +
                        " is smaller than its " + std::to_string(k) + "x" + std::to_string(k) + " kernel");
    }
    return ops::conv2d(x, p(name + ".weight"), bias ? p(name + ".bias") : Var<T>(), {stride, pad, groups});
  }
  Value bn(const std::string& name, const Value& x) {
    const std::size_t idx = model.batch_norm_index(name);
    if (train_stats) {
      return ops::batch_norm2d(x, p(name + ".gamma"), p(name + ".beta"), (*train_stats)[idx].stats, Mode::train);
    }
    auto stats = model.batch_norms[idx].stats;
    return ops::batch_norm2d(x, p(name + ".gamma"), p(name + ".beta"), stats, Mode::eval);
  }
  Value act(const Value& x, Activation kind) { return ops::activation(x, kind); }
  Value add(const Value& a, const Value& b) { return ops::add(a, b); }
  Value maxpool(const Value& x, std::size_t k, std::size_t s, std::size_t pad) { return ops::max_pool2d(x, k, s, pad); }
  Value gap(const Value& x) { return ops::global_avg_pool(x); }
  Value dropout(const Value& x, double prob) { return ops::dropout(x, prob, mode, rng); }
  Value se(const std::string& name, const Value& x, std::size_t, Activation inner, bool attention_block) {
    if (attention_block && !options.attention) return x;
    SEWeights<T> w{p(name + ".w1"), p(name + ".b1"), p(name + ".w2"), p(name + ".b2")};
    return se_apply(x, w, inner);
  }
  std::pair<Value, Value> spatial(const std::string& name, const Value& x, std::size_t) {
    if (!options.attention) return {x, Value()};
    auto out = spatial_apply(x, p(name + ".kernel"), p(name + ".bias"));
    return {out.output, out.map};
  }
  Value linear(const std::string& name, const Value& x, std::size_t) {
    return ops::linear(x, p(name + ".weight"), p(name + ".bias"));
  }
};

template <typename T>
ForwardTrace<T> run_forward(const BasicModelState<T>& model, std::vector<NamedBatchNorm<T>>* train_stats,
                            const BasicTensor<T>& images, Mode mode, Rng& rng, ForwardOptions options) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ConfigError("model input must be N x 3 x S x S, got " + shape_str(images.shape()));
  }
  GraphContext<T> ctx{model, train_stats, mode, rng, options, {}};
  ctx.leaves.reserve(model.parameters.size());
  for (const auto& param : model.parameters) {
    ctx.leaves.push_back(options.track_grad ? Var<T>::leaf(param.value) : Var<T>::constant(param.value));
  }
  auto o = describe(ctx, model.spec, Var<T>::constant(images));
  ForwardTrace<T> trace;
  trace.feature_map = o.feature_map;
  trace.attended = o.attended;
  trace.spatial_map = o.spatial_map;
  trace.features = o.features;
  trace.logits = o.logits;
  trace.params = std::move(ctx.leaves);
  return trace;
}

}  // namespace

ModelState build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState model;
  model.spec = spec;
  Rng rng(seed);
  BuildContext ctx{model, rng};
  describe(ctx, spec, std::size_t{3});
  model.reindex();
  return model;
}

template <typename T>
ForwardTrace<T> forward_trace(BasicModelState<T>& model, const BasicTensor<T>& images, Mode mode, Rng& rng,
                              ForwardOptions options) {
  return run_forward<T>(model, mode == Mode::train ? &model.batch_norms : nullptr, images, mode, rng, options);
}

template <typename T>
ForwardTrace<T> forward_trace(const BasicModelState<T>& model, const BasicTensor<T>& images,
                              ForwardOptions options) {
  Rng unused(0);
  return run_forward<T>(model, nullptr, images, Mode::eval, unused, options);
}

Tensor forward(ModelState& model, const Tensor& images, Mode mode, Rng& rng) {
  return forward_trace<float>(model, images, mode, rng).logits.value();
}

Tensor forward(const ModelState& model, const Tensor& images) {
  return forward_trace<float>(model, images).logits.value();
}

Tensor extract_features(const ModelState& model, const Tensor& images) {
  return forward_trace<float>(model, images).features.value();
}

template <typename T>
void accumulate_gradients(BasicModelState<T>& model, const ForwardTrace<T>& trace) {
  for (std::size_t i = 0; i < model.parameters.size(); ++i) {
    const auto& leaf = trace.params.at(i);
    if (!leaf.requires_grad() || !leaf.has_grad()) continue;
    auto& acc = model.parameters[i].grad_accum;
    const auto& g = leaf.grad();
    for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
  }
}

template <typename T>
ParamCount count_params(const BasicModelState<T>& model) {
  ParamCount count;
  for (const auto& p : model.parameters) {
    const std::size_t n = p.value.numel();
    count.total += n;
    count.by_component[p.name.substr(0, p.name.find('.'))] += n;
  }
  return count;
}

template struct BasicModelState<float>;
template struct BasicModelState<double>;

#define EFSIGN_INSTANTIATE_MODEL(T)                                                                      \
  template ForwardTrace<T> forward_trace<T>(BasicModelState<T>&, const BasicTensor<T>&, Mode, Rng&,      \
                                            ForwardOptions);                                             \
  template ForwardTrace<T> forward_trace<T>(const BasicModelState<T>&, const BasicTensor<T>&, ForwardOptions); \
  template void accumulate_gradients<T>(BasicModelState<T>&, const ForwardTrace<T>&);                    \
  template ParamCount count_params<T>(const BasicModelState<T>&);

EFSIGN_INSTANTIATE_MODEL(float)
EFSIGN_INSTANTIATE_MODEL(double)

#undef EFSIGN_INSTANTIATE_MODEL

}  // namespace efsign
