#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "covidx/ops.hpp"

namespace covidx {

enum class FamilyId { vgg, densenet, inception, resnet_v2, inception_resnet_v2, xception, mobilenet_v2 };

inline constexpr std::array<FamilyId, 7> kAllFamilies = {
    FamilyId::vgg,       FamilyId::densenet,     FamilyId::inception,
    FamilyId::resnet_v2, FamilyId::inception_resnet_v2, FamilyId::xception,
    FamilyId::mobilenet_v2};

/// Name accepted on the command line and used in reports.
inline std::string_view family_name(FamilyId f) {
  switch (f) {
    case FamilyId::vgg: return "vgg19";
    case FamilyId::densenet: return "densenet";
    case FamilyId::inception: return "inceptionv3";
    case FamilyId::resnet_v2: return "resnetv2";
    case FamilyId::inception_resnet_v2: return "inceptionresnetv2";
    case FamilyId::xception: return "xception";
    case FamilyId::mobilenet_v2: return "mobilenetv2";
  }
  return "unknown";
}

inline std::string family_names_joined() {
  std::string out;
  for (FamilyId f : kAllFamilies) {
    if (!out.empty()) out += ", ";
    out += family_name(f);
  }
  return out;
}

/// Case-insensitive lookup; throws a usage error listing the valid names.
inline FamilyId parse_family(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (FamilyId f : kAllFamilies) {
    if (lower == family_name(f)) return f;
  }
  fail(ErrorKind::usage,
       "unknown family '" + std::string(text) + "'; valid names: " + family_names_joined());
}

struct ArchConfig {
  std::size_t input_size = 64;
  std::size_t input_channels = 3;
  std::size_t num_classes = 2;
  double width_mult = 0.25;
  double depth_mult = 0.5;
  std::uint64_t init_seed = 0;
  int vgg_depth = 19;          // 16 or 19
  double head_dropout = 0.2;   // inception families only
};

enum class LayerKind {
  input, conv, depthwise_conv, batch_norm, relu, max_pool, avg_pool, global_avg_pool,
  flatten, dense, dropout, concat, add, softmax
};

inline std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv2d";
    case LayerKind::depthwise_conv: return "depthwise_conv2d";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

inline constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::input;
  std::vector<std::size_t> inputs;  // indices of earlier layers
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double rate = 0.0;
  std::vector<std::size_t> params;  // kernel/weight first, then bias or scale/shift
  std::size_t bn_index = kNoIndex;
  Shape out_shape;  // per sample: (C,H,W) or (N)

  std::size_t channels() const { return out_shape.front(); }
};

/// Layer graph in topological order plus its parameters and batch-norm
/// running statistics. The last layer is a softmax over num_classes.
template <class T>
struct Model {
  FamilyId family = FamilyId::vgg;
  ArchConfig config;
  std::vector<Layer> layers;
  std::vector<Parameter<T>> params;
  std::vector<BatchNormStats<T>> bn_stats;

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params) out.push_back(&p);
    return out;
  }

  std::vector<std::size_t> consumers(std::size_t layer) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (std::find(layers[i].inputs.begin(), layers[i].inputs.end(), layer) != layers[i].inputs.end()) {
        out.push_back(i);
      }
    }
    return out;
  }
};

template <class T>
std::size_t parameter_count(const Model<T>& model) {
  std::size_t n = 0;
  for (const auto& p : model.params) n += p.value.size();
  return n;
}

// Channel scaling: round half up, floor at one channel.
inline std::size_t scale_channels(double base, double mult) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(base * mult + 0.5)));
}

inline std::size_t blocks_per_stage(double depth_mult) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(2.0 * depth_mult + 0.5)));
}

inline constexpr std::size_t kStageCount = 3;
inline constexpr std::size_t kMinInputSize = 32;
inline constexpr std::size_t kMobileNetExpansion = 4;

namespace detail {

template <class T>
class GraphBuilder {
 public:
  GraphBuilder(Model<T>& model, std::uint64_t seed) : model_(model), rng_(seed) {}

  std::size_t input() {
    const auto& c = model_.config;
    Layer l;
    l.name = "input";
    l.kind = LayerKind::input;
    l.out_shape = {c.input_channels, c.input_size, c.input_size};
    return push(std::move(l));
  }

  // "Same" padding k/2 for odd kernels.
  std::size_t conv(std::size_t in, std::size_t out_c, std::size_t k, std::size_t stride,
                   const std::string& name, bool bias = false) {
    const Shape& s = shape(in);
    Layer l = spatial_layer(name, LayerKind::conv, in, k, stride, k / 2, out_c);
    l.params.push_back(add_weight(name + "/kernel", {out_c, s[0], k, k}, s[0] * k * k));
    if (bias) l.params.push_back(add_zeros(name + "/bias", {out_c}));
    return push(std::move(l));
  }

  std::size_t depthwise(std::size_t in, std::size_t k, std::size_t stride, const std::string& name) {
    const std::size_t c = shape(in)[0];
    Layer l = spatial_layer(name, LayerKind::depthwise_conv, in, k, stride, k / 2, c);
    l.params.push_back(add_weight(name + "/kernel", {c, 1, k, k}, k * k));
    return push(std::move(l));
  }

  std::size_t bn(std::size_t in, const std::string& name) {
    const std::size_t c = shape(in)[0];
    Layer l = simple(name, LayerKind::batch_norm, {in}, shape(in));
    auto scale = add_param(name + "/scale", Tensor<T>({c}, T(1)));
    auto shift = add_zeros(name + "/shift", {c});
    l.params = {scale, shift};
    l.bn_index = model_.bn_stats.size();
    model_.bn_stats.emplace_back(c);
    return push(std::move(l));
  }

  std::size_t relu(std::size_t in, const std::string& name) {
    return push(simple(name, LayerKind::relu, {in}, shape(in)));
  }

  std::size_t pool(std::size_t in, LayerKind kind, std::size_t window, std::size_t stride,
                   std::size_t pad, const std::string& name) {
    Layer l = spatial_layer(name, kind, in, window, stride, pad, shape(in)[0]);
    return push(std::move(l));
  }

  std::size_t global_pool(std::size_t in, const std::string& name) {
    return push(simple(name, LayerKind::global_avg_pool, {in}, {shape(in)[0], 1, 1}));
  }

  std::size_t flatten(std::size_t in, const std::string& name) {
    return push(simple(name, LayerKind::flatten, {in}, {shape_numel(shape(in))}));
  }

  std::size_t dense(std::size_t in, std::size_t out, const std::string& name) {
    const std::size_t n = shape(in)[0];
    Layer l = simple(name, LayerKind::dense, {in}, {out});
    l.params.push_back(add_weight(name + "/weight", {n, out}, n));
    l.params.push_back(add_zeros(name + "/bias", {out}));
    return push(std::move(l));
  }

  std::size_t dropout(std::size_t in, double rate, const std::string& name) {
    Layer l = simple(name, LayerKind::dropout, {in}, shape(in));
    l.rate = rate;
    return push(std::move(l));
  }

  std::size_t concat(const std::vector<std::size_t>& ins, const std::string& name) {
    if (ins.size() == 1) return ins.front();
    Shape s = shape(ins.front());
    s[0] = 0;
    for (std::size_t i : ins) s[0] += shape(i)[0];
    return push(simple(name, LayerKind::concat, ins, s));
  }

  std::size_t add(const std::vector<std::size_t>& ins, const std::string& name) {
    return push(simple(name, LayerKind::add, ins, shape(ins.front())));
  }

  std::size_t softmax(std::size_t in, const std::string& name) {
    return push(simple(name, LayerKind::softmax, {in}, shape(in)));
  }

  std::size_t conv_bn_relu(std::size_t in, std::size_t out_c, std::size_t k, std::size_t stride,
                           const std::string& name) {
    return relu(bn(conv(in, out_c, k, stride, name + "/conv"), name + "/bn"), name + "/relu");
  }

  std::size_t bn_relu(std::size_t in, const std::string& name) {
    return relu(bn(in, name + "/bn"), name + "/relu");
  }

  // Depthwise 3x3 immediately followed by a pointwise 1x1.
  std::size_t separable(std::size_t in, std::size_t out_c, std::size_t stride, const std::string& name) {
    return conv(depthwise(in, 3, stride, name + "/depthwise"), out_c, 1, 1, name + "/pointwise");
  }

  std::size_t classifier_head(std::size_t in, double dropout_rate) {
    std::size_t x = flatten(global_pool(in, "head/gap"), "head/flatten");
    if (dropout_rate > 0.0) x = dropout(x, dropout_rate, "head/dropout");
    x = dense(x, model_.config.num_classes, "head/dense");
    return softmax(x, "head/softmax");
  }

  const Shape& shape(std::size_t layer) const { return model_.layers.at(layer).out_shape; }
  std::size_t channels(std::size_t layer) const { return shape(layer)[0]; }

 private:
  Layer simple(const std::string& name, LayerKind kind, std::vector<std::size_t> ins, Shape out) {
    Layer l;
    l.name = name;
    l.kind = kind;
    l.inputs = std::move(ins);
    l.out_shape = std::move(out);
    return l;
  }

  Layer spatial_layer(const std::string& name, LayerKind kind, std::size_t in, std::size_t k,
                      std::size_t stride, std::size_t pad, std::size_t out_c) {
    const Shape& s = shape(in);
    if (s.size() != 3 || s[1] + 2 * pad < k || s[2] + 2 * pad < k) {
      fail(ErrorKind::usage, "layer " + name + ": input " + shape_str(s) +
                                 " too small for a " + std::to_string(k) + "x" +
                                 std::to_string(k) + " window");
    }
    Layer l = simple(name, kind, {in},
                     {out_c, conv_out_extent(s[1], k, stride, pad), conv_out_extent(s[2], k, stride, pad)});
    l.kernel = k;
    l.stride = stride;
    l.padding = pad;
    return l;
  }

  std::size_t push(Layer l) {
    if (!names_.insert(l.name).second) {
      fail(ErrorKind::usage, "duplicate layer name " + l.name);
    }
    model_.layers.push_back(std::move(l));
    return model_.layers.size() - 1;
  }

  std::size_t add_param(const std::string& id, Tensor<T> value) {
    model_.params.emplace_back(id, std::move(value));
    return model_.params.size() - 1;
  }

  std::size_t add_zeros(const std::string& id, Shape shape) {
    return add_param(id, Tensor<T>(std::move(shape)));
  }

  // Fan-in scaled uniform, limit sqrt(6 / fan_in).
  std::size_t add_weight(const std::string& id, Shape shape, std::size_t fan_in) {
    Tensor<T> w(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& v : w.values()) v = static_cast<T>(rng_.uniform(-limit, limit));
    return add_param(id, std::move(w));
  }

  Model<T>& model_;
  Rng rng_;
  std::set<std::string> names_;
};

inline std::string block_name(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage) + "b" + std::to_string(block);
}

template <class T>
std::size_t build_vgg(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    if (s > 0) x = g.pool(x, LayerKind::max_pool, 2, 2, 0, "s" + std::to_string(s) + "/pool");
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string n = block_name(s, b);
      x = g.conv_bn_relu(x, ch, 3, 1, n + "/c0");
      x = g.conv_bn_relu(x, ch, 3, 1, n + "/c1");
      // The 19-layer variant carries one more 3x3 conv in the deeper stages.
      if (c.vgg_depth == 19 && s > 0 && b + 1 == blocks) x = g.conv_bn_relu(x, ch, 3, 1, n + "/c2");
    }
  }
  return g.classifier_head(x, 0.0);
}

template <class T>
std::size_t build_densenet(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t growth = scale_channels(16.0, c.width_mult);
  const std::size_t layers = 3 * blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::string st = "s" + std::to_string(s);
    if (s > 0) {
      const std::size_t squeeze = std::max<std::size_t>(1, (g.channels(x) + 1) / 2);
      x = g.conv(g.bn_relu(x, st + "/transition"), squeeze, 1, 1, st + "/transition/conv");
      x = g.pool(x, LayerKind::avg_pool, 2, 2, 0, st + "/transition/pool");
    }
    std::vector<std::size_t> features{x};
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string n = st + "/dense" + std::to_string(i);
      const std::size_t in = g.concat(features, n + "/concat");
      features.push_back(g.conv(g.bn_relu(in, n), growth, 3, 1, n + "/conv"));
    }
    x = g.concat(features, st + "/block_out");
  }
  return g.classifier_head(g.bn_relu(x, "final"), 0.0);
}

template <class T>
std::size_t inception_branches(GraphBuilder<T>& g, std::size_t x, std::size_t ch, const std::string& n) {
  const std::size_t w1 = std::max<std::size_t>(1, ch / 4);
  const std::size_t w3 = std::max<std::size_t>(1, ch / 2);
  const std::size_t wp = std::max<std::size_t>(1, ch - std::min(ch, w1 + w3));
  const std::size_t b1 = g.conv_bn_relu(x, w1, 1, 1, n + "/b1x1");
  std::size_t b2 = g.conv_bn_relu(x, w1, 1, 1, n + "/b3x3_reduce");
  b2 = g.conv_bn_relu(b2, w3, 3, 1, n + "/b3x3");
  std::size_t b3 = g.pool(x, LayerKind::max_pool, 3, 1, 1, n + "/bpool/pool");
  b3 = g.conv_bn_relu(b3, wp, 1, 1, n + "/bpool");
  return g.concat({b1, b2, b3}, n + "/concat");
}

template <class T>
std::size_t build_inception(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    if (s > 0) x = g.pool(x, LayerKind::max_pool, 2, 2, 0, "s" + std::to_string(s) + "/pool");
    for (std::size_t b = 0; b < blocks; ++b) x = inception_branches(g, x, ch, block_name(s, b));
  }
  return g.classifier_head(x, c.head_dropout);
}

template <class T>
std::size_t build_resnet_v2(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string n = block_name(s, b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::size_t pre = g.bn_relu(x, n + "/pre");
      std::size_t h = g.conv(pre, ch, 3, stride, n + "/conv0");
      h = g.conv(g.bn_relu(h, n + "/mid"), ch, 3, 1, n + "/conv1");
      const bool identity = stride == 1 && g.channels(x) == ch;
      const std::size_t skip = identity ? x : g.conv(pre, ch, 1, stride, n + "/projection");
      x = g.add({skip, h}, n + "/add");
    }
  }
  return g.classifier_head(g.bn_relu(x, "final"), 0.0);
}

template <class T>
std::size_t build_inception_resnet_v2(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    if (s > 0) x = g.conv_bn_relu(x, ch, 3, 2, "s" + std::to_string(s) + "/reduction");
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string n = block_name(s, b);
      const std::size_t mixed = inception_branches(g, x, ch, n);
      const std::size_t up = g.conv(mixed, g.channels(x), 1, 1, n + "/up", /*bias=*/true);
      x = g.relu(g.add({x, up}, n + "/add"), n + "/relu");
    }
  }
  return g.classifier_head(x, c.head_dropout);
}

template <class T>
std::size_t build_xception(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string n = block_name(s, b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      std::size_t h = g.relu(x, n + "/entry_relu");
      h = g.bn(g.separable(h, ch, stride, n + "/sep0"), n + "/sep0/bn");
      h = g.relu(h, n + "/sep0/relu");
      h = g.bn(g.separable(h, ch, 1, n + "/sep1"), n + "/sep1/bn");
      const bool identity = stride == 1 && g.channels(x) == ch;
      const std::size_t skip =
          identity ? x : g.bn(g.conv(x, ch, 1, stride, n + "/projection"), n + "/projection/bn");
      x = g.add({skip, h}, n + "/add");
    }
  }
  return g.classifier_head(g.relu(x, "final/relu"), 0.0);
}

template <class T>
std::size_t build_mobilenet_v2(GraphBuilder<T>& g, const ArchConfig& c, std::size_t x) {
  const std::size_t blocks = blocks_per_stage(c.depth_mult);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t ch = scale_channels(64.0 * (1u << s), c.width_mult);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::string n = block_name(s, b);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::size_t in_ch = g.channels(x);
      std::size_t h = g.conv_bn_relu(x, in_ch * kMobileNetExpansion, 1, 1, n + "/expand");
      h = g.relu(g.bn(g.depthwise(h, 3, stride, n + "/depthwise"), n + "/depthwise/bn"),
                 n + "/depthwise/relu");
      h = g.conv(h, ch, 1, 1, n + "/project");  // linear bottleneck
      x = (stride == 1 && in_ch == ch) ? g.add({x, h}, n + "/add") : h;
    }
  }
  return g.classifier_head(x, 0.0);
}

}  // namespace detail

inline void validate(const ArchConfig& c) {
  if (c.input_size < kMinInputSize) {
    fail(ErrorKind::usage, "input_size " + std::to_string(c.input_size) +
                               " too small for " + std::to_string(kStageCount) +
                               " stages; minimum is " + std::to_string(kMinInputSize));
  }
  if (c.input_channels < 1) fail(ErrorKind::usage, "input_channels must be >= 1");
  if (c.num_classes < 2) fail(ErrorKind::usage, "num_classes must be >= 2");
  if (!(c.width_mult > 0.0) || !std::isfinite(c.width_mult)) {
    fail(ErrorKind::usage, "width multiplier must be positive; it would produce zero channels");
  }
  if (!(c.depth_mult > 0.0) || !std::isfinite(c.depth_mult)) {
    fail(ErrorKind::usage, "depth multiplier must be positive; it would produce zero blocks");
  }
  if (c.vgg_depth != 16 && c.vgg_depth != 19) fail(ErrorKind::usage, "vgg depth must be 16 or 19");
  if (c.head_dropout < 0.0 || c.head_dropout >= 1.0) fail(ErrorKind::usage, "head dropout must lie in [0,1)");
}

/// Builds the toy model of one family. Parameters are drawn in creation
/// order from init_seed, so equal configs give bit-identical models.
template <class T>
Model<T> build_family(FamilyId family, const ArchConfig& config) {
  validate(config);
  Model<T> model;
  model.family = family;
  model.config = config;
  detail::GraphBuilder<T> g(model, config.init_seed);
  std::size_t x = g.input();
  // DenseNet and ResNetV2 blocks open with their own normalisation.
  if (family == FamilyId::densenet || family == FamilyId::resnet_v2) {
    x = g.conv(x, scale_channels(64.0, config.width_mult), 3, 1, "stem/conv");
  } else {
    x = g.conv_bn_relu(x, scale_channels(64.0, config.width_mult), 3, 1, "stem");
  }
  switch (family) {
    case FamilyId::vgg: detail::build_vgg(g, config, x); break;
    case FamilyId::densenet: detail::build_densenet(g, config, x); break;
    case FamilyId::inception: detail::build_inception(g, config, x); break;
    case FamilyId::resnet_v2: detail::build_resnet_v2(g, config, x); break;
    case FamilyId::inception_resnet_v2: detail::build_inception_resnet_v2(g, config, x); break;
    case FamilyId::xception: detail::build_xception(g, config, x); break;
    case FamilyId::mobilenet_v2: detail::build_mobilenet_v2(g, config, x); break;
  }
  return model;
}

/// Runs the layer graph on a (B,C,S,S) batch and returns the softmax rows.
/// Train mode uses batch statistics (updating the running averages) and
/// draws dropout masks from `rng`; infer mode is deterministic.
template <class T>
Var<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr) {
  const auto& c = model.config;
  if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_size ||
      batch.dim(3) != c.input_size) {
    fail(ErrorKind::data, "forward: expected batch (B," + std::to_string(c.input_channels) + "," +
                              std::to_string(c.input_size) + "," + std::to_string(c.input_size) +
                              "), got " + shape_str(batch.shape()));
  }
  std::vector<Var<T>> out(model.layers.size());
  auto p = [&](const Layer& l, std::size_t i) { return param(model.params[l.params[i]]); };
  auto opt = [&](const Layer& l, std::size_t i) {
    return l.params.size() > i ? param(model.params[l.params[i]]) : Var<T>();
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    auto in = [&](std::size_t k) -> const Var<T>& { return out[l.inputs[k]]; };
    switch (l.kind) {
      case LayerKind::input: out[i] = constant(batch); break;
      case LayerKind::conv: out[i] = conv2d(in(0), p(l, 0), opt(l, 1), l.stride, l.padding); break;
      case LayerKind::depthwise_conv:
        out[i] = depthwise_conv2d(in(0), p(l, 0), opt(l, 1), l.stride, l.padding);
        break;
      case LayerKind::batch_norm:
        out[i] = batch_norm(in(0), p(l, 0), p(l, 1), mode, &model.bn_stats[l.bn_index]);
        break;
      case LayerKind::relu: out[i] = relu(in(0)); break;
      case LayerKind::max_pool: out[i] = pool2d(in(0), PoolKind::max, l.kernel, l.stride, l.padding); break;
      case LayerKind::avg_pool: out[i] = pool2d(in(0), PoolKind::avg, l.kernel, l.stride, l.padding); break;
      case LayerKind::global_avg_pool: out[i] = pool2d(in(0), PoolKind::global_avg); break;
      case LayerKind::flatten: out[i] = flatten(in(0)); break;
      case LayerKind::dense: out[i] = dense(in(0), p(l, 0), p(l, 1)); break;
      case LayerKind::dropout: {
        if (mode == Mode::train && l.rate > 0.0 && !rng) {
          fail(ErrorKind::usage, "forward: train-mode dropout needs a generator");
        }
        Rng unused;
        out[i] = dropout(in(0), l.rate, mode, rng ? *rng : unused);
        break;
      }
      case LayerKind::concat:
      case LayerKind::add: {
        std::vector<Var<T>> ins;
        for (std::size_t k : l.inputs) ins.push_back(out[k]);
        out[i] = l.kind == LayerKind::concat ? concat_channels(ins) : add(ins);
        break;
      }
      case LayerKind::softmax: out[i] = softmax(in(0)); break;
    }
  }
  return out.back();
}

struct LayerRow {
  std::string name;
  std::string type;
  Shape output_shape;
  std::size_t parameters = 0;
};

/// One row per layer with the batch axis prepended to the output shape.
template <class T>
std::vector<LayerRow> describe(const Model<T>& model, std::size_t batch = 1) {
  std::vector<LayerRow> rows;
  for (const Layer& l : model.layers) {
    LayerRow r{l.name, std::string(layer_kind_name(l.kind)), {batch}, 0};
    r.output_shape.insert(r.output_shape.end(), l.out_shape.begin(), l.out_shape.end());
    for (std::size_t p : l.params) r.parameters += model.params[p].value.size();
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace covidx
