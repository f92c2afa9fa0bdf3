#pragma once

// Graph inspections asserting each family's defining mechanism. Each check
// returns an empty string on success or a description of the violation.

#include <map>
#include <string>
#include <vector>

#include "covidx/architectures.hpp"

namespace covidx::test {

template <class T>
const Layer& at(const Model<T>& m, std::size_t i) { return m.layers.at(i); }

// Walks back through batch-norm / relu / dropout to the producing layer.
template <class T>
std::size_t producer(const Model<T>& m, std::size_t i) {
  while (true) {
    const Layer& l = m.layers[i];
    if (l.kind == LayerKind::batch_norm || l.kind == LayerKind::relu || l.kind == LayerKind::dropout) {
      i = l.inputs.front();
    } else {
      return i;
    }
  }
}

template <class T>
std::size_t count_kind(const Model<T>& m, LayerKind k) {
  std::size_t n = 0;
  for (const auto& l : m.layers) n += l.kind == k;
  return n;
}

template <class T>
std::string check_common(const Model<T>& m) {
  const Layer& last = m.layers.back();
  if (last.kind != LayerKind::softmax) return "final layer is not softmax";
  if (last.out_shape != Shape{m.config.num_classes}) return "final layer width != num_classes";
  std::set<std::string> ids;
  for (const auto& p : m.params) {
    if (!ids.insert(p.id).second) return "duplicate parameter id " + p.id;
  }
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    for (std::size_t in : m.layers[i].inputs) {
      if (in >= i) return "layer " + m.layers[i].name + " consumes a later layer";
    }
  }
  return {};
}

template <class T>
std::string check_vgg(const Model<T>& m) {
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::conv && l.kernel != 3) return "vgg conv " + l.name + " is not 3x3";
    if (l.kind == LayerKind::add || l.kind == LayerKind::concat || l.kind == LayerKind::depthwise_conv) {
      return "vgg contains merge or depthwise layer " + l.name;
    }
  }
  if (count_kind(m, LayerKind::max_pool) != kStageCount - 1) return "vgg pooling count";
  return {};
}

// Every dense-block layer must read the concatenation of the block entry and
// all earlier layer outputs of its block, in order.
template <class T>
std::string check_densenet(const Model<T>& m, std::size_t* layers_checked = nullptr) {
  std::map<std::string, std::vector<std::size_t>> convs_by_stage;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    const auto pos = l.name.find("/dense");
    if (l.kind == LayerKind::conv && pos != std::string::npos && l.name.ends_with("/conv")) {
      convs_by_stage[l.name.substr(0, pos)].push_back(i);
    }
  }
  if (convs_by_stage.size() != kStageCount) return "densenet: expected one dense block per stage";
  std::size_t checked = 0;
  for (const auto& [stage, convs] : convs_by_stage) {
    if (convs.size() < 2) return "densenet: block " + stage + " has fewer than two layers";
    // conv <- relu <- bn <- (entry | concat)
    auto feed = [&](std::size_t conv) { return at(m, at(m, at(m, conv).inputs[0]).inputs[0]).inputs[0]; };
    const std::size_t entry = feed(convs.front());
    for (std::size_t k = 1; k < convs.size(); ++k) {
      const Layer& cat = at(m, feed(convs[k]));
      std::vector<std::size_t> expect{entry};
      expect.insert(expect.end(), convs.begin(), convs.begin() + static_cast<long>(k));
      if (cat.kind != LayerKind::concat || cat.inputs != expect) {
        return "densenet: layer " + at(m, convs[k]).name + " does not receive all earlier outputs";
      }
      ++checked;
    }
    // Channel counts grow monotonically inside the block.
    std::size_t prev = at(m, entry).channels();
    for (std::size_t k = 1; k < convs.size(); ++k) {
      const std::size_t c = at(m, feed(convs[k])).channels();
      if (c < prev) return "densenet: channel count decreased in " + stage;
      prev = c;
    }
  }
  if (layers_checked) *layers_checked = checked;
  return {};
}

// Classifies the branches of an inception concat. Returns an error or "".
template <class T>
std::string check_inception_concat(const Model<T>& m, const Layer& cat) {
  if (cat.kind != LayerKind::concat || cat.inputs.size() < 2) return "inception: concat with < 2 branches";
  bool one = false, three = false, pooled = false;
  for (std::size_t b : cat.inputs) {
    const Layer& conv = at(m, producer(m, b));
    if (conv.kind != LayerKind::conv) return "inception: branch not ending in conv";
    const Layer& before = at(m, producer(m, conv.inputs[0]));
    if (conv.kernel == 3 && before.kind == LayerKind::conv && before.kernel == 1) three = true;
    else if (conv.kernel == 1 && before.kind == LayerKind::max_pool && before.stride == 1) pooled = true;
    else if (conv.kernel == 1) one = true;
  }
  if (!(one && three && pooled)) return "inception: missing 1x1, 1x1->3x3 or pooling branch";
  return {};
}

template <class T>
std::string check_inception(const Model<T>& m) {
  const std::size_t blocks = blocks_per_stage(m.config.depth_mult);
  std::size_t concats = 0;
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::add) return "inception: unexpected additive merge";
    if (l.kind != LayerKind::concat) continue;
    if (auto e = check_inception_concat(m, l); !e.empty()) return e;
    ++concats;
  }
  if (concats != kStageCount * blocks) return "inception: wrong number of inception blocks";
  return {};
}

template <class T>
std::string check_resnet_v2(const Model<T>& m) {
  const std::size_t blocks = blocks_per_stage(m.config.depth_mult);
  std::size_t adds = 0;
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::concat) return "resnetv2: unexpected concat";
    if (l.kind != LayerKind::add) continue;
    ++adds;
    if (l.inputs.size() != 2) return "resnetv2: add must have two inputs";
    const Layer& skip = at(m, l.inputs[0]);
    const Layer& body = at(m, l.inputs[1]);
    if (body.kind != LayerKind::conv || body.kernel != 3) return "resnetv2: residual body must end in a conv";
    const bool projection = skip.kind == LayerKind::conv && skip.kernel == 1;
    if (!projection && skip.out_shape != body.out_shape) return "resnetv2: identity skip shape mismatch";
  }
  if (adds != kStageCount * blocks) return "resnetv2: every block must end in an additive merge";
  // Pre-activation: every 3x3 conv reads a relu fed by batch norm.
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::conv && l.kernel == 3 && l.name != "stem/conv") {
      const Layer& r = at(m, l.inputs[0]);
      if (r.kind != LayerKind::relu || at(m, r.inputs[0]).kind != LayerKind::batch_norm) {
        return "resnetv2: conv " + l.name + " is not pre-activated";
      }
    }
  }
  return {};
}

template <class T>
std::string check_inception_resnet_v2(const Model<T>& m) {
  const std::size_t blocks = blocks_per_stage(m.config.depth_mult);
  std::size_t adds = 0;
  for (const auto& l : m.layers) {
    if (l.kind != LayerKind::add) continue;
    ++adds;
    if (l.inputs.size() != 2) return "inceptionresnetv2: add must have two inputs";
    const Layer& up = at(m, l.inputs[1]);
    if (up.kind != LayerKind::conv || up.kernel != 1) return "inceptionresnetv2: missing 1x1 projection";
    if (auto e = check_inception_concat(m, at(m, up.inputs[0])); !e.empty()) return e;
    if (at(m, l.inputs[0]).out_shape != up.out_shape) return "inceptionresnetv2: skip shape mismatch";
  }
  if (adds != kStageCount * blocks) return "inceptionresnetv2: every block needs an additive skip";
  return {};
}

template <class T>
std::string check_xception(const Model<T>& m) {
  const std::size_t blocks = blocks_per_stage(m.config.depth_mult);
  std::size_t separable = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].kind != LayerKind::depthwise_conv) continue;
    const auto users = m.consumers(i);
    if (users.size() != 1 || at(m, users[0]).kind != LayerKind::conv || at(m, users[0]).kernel != 1) {
      return "xception: depthwise " + m.layers[i].name + " not followed by a pointwise conv";
    }
    ++separable;
  }
  if (separable != 2 * kStageCount * blocks) return "xception: expected two separable convs per block";
  if (count_kind(m, LayerKind::add) != kStageCount * blocks) return "xception: every block needs an additive skip";
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::conv && l.kernel == 3 && l.name != "stem/conv") {
      return "xception: full 3x3 convolution " + l.name + " outside the stem";
    }
  }
  return {};
}

// Expand(1x1) -> depthwise(3x3) -> linear project(1x1), with an additive skip
// exactly when stride is 1 and the channel count is preserved.
template <class T>
std::string check_mobilenet_v2(const Model<T>& m, std::size_t* with_skip = nullptr,
                               std::size_t* without_skip = nullptr) {
  std::size_t skip = 0, plain = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& dw = m.layers[i];
    if (dw.kind != LayerKind::depthwise_conv) continue;
    const Layer& expand = at(m, producer(m, dw.inputs[0]));
    if (expand.kind != LayerKind::conv || expand.kernel != 1) return "mobilenetv2: missing expansion";
    const std::size_t block_in = expand.inputs[0];
    if (expand.channels() != at(m, block_in).channels() * kMobileNetExpansion) return "mobilenetv2: expansion ratio";
    std::size_t cur = i;
    std::size_t project = kNoIndex;
    while (project == kNoIndex) {
      const auto users = m.consumers(cur);
      if (users.size() != 1) return "mobilenetv2: branching inside block";
      cur = users[0];
      if (at(m, cur).kind == LayerKind::conv) project = cur;
    }
    if (at(m, project).kernel != 1) return "mobilenetv2: projection is not 1x1";
    const auto users = m.consumers(project);
    for (std::size_t u : users) {
      const auto k = at(m, u).kind;
      if (k == LayerKind::relu || k == LayerKind::batch_norm) return "mobilenetv2: projection is not linear";
    }
    bool has_add = false;
    for (std::size_t u : users) {
      const auto& ins = at(m, u).inputs;
      has_add = has_add || (at(m, u).kind == LayerKind::add &&
                            std::find(ins.begin(), ins.end(), block_in) != ins.end());
    }
    const bool should = dw.stride == 1 && at(m, block_in).channels() == at(m, project).channels();
    if (has_add != should) return "mobilenetv2: skip presence violates the stride/channel rule at " + dw.name;
    (has_add ? skip : plain)++;
  }
  if (skip + plain != kStageCount * blocks_per_stage(m.config.depth_mult)) return "mobilenetv2: block count";
  if (with_skip) *with_skip = skip;
  if (without_skip) *without_skip = plain;
  return {};
}

template <class T>
std::string check_family(const Model<T>& m) {
  if (auto e = check_common(m); !e.empty()) return e;
  switch (m.family) {
    case FamilyId::vgg: return check_vgg(m);
    case FamilyId::densenet: return check_densenet(m);
    case FamilyId::inception: return check_inception(m);
    case FamilyId::resnet_v2: return check_resnet_v2(m);
    case FamilyId::inception_resnet_v2: return check_inception_resnet_v2(m);
    case FamilyId::xception: return check_xception(m);
    case FamilyId::mobilenet_v2: return check_mobilenet_v2(m);
  }
  return "unknown family";
}

}  // namespace covidx::test
