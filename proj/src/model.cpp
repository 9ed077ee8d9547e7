#include "nhl/model.hpp"

#include <cmath>

namespace nhl {

ArchitectureDescriptor ArchitectureDescriptor::desk_default() {
  ArchitectureDescriptor d;
  d.conv1 = ConvSpec{32, 3, 1, 1};
  d.blocks = {{32, 1}, {64, 2}, {128, 2}, {256, 2}};
  return d;
}

bool ArchitectureDescriptor::block_has_projection(std::size_t b) const {
  const Index in = b == 0 ? conv1.filters : blocks[b - 1].width;
  return blocks[b].stride != 1 || blocks[b].width != in;
}

ConvSpec ArchitectureDescriptor::block_conv_a(std::size_t b) const {
  const Index s = blocks[b].stride;
  if (s == 1) return ConvSpec{blocks[b].width, 3, 1, 1};
  return ConvSpec{blocks[b].width, 2 * s, s, s / 2};
}

ConvSpec ArchitectureDescriptor::block_conv_b(std::size_t b) const { return ConvSpec{blocks[b].width, 3, 1, 1}; }

ConvSpec ArchitectureDescriptor::block_shortcut(std::size_t b) const {
  return ConvSpec{blocks[b].width, blocks[b].stride, blocks[b].stride, 0};
}

void ArchitectureDescriptor::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ParameterError("architecture." + field + ": " + why);
  };
  if (in_channels < 1) fail("in_channels", "must be >= 1");
  if (height < 1 || width < 1) fail("height/width", "must be >= 1");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (conv1.filters < 1) fail("conv1.filters", "must be >= 1");
  if (conv1.kernel < 1) fail("conv1.kernel", "must be >= 1");
  if (conv1.stride < 1) fail("conv1.stride", "must be >= 1");
  if (conv1.padding < 0) fail("conv1.padding", "must be >= 0");
  auto step = [&](const Shape& in, const ConvSpec& spec, const std::string& field) {
    try {
      const ConvGeometry g = conv_geometry(in, spec.kernel, spec.kernel, spec.stride, spec.padding);
      return Shape{in[0], spec.filters, g.out_h, g.out_w};
    } catch (const DimensionError& e) {
      fail(field, e.what());
    }
    return in;
  };
  Shape shape = step(Shape{2, in_channels, height, width}, conv1, "conv1");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string field = "blocks[" + std::to_string(b) + "]";
    if (blocks[b].width < 1) fail(field + ".width", "must be >= 1");
    if (blocks[b].stride < 1) fail(field + ".stride", "must be >= 1");
    if (blocks[b].stride != 1 && blocks[b].stride % 2 != 0) fail(field + ".stride", "must be 1 or even");
    const Shape main = step(step(shape, block_conv_a(b), field + ".conv_a"), block_conv_b(b), field + ".conv_b");
    if (block_has_projection(b)) {
      const Shape skip = step(shape, block_shortcut(b), field + ".shortcut");
      if (skip != main) fail(field, "shortcut shape " + shape_string(skip) + " != main path " + shape_string(main));
    }
    shape = main;
  }
}

std::map<std::string, Shape> ArchitectureDescriptor::parameter_shapes() const {
  std::map<std::string, Shape> out;
  auto bn = [&](const std::string& name, Index c) {
    out[name + ".gamma"] = {c};
    out[name + ".beta"] = {c};
  };
  out["conv1.weight"] = {conv1.filters, in_channels, conv1.kernel, conv1.kernel};
  bn("bn1", conv1.filters);
  Index in = conv1.filters;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "block" + std::to_string(b + 1);
    const ConvSpec a = block_conv_a(b), c = block_conv_b(b);
    out[p + ".conv_a.weight"] = {a.filters, in, a.kernel, a.kernel};
    bn(p + ".bn_a", a.filters);
    out[p + ".conv_b.weight"] = {c.filters, a.filters, c.kernel, c.kernel};
    bn(p + ".bn_b", c.filters);
    if (block_has_projection(b)) {
      const ConvSpec s = block_shortcut(b);
      out[p + ".shortcut.weight"] = {s.filters, in, s.kernel, s.kernel};
      bn(p + ".bn_s", s.filters);
    }
    in = blocks[b].width;
  }
  out["fc.weight"] = {num_classes, feature_width()};
  out["fc.bias"] = {num_classes};
  return out;
}

std::vector<std::string> ArchitectureDescriptor::batchnorm_layers() const {
  std::vector<std::string> out{"bn1"};
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "block" + std::to_string(b + 1);
    out.push_back(p + ".bn_a");
    out.push_back(p + ".bn_b");
    if (block_has_projection(b)) out.push_back(p + ".bn_s");
  }
  return out;
}

std::map<std::string, Shape> ArchitectureDescriptor::buffer_shapes() const {
  const auto params = parameter_shapes();
  std::map<std::string, Shape> out;
  for (const std::string& layer : batchnorm_layers()) {
    const Shape& s = params.at(layer + ".gamma");
    out[layer + ".running_mean"] = s;
    out[layer + ".running_var"] = s;
  }
  return out;
}

bool operator==(const ArchitectureDescriptor& a, const ArchitectureDescriptor& b) {
  auto conv_eq = [](const ConvSpec& x, const ConvSpec& y) {
    return x.filters == y.filters && x.kernel == y.kernel && x.stride == y.stride && x.padding == y.padding;
  };
  if (a.in_channels != b.in_channels || a.height != b.height || a.width != b.width ||
      a.num_classes != b.num_classes || !conv_eq(a.conv1, b.conv1) || a.blocks.size() != b.blocks.size())
    return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i)
    if (a.blocks[i].width != b.blocks[i].width || a.blocks[i].stride != b.blocks[i].stride) return false;
  return true;
}

void to_json(nlohmann::json& j, const ArchitectureDescriptor& d) {
  j = nlohmann::json{{"in_channels", d.in_channels},
                     {"height", d.height},
                     {"width", d.width},
                     {"num_classes", d.num_classes},
                     {"conv1",
                      {{"filters", d.conv1.filters},
                       {"kernel", d.conv1.kernel},
                       {"stride", d.conv1.stride},
                       {"padding", d.conv1.padding}}}};
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockSpec& b : d.blocks) blocks.push_back({{"width", b.width}, {"stride", b.stride}});
  j["blocks"] = std::move(blocks);
}

void from_json(const nlohmann::json& j, ArchitectureDescriptor& d) {
  d.in_channels = j.at("in_channels").get<Index>();
  d.height = j.at("height").get<Index>();
  d.width = j.at("width").get<Index>();
  d.num_classes = j.at("num_classes").get<Index>();
  const auto& c = j.at("conv1");
  d.conv1 = ConvSpec{c.at("filters").get<Index>(), c.at("kernel").get<Index>(), c.at("stride").get<Index>(),
                     c.at("padding").get<Index>()};
  d.blocks.clear();
  for (const auto& b : j.at("blocks")) d.blocks.push_back({b.at("width").get<Index>(), b.at("stride").get<Index>()});
}

void ModelCheckpoint::check_consistency() const {
  auto check = [](const std::map<std::string, Shape>& expected, const NamedTensors<float>& actual,
                  const char* what) {
    for (const auto& [name, shape] : expected) {
      auto it = actual.find(name);
      if (it == actual.end()) throw FormatError(std::string("checkpoint is missing ") + what + " " + name);
      if (it->second.shape() != shape)
        throw FormatError(std::string(what) + " " + name + " has shape " + shape_string(it->second.shape()) +
                          ", expected " + shape_string(shape));
    }
    for (const auto& [name, t] : actual)
      if (!expected.contains(name)) throw FormatError(std::string("orphan ") + what + " " + name);
  };
  check(arch.parameter_shapes(), params, "parameter");
  check(arch.buffer_shapes(), buffers, "buffer");
}

bool operator==(const ModelCheckpoint& a, const ModelCheckpoint& b) {
  return a.arch == b.arch && a.params == b.params && a.buffers == b.buffers && a.extras == b.extras &&
         a.metadata.seed == b.metadata.seed && a.metadata.epochs == b.metadata.epochs &&
         a.metadata.source_accuracy == b.metadata.source_accuracy && a.extra_config == b.extra_config;
}

ModelCheckpoint build_model(const ArchitectureDescriptor& desc, Rng& rng) {
  desc.validate();
  ModelCheckpoint model;
  model.arch = desc;
  model.metadata.seed = rng.seed();
  // Sorted-name order fixes the draw sequence.
  for (const auto& [name, shape] : desc.parameter_shapes()) {
    Tensor<float> t(shape);
    const bool is_weight = name.ends_with(".weight");
    if (is_weight) {
      const Index fan_in = t.size() / shape[0];
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (float& v : t.data()) v = static_cast<float>(rng.normal() * std);
    } else if (name.ends_with(".gamma")) {
      t.fill(1.0f);
    }
    model.params.emplace(name, std::move(t));
  }
  for (const auto& [name, shape] : desc.buffer_shapes())
    model.buffers.emplace(name, Tensor<float>(shape, name.ends_with(".running_var") ? 1.0f : 0.0f));
  return model;
}

const Tensor<float>& find_tensor(const ModelCheckpoint& model, const std::string& name) {
  for (const NamedTensors<float>* group : {&model.params, &model.buffers, &model.extras}) {
    auto it = group->find(name);
    if (it != group->end()) return it->second;
  }
  throw ParameterError("no tensor named " + name);
}

ForwardResult forward(const ModelCheckpoint& model, const Tensor<float>& batch, NormMode mode) {
  GradientTape<float> tape;
  const ForwardGraph<float> graph = record_forward(tape, model.arch, model.params, model.buffers, batch, mode);
  return ForwardResult{tape.value(graph.logits), tape.value(graph.conv1), tape.value(graph.penultimate)};
}

}  // namespace nhl
