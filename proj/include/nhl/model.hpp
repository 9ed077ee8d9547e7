#ifndef NHL_MODEL_HPP
#define NHL_MODEL_HPP

#include "nhl/tape.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace nhl {

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

enum class NormMode { source_stats, batch_stats };

struct ConvSpec {
  Index filters = 32;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
};

/// Residual block {conv, bn, relu} x 2 plus skip. A strided block downsamples in
/// its first conv (kernel 2*stride, padding stride/2) and projects the skip with a
/// stride x stride conv + bn; so does any block that changes width.
struct BlockSpec {
  Index width = 32;
  Index stride = 1;
};

struct ArchitectureDescriptor {
  Index in_channels = 3;
  Index height = 32;
  Index width = 32;
  ConvSpec conv1;
  std::vector<BlockSpec> blocks;
  Index num_classes = 10;

  /// 32x32x3 input, 32-filter 3x3 conv1, blocks 32/64/128/256, 10 classes.
  static ArchitectureDescriptor desk_default();

  /// Throws ParameterError naming the first invalid field.
  void validate() const;

  /// Trainable tensors in canonical (sorted) order.
  std::map<std::string, Shape> parameter_shapes() const;
  /// Batch-norm running statistics.
  std::map<std::string, Shape> buffer_shapes() const;
  /// Names of batch-norm layers, e.g. "bn1", "block2.bn_a".
  std::vector<std::string> batchnorm_layers() const;

  Index feature_width() const { return blocks.empty() ? conv1.filters : blocks.back().width; }
  bool block_has_projection(std::size_t b) const;
  ConvSpec block_conv_a(std::size_t b) const;
  ConvSpec block_conv_b(std::size_t b) const;
  ConvSpec block_shortcut(std::size_t b) const;

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&);
};

void to_json(nlohmann::json& j, const ArchitectureDescriptor& d);
void from_json(const nlohmann::json& j, ArchitectureDescriptor& d);

struct TrainingMetadata {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::optional<double> source_accuracy;
};

struct ModelCheckpoint {
  ArchitectureDescriptor arch;
  NamedTensors<float> params;
  NamedTensors<float> buffers;
  /// Optional named state carried alongside the model (e.g. hebbian.w, hebbian.R).
  NamedTensors<float> extras;
  TrainingMetadata metadata;
  /// Scalar configuration stored in the header next to the extras.
  nlohmann::json extra_config = nlohmann::json::object();

  /// Throws FormatError when a descriptor parameter is missing, misshapen or orphaned.
  void check_consistency() const;

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&);
};

/// He (fan-in) normal init for conv/linear weights, zero linear bias, gamma=1, beta=0,
/// running mean 0 / var 1.
ModelCheckpoint build_model(const ArchitectureDescriptor& desc, Rng& rng);

/// Returns a tensor whose values are `name`'s parameter/buffer/extra entry.
const Tensor<float>& find_tensor(const ModelCheckpoint& model, const std::string& name);

struct BatchStats {
  std::vector<double> mean, var;  // biased variance
  Index count = 0;                // values per channel
};

/// Handles to the interesting nodes of a recorded forward pass.
template <typename T>
struct ForwardGraph {
  typename GradientTape<T>::Var logits;
  typename GradientTape<T>::Var conv1;        // conv1 output before its batch norm
  typename GradientTape<T>::Var penultimate;  // pooled features fed to the classifier
  /// Batch statistics per batch-norm layer (batch-stats mode only).
  std::map<std::string, BatchStats> batch_stats;
};

using TrainablePredicate = std::function<bool(const std::string&)>;

/// Records a forward pass onto `tape`. Parameters for which `trainable` returns
/// true become gradient-carrying leaves.
template <typename T>
ForwardGraph<T> record_forward(GradientTape<T>& tape, const ArchitectureDescriptor& arch,
                               const NamedTensors<T>& params, const NamedTensors<T>& buffers,
                               const Tensor<T>& batch, NormMode mode, const TrainablePredicate& trainable = {}) {
  if (batch.rank() != 4 || batch.dim(1) != arch.in_channels || batch.dim(2) != arch.height ||
      batch.dim(3) != arch.width)
    throw DimensionError("batch shape " + shape_string(batch.shape()) + " does not match architecture input " +
                         std::to_string(arch.in_channels) + "x" + std::to_string(arch.height) + "x" +
                         std::to_string(arch.width));
  if (mode == NormMode::batch_stats && batch.dim(0) < 2)
    throw ParameterError("batch-statistics normalization requires a batch of at least 2 samples");

  using Var = typename GradientTape<T>::Var;
  ForwardGraph<T> graph;
  auto param = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("missing parameter " + name);
    return tape.parameter(name, it->second, trainable && trainable(name));
  };
  auto conv = [&](Var x, const std::string& name, const ConvSpec& spec) {
    return ag::conv2d(tape, x, param(name + ".weight"), spec.stride, spec.padding);
  };
  auto norm = [&](Var x, const std::string& name) {
    Var gamma = param(name + ".gamma");
    Var beta = param(name + ".beta");
    if (mode == NormMode::source_stats) {
      const auto& mean = buffers.at(name + ".running_mean");
      const auto& var = buffers.at(name + ".running_var");
      return ag::batchnorm(tape, x, gamma, beta, &mean, &var).out;
    }
    const Shape& in = tape.value(x).shape();
    auto bn = ag::batchnorm(tape, x, gamma, beta);
    graph.batch_stats.emplace(name, BatchStats{std::move(bn.mean), std::move(bn.var), in[0] * in[2] * in[3]});
    return bn.out;
  };

  Var x = tape.constant(batch);
  graph.conv1 = conv(x, "conv1", arch.conv1);
  Var h = ag::relu(tape, norm(graph.conv1, "bn1"));
  for (std::size_t b = 0; b < arch.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b + 1);
    Var a = ag::relu(tape, norm(conv(h, prefix + ".conv_a", arch.block_conv_a(b)), prefix + ".bn_a"));
    Var main = norm(conv(a, prefix + ".conv_b", arch.block_conv_b(b)), prefix + ".bn_b");
    Var skip = h;
    if (arch.block_has_projection(b))
      skip = norm(conv(h, prefix + ".shortcut", arch.block_shortcut(b)), prefix + ".bn_s");
    h = ag::relu(tape, ag::add(tape, main, skip));
  }
  graph.penultimate = ag::global_avg_pool(tape, h);
  graph.logits = ag::linear(tape, graph.penultimate, param("fc.weight"), param("fc.bias"));
  return graph;
}

struct ForwardResult {
  Tensor<float> logits;
  Tensor<float> conv1;
  Tensor<float> penultimate;
};

/// Inference pass. Deterministic and side-effect free.
ForwardResult forward(const ModelCheckpoint& model, const Tensor<float>& batch, NormMode mode);

template <typename U>
NamedTensors<U> cast_tensors(const NamedTensors<float>& in) {
  NamedTensors<U> out;
  for (const auto& [name, t] : in) out.emplace(name, t.template cast<U>());
  return out;
}

}  // namespace nhl

#endif  // NHL_MODEL_HPP
