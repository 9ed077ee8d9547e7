#ifndef NHL_MODULATOR_HPP
#define NHL_MODULATOR_HPP

#include "nhl/model.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace nhl {

/// Parameter-name globs. '*' matches a run of characters without '.', '**'
/// matches any run including '.', '?' matches one non-'.' character; all
/// other characters match literally. The whole name must match.
bool glob_match(std::string_view pattern, std::string_view name);

/// Batch-mean softmax entropy of N x C logits in nats.
double entropy_loss(const Tensor<float>& logits);

/// The entropy-trained parameter subset and its SGD-with-momentum state.
struct ModulatorParamSet {
  std::vector<std::string> selection{"block1.**", "block2.**"};
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int steps_per_batch = 1;

  /// Filled by bind(): concrete parameter names, sorted.
  std::vector<std::string> resolved;
  NamedTensors<float> velocity;

  /// Batch-norm affine parameters of every normalization layer.
  static ModulatorParamSet bn_affine_only();

  /// Resolves globs against the model. Throws ParameterError for globs matching
  /// nothing, for the classifier head, and for conv1.weight (owned by the
  /// Hebbian rule).
  void bind(const ModelCheckpoint& model);
  bool selects(const std::string& name) const;
};

struct ModulatorStepResult {
  /// Entropy before each SGD step, one entry per step.
  std::vector<double> losses;
};

/// steps_per_batch rounds of: batch-stats forward, entropy, backward, momentum
/// SGD on the selection. On a non-finite loss or update the model and optimizer
/// state are restored and NumericError is thrown.
ModulatorStepResult modulator_step(ModelCheckpoint& model, ModulatorParamSet& params, const Tensor<float>& batch);

/// Entropy of the batch-stats forward pass, evaluated in scalar type T.
template <typename T>
double entropy_objective(const ArchitectureDescriptor& arch, const NamedTensors<T>& params,
                         const NamedTensors<T>& buffers, const Tensor<T>& batch) {
  GradientTape<T> tape;
  const auto graph = record_forward(tape, arch, params, buffers, batch, NormMode::batch_stats);
  const std::vector<double> h = entropy_rows(tape.value(graph.logits));
  double acc = 0.0;
  for (double v : h) acc += v;
  return acc / static_cast<double>(h.size());
}

/// Reverse-mode entropy gradients for the parameters accepted by `trainable`.
NamedTensors<float> entropy_gradients(const ModelCheckpoint& model, const Tensor<float>& batch,
                                      const TrainablePredicate& trainable, double* loss = nullptr);

}  // namespace nhl

#endif  // NHL_MODULATOR_HPP
