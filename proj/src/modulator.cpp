#include "nhl/modulator.hpp"

#include <algorithm>
#include <cmath>

namespace nhl {

bool glob_match(std::string_view pattern, std::string_view name) {
  if (pattern.empty()) return name.empty();
  if (pattern.starts_with("**")) {
    const std::string_view rest = pattern.substr(2);
    for (std::size_t i = 0; i <= name.size(); ++i)
      if (glob_match(rest, name.substr(i))) return true;
    return false;
  }
  if (pattern.front() == '*') {
    const std::string_view rest = pattern.substr(1);
    for (std::size_t i = 0; i <= name.size(); ++i) {
      if (glob_match(rest, name.substr(i))) return true;
      if (i < name.size() && name[i] == '.') break;
    }
    return false;
  }
  if (name.empty()) return false;
  if (pattern.front() == '?') return name.front() != '.' && glob_match(pattern.substr(1), name.substr(1));
  return pattern.front() == name.front() && glob_match(pattern.substr(1), name.substr(1));
}

double entropy_loss(const Tensor<float>& logits) {
  if (logits.rank() != 2) throw DimensionError("entropy_loss expects N x C logits");
  const std::vector<double> h = entropy_rows(logits);
  double acc = 0.0;
  for (double v : h) acc += v;
  return acc / static_cast<double>(h.size());
}

ModulatorParamSet ModulatorParamSet::bn_affine_only() {
  ModulatorParamSet p;
  p.selection = {"**.gamma", "**.beta"};
  return p;
}

void ModulatorParamSet::bind(const ModelCheckpoint& model) {
  if (!(learning_rate >= 0.0)) throw ParameterError("modulator learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("modulator momentum must be in [0, 1)");
  if (steps_per_batch < 1) throw ParameterError("modulator steps_per_batch must be >= 1");
  std::vector<std::string> names;
  for (const std::string& glob : selection) {
    bool any = false;
    for (const auto& [name, t] : model.params) {
      if (!glob_match(glob, name)) continue;
      any = true;
      if (name.starts_with("fc.")) throw ParameterError("selection '" + glob + "' includes classifier parameter " + name);
      if (name == "conv1.weight") throw ParameterError("selection '" + glob + "' includes conv1.weight");
      names.push_back(name);
    }
    if (!any) throw ParameterError("selection '" + glob + "' matches no parameter");
  }
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  resolved = std::move(names);
  for (auto it = velocity.begin(); it != velocity.end();)
    it = std::binary_search(resolved.begin(), resolved.end(), it->first) ? std::next(it) : velocity.erase(it);
}

bool ModulatorParamSet::selects(const std::string& name) const {
  return std::binary_search(resolved.begin(), resolved.end(), name);
}

NamedTensors<float> entropy_gradients(const ModelCheckpoint& model, const Tensor<float>& batch,
                                      const TrainablePredicate& trainable, double* loss) {
  GradientTape<float> tape;
  const auto graph = record_forward(tape, model.arch, model.params, model.buffers, batch, NormMode::batch_stats,
                                    trainable);
  const auto objective = ag::entropy(tape, graph.logits);
  if (loss) *loss = entropy_loss(tape.value(graph.logits));
  return tape.backward(objective);
}

ModulatorStepResult modulator_step(ModelCheckpoint& model, ModulatorParamSet& params, const Tensor<float>& batch) {
  if (params.resolved.empty()) params.bind(model);
  if (batch.rank() != 4 || batch.dim(0) < 2) throw ParameterError("modulator_step needs a batch of at least 2 samples");

  NamedTensors<float> saved_params;
  for (const std::string& name : params.resolved) saved_params.emplace(name, model.params.at(name));
  const NamedTensors<float> saved_velocity = params.velocity;
  auto rollback = [&](const std::string& why) {
    for (auto& [name, t] : saved_params) model.params.at(name) = std::move(t);
    params.velocity = saved_velocity;
    throw NumericError("modulator step aborted: " + why + "; model rolled back");
  };

  const auto trainable = [&params](const std::string& name) { return params.selects(name); };
  const auto lr = static_cast<float>(params.learning_rate);
  const auto mu = static_cast<float>(params.momentum);
  ModulatorStepResult result;
  for (int step = 0; step < params.steps_per_batch; ++step) {
    double loss = 0.0;
    NamedTensors<float> grads = entropy_gradients(model, batch, trainable, &loss);
    if (!std::isfinite(loss)) rollback("non-finite entropy loss");
    result.losses.push_back(loss);
    for (const std::string& name : params.resolved) {
      const Tensor<float>& g = grads.at(name);
      Tensor<float>& p = model.params.at(name);
      Tensor<float>& v = params.velocity.try_emplace(name, p.shape()).first->second;
      for (Index i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        p[i] = p[i] - lr * v[i];
      }
      if (!p.all_finite()) rollback("non-finite update of " + name);
    }
  }
  return result;
}

}  // namespace nhl
