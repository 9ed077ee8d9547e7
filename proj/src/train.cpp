#include "nhl/train.hpp"

#include <cmath>

namespace nhl {

ModelCheckpoint train_source(const ModelCheckpoint& model, const DatasetHandle& train, const TrainConfig& config,
                             const DatasetHandle* test, TrainLog* log) {
  if (config.epochs < 0) throw ParameterError("epochs must be >= 0");
  if (config.epochs == 0) return model;
  if (train.size() < 2) throw ParameterError("training set needs at least 2 samples");
  if (config.batch_size < 2) throw ParameterError("training batch size must be >= 2");

  ModelCheckpoint out = model;
  NamedTensors<float> velocity;
  for (const auto& [name, t] : out.params) velocity.emplace(name, Tensor<float>(t.shape()));
  const auto all = [](const std::string&) { return true; };
  const Index N = train.size();
  const Index steps_per_epoch = N / config.batch_size;
  const Index total_steps = steps_per_epoch * config.epochs;
  Index step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    const std::vector<Index> order = rng.permutation(N);
    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    double lr = config.learning_rate;
    for (Index b = 0; b < steps_per_epoch; ++b, ++step) {
      lr = config.schedule == LrSchedule::cosine
               ? 0.5 * config.learning_rate *
                     (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total_steps)))
               : config.learning_rate;
      std::vector<Index> idx(order.begin() + b * config.batch_size, order.begin() + (b + 1) * config.batch_size);
      std::vector<int> labels;
      for (Index i : idx) labels.push_back(train.labels[static_cast<std::size_t>(i)]);

      GradientTape<float> tape;
      const auto graph = record_forward(tape, out.arch, out.params, out.buffers, gather_rows(train.images, idx),
                                        NormMode::batch_stats, all);
      const auto loss = ag::cross_entropy(tape, graph.logits, labels);
      const double loss_value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(loss_value))
        throw NumericError("source training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(b));
      const std::vector<int> pred = argmax_rows(tape.value(graph.logits));
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
      seen += static_cast<Index>(pred.size());
      loss_sum += loss_value;

      NamedTensors<float> grads = tape.backward(loss);
      const auto flr = static_cast<float>(lr), mu = static_cast<float>(config.momentum);
      const auto wd = static_cast<float>(config.weight_decay);
      for (auto& [name, p] : out.params) {
        const Tensor<float>& g = grads.at(name);
        Tensor<float>& v = velocity.at(name);
        const float decay = name.ends_with(".weight") ? wd : 0.0f;
        for (Index i = 0; i < p.size(); ++i) {
          v[i] = mu * v[i] + g[i] + decay * p[i];
          p[i] -= flr * v[i];
        }
      }
      const double m = config.bn_momentum;
      for (const auto& [layer, stats] : graph.batch_stats) {
        Tensor<float>& rm = out.buffers.at(layer + ".running_mean");
        Tensor<float>& rv = out.buffers.at(layer + ".running_var");
        const double unbias = static_cast<double>(stats.count) / static_cast<double>(stats.count - 1);
        for (Index c = 0; c < rm.size(); ++c) {
          const auto k = static_cast<std::size_t>(c);
          rm[c] = static_cast<float>((1 - m) * rm[c] + m * stats.mean[k]);
          rv[c] = static_cast<float>((1 - m) * rv[c] + m * stats.var[k] * unbias);
        }
      }
    }
    if (log)
      log->epochs.push_back({epoch, loss_sum / static_cast<double>(std::max<Index>(1, steps_per_epoch)),
                             seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0, lr});
  }
  out.metadata.seed = config.seed;
  out.metadata.epochs = model.metadata.epochs + config.epochs;
  if (test) {
    out.metadata.source_accuracy = evaluate_accuracy(out, *test, NormMode::source_stats);
    if (log) log->test_accuracy = out.metadata.source_accuracy;
  }
  return out;
}

double evaluate_accuracy(const ModelCheckpoint& model, const DatasetHandle& data, NormMode mode, Index batch_size) {
  StreamOptions opts;
  opts.batch_size = batch_size;
  Index correct = 0, seen = 0;
  for (const Batch& b : stream_batches(data, opts)) {
    const std::vector<int> pred = argmax_rows(forward(model, b.images, mode).logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1 : 0;
    seen += static_cast<Index>(pred.size());
  }
  return seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
}

}  // namespace nhl
