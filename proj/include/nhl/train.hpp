#ifndef NHL_TRAIN_HPP
#define NHL_TRAIN_HPP

#include "nhl/dataset.hpp"
#include "nhl/model.hpp"

#include <cstdint>
#include <vector>

namespace nhl {

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  int epochs = 6;
  Index batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // conv and linear weights only
  LrSchedule schedule = LrSchedule::cosine;
  double bn_momentum = 0.1;    // running stats: r <- (1 - m) r + m batch (unbiased variance)
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::optional<double> test_accuracy;
};

/// Supervised minibatch SGD with momentum on cross-entropy. Works on a copy;
/// epochs == 0 returns the input unchanged. When `test` is given the clean
/// accuracy (source statistics) is recorded in the checkpoint metadata.
ModelCheckpoint train_source(const ModelCheckpoint& model, const DatasetHandle& train, const TrainConfig& config,
                             const DatasetHandle* test = nullptr, TrainLog* log = nullptr);

/// Top-1 accuracy in [0, 1].
double evaluate_accuracy(const ModelCheckpoint& model, const DatasetHandle& data, NormMode mode,
                         Index batch_size = 128);

}  // namespace nhl

#endif  // NHL_TRAIN_HPP
