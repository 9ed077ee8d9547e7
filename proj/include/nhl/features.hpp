#ifndef NHL_FEATURES_HPP
#define NHL_FEATURES_HPP

// Per-channel feature histograms for comparing clean, shifted and adapted
// activation distributions.

#include "nhl/engine.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace nhl {

inline constexpr int kHistogramBins = 64;

/// Tap names: "conv1" (conv1 output, N x K x H x W) and "penultimate" (pooled features, N x F).
const std::vector<std::string>& feature_tap_names();
const Tensor<float>& select_tap(const ForwardResult& out, const std::string& tap);

struct ChannelRange {
  double lo = 0.0, hi = 1.0;
};

/// Fixed-range histograms, one per channel. Values outside [lo, hi] land in the
/// edge bins, so every value is counted.
class ChannelHistograms {
 public:
  ChannelHistograms() = default;
  explicit ChannelHistograms(std::vector<ChannelRange> ranges, int bins = kHistogramBins);

  /// Adds an N x C (x H x W) activation tensor.
  void add(const Tensor<float>& activations);

  Index channels() const { return static_cast<Index>(ranges_.size()); }
  int bins() const { return bins_; }
  const std::vector<ChannelRange>& ranges() const { return ranges_; }
  const std::vector<std::uint64_t>& counts(Index channel) const { return counts_[static_cast<std::size_t>(channel)]; }
  std::uint64_t total(Index channel) const;

  /// Mean over channels of the L1 distance between normalized histograms.
  double l1_distance(const ChannelHistograms& other) const;

  nlohmann::json to_json() const;

 private:
  std::vector<ChannelRange> ranges_;
  int bins_ = kHistogramBins;
  std::vector<std::vector<std::uint64_t>> counts_;
};

/// Per-channel [min, max] over a set of activation tensors.
class RangeTracker {
 public:
  void add(const Tensor<float>& activations);
  std::vector<ChannelRange> ranges() const;

 private:
  std::vector<ChannelRange> ranges_;
};

/// Histograms of one tap under the three conditions, binned over the clean range.
struct TapComparison {
  ChannelHistograms clean, corrupted, adapted;
  double l1_corrupted = 0.0;  // corrupted vs clean
  double l1_adapted = 0.0;    // adapted vs clean
};

struct FeatureExport {
  std::map<std::string, TapComparison> taps;
  /// conv1 outputs of the first <= max_maps images of batch 1, per condition.
  Tensor<float> clean_maps, corrupted_maps, adapted_maps;
  AdaptationReport report;  // the adapted run
};

/// Runs the clean stream and the corrupted stream through the source model
/// (source statistics), then adapts on the corrupted stream with `method` and
/// records the features of its prediction passes. Both streams share the batch
/// order of make_target_stream(clean, corruption, seed, ...).
FeatureExport export_features(const ModelCheckpoint& model, const DatasetHandle& clean,
                              const SuiteCorruption& corruption, std::uint64_t seed, const MethodSpec& method,
                              const std::vector<std::string>& taps, Index batch_size, bool shuffle,
                              Index max_maps = 8, const nlohmann::json& config_echo = nlohmann::json::object());

}  // namespace nhl

#endif  // NHL_FEATURES_HPP
