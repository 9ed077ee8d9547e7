#include "nhl/features.hpp"

#include <algorithm>
#include <cmath>

namespace nhl {

const std::vector<std::string>& feature_tap_names() {
  static const std::vector<std::string> names{"conv1", "penultimate"};
  return names;
}

const Tensor<float>& select_tap(const ForwardResult& out, const std::string& tap) {
  if (tap == "conv1") return out.conv1;
  if (tap == "penultimate") return out.penultimate;
  throw ParameterError("unknown feature tap '" + tap + "'");
}

namespace {

// Channel c's values of an N x C (x H x W) tensor, visited in memory order.
template <typename F>
void for_each_channel_value(const Tensor<float>& t, F&& f) {
  const Index N = t.dim(0), C = t.dim(1), inner = t.size() / (N * C);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const float* p = t.raw() + (n * C + c) * inner;
      for (Index i = 0; i < inner; ++i) f(c, static_cast<double>(p[i]));
    }
}

}  // namespace

ChannelHistograms::ChannelHistograms(std::vector<ChannelRange> ranges, int bins)
    : ranges_(std::move(ranges)), bins_(bins), counts_(ranges_.size(), std::vector<std::uint64_t>(static_cast<std::size_t>(bins), 0)) {
  if (bins < 1) throw ParameterError("histogram needs at least one bin");
  for (ChannelRange& r : ranges_)
    if (!(r.hi > r.lo)) r.hi = r.lo + 1e-6;
}

void ChannelHistograms::add(const Tensor<float>& activations) {
  if (activations.rank() < 2 || activations.dim(1) != channels())
    throw DimensionError("histogram channels do not match activations " + shape_string(activations.shape()));
  for_each_channel_value(activations, [&](Index c, double v) {
    const ChannelRange& r = ranges_[static_cast<std::size_t>(c)];
    const double pos = (v - r.lo) / (r.hi - r.lo) * bins_;
    const int bin = std::clamp(static_cast<int>(std::floor(pos)), 0, bins_ - 1);
    ++counts_[static_cast<std::size_t>(c)][static_cast<std::size_t>(bin)];
  });
}

std::uint64_t ChannelHistograms::total(Index channel) const {
  std::uint64_t t = 0;
  for (std::uint64_t v : counts(channel)) t += v;
  return t;
}

double ChannelHistograms::l1_distance(const ChannelHistograms& other) const {
  if (other.channels() != channels() || other.bins() != bins()) throw DimensionError("histogram layouts differ");
  double acc = 0.0;
  for (Index c = 0; c < channels(); ++c) {
    const double ta = static_cast<double>(std::max<std::uint64_t>(1, total(c)));
    const double tb = static_cast<double>(std::max<std::uint64_t>(1, other.total(c)));
    for (int b = 0; b < bins_; ++b)
      acc += std::abs(static_cast<double>(counts(c)[static_cast<std::size_t>(b)]) / ta -
                      static_cast<double>(other.counts(c)[static_cast<std::size_t>(b)]) / tb);
  }
  return acc / static_cast<double>(channels());
}

nlohmann::json ChannelHistograms::to_json() const {
  nlohmann::json channels_json = nlohmann::json::array();
  for (std::size_t c = 0; c < ranges_.size(); ++c)
    channels_json.push_back({{"lo", ranges_[c].lo}, {"hi", ranges_[c].hi}, {"counts", counts_[c]}});
  return {{"bins", bins_}, {"channels", std::move(channels_json)}};
}

void RangeTracker::add(const Tensor<float>& activations) {
  const auto C = static_cast<std::size_t>(activations.dim(1));
  if (ranges_.empty())
    ranges_.assign(C, ChannelRange{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  if (ranges_.size() != C) throw DimensionError("range tracker channel count changed");
  for_each_channel_value(activations, [&](Index c, double v) {
    ChannelRange& r = ranges_[static_cast<std::size_t>(c)];
    r.lo = std::min(r.lo, v);
    r.hi = std::max(r.hi, v);
  });
}

std::vector<ChannelRange> RangeTracker::ranges() const { return ranges_; }

namespace {

Tensor<float> leading_images(const Tensor<float>& t, Index count) {
  std::vector<Index> rows;
  for (Index i = 0; i < std::min(count, t.dim(0)); ++i) rows.push_back(i);
  return rows.empty() ? Tensor<float>() : gather_rows(t, rows);
}

}  // namespace

FeatureExport export_features(const ModelCheckpoint& model, const DatasetHandle& clean,
                              const SuiteCorruption& corruption, std::uint64_t seed, const MethodSpec& method,
                              const std::vector<std::string>& taps, Index batch_size, bool shuffle, Index max_maps,
                              const nlohmann::json& config_echo) {
  if (taps.empty()) throw ParameterError("no feature taps requested");
  for (const std::string& tap : taps)
    if (std::find(feature_tap_names().begin(), feature_tap_names().end(), tap) == feature_tap_names().end())
      throw ParameterError("unknown feature tap '" + tap + "'");
  if (max_maps < 0 || max_maps > 8) throw ParameterError("max_maps must be in [0, 8]");

  StreamOptions opts;
  opts.batch_size = batch_size;
  opts.shuffle = shuffle;
  opts.seed = derive_seed(seed, 2);
  const std::vector<Batch> clean_stream = stream_batches(clean, opts);
  const std::vector<Batch> shifted = make_target_stream(clean, corruption, seed, batch_size, shuffle);

  FeatureExport out;
  // Clean stream twice: once for the ranges, once for the counts.
  std::map<std::string, RangeTracker> trackers;
  for (const Batch& b : clean_stream) {
    const ForwardResult r = forward(model, b.images, NormMode::source_stats);
    for (const std::string& tap : taps) trackers[tap].add(select_tap(r, tap));
  }
  for (const std::string& tap : taps) {
    TapComparison& cmp = out.taps[tap];
    cmp.clean = ChannelHistograms(trackers[tap].ranges());
    cmp.corrupted = cmp.clean;
    cmp.adapted = cmp.clean;
  }
  for (std::size_t b = 0; b < clean_stream.size(); ++b) {
    const ForwardResult r = forward(model, clean_stream[b].images, NormMode::source_stats);
    for (const std::string& tap : taps) out.taps[tap].clean.add(select_tap(r, tap));
    if (b == 0) out.clean_maps = leading_images(r.conv1, max_maps);
  }

  for (std::size_t b = 0; b < shifted.size(); ++b) {
    const ForwardResult r = forward(model, shifted[b].images, NormMode::source_stats);
    for (const std::string& tap : taps) out.taps[tap].corrupted.add(select_tap(r, tap));
    if (b == 0) out.corrupted_maps = leading_images(r.conv1, max_maps);
  }

  AdaptOptions adapt;
  adapt.config_echo = config_echo;
  adapt.on_prediction = [&](Index index, const ForwardResult& r) {
    for (const std::string& tap : taps) out.taps[tap].adapted.add(select_tap(r, tap));
    if (index == 1) out.adapted_maps = leading_images(r.conv1, max_maps);
  };
  out.report = run_adaptation(model, method, shifted, adapt).report;

  for (auto& [tap, cmp] : out.taps) {
    cmp.l1_corrupted = cmp.corrupted.l1_distance(cmp.clean);
    cmp.l1_adapted = cmp.adapted.l1_distance(cmp.clean);
  }
  return out;
}

}  // namespace nhl
