#include "nhl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <tuple>

namespace nhl {

std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::source: return "source";
    case MethodKind::norm: return "norm";
    case MethodKind::tent: return "tent";
    case MethodKind::oja: return "oja";
    case MethodKind::hebbian: return "hebbian";
    case MethodKind::nhl: return "nhl";
  }
  return "?";
}

MethodKind parse_method(std::string_view name) {
  for (MethodKind k : {MethodKind::source, MethodKind::norm, MethodKind::tent, MethodKind::oja, MethodKind::hebbian,
                       MethodKind::nhl})
    if (name == to_string(k)) return k;
  throw ParameterError("unknown method '" + std::string(name) + "'");
}

MethodSpec MethodSpec::make(MethodKind kind) {
  MethodSpec spec;
  spec.kind = kind;
  if (kind == MethodKind::tent) spec.modulator = ModulatorParamSet::bn_affine_only();
  return spec;
}

nlohmann::json to_json(const MethodSpec& spec) {
  nlohmann::json j{{"name", spec.name()}, {"episodic", spec.episodic}};
  if (spec.adapts_conv1())
    j["hebbian"] = {{"temperature", spec.hebbian.temperature},
                    {"learning_rate", spec.hebbian.learning_rate},
                    {"radius_mode", spec.hebbian.radius.mode == RadiusMode::fixed ? "fixed" : "source-norm"},
                    {"radius_value", spec.hebbian.radius.value}};
  if (spec.uses_modulator())
    j["modulator"] = {{"selection", spec.modulator.selection},
                      {"learning_rate", spec.modulator.learning_rate},
                      {"momentum", spec.modulator.momentum},
                      {"steps_per_batch", spec.modulator.steps_per_batch}};
  return j;
}

namespace {

NormSummary summarize_norms(const Tensor<float>& kernel, const Tensor<float>* radius) {
  const Index K = kernel.dim(0), D = kernel.size() / K;
  NormSummary s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = 0.0;
  for (Index k = 0; k < K; ++k) {
    double sq = 0.0;
    for (Index d = 0; d < D; ++d) sq += static_cast<double>(kernel[k * D + d]) * static_cast<double>(kernel[k * D + d]);
    const double n = std::sqrt(sq);
    s.mean += n / static_cast<double>(K);
    s.min = std::min(s.min, n);
    s.max = std::max(s.max, n);
    if (radius) {
      const double r = static_cast<double>((*radius)[k]);
      s.max_radius_deviation = std::max(s.max_radius_deviation, std::abs(n - r) / r);
    }
  }
  return s;
}

void check_containment(const MethodSpec& method, const ModulatorParamSet& bound) {
  if (method.kind != MethodKind::tent) return;
  for (const std::string& name : bound.resolved)
    if (!name.ends_with(".gamma") && !name.ends_with(".beta"))
      throw ParameterError("tent may only adapt batch-norm affine parameters, selection includes " + name);
}

void store_hebbian_state(ModelCheckpoint& model, const HebbianLayerState& state) {
  model.extras["hebbian.w"] = state.weights;
  model.extras["hebbian.R"] = state.radius;
  model.extra_config["hebbian"] = {{"temperature", state.temperature},
                                   {"learning_rate", state.learning_rate},
                                   {"update_count", state.update_count}};
}

}  // namespace

AdaptationResult run_adaptation(const ModelCheckpoint& source, const MethodSpec& method,
                                const std::vector<Batch>& stream, const AdaptOptions& options) {
  AdaptationResult result;
  AdaptationReport& report = result.report;
  report.config = options.config_echo;
  report.config["method"] = to_json(method);
  report.config["version"] = kVersion;

  ModelCheckpoint model = source;
  ModulatorParamSet modulator = method.modulator;
  std::optional<HebbianLayerState> hebbian;
  const ConvSpec conv1 = model.arch.conv1;
  auto reset = [&] {
    model = source;
    modulator = method.modulator;
    if (method.uses_modulator()) {
      modulator.bind(model);
      check_containment(method, modulator);
    }
    if (method.adapts_conv1())
      hebbian = init_from_source(model.params.at("conv1.weight"), method.hebbian.temperature,
                                 method.hebbian.learning_rate, method.hebbian.radius);
  };
  auto notify = [&](AdaptationEvent e, Index i) {
    if (options.observer) options.observer(e, i);
  };

  double weighted_errors = 0.0;
  Index labeled = 0;
  try {
    reset();
    for (std::size_t b = 0; b < stream.size(); ++b) {
      const Batch& batch = stream[b];
      const auto index = static_cast<Index>(b) + 1;
      if (method.episodic && b > 0) reset();
      BatchRecord rec;
      rec.index = index;
      rec.size = batch.size();

      if (hebbian) {
        if (method.kind == MethodKind::oja) {
          const Tensor<float> patches =
              im2col(batch.images, conv1.kernel, conv1.kernel, conv1.stride, conv1.padding);
          hebbian->weights = oja_update(hebbian->weights, patches, hebbian->learning_rate);
          ++hebbian->update_count;
        } else {
          adapt_conv1(*hebbian, batch.images, conv1.stride, conv1.padding);
        }
        model.params.at("conv1.weight") = hebbian->kernel();
        notify(AdaptationEvent::plasticity, index);
      }
      if (method.uses_modulator()) {
        const ModulatorStepResult step = modulator_step(model, modulator, batch.images);
        rec.modulator_loss = step.losses.front();
        notify(AdaptationEvent::modulator, index);
      }

      ForwardResult out = forward(model, batch.images, method.norm_mode());
      notify(AdaptationEvent::predict, index);
      rec.predictions = argmax_rows(out.logits);
      const std::vector<double> h = entropy_rows(out.logits);
      for (double v : h) rec.mean_entropy += v / static_cast<double>(h.size());
      rec.conv1_norms = summarize_norms(model.params.at("conv1.weight"),
                                        hebbian && method.kind != MethodKind::oja ? &hebbian->radius : nullptr);
      if (!batch.labels.empty()) {
        Index wrong = 0;
        for (std::size_t i = 0; i < rec.predictions.size(); ++i) wrong += rec.predictions[i] != batch.labels[i] ? 1 : 0;
        rec.error = static_cast<double>(wrong) / static_cast<double>(rec.size);
        weighted_errors += static_cast<double>(wrong);
        labeled += rec.size;
        rec.cumulative_error = weighted_errors / static_cast<double>(labeled);
      }
      report.samples += rec.size;
      if (options.on_prediction) options.on_prediction(index, out);
      if (options.keep_logits) result.logits.push_back(std::move(out.logits));
      report.batches.push_back(std::move(rec));
    }
  } catch (const std::exception& e) {
    report.complete = false;
    report.failure = "batch " + std::to_string(report.batches.size() + 1) + ": " + e.what();
  }
  if (labeled > 0) report.top1_error = 100.0 * weighted_errors / static_cast<double>(labeled);
  if (hebbian) store_hebbian_state(model, *hebbian);
  result.model = std::move(model);
  return result;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json to_json(const AdaptationReport& report) {
  nlohmann::json batches = nlohmann::json::array();
  for (const BatchRecord& r : report.batches)
    batches.push_back({{"index", r.index},
                       {"size", r.size},
                       {"error", optional_json(r.error)},
                       {"cumulative_error", optional_json(r.cumulative_error)},
                       {"mean_entropy", r.mean_entropy},
                       {"modulator_loss", optional_json(r.modulator_loss)},
                       {"conv1_norm",
                        {{"mean", r.conv1_norms.mean},
                         {"min", r.conv1_norms.min},
                         {"max", r.conv1_norms.max},
                         {"max_radius_deviation", r.conv1_norms.max_radius_deviation}}},
                       {"predictions", r.predictions}});
  return {{"schema", kReportSchema},
          {"version", kVersion},
          {"config", report.config},
          {"complete", report.complete},
          {"failure", report.failure},
          {"batches", std::move(batches)},
          {"aggregate", {{"samples", report.samples}, {"top1_error", optional_json(report.top1_error)}}}};
}

ErrorCurve batch_error_curve(const AdaptationReport& report) {
  ErrorCurve curve;
  curve.complete = report.complete;
  double weighted = 0.0;
  Index count = 0;
  for (const BatchRecord& r : report.batches) {
    if (!r.error) {
      curve.complete = false;
      break;
    }
    weighted += *r.error * static_cast<double>(r.size);
    count += r.size;
    curve.points.emplace_back(r.index, weighted / static_cast<double>(count));
  }
  return curve;
}

std::vector<Batch> make_target_stream(const DatasetHandle& clean, const SuiteCorruption& corruption,
                                      std::uint64_t seed, Index batch_size, bool shuffle) {
  const DatasetHandle shifted = corrupt(clean, CorruptionSpec{corruption.kind, corruption.severity, derive_seed(seed, 1)});
  StreamOptions opts;
  opts.batch_size = batch_size;
  opts.shuffle = shuffle;
  opts.seed = derive_seed(seed, 2);
  return stream_batches(shifted, opts);
}

SuiteResult run_ablation_suite(const ModelCheckpoint& model, const DatasetHandle& clean,
                               const std::vector<SuiteCorruption>& corruptions,
                               const std::vector<MethodSpec>& methods, const std::vector<std::uint64_t>& seeds,
                               const SuiteOptions& options) {
  if (corruptions.empty() || methods.empty() || seeds.empty())
    throw ParameterError("ablation suite needs at least one corruption, method and seed");
  SuiteResult suite;
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t, SuiteCell>> cells;
  for (std::size_t c = 0; c < corruptions.size(); ++c) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      std::vector<Batch> stream;
      std::string failure;
      try {
        stream = make_target_stream(clean, corruptions[c], seeds[s], options.batch_size, options.shuffle);
      } catch (const std::exception& e) {
        failure = e.what();
      }
      for (std::size_t m = 0; m < methods.size(); ++m) {
        SuiteCell cell;
        cell.method = methods[m].name();
        cell.corruption = to_string(corruptions[c].kind);
        cell.severity = corruptions[c].severity;
        cell.seed = seeds[s];
        if (failure.empty()) {
          AdaptOptions opts;
          opts.config_echo = options.config_echo;
          opts.config_echo["corruption"] = cell.corruption + ":" + std::to_string(cell.severity);
          opts.config_echo["seed"] = cell.seed;
          cell.report = run_adaptation(model, methods[m], stream, opts).report;
        } else {
          cell.report.complete = false;
          cell.report.failure = failure;
        }
        cell.failed = !cell.report.complete;
        cells.emplace_back(m, c, s, std::move(cell));
      }
    }
  }
  std::stable_sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a)) <
           std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b));
  });
  for (auto& t : cells) suite.cells.push_back(std::move(std::get<3>(t)));
  return suite;
}

std::vector<SuiteMean> SuiteResult::means() const {
  std::vector<SuiteMean> out;
  for (const SuiteCell& c : cells) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SuiteMean& m) {
      return m.method == c.method && m.corruption == c.corruption && m.severity == c.severity;
    });
    if (it == out.end()) {
      out.push_back({c.method, c.corruption, c.severity, 0.0, 0});
      it = std::prev(out.end());
    }
    if (!c.failed && c.report.top1_error) {
      it->top1_error += *c.report.top1_error;
      ++it->seeds;
    }
  }
  for (SuiteMean& m : out)
    if (m.seeds) m.top1_error /= m.seeds;
  return out;
}

const SuiteCell& SuiteResult::cell(const std::string& method, const std::string& corruption, int severity,
                                   std::uint64_t seed) const {
  for (const SuiteCell& c : cells)
    if (c.method == method && c.corruption == corruption && c.severity == severity && c.seed == seed) return c;
  throw ParameterError("no suite cell for " + method + "/" + corruption);
}

nlohmann::json to_json(const SuiteResult& suite) {
  nlohmann::json cells = nlohmann::json::array();
  for (const SuiteCell& c : suite.cells)
    cells.push_back({{"method", c.method},
                     {"corruption", c.corruption},
                     {"severity", c.severity},
                     {"seed", c.seed},
                     {"failed", c.failed},
                     {"report", to_json(c.report)}});
  nlohmann::json means = nlohmann::json::array();
  for (const SuiteMean& m : suite.means())
    means.push_back({{"method", m.method},
                     {"corruption", m.corruption},
                     {"severity", m.severity},
                     {"top1_error", m.top1_error},
                     {"seeds", m.seeds}});
  return {{"schema", "nhl.ablation_suite/1"}, {"version", kVersion}, {"cells", std::move(cells)}, {"means", std::move(means)}};
}

std::string suite_csv(const SuiteResult& suite) {
  std::string out = "method,corruption,severity,seed,top1_error\n";
  char buf[64];
  for (const SuiteCell& c : suite.cells) {
    if (c.failed || !c.report.top1_error) {
      std::snprintf(buf, sizeof buf, "failed");
    } else {
      std::snprintf(buf, sizeof buf, "%.4f", *c.report.top1_error);
    }
    out += c.method + "," + c.corruption + "," + std::to_string(c.severity) + "," + std::to_string(c.seed) + "," + buf + "\n";
  }
  return out;
}

}  // namespace nhl
