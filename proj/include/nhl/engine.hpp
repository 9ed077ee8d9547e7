#ifndef NHL_ENGINE_HPP
#define NHL_ENGINE_HPP

// Fully test-time adaptation protocol. For each batch, in stream order:
//   1. plasticity methods update conv1 from the batch's patches,
//   2. modulator methods take their entropy steps,
//   3. the batch is predicted with the updated model,
//   4. metrics are recorded (labels are read only here).
// State carries over to the next batch unless the method is episodic.

#include "nhl/corruption.hpp"
#include "nhl/dataset.hpp"
#include "nhl/hebbian.hpp"
#include "nhl/model.hpp"
#include "nhl/modulator.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nhl {

inline constexpr const char* kVersion = "nhl 0.1.0";
inline constexpr const char* kReportSchema = "nhl.adaptation_report/1";

enum class MethodKind { source, norm, tent, oja, hebbian, nhl };

std::string to_string(MethodKind kind);
MethodKind parse_method(std::string_view name);

struct HebbianConfig {
  double temperature = 1.0;
  double learning_rate = 1e-3;
  RadiusPolicy radius;
};

struct MethodSpec {
  MethodKind kind = MethodKind::nhl;
  HebbianConfig hebbian;
  ModulatorParamSet modulator;
  bool episodic = false;

  /// Defaults per method; tent selects batch-norm affine parameters only.
  static MethodSpec make(MethodKind kind);

  bool adapts_conv1() const { return kind == MethodKind::hebbian || kind == MethodKind::nhl || kind == MethodKind::oja; }
  bool uses_modulator() const { return kind == MethodKind::tent || kind == MethodKind::nhl; }
  NormMode norm_mode() const { return kind == MethodKind::source ? NormMode::source_stats : NormMode::batch_stats; }
  std::string name() const { return to_string(kind); }
};

nlohmann::json to_json(const MethodSpec& spec);

struct NormSummary {
  double mean = 0.0, min = 0.0, max = 0.0;
  /// max_k | ||w_k|| - R_k | / R_k (0 for methods without a Hebbian radius)
  double max_radius_deviation = 0.0;
};

struct BatchRecord {
  Index index = 0;
  Index size = 0;
  std::optional<double> error;             // fraction of misclassified samples
  std::optional<double> cumulative_error;  // size-weighted mean of errors 1..index
  double mean_entropy = 0.0;               // nats, of the predictions
  std::optional<double> modulator_loss;    // entropy before the first modulator step
  NormSummary conv1_norms;
  std::vector<int> predictions;
};

struct AdaptationReport {
  nlohmann::json config = nlohmann::json::object();
  std::vector<BatchRecord> batches;
  bool complete = true;
  std::string failure;
  Index samples = 0;
  std::optional<double> top1_error;  // percent

  double mean_error_fraction() const { return top1_error ? *top1_error / 100.0 : 0.0; }
};

nlohmann::json to_json(const AdaptationReport& report);

enum class AdaptationEvent { plasticity, modulator, predict };

struct AdaptOptions {
  /// Merged run configuration echoed into the report.
  nlohmann::json config_echo = nlohmann::json::object();
  /// Called for every protocol step with the batch index.
  std::function<void(AdaptationEvent, Index)> observer;
  /// Called with each batch's prediction pass.
  std::function<void(Index, const ForwardResult&)> on_prediction;
  bool keep_logits = false;
};

struct AdaptationResult {
  AdaptationReport report;
  ModelCheckpoint model;  // final adapted model; Hebbian state in extras
  std::vector<Tensor<float>> logits;
};

AdaptationResult run_adaptation(const ModelCheckpoint& model, const MethodSpec& method,
                                const std::vector<Batch>& stream, const AdaptOptions& options = {});

struct ErrorCurve {
  std::vector<std::pair<Index, double>> points;  // (batch index, cumulative mean error)
  bool complete = true;
};

ErrorCurve batch_error_curve(const AdaptationReport& report);

struct SuiteCorruption {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 5;
};

struct SuiteOptions {
  Index batch_size = 128;
  bool shuffle = true;
  nlohmann::json config_echo = nlohmann::json::object();
};

struct SuiteCell {
  std::string method;
  std::string corruption;
  int severity = 0;
  std::uint64_t seed = 0;
  AdaptationReport report;
  bool failed = false;
};

struct SuiteMean {
  std::string method, corruption;
  int severity = 0;
  double top1_error = 0.0;  // percent, mean over completed seeds
  int seeds = 0;
};

struct SuiteResult {
  std::vector<SuiteCell> cells;  // ordered (method, corruption, severity, seed)
  std::vector<SuiteMean> means() const;
  const SuiteCell& cell(const std::string& method, const std::string& corruption, int severity,
                        std::uint64_t seed) const;
};

/// Seed s corrupts with derive_seed(s, 1) and shuffles with derive_seed(s, 2), so
/// every method sees the same stream for a given (corruption, seed).
std::vector<Batch> make_target_stream(const DatasetHandle& clean, const SuiteCorruption& corruption,
                                      std::uint64_t seed, Index batch_size, bool shuffle);

SuiteResult run_ablation_suite(const ModelCheckpoint& model, const DatasetHandle& clean,
                               const std::vector<SuiteCorruption>& corruptions,
                               const std::vector<MethodSpec>& methods, const std::vector<std::uint64_t>& seeds,
                               const SuiteOptions& options = {});

nlohmann::json to_json(const SuiteResult& suite);
/// Columns: method, corruption, severity, seed, top1_error.
std::string suite_csv(const SuiteResult& suite);

}  // namespace nhl

#endif  // NHL_ENGINE_HPP
