// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "fd_check.hpp"
#include "helpers.hpp"
#include "hygiene.hpp"
#include "tent_oracle.hpp"

#include "nhl/engine.hpp"
#include "nhl/features.hpp"
#include "nhl/hebbian.hpp"
#include "nhl/train.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace nhl {
namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 ---------------------------------------------------------------------------
Verdict gradient_correctness() {
  ArchitectureDescriptor arch = test::tiny_arch();
  arch.height = arch.width = 4;
  const ModelCheckpoint model = test::randomized_model(arch, 1);
  Rng rng(101);
  const Tensor<float> x = test::uniform_images({2, 3, 4, 4}, rng);
  ModulatorParamSet nhl_sel, tent_sel = ModulatorParamSet::bn_affine_only();
  nhl_sel.bind(model);
  tent_sel.bind(model);
  const auto selected = [&](const std::string& n) { return nhl_sel.selects(n) || tent_sel.selects(n); };
  const auto checks = test::check_entropy_gradients(model, x, selected, 1e-3);
  double worst = 0.0;
  std::string worst_name;
  int kinks = 0;
  for (const auto& [name, c] : checks) {
    if (c.relative() >= worst) worst = c.relative(), worst_name = name;
    kinks += c.kink_crossings;
  }
  return {worst <= 1e-3 && !checks.empty(),
          fmt("%zu selected tensors, h=1e-3, max relative error %.2e (%s), relu kink crossings %d", checks.size(), worst,
              worst_name.c_str(), kinks)};
}

// 2 ---------------------------------------------------------------------------
Verdict sphere_convergence() {
  constexpr Index K = 8, D = 27, P = 512;
  Rng rng(202);
  Tensor<float> patches({P, D});
  for (float& v : patches.data()) v = static_cast<float>(rng.uniform());
  bool pass = true;
  std::string detail;
  for (double start : {0.5, 2.0}) {
    Tensor<float> w({K, D, 1, 1});
    for (float& v : w.data()) v = static_cast<float>(rng.uniform(0.05, 1.0));
    HebbianLayerState s = init_from_source(w, 1.0, 0.05, {RadiusMode::fixed, 1.5});
    const double R = 1.5;
    const std::vector<double> n0 = s.norms();
    for (Index k = 0; k < K; ++k)
      for (Index d = 0; d < D; ++d)
        s.weights[k * D + d] = static_cast<float>(s.weights[k * D + d] * start * R / n0[static_cast<std::size_t>(k)]);
    int entered = -1;
    bool left = false;
    for (int step = 1; step <= 2000; ++step) {
      hebbian_update(s, patches);
      bool inside = true;
      for (double n : s.norms()) inside = inside && n >= 0.95 * R && n <= 1.05 * R;
      if (inside && entered < 0) entered = step;
      if (!inside && entered >= 0) left = true;
    }
    double lo = 1e9, hi = 0;
    for (double n : s.norms()) lo = std::min(lo, n / R), hi = std::max(hi, n / R);
    const bool ok = entered > 0 && entered <= 1000 && !left;
    pass = pass && ok;
    detail += fmt("start %.1fR: inside band from update %d, stayed through 2000 %s, final ||w||/R in [%.4f, %.4f]; ",
                  start, entered, left ? "no" : "yes", lo, hi);
  }
  return {pass, detail};
}

// 3 ---------------------------------------------------------------------------
Verdict oja_oracle() {
  constexpr Index D = 6, P = 5000, B = 50;
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(300 + seed);
    Eigen::MatrixXd g(D, D);
    for (Index i = 0; i < D * D; ++i) g(i / D, i % D) = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    Eigen::VectorXd stddev = Eigen::VectorXd::Ones(D);
    stddev(0) = 2.5;  // variance 6.25 against 1
    Tensor<float> x({P, D});
    for (Index p = 0; p < P; ++p) {
      Eigen::VectorXd z(D);
      for (Index d = 0; d < D; ++d) z(d) = stddev(d) * rng.normal();
      const Eigen::VectorXd v = q * z;
      for (Index d = 0; d < D; ++d) x[p * D + d] = static_cast<float>(v(d));
    }
    const Eigen::MatrixXd m = x.matrix().cast<double>();
    const Eigen::MatrixXd centered = m.rowwise() - m.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(P);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd top = eig.eigenvectors().col(D - 1);
    const double ratio = eig.eigenvalues()(D - 1) / eig.eigenvalues()(D - 2);

    Tensor<float> w({1, D});
    for (float& v : w.data()) v = static_cast<float>(0.1 * rng.normal());
    double cosine = 0.0;
    int reached = -1;
    for (int step = 1; step <= 5000; ++step) {
      std::vector<Index> rows;
      for (Index i = 0; i < B; ++i) rows.push_back(((step - 1) * B + i) % P);
      w = oja_update(w, gather_rows(x, rows), 0.01);
      Eigen::VectorXd a(D);
      for (Index d = 0; d < D; ++d) a(d) = w[d];
      cosine = std::abs(a.dot(top)) / a.norm();
      if (cosine >= 0.99 && reached < 0) reached = step;
    }
    const bool ok = ratio >= 4.0 && cosine >= 0.99;
    pass = pass && ok;
    detail += fmt("seed %llu: eigenvalue ratio %.2f, |cos| %.5f after 5000 steps (first >= 0.99 at %d); ",
                  static_cast<unsigned long long>(seed), ratio, cosine, reached);
  }
  return {pass, detail};
}

// 4 ---------------------------------------------------------------------------
Verdict wta_limits() {
  constexpr Index K = 8, D = 12, P = 200;
  Rng rng(404);
  const Tensor<float> w = test::random_tensor({K, D, 1, 1}, rng);
  const Tensor<float> x = test::random_tensor({P, D}, rng);
  HebbianLayerState s = init_from_source(w, 1.0, 1e-3);
  const Tensor<float> u = soft_wta_activations(s, x).u;
  double min_sharp = 1.0, max_flat_dev = 0.0;
  int sharp_cases = 0, disagreements = 0;
  for (double tau : {1e-3, 1e-2, 1e-1, 1.0, 10.0}) {
    s.temperature = tau;
    const Tensor<float> y = soft_wta_activations(s, x).y;
    for (Index p = 0; p < P; ++p) {
      std::vector<double> row(u.raw() + p * K, u.raw() + (p + 1) * K);
      const Index hard = std::max_element(row.begin(), row.end()) - row.begin();
      std::vector<double> sorted = row;
      std::sort(sorted.rbegin(), sorted.rend());
      if ((sorted[0] - sorted[1]) / tau < 10.0) continue;
      ++sharp_cases;
      const Index soft = std::max_element(y.raw() + p * K, y.raw() + (p + 1) * K) - (y.raw() + p * K);
      disagreements += soft != hard ? 1 : 0;
      min_sharp = std::min(min_sharp, static_cast<double>(y[p * K + hard]));
    }
  }
  s.temperature = 1e6;
  const Tensor<float> flat = soft_wta_activations(s, x).y;
  for (float v : flat.data()) max_flat_dev = std::max(max_flat_dev, std::abs(static_cast<double>(v) - 1.0 / K));
  const bool pass = sharp_cases > 0 && disagreements == 0 && min_sharp >= 0.99 && max_flat_dev <= 1e-4;
  return {pass, fmt("%d patch/tau pairs with gap/tau >= 10: min winner activation %.6f, %d hard-WTA disagreements; "
                    "tau=1e6 max |y - 1/K| %.2e",
                    sharp_cases, min_sharp, disagreements, max_flat_dev)};
}

// 5 ---------------------------------------------------------------------------
Verdict tent_equivalence() {
  Rng init(505);
  ModelCheckpoint model = build_model(test::tent_arch(), init);
  for (float& v : model.params.at("bn1.gamma").data()) v = static_cast<float>(init.uniform(0.5, 1.5));
  for (float& v : model.params.at("bn1.beta").data()) v = static_cast<float>(init.uniform(-0.3, 0.3));
  MethodSpec tent = MethodSpec::make(MethodKind::tent);
  tent.modulator.learning_rate = 0.05;
  Rng rng(506);
  std::vector<Batch> stream(3);
  for (Batch& b : stream) b.images = test::random_tensor({6, 1, 6, 6}, rng);
  test::TentOracle oracle(model, tent.modulator.learning_rate, tent.modulator.momentum);
  bool pass = true;
  double moved = 0.0;
  for (std::size_t n = 1; n <= stream.size(); ++n) {
    const AdaptationResult r =
        run_adaptation(model, tent, std::vector<Batch>(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(n)));
    oracle.step(stream[n - 1].images);
    pass = pass && r.report.complete && r.model.params.at("bn1.gamma").values() == oracle.gamma &&
           r.model.params.at("bn1.beta").values() == oracle.beta;
    for (std::string other : {"conv1.weight", "fc.weight", "fc.bias"})
      pass = pass && r.model.params.at(other).values() == model.params.at(other).values();
    if (n == stream.size())
      moved = test::max_abs_diff(r.model.params.at("bn1.gamma"), model.params.at("bn1.gamma"));
  }
  return {pass && moved > 0.0,
          fmt("bn1.gamma/beta after each of 3 batches bitwise equal to the hand-written oracle: %s (gamma moved %.3e)",
              pass ? "yes" : "no", moved)};
}

// 6, 7, 10 share one trained model and stream --------------------------------
struct TrendSetup {
  ModelCheckpoint model;
  DatasetHandle test;
  double clean_accuracy = 0.0;
  double train_cpu = 0.0;
};

ArchitectureDescriptor narrow_arch() {
  ArchitectureDescriptor a;
  a.conv1.filters = 16;
  a.blocks = {{16, 1}, {32, 2}, {64, 2}, {128, 2}};
  a.num_classes = 10;
  return a;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

TrendSetup train_trend_model() {
  TrendSetup s;
  const double t0 = cpu_seconds();
  const DatasetHandle train = make_synthetic_dataset(10, 500, 32, 1);
  s.test = make_synthetic_dataset(10, 640, 32, 99);
  Rng init(3);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 4;
  TrainLog log;
  s.model = train_source(build_model(narrow_arch(), init), train, cfg, &s.test, &log);
  s.clean_accuracy = log.test_accuracy.value_or(0.0);
  s.train_cpu = cpu_seconds() - t0;
  return s;
}

const std::vector<std::uint64_t> kTrendSeeds{11, 12, 13};
const SuiteCorruption kGauss5{CorruptionKind::gaussian_noise, 5};

Verdict trend_reproduction(const TrendSetup& setup, SuiteResult& suite) {
  const double t0 = cpu_seconds();
  suite = run_ablation_suite(setup.model, setup.test, {kGauss5},
                             {MethodSpec::make(MethodKind::source), MethodSpec::make(MethodKind::hebbian),
                              MethodSpec::make(MethodKind::nhl), MethodSpec::make(MethodKind::tent)},
                             kTrendSeeds);
  const double cpu = setup.train_cpu + cpu_seconds() - t0;
  std::map<std::string, double> err;
  bool complete = true;
  for (const SuiteMean& m : suite.means()) {
    err[m.method] = m.top1_error;
    complete = complete && m.seeds == static_cast<int>(kTrendSeeds.size());
  }
  const bool order = err["source"] - err["hebbian"] >= 1.0 && err["hebbian"] - err["nhl"] >= 1.0;
  const bool vs_tent = err["nhl"] <= err["tent"];
  return {complete && order && vs_tent && cpu <= 900.0,
          fmt("mean top-1 error over 3 seeds: source %.2f, hebbian %.2f, nhl %.2f, tent %.2f (gaps %.2f, %.2f); "
              "clean accuracy %.3f; CPU %.0f s",
              err["source"], err["hebbian"], err["nhl"], err["tent"], err["source"] - err["hebbian"],
              err["hebbian"] - err["nhl"], setup.clean_accuracy, cpu)};
}

Verdict batch_curve(const SuiteResult& suite) {
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : kTrendSeeds) {
    const ErrorCurve curve = batch_error_curve(suite.cell("nhl", "gaussian_noise", 5, seed).report);
    if (!curve.complete || curve.points.size() < 50) {
      pass = false;
      detail += fmt("seed %llu: curve incomplete (%zu points); ", static_cast<unsigned long long>(seed), curve.points.size());
      continue;
    }
    const double at5 = curve.points[4].second, at50 = curve.points[49].second;
    pass = pass && at50 < at5;
    detail += fmt("seed %llu: %.4f at batch 5 -> %.4f at batch 50; ", static_cast<unsigned long long>(seed), at5, at50);
  }
  return {pass, detail};
}

Verdict feature_recovery(const TrendSetup& setup) {
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : kTrendSeeds) {
    const FeatureExport fx = export_features(setup.model, setup.test, kGauss5, seed, MethodSpec::make(MethodKind::nhl),
                                             {"penultimate"}, 128, true, 0);
    const TapComparison& t = fx.taps.at("penultimate");
    pass = pass && fx.report.complete && t.l1_adapted < t.l1_corrupted;
    detail += fmt("seed %llu: L1 to clean %.4f corrupted vs %.4f adapted; ", static_cast<unsigned long long>(seed),
                  t.l1_corrupted, t.l1_adapted);
  }
  return {pass, detail};
}

// 8 ---------------------------------------------------------------------------
Verdict protocol_hygiene(const TrendSetup& setup) {
  DatasetHandle small = setup.test;
  std::vector<Index> rows;
  for (Index i = 0; i < 96; ++i) rows.push_back(i * 53 % setup.test.size());
  small.images = gather_rows(setup.test.images, rows);
  small.labels.clear();
  for (Index r : rows) small.labels.push_back(setup.test.labels[static_cast<std::size_t>(r)]);
  const std::vector<Batch> stream = make_target_stream(small, kGauss5, 7, 32, true);
  int checks = 0;
  std::string failure;
  for (MethodKind kind : {MethodKind::source, MethodKind::norm, MethodKind::tent, MethodKind::oja, MethodKind::hebbian,
                          MethodKind::nhl}) {
    const MethodSpec m = MethodSpec::make(kind);
    for (const std::string& problem : {test::check_label_permutation(setup.model, m, stream),
                                       test::check_prefix_replay(setup.model, m, stream),
                                       test::check_containment(setup.model, m, stream)}) {
      ++checks;
      if (!problem.empty() && failure.empty()) failure = m.name() + ": " + problem;
    }
  }
  return {failure.empty(), failure.empty() ? fmt("%d bitwise checks (label permutation, prefix replay, containment) "
                                                 "over 6 methods and 3 batches",
                                                 checks)
                                           : failure};
}

// 9 ---------------------------------------------------------------------------
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    files[fs::relative(e.path(), dir).string()] = s.str();
  }
  return files;
}

Verdict cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "nhl_acceptance_cli";
  const std::string common =
      " --classes 4 --train-per-class 24 --test-per-class 32 --image-size 16 --conv1-filters 8 --block-widths 8,16"
      " --block-strides 1,2 --epochs 1 --train-batch-size 16 --batch-size 32 --seed 5";
  const std::vector<std::pair<std::string, std::string>> runs{
      {"make-dataset", ""},
      {"train-source", ""},
      {"eval", " --seeds 0,1"},
      {"adapt", " --method nhl --corruption gaussian_noise:5"},
      {"adapt", " --suite paper-ablation --seeds 0,1 --corruption gaussian_noise:5,contrast:2 --out-dir {dir}/suite"},
      {"export-features", " --method nhl --out-dir {dir}/features"},
  };
  auto run_all = [&](const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& [cmd, extra] : runs) {
      std::string args = extra;
      for (auto at = args.find("{dir}"); at != std::string::npos; at = args.find("{dir}"))
        args.replace(at, 5, dir.string());
      const std::string line = std::string(NHL_CLI_PATH) + " " + cmd + common + " --out-dir " + dir.string() +
                               " --checkpoint " + (dir / "source.ckpt").string() + args + " > " +
                               (dir.string() + ".log") + " 2>&1";
      if (std::system(line.c_str()) != 0) return "command failed: " + cmd + args;
    }
    return std::string();
  };
  const fs::path dir = root / "run";
  std::string err = run_all(dir);
  if (!err.empty()) return {false, err};
  const auto first = snapshot(dir);
  err = run_all(dir);  // the output directory is deleted first
  if (!err.empty()) return {false, err};
  const auto second = snapshot(dir);
  std::string differs;
  for (const auto& [name, bytes] : first)
    if (!second.contains(name) || second.at(name) != bytes) differs += name + " ";
  return {differs.empty() && first == second && first.size() >= 10,
          differs.empty() ? fmt("%zu artifacts from 6 commands byte-identical across reruns", first.size())
                          : "differing artifacts: " + differs};
}

}  // namespace
}  // namespace nhl

int main() {
  using namespace nhl;
  const auto wall0 = std::chrono::steady_clock::now();
  int failures = 0;
  auto report = [&failures](int id, const char* title, const Verdict& v) {
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  };
  auto guarded = [](auto&& fn) -> Verdict {
    try {
      return fn();
    } catch (const std::exception& e) {
      return {false, std::string("exception: ") + e.what()};
    }
  };
  report(1, "gradient correctness", guarded(gradient_correctness));
  report(2, "sphere convergence", guarded(sphere_convergence));
  report(3, "Oja oracle", guarded(oja_oracle));
  report(4, "softmax/WTA limits", guarded(wta_limits));
  report(5, "TENT equivalence", guarded(tent_equivalence));

  TrendSetup setup;
  std::string setup_error;
  try {
    setup = train_trend_model();
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  SuiteResult suite;
  const bool have_model = setup_error.empty();
  report(6, "trend reproduction",
         have_model ? guarded([&] { return trend_reproduction(setup, suite); }) : Verdict{false, setup_error});
  report(7, "batch-curve trend", have_model && !suite.cells.empty() ? guarded([&] { return batch_curve(suite); })
                                                                     : Verdict{false, "no suite results"});
  report(8, "protocol hygiene",
         have_model ? guarded([&] { return protocol_hygiene(setup); }) : Verdict{false, setup_error});
  report(9, "determinism", guarded(cli_determinism));
  report(10, "feature recovery",
         have_model ? guarded([&] { return feature_recovery(setup); }) : Verdict{false, setup_error});

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  std::printf("%d of 10 criteria failed; wall time %.0f s\n", failures, wall);
  return failures == 0 ? 0 : 1;
}
