#include "nhl/run_config.hpp"

#include "nhl/features.hpp"

#include <algorithm>
#include <charconv>

namespace nhl {

const std::vector<ConfigField>& config_fields() {
  using F = FieldType;
  using J = nlohmann::json;
  static const std::vector<ConfigField> fields{
      {"dataset", F::text, "synthetic", "synthetic, idx or file"},
      {"classes", F::integer, 10, "synthetic classes (2..10)"},
      {"train_per_class", F::integer, 500, "synthetic training images per class"},
      {"test_per_class", F::integer, 640, "synthetic test images per class"},
      {"image_size", F::integer, 32, "synthetic image side in pixels"},
      {"data_seed", F::seed, 1, "synthetic training set seed"},
      {"test_data_seed", F::seed, 2, "synthetic test set seed"},
      {"train_images", F::text, "", "IDX training images"},
      {"train_labels", F::text, "", "IDX training labels"},
      {"test_images", F::text, "", "IDX test images"},
      {"test_labels", F::text, "", "IDX test labels"},
      {"train_file", F::text, "", "cached training set (make-dataset output)"},
      {"test_file", F::text, "", "cached test set (make-dataset output)"},
      {"conv1_filters", F::integer, 32, "filters in the first convolution"},
      {"block_widths", F::integer_list, J::array({32, 64, 128, 256}), "residual block widths"},
      {"block_strides", F::integer_list, J::array({1, 2, 2, 2}), "residual block strides"},
      {"seed", F::seed, 0, "training seed (init and shuffling)"},
      {"epochs", F::integer, 6, "training epochs"},
      {"train_batch_size", F::integer, 64, "training batch size"},
      {"train_lr", F::real, 0.05, "training learning rate"},
      {"train_momentum", F::real, 0.9, "training momentum"},
      {"weight_decay", F::real, 5e-4, "training weight decay"},
      {"lr_schedule", F::text, "cosine", "cosine or constant"},
      {"checkpoint", F::text, "nhl-out/source.ckpt", "source checkpoint path"},
      {"out_dir", F::text, "nhl-out", "output directory"},
      {"method", F::text, "nhl", "source, norm, tent, oja, hebbian or nhl"},
      {"suite", F::text, "", "paper-ablation runs source, hebbian, nhl, tent and norm"},
      {"corruption", F::text_list, J::array({"gaussian_noise:5"}), "kind:severity list"},
      {"seeds", F::seed_list, J::array({0}), "adaptation stream seeds"},
      {"batch_size", F::integer, 128, "test-time batch size"},
      {"shuffle", F::boolean, true, "shuffle the test stream"},
      {"episodic", F::boolean, false, "reset adaptation state every batch"},
      {"hebbian_temperature", F::real, 1.0, "soft-WTA temperature"},
      {"hebbian_lr", F::real, 1e-3, "Hebbian learning rate"},
      {"radius_mode", F::text, "source-norm", "source-norm or fixed"},
      {"radius_value", F::real, 1.0, "radius for radius_mode fixed"},
      {"modulator_selection", F::text_list, J::array(), "nhl parameter globs (empty: block1.**, block2.**)"},
      {"modulator_lr", F::real, 1e-3, "modulator learning rate"},
      {"modulator_momentum", F::real, 0.9, "modulator momentum"},
      {"modulator_steps", F::integer, 1, "modulator steps per batch"},
      {"taps", F::text_list, J::array({"conv1", "penultimate"}), "feature taps to export"},
      {"max_maps", F::integer, 8, "conv1 maps to dump (0..8)"},
  };
  return fields;
}

nlohmann::json default_config() {
  nlohmann::json j = nlohmann::json::object();
  for (const ConfigField& f : config_fields()) j[f.key] = f.default_value;
  return j;
}

namespace {

std::string join(const std::vector<std::string>& problems) {
  std::string s = "invalid configuration:";
  for (const std::string& p : problems) s += "\n  " + p;
  return s;
}

bool type_matches(const nlohmann::json& v, FieldType t) {
  switch (t) {
    case FieldType::integer: return v.is_number_integer();
    case FieldType::seed: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case FieldType::real: return v.is_number();
    case FieldType::boolean: return v.is_boolean();
    case FieldType::text: return v.is_string();
    case FieldType::text_list:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& e) { return e.is_string(); });
    case FieldType::integer_list:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& e) { return e.is_number_integer(); });
    case FieldType::seed_list:
      return v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& e) { return type_matches(e, FieldType::seed); });
  }
  return false;
}

const char* type_name(FieldType t) {
  switch (t) {
    case FieldType::integer: return "an integer";
    case FieldType::seed: return "a non-negative integer";
    case FieldType::real: return "a number";
    case FieldType::boolean: return "true or false";
    case FieldType::text: return "a string";
    case FieldType::text_list: return "a list of strings";
    case FieldType::integer_list: return "a list of integers";
    case FieldType::seed_list: return "a list of non-negative integers";
  }
  return "?";
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

// Converts one flag string into the field's JSON type.
bool parse_scalar(const std::string& s, FieldType t, nlohmann::json& out) {
  switch (t) {
    case FieldType::integer:
    case FieldType::integer_list: {
      std::int64_t v;
      if (!parse_number(s, v)) return false;
      out = v;
      return true;
    }
    case FieldType::seed:
    case FieldType::seed_list: {
      std::uint64_t v;
      if (!parse_number(s, v)) return false;
      out = v;
      return true;
    }
    case FieldType::real: {
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) return false;
        out = v;
        return true;
      } catch (const std::exception&) {
        return false;
      }
    }
    case FieldType::boolean:
      if (s == "true" || s == "1" || s == "yes") out = true;
      else if (s == "false" || s == "0" || s == "no") out = false;
      else return false;
      return true;
    case FieldType::text:
    case FieldType::text_list: out = s; return true;
  }
  return false;
}

void check_semantics(const nlohmann::json& v, std::vector<std::string>& problems) {
  auto bad = [&](const std::string& key, const std::string& why) { problems.push_back(key + ": " + why); };
  auto at_least = [&](const char* key, std::int64_t lo) {
    if (v.at(key).get<std::int64_t>() < lo) bad(key, "must be >= " + std::to_string(lo));
  };
  auto one_of = [&](const char* key, std::initializer_list<const char*> options) {
    const std::string s = v.at(key).get<std::string>();
    for (const char* o : options)
      if (s == o) return;
    std::string list;
    for (const char* o : options) list += std::string(list.empty() ? "" : ", ") + (*o ? o : "\"\"");
    bad(key, "'" + s + "' is not one of " + list);
  };

  one_of("dataset", {"synthetic", "idx", "file"});
  const std::int64_t classes = v.at("classes").get<std::int64_t>();
  if (classes < 2 || classes > 10) bad("classes", "must be in [2, 10]");
  at_least("train_per_class", 1);
  at_least("test_per_class", 1);
  at_least("image_size", 16);
  const std::string dataset = v.at("dataset").get<std::string>();
  if (dataset == "idx")
    for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"})
      if (v.at(key).get<std::string>().empty()) bad(key, "required when dataset is idx");
  if (dataset == "file")
    for (const char* key : {"train_file", "test_file"})
      if (v.at(key).get<std::string>().empty()) bad(key, "required when dataset is file");

  at_least("conv1_filters", 1);
  const auto widths = v.at("block_widths").get<std::vector<std::int64_t>>();
  const auto strides = v.at("block_strides").get<std::vector<std::int64_t>>();
  if (widths.size() != strides.size()) bad("block_strides", "must have one entry per block width");
  for (std::int64_t w : widths)
    if (w < 1) bad("block_widths", "entries must be >= 1");
  for (std::int64_t s : strides)
    if (s != 1 && s % 2 != 0) bad("block_strides", "entries must be 1 or even");

  at_least("epochs", 0);
  at_least("train_batch_size", 2);
  if (!(v.at("train_lr").get<double>() >= 0.0)) bad("train_lr", "must be >= 0");
  const double tm = v.at("train_momentum").get<double>();
  if (!(tm >= 0.0 && tm < 1.0)) bad("train_momentum", "must be in [0, 1)");
  if (!(v.at("weight_decay").get<double>() >= 0.0)) bad("weight_decay", "must be >= 0");
  one_of("lr_schedule", {"cosine", "constant"});
  if (v.at("out_dir").get<std::string>().empty()) bad("out_dir", "must not be empty");
  if (v.at("checkpoint").get<std::string>().empty()) bad("checkpoint", "must not be empty");

  try {
    parse_method(v.at("method").get<std::string>());
  } catch (const ParameterError& e) {
    bad("method", e.what());
  }
  one_of("suite", {"", "paper-ablation"});
  const auto corruptions = v.at("corruption").get<std::vector<std::string>>();
  if (corruptions.empty()) bad("corruption", "needs at least one kind:severity entry");
  for (const std::string& c : corruptions) {
    try {
      parse_corruption(c);
    } catch (const std::exception& e) {
      bad("corruption", e.what());
    }
  }
  if (v.at("seeds").empty()) bad("seeds", "needs at least one seed");
  at_least("batch_size", 2);

  if (!(v.at("hebbian_temperature").get<double>() > 0.0)) bad("hebbian_temperature", "must be > 0");
  if (!(v.at("hebbian_lr").get<double>() >= 0.0)) bad("hebbian_lr", "must be >= 0");
  one_of("radius_mode", {"source-norm", "fixed"});
  if (!(v.at("radius_value").get<double>() > 0.0)) bad("radius_value", "must be > 0");
  if (!(v.at("modulator_lr").get<double>() >= 0.0)) bad("modulator_lr", "must be >= 0");
  const double mm = v.at("modulator_momentum").get<double>();
  if (!(mm >= 0.0 && mm < 1.0)) bad("modulator_momentum", "must be in [0, 1)");
  at_least("modulator_steps", 1);
  for (const std::string& sel : v.at("modulator_selection").get<std::vector<std::string>>())
    if (sel.empty()) bad("modulator_selection", "globs must not be empty");

  const auto taps = v.at("taps").get<std::vector<std::string>>();
  if (taps.empty()) bad("taps", "needs at least one tap");
  for (const std::string& t : taps)
    if (std::find(feature_tap_names().begin(), feature_tap_names().end(), t) == feature_tap_names().end())
      bad("taps", "unknown feature tap '" + t + "'");
  const std::int64_t maps = v.at("max_maps").get<std::int64_t>();
  if (maps < 0 || maps > 8) bad("max_maps", "must be in [0, 8]");
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

RunConfig RunConfig::merge(const nlohmann::json& file, const FlagValues& flags) {
  RunConfig cfg;
  std::vector<std::string> problems;
  auto field = [](const std::string& key) -> const ConfigField* {
    for (const ConfigField& f : config_fields())
      if (f.key == key) return &f;
    return nullptr;
  };

  if (!file.is_null() && !file.is_object()) {
    problems.push_back("config file: top level must be a JSON object");
  } else if (file.is_object()) {
    for (const auto& [key, value] : file.items()) {
      const ConfigField* f = field(key);
      if (!f) {
        problems.push_back(key + ": unknown field");
      } else if (!type_matches(value, f->type)) {
        problems.push_back(key + ": expected " + std::string(type_name(f->type)));
      } else {
        cfg.values_[key] = value;
      }
    }
  }

  for (const auto& [key, raw] : flags) {
    const ConfigField* f = field(key);
    if (!f) {
      problems.push_back(key + ": unknown field");
      continue;
    }
    if (raw.empty()) continue;
    if (f->is_list()) {
      nlohmann::json list = nlohmann::json::array();
      bool ok = true;
      for (const std::string& s : raw) {
        if (s.empty()) continue;
        nlohmann::json item;
        ok = ok && parse_scalar(s, f->type, item);
        list.push_back(item);
      }
      if (ok) cfg.values_[key] = list;
      else problems.push_back(key + ": expected " + std::string(type_name(f->type)));
    } else {
      nlohmann::json item;
      if (parse_scalar(raw.back(), f->type, item)) cfg.values_[key] = item;
      else problems.push_back(key + ": expected " + std::string(type_name(f->type)) + ", got '" + raw.back() + "'");
    }
  }

  // Fields with type errors keep their defaults for the semantic pass, whose
  // findings about them would only repeat the type error.
  std::vector<std::string> semantic;
  check_semantics(cfg.values_, semantic);
  for (std::string& p : semantic) {
    const std::string key = p.substr(0, p.find(':'));
    const bool seen = std::any_of(problems.begin(), problems.end(),
                                  [&](const std::string& q) { return q.rfind(key + ":", 0) == 0; });
    if (!seen) problems.push_back(std::move(p));
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

ArchitectureDescriptor RunConfig::architecture(Index in_channels, Index height, Index width, Index num_classes) const {
  ArchitectureDescriptor d;
  d.in_channels = in_channels;
  d.height = height;
  d.width = width;
  d.num_classes = num_classes;
  d.conv1.filters = get<Index>("conv1_filters");
  const auto widths = get<std::vector<Index>>("block_widths");
  const auto strides = get<std::vector<Index>>("block_strides");
  for (std::size_t b = 0; b < widths.size(); ++b) d.blocks.push_back({widths[b], strides[b]});
  d.validate();
  return d;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = get<int>("epochs");
  t.batch_size = get<Index>("train_batch_size");
  t.learning_rate = get<double>("train_lr");
  t.momentum = get<double>("train_momentum");
  t.weight_decay = get<double>("weight_decay");
  t.schedule = get<std::string>("lr_schedule") == "constant" ? LrSchedule::constant : LrSchedule::cosine;
  t.seed = get<std::uint64_t>("seed");
  return t;
}

MethodSpec RunConfig::method_spec(MethodKind kind) const {
  MethodSpec m = MethodSpec::make(kind);
  m.episodic = get<bool>("episodic");
  m.hebbian.temperature = get<double>("hebbian_temperature");
  m.hebbian.learning_rate = get<double>("hebbian_lr");
  m.hebbian.radius.mode = get<std::string>("radius_mode") == "fixed" ? RadiusMode::fixed : RadiusMode::source_norm;
  m.hebbian.radius.value = get<double>("radius_value");
  m.modulator.learning_rate = get<double>("modulator_lr");
  m.modulator.momentum = get<double>("modulator_momentum");
  m.modulator.steps_per_batch = get<int>("modulator_steps");
  const auto selection = get<std::vector<std::string>>("modulator_selection");
  if (kind == MethodKind::nhl && !selection.empty()) m.modulator.selection = selection;
  return m;
}

std::vector<MethodSpec> RunConfig::methods() const {
  if (get<std::string>("suite") == "paper-ablation") {
    std::vector<MethodSpec> out;
    for (MethodKind k : {MethodKind::source, MethodKind::hebbian, MethodKind::nhl, MethodKind::tent, MethodKind::norm})
      out.push_back(method_spec(k));
    return out;
  }
  return {method_spec(parse_method(get<std::string>("method")))};
}

std::vector<SuiteCorruption> RunConfig::corruptions() const {
  std::vector<SuiteCorruption> out;
  for (const std::string& c : get<std::vector<std::string>>("corruption")) {
    const CorruptionSpec spec = parse_corruption(c);
    out.push_back({spec.kind, spec.severity});
  }
  return out;
}

std::vector<std::uint64_t> RunConfig::seeds() const { return get<std::vector<std::uint64_t>>("seeds"); }

}  // namespace nhl
