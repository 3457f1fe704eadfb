#include "hwids/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hwids/cnn.hpp"
#include "hwids/dataio.hpp"
#include "hwids/flowext.hpp"
#include "hwids/hwcost.hpp"
#include "hwids/metrics.hpp"
#include "hwids/runtime.hpp"
#include "hwids/search.hpp"
#include "hwids/trees.hpp"
#include "json.hpp"

namespace hwids::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDefaultSeed = 7;

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// JSON given inline ('{...}' / '[...]') or as a file path.
json json_arg(const std::string& value) {
  const auto first = value.find_first_not_of(" \t\n");
  if (first != std::string::npos && (value[first] == '{' || value[first] == '[')) {
    try {
      return json::parse(value);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("inline JSON: ") + e.what());
    }
  }
  return load_json_file(value);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void log(const std::string& msg) {
  if (verbose()) std::cerr << "[hwids] " << msg << '\n';
}

// Settings come from three layers: built-in defaults, the --config JSON,
// then explicit flags.
struct Layered {
  json config = json::object();

  template <typename T>
  void resolve(const CLI::Option* flag, T& value, const char* pointer) const {
    if (flag != nullptr && flag->count() > 0) return;
    const json::json_pointer ptr(pointer);
    if (!config.contains(ptr)) return;
    try {
      config.at(ptr).get_to(value);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config ") + pointer + ": " + e.what());
    }
  }

  const json& section(const char* key) const {
    static const json empty = json::object();
    auto it = config.find(key);
    return it == config.end() ? empty : *it;
  }
};

struct DataOptions {
  std::string data;
  std::string label_column = "label";
  int task = 0;
  std::string class_map;
  CLI::Option* data_flag = nullptr;
  CLI::Option* label_flag = nullptr;
  CLI::Option* task_flag = nullptr;
  CLI::Option* map_flag = nullptr;

  void add(CLI::App* app, bool data_required = true) {
    data_flag = app->add_option("--data", data, "Input CSV");
    if (data_required) data_flag->check(CLI::ExistingFile);
    label_flag = app->add_option("--label-column", label_column, "Label column name")->capture_default_str();
    task_flag = app->add_option("--task", task, "Built-in class mapping: 2, 6 or 15 classes")
                    ->check(CLI::IsMember({2, 6, 15}));
    map_flag = app->add_option("--class-map", class_map, "JSON object mapping original to target labels");
  }

  void resolve(const Layered& l) {
    l.resolve(data_flag, data, "/data");
    l.resolve(label_flag, label_column, "/label_column");
    l.resolve(task_flag, task, "/task");
    l.resolve(map_flag, class_map, "/class_map");
    if (data.empty()) throw ConfigError("--data is required");
  }

  /// Loads, maps labels and cleans.
  dataio::Dataset load() const {
    log("loading " + data);
    auto d = dataio::load_csv(data, label_column);
    if (!class_map.empty()) {
      d = dataio::remap_classes(d, json_arg(class_map).get<std::map<std::string, std::string>>());
    } else if (task == 2 || task == 6) {
      d = dataio::remap_classes(d, dataio::default_class_mapping(task));
    }
    return dataio::clean(d);
  }
};

struct BudgetOptions {
  double flash_kb = 300;
  double ram_kb = 50;
  double ops = 1.5e6;
  CLI::Option* flash_flag = nullptr;
  CLI::Option* ram_flag = nullptr;
  CLI::Option* ops_flag = nullptr;

  void add(CLI::App* app) {
    flash_flag = app->add_option("--budget-flash-kb", flash_kb, "Flash budget in KB (1 KB = 1000 B)")
                     ->check(CLI::NonNegativeNumber)
                     ->capture_default_str();
    ram_flag = app->add_option("--budget-ram-kb", ram_kb, "Peak RAM budget in KB")
                   ->check(CLI::NonNegativeNumber)
                   ->capture_default_str();
    ops_flag = app->add_option("--budget-ops", ops, "Compute budget (tree Ops or CNN FLOPs)")
                   ->check(CLI::NonNegativeNumber)
                   ->capture_default_str();
  }

  hwcost::Budget resolve(const Layered& l) {
    l.resolve(flash_flag, flash_kb, "/budget/flash_kb");
    l.resolve(ram_flag, ram_kb, "/budget/ram_kb");
    l.resolve(ops_flag, ops, "/budget/ops");
    if (flash_kb < 0 || ram_kb < 0 || ops < 0) throw ConfigError("budgets must be non-negative");
    hwcost::Budget b;
    b.flash_max = static_cast<std::uint64_t>(std::llround(flash_kb * static_cast<double>(hwcost::kBytesPerKb)));
    b.ram_max = static_cast<std::uint64_t>(std::llround(ram_kb * static_cast<double>(hwcost::kBytesPerKb)));
    b.compute_max = static_cast<std::uint64_t>(std::llround(ops));
    return b;
  }
};

struct SplitData {
  dataio::Dataset train, val;
  dataio::ScalerParams scaler;
};

/// Holdout split, scaler fitted on the training part only.
SplitData split_and_scale(const dataio::Dataset& d, double val_frac, std::uint64_t seed) {
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("--val-frac must lie in (0, 1)");
  auto [train, val] = dataio::stratified_split(d, val_frac, seed);
  auto [scaled, scaler] = dataio::minmax_scale(train);
  return SplitData{std::move(scaled), dataio::apply_scaler(val, scaler), std::move(scaler)};
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::ofstream open_events(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

// Descriptor stored in artifacts so that `eval` can retrain per fold.
json tree_descriptor(const trees::HyperParams& hp, std::uint64_t seed) {
  return json{{"type", "tree"}, {"hyperparams", hp}, {"seed", seed}};
}

json cnn_descriptor(const cnn::Arch& arch, const cnn::TrainConfig& cfg, double val_frac, std::uint64_t seed) {
  json blocks = json(arch)["blocks"];
  return json{{"type", "cnn"}, {"blocks", blocks}, {"train", cfg}, {"val_frac", val_frac}, {"seed", seed}};
}

struct Trained {
  runtime::ModelArtifact artifact;
  json training;
};

/// Trains the model a descriptor describes on already-scaled data.
Trained train_from_descriptor(const json& desc, const dataio::Dataset& scaled, const dataio::ScalerParams& scaler) {
  const std::string type = desc.at("type").get<std::string>();
  const auto seed = desc.value("seed", kDefaultSeed);
  if (type == "tree") {
    const auto hp = desc.at("hyperparams").get<trees::HyperParams>();
    hp.validate();
    auto model = trees::train(scaled, hp, seed);
    json info{{"train_accuracy", search::tree_accuracy(model, scaled)}};
    return {runtime::make_artifact(std::move(model), scaler, scaled.class_names, desc), info};
  }
  if (type == "cnn") {
    cnn::Arch arch;
    desc.at("blocks").get_to(arch.blocks);
    arch.input_len = static_cast<int>(scaled.dim());
    arch.n_classes = scaled.n_classes();
    cnn::shape_trace(arch);
    auto cfg = desc.value("train", json::object()).get<cnn::TrainConfig>();
    cfg.validate();
    const double val_frac = desc.value("val_frac", 0.2);
    auto [tr, va] = dataio::stratified_split(scaled, val_frac, derive_seed(seed, {2}));
    cfg.seed = derive_seed(seed, {1});
    auto [model, history] = cnn::train(cnn::init_model(arch, seed), tr, va, cfg);
    json info{{"epochs", history.epochs.size()},
              {"best_epoch", history.best_epoch},
              {"early_stopped", history.early_stopped},
              {"val_accuracy", cnn::evaluate(model, va.rows() ? va : tr).accuracy}};
    return {runtime::make_artifact(std::move(model), scaler, scaled.class_names, desc), info};
  }
  throw ConfigError("unknown descriptor type '" + type + "'");
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const Layered& l, DataOptions& data, const std::string& out, const std::string& scaler_out) {
  data.resolve(l);
  auto raw = dataio::load_csv(data.data, data.label_column);
  const auto rows_in = raw.rows();
  auto cleaned = data.load();
  auto [scaled, scaler] = dataio::minmax_scale(cleaned);
  dataio::write_csv(scaled, out, data.label_column);
  dataio::save_scaler(scaler, scaler_out);
  json counts = json::object();
  const auto c = scaled.class_counts();
  for (std::size_t i = 0; i < c.size(); ++i) counts[scaled.class_names[i]] = c[i];
  print_json({{"rows_in", rows_in}, {"rows_out", scaled.rows()}, {"features", scaled.dim()}, {"classes", counts},
              {"output", out}, {"scaler", scaler_out}});
  return kOk;
}

struct SearchOptions {
  std::string out_dir = "hwids_out";
  std::uint64_t seed = kDefaultSeed;
  std::size_t workers = 1;
  double val_frac = 0.2;
  CLI::Option* out_flag = nullptr;
  CLI::Option* seed_flag = nullptr;
  CLI::Option* workers_flag = nullptr;
  CLI::Option* val_flag = nullptr;

  void add(CLI::App* app) {
    out_flag = app->add_option("--out-dir", out_dir, "Directory for events, summary and model")->capture_default_str();
    seed_flag = app->add_option("--seed", seed, "Master seed")->capture_default_str();
    workers_flag = app->add_option("--workers", workers, "Parallel candidate workers")
                       ->check(CLI::PositiveNumber)
                       ->capture_default_str();
    val_flag = app->add_option("--val-frac", val_frac, "Holdout validation fraction")->capture_default_str();
  }

  void resolve(const Layered& l) {
    l.resolve(out_flag, out_dir, "/out_dir");
    l.resolve(seed_flag, seed, "/seed");
    l.resolve(workers_flag, workers, "/workers");
    l.resolve(val_flag, val_frac, "/val_frac");
    if (workers < 1) throw ConfigError("--workers must be >= 1");
  }
};

int cmd_gridsearch(const Layered& l, DataOptions& data, BudgetOptions& budget_opts, SearchOptions& so,
                   std::string family, const CLI::Option* family_flag) {
  data.resolve(l);
  so.resolve(l);
  l.resolve(family_flag, family, "/grid/family");
  const auto budget = budget_opts.resolve(l);
  auto space = search::GridSpace::defaults(trees::family_from_string(family));
  search::apply_overrides(l.section("grid"), space);

  const auto start = std::chrono::steady_clock::now();
  const auto split = split_and_scale(data.load(), so.val_frac, so.seed);
  ensure_dir(so.out_dir);
  auto events = open_events(fs::path(so.out_dir) / "events.ndjson");
  std::size_t done = 0;
  search::GridSearchOptions options;
  options.workers = so.workers;
  options.on_result = [&](const search::CandidateResult& r) {
    events << json(r).dump() << '\n';
    if (verbose() && ++done % 50 == 0) log("grid: " + std::to_string(done) + "/" + std::to_string(space.size()));
  };
  log("grid search over " + std::to_string(space.size()) + " candidates");
  const auto outcome = search::constrained_grid_search(space, budget, split.train, split.val, so.seed, options);
  events.flush();

  std::size_t rejected = 0;
  for (const auto& r : outcome.results) rejected += r.status == search::Status::RejectedHardware;
  json summary{{"search", "grid"},
               {"space", space},
               {"candidates", outcome.results.size()},
               {"evaluated", outcome.results.size() - rejected},
               {"rejected_hardware", rejected},
               {"budget", budget},
               {"seed", so.seed},
               {"train_rows", split.train.rows()},
               {"val_rows", split.val.rows()}};
  if (!outcome.feasible()) {
    summary["feasible"] = false;
    if (outcome.best_infeasible) summary["best_infeasible"] = outcome.results[*outcome.best_infeasible];
    summary["wall_time_s"] = seconds_since(start);
    write_text(fs::path(so.out_dir) / "summary.json", summary.dump(2) + "\n");
    print_json(summary);
    std::cerr << "hwids: no feasible candidate within the budget\n";
    return kNoFeasible;
  }
  const auto& best = outcome.best();
  const auto& hp = std::get<trees::HyperParams>(best.descriptor);
  const auto seed = search::grid_candidate_seed(so.seed, best.index);
  auto trained = train_from_descriptor(tree_descriptor(hp, seed), split.train, split.scaler);
  const auto model_path = fs::path(so.out_dir) / "model.hams";
  runtime::save_model(trained.artifact, model_path);

  summary["feasible"] = true;
  summary["best"] = best;
  json top = json::array();
  const auto ranked = outcome.ranked();
  for (std::size_t i = 0; i < ranked.size() && i < 10; ++i) top.push_back(ranked[i]);
  summary["top"] = top;
  summary["model"] = model_path.string();
  summary["wall_time_s"] = seconds_since(start);
  write_text(fs::path(so.out_dir) / "summary.json", summary.dump(2) + "\n");
  print_json(summary);
  return kOk;
}

struct NasFlags {
  int generations = 0, children = 0, initial = 0, max_blocks = 0, epochs = 0, batch = 0;
  double lr = 0;
  CLI::Option *generations_flag, *children_flag, *initial_flag, *max_blocks_flag, *epochs_flag, *batch_flag, *lr_flag;

  void add(CLI::App* app) {
    generations_flag = app->add_option("--generations", generations, "Mutation generations (default 100)");
    children_flag = app->add_option("--children", children, "Valid children per generation (default 15)");
    initial_flag = app->add_option("--initial-population", initial, "Random architectures in generation 0 (default 10)");
    max_blocks_flag = app->add_option("--max-blocks", max_blocks, "Block cap (default 6)");
    epochs_flag = app->add_option("--epochs", epochs, "Training epochs per candidate (default 100)");
    batch_flag = app->add_option("--batch-size", batch, "Mini-batch size (default 2048)");
    lr_flag = app->add_option("--lr", lr, "Initial learning rate (default 0.008)");
  }

  void apply(search::NasConfig& n, cnn::TrainConfig& t) const {
    if (generations_flag->count()) n.generations = generations;
    if (children_flag->count()) n.children_per_generation = children;
    if (initial_flag->count()) n.initial_population = initial;
    if (max_blocks_flag->count()) n.max_blocks = max_blocks;
    if (epochs_flag->count()) t.max_epochs = epochs;
    if (batch_flag->count()) t.batch_size = batch;
    if (lr_flag->count()) t.initial_lr = lr;
  }
};

int cmd_nas(const Layered& l, DataOptions& data, BudgetOptions& budget_opts, SearchOptions& so, const NasFlags& flags) {
  data.resolve(l);
  so.resolve(l);
  const auto budget = budget_opts.resolve(l);
  auto nas_cfg = l.section("nas").get<search::NasConfig>();
  auto train_cfg = l.section("train").get<cnn::TrainConfig>();
  flags.apply(nas_cfg, train_cfg);
  nas_cfg.seed = so.seed;
  nas_cfg.validate();
  train_cfg.validate();

  const auto start = std::chrono::steady_clock::now();
  const auto split = split_and_scale(data.load(), so.val_frac, so.seed);
  ensure_dir(so.out_dir);
  auto events = open_events(fs::path(so.out_dir) / "events.ndjson");
  search::NasOptions options;
  options.workers = so.workers;
  options.on_result = [&](const search::CandidateResult& r) {
    events << json(r).dump() << '\n';
    log("nas: generation " + std::to_string(r.generation) + " candidate " + std::to_string(r.index) +
        (r.status == search::Status::Evaluated ? " acc " + format_g(r.val_accuracy, 4) : " rejected"));
  };
  const auto trainer = search::make_cnn_trainer(split.train, split.val, train_cfg);
  const auto outcome = search::evolve(nas_cfg, search::CnnSpace{}, budget, static_cast<int>(split.train.dim()),
                                      split.train.n_classes(), trainer, options);
  events.flush();

  std::size_t rejected = 0;
  for (const auto& r : outcome.history) rejected += r.status == search::Status::RejectedHardware;
  json summary{{"search", "nas"},
               {"config", nas_cfg},
               {"train", train_cfg},
               {"budget", budget},
               {"candidates", outcome.history.size()},
               {"rejected_hardware", rejected},
               {"generations_completed", outcome.generations_completed},
               {"best_so_far", outcome.best_so_far},
               {"feasible", outcome.success}};
  if (!outcome.diagnostic.empty()) summary["diagnostic"] = outcome.diagnostic;
  if (!outcome.success) {
    summary["wall_time_s"] = seconds_since(start);
    write_text(fs::path(so.out_dir) / "summary.json", summary.dump(2) + "\n");
    print_json(summary);
    std::cerr << "hwids: " << outcome.diagnostic << '\n';
    return kNoFeasible;
  }
  const auto& best = outcome.history[*outcome.best];
  summary["best"] = best;
  const auto& arch = std::get<cnn::Arch>(best.descriptor);
  auto artifact = runtime::make_artifact(*outcome.best_model, split.scaler, split.train.class_names,
                                         cnn_descriptor(arch, train_cfg, so.val_frac, so.seed));
  const auto model_path = fs::path(so.out_dir) / "model.hams";
  runtime::save_model(artifact, model_path);
  summary["model"] = model_path.string();
  summary["wall_time_s"] = seconds_since(start);
  write_text(fs::path(so.out_dir) / "summary.json", summary.dump(2) + "\n");
  print_json(summary);
  return kOk;
}

int cmd_train(const Layered& l, DataOptions& data, const std::string& model_type, const std::string& params,
              std::uint64_t seed, double val_frac, const std::string& out) {
  data.resolve(l);
  json p = params.empty() ? json::object() : json_arg(params);
  json desc;
  if (model_type == "cnn") {
    if (!p.contains("blocks")) throw ConfigError("cnn parameters need a \"blocks\" array");
    cnn::TrainConfig tc = p.value("train", l.section("train")).get<cnn::TrainConfig>();
    cnn::Arch arch;
    p.at("blocks").get_to(arch.blocks);
    desc = cnn_descriptor(arch, tc, p.value("val_frac", val_frac), seed);
  } else {
    p["family"] = model_type;
    desc = tree_descriptor(p.get<trees::HyperParams>(), seed);
  }
  const auto cleaned = data.load();
  auto [scaled, scaler] = dataio::minmax_scale(cleaned);
  auto trained = train_from_descriptor(desc, scaled, scaler);
  runtime::save_model(trained.artifact, out);
  print_json({{"model", out},
              {"kind", runtime::to_string(trained.artifact.kind)},
              {"descriptor", desc},
              {"profile", trained.artifact.profile},
              {"training", trained.training}});
  return kOk;
}

json mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}};
}

int cmd_eval(const Layered& l, DataOptions& data, const std::string& model_path, int folds, std::uint64_t seed) {
  data.resolve(l);
  const auto artifact = runtime::load_model(model_path);
  const auto d = data.load();
  if (d.class_names != artifact.class_names) {
    throw DataError("dataset classes do not match the model's classes");
  }
  if (d.feature_names != artifact.feature_names()) {
    throw DataError("dataset features do not match the model's features");
  }
  const auto plan = dataio::stratified_kfold(d, folds, seed);
  std::vector<double> acc, macro, weighted;
  json per_fold = json::array();
  for (int f = 0; f < folds; ++f) {
    const auto train_rows = plan.train_rows(f);
    const auto test_rows = plan.test_rows(f);
    auto [train, scaler] = dataio::minmax_scale(d.subset(train_rows));
    const auto test = dataio::apply_scaler(d.subset(test_rows), scaler);
    auto trained = train_from_descriptor(artifact.descriptor, train, scaler);
    std::vector<int> predicted;
    for (std::size_t r = 0; r < test.rows(); ++r) {
      predicted.push_back(static_cast<int>(argmax(trained.artifact.predict_proba_scaled(test.features.row(r)))));
    }
    const auto report = evaluate_predictions(test.labels, predicted, test.n_classes());
    acc.push_back(report.accuracy);
    macro.push_back(report.macro_f1);
    weighted.push_back(report.weighted_f1);
    per_fold.push_back({{"fold", f}, {"train_rows", train.rows()}, {"test_rows", test.rows()}, {"report", report}});
    log("fold " + std::to_string(f) + " accuracy " + format_g(report.accuracy, 6));
  }
  print_json({{"model", model_path},
              {"kind", runtime::to_string(artifact.kind)},
              {"folds", folds},
              {"seed", seed},
              {"accuracy", mean_std(acc)},
              {"macro_f1", mean_std(macro)},
              {"weighted_f1", mean_std(weighted)},
              {"per_fold", per_fold}});
  return kOk;
}

int cmd_profile(const Layered& l, BudgetOptions& budget_opts, const std::string& model_path,
                const std::string& descriptor, int input_len, int n_classes) {
  const auto budget = budget_opts.resolve(l);
  hwcost::Profile profile;
  std::string kind;
  if (!model_path.empty()) {
    const auto a = runtime::load_model(model_path);
    kind = runtime::to_string(a.kind);
    if (const auto* e = std::get_if<trees::Ensemble>(&a.model)) {
      profile = hwcost::profile_tree_ensemble(*e);
    } else {
      profile = hwcost::profile_cnn(std::get<cnn::Model>(a.model).arch);
    }
  } else if (!descriptor.empty()) {
    const json d = json_arg(descriptor);
    if (!d.contains("blocks")) {
      throw ConfigError("only CNN descriptors can be profiled before training; tree cost depends on the trained structure");
    }
    cnn::Arch arch;
    d.at("blocks").get_to(arch.blocks);
    arch.input_len = d.value("input_len", input_len);
    arch.n_classes = d.value("n_classes", n_classes);
    if (arch.input_len < 1 || arch.n_classes < 2) throw ConfigError("--input-len and --n-classes are required");
    kind = "cnn";
    profile = hwcost::profile_cnn(arch);
  } else {
    throw ConfigError("profile needs --model or --descriptor");
  }
  const auto v = hwcost::check_budget(profile, budget);
  print_json({{"kind", kind},
              {"profile", profile},
              {"budget", budget},
              {"feasible", v.feasible},
              {"flash_ok", v.flash_ok},
              {"ram_ok", v.ram_ok},
              {"compute_ok", v.compute_ok}});
  return kOk;
}

int cmd_bench(const std::string& model_path, const std::string& data_path, const std::string& label_column,
              std::size_t runs, double current, double voltage, std::uint64_t seed) {
  const auto a = runtime::load_model(model_path);
  Matrix inputs;
  if (!data_path.empty()) {
    const auto d = dataio::load_csv(data_path, label_column);
    const auto pos = runtime::match_schema(a.feature_names(), d.feature_names);
    const std::size_t rows = std::min<std::size_t>(d.rows(), 1000);
    inputs = Matrix(rows, pos.size());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pos.size(); ++c) inputs(r, c) = d.features(r, pos[c]);
    }
  } else {
    // Random rows spanning the scaler's training range.
    Rng rng(seed);
    inputs = Matrix(100, a.n_features());
    for (std::size_t r = 0; r < inputs.rows; ++r) {
      for (std::size_t c = 0; c < inputs.cols; ++c) {
        const double lo = a.scaler.mins.empty() ? 0.0 : a.scaler.mins[c];
        const double hi = a.scaler.maxs.empty() ? 1.0 : a.scaler.maxs[c];
        inputs(r, c) = uniform_real(rng, lo, hi);
      }
    }
  }
  const auto latency = runtime::benchmark_latency(a, inputs, runs);
  json j = runtime::energy_report(latency, current, voltage);
  j["model"] = model_path;
  j["kind"] = runtime::to_string(a.kind);
  print_json(j);
  return kOk;
}

int cmd_extract(const std::string& pcap, const std::string& out, const std::string& schema_path, double idle_s,
                const std::string& label) {
  const auto schema = schema_path.empty() ? flowext::FeatureSchema::default_schema()
                                          : flowext::FeatureSchema::load(schema_path);
  if (idle_s < 0) throw ConfigError("--idle-timeout must be non-negative");
  std::ifstream in(pcap, std::ios::binary);
  if (!in) throw IoError("cannot open " + pcap);
  const auto flows = flowext::extract_flows(in, static_cast<std::uint64_t>(std::llround(idle_s * 1e6)));
  if (out.empty() || out == "-") {
    flowext::write_feature_csv(std::cout, flows.flows, schema, label);
  } else {
    std::ofstream o(out, std::ios::trunc);
    if (!o) throw IoError("cannot write " + out);
    flowext::write_feature_csv(o, flows.flows, schema, label);
    if (!o) throw IoError("write failed for " + out);
  }
  std::cerr << json{{"flows", flows.flows.size()}, {"pcap", flows.stats}}.dump() << '\n';
  return kOk;
}

int cmd_classify(const std::string& model_path, const std::string& pcap, const std::string& schema_path,
                 double idle_s, double speed, bool no_timing, const std::string& out) {
  const auto a = runtime::load_model(model_path);
  const auto schema = schema_path.empty() ? flowext::FeatureSchema::default_schema()
                                          : flowext::FeatureSchema::load(schema_path);
  runtime::match_schema(a.feature_names(), schema.names());
  flowext::PcapReplaySource source(pcap, speed);
  std::ofstream file;
  if (!out.empty() && out != "-") {
    file.open(out, std::ios::trunc);
    if (!file) throw IoError("cannot write " + out);
  }
  std::ostream& sink = file.is_open() ? static_cast<std::ostream&>(file) : std::cout;
  const auto summary = runtime::classify_stream(
      a, source, schema, [&](const runtime::PredictionRecord& r) { sink << runtime::to_json(r, !no_timing).dump() << '\n'; },
      static_cast<std::uint64_t>(std::llround(idle_s * 1e6)));
  sink.flush();
  std::cerr << json{{"flows", summary.flows}, {"pcap", summary.stats}}.dump() << '\n';
  return kOk;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const search::NoFeasibleCandidate*>(&e)) return kNoFeasible;
  if (dynamic_cast<const IoError*>(&e)) return kIoError;
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  if (dynamic_cast<const json::exception*>(&e)) return kUsage;
  return kDataError;
}

int run(int argc, char** argv) {
  CLI::App app{"Hardware-aware model selection for IoT intrusion detection", "hwids"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hwids 1.0.0");
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values")->check(CLI::ExistingFile);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Clean, map labels and min-max scale a CSV");
  DataOptions pre_data;
  pre_data.add(pre);
  std::string pre_out, pre_scaler;
  pre->add_option("--out", pre_out, "Output CSV")->required();
  pre->add_option("--scaler-out", pre_scaler, "Output scaler JSON")->required();

  // gridsearch
  auto* grid = app.add_subcommand("gridsearch", "Budget-constrained grid search over tree ensembles");
  DataOptions grid_data;
  grid_data.add(grid);
  BudgetOptions grid_budget;
  grid_budget.add(grid);
  SearchOptions grid_so;
  grid_so.add(grid);
  std::string family = "gbdt-leafwise";
  auto* family_flag = grid->add_option("--family", family, "rf | gbdt-leafwise | gbdt-levelwise")
                          ->check(CLI::IsMember({"rf", "gbdt-leafwise", "gbdt-levelwise"}))
                          ->capture_default_str();

  // nas
  auto* nas = app.add_subcommand("nas", "Evolutionary hardware-aware search over 1D CNNs");
  DataOptions nas_data;
  nas_data.add(nas);
  BudgetOptions nas_budget;
  nas_budget.add(nas);
  SearchOptions nas_so;
  nas_so.add(nas);
  NasFlags nas_flags;
  nas_flags.add(nas);

  // train
  auto* train = app.add_subcommand("train", "Train one model from an explicit descriptor");
  DataOptions train_data;
  train_data.add(train);
  std::string model_type, params, train_out;
  std::uint64_t train_seed = kDefaultSeed;
  double train_val = 0.2;
  train->add_option("--model-type", model_type, "rf | gbdt-leafwise | gbdt-levelwise | cnn")
      ->required()
      ->check(CLI::IsMember({"rf", "gbdt-leafwise", "gbdt-levelwise", "cnn"}));
  train->add_option("--params", params, "Hyperparameters / architecture as JSON text or file");
  train->add_option("--seed", train_seed, "Training seed")->capture_default_str();
  train->add_option("--val-frac", train_val, "CNN early-stopping holdout fraction")->capture_default_str();
  train->add_option("--out", train_out, "Output model file")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Stratified k-fold evaluation of a model's descriptor");
  DataOptions eval_data;
  eval_data.add(eval);
  std::string eval_model;
  int folds = 5;
  std::uint64_t eval_seed = kDefaultSeed;
  eval->add_option("--model", eval_model, "Model file")->required()->check(CLI::ExistingFile);
  eval->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 100))->capture_default_str();
  eval->add_option("--seed", eval_seed, "Fold assignment seed")->capture_default_str();

  // profile
  auto* prof = app.add_subcommand("profile", "Hardware profile of a model or CNN descriptor");
  BudgetOptions prof_budget;
  prof_budget.add(prof);
  std::string prof_model, prof_desc;
  int input_len = 0, n_classes = 0;
  prof->add_option("--model", prof_model, "Model file")->check(CLI::ExistingFile);
  prof->add_option("--descriptor", prof_desc, "CNN descriptor as JSON text or file");
  prof->add_option("--input-len", input_len, "Feature count for a descriptor");
  prof->add_option("--n-classes", n_classes, "Class count for a descriptor");

  // bench
  auto* bench = app.add_subcommand("bench", "Batch-1 latency and energy benchmark");
  std::string bench_model, bench_data, bench_label = "label";
  std::size_t runs = 100;
  double current = 0.0, voltage = 5.0;
  std::uint64_t bench_seed = kDefaultSeed;
  bench->add_option("--model", bench_model, "Model file")->required()->check(CLI::ExistingFile);
  bench->add_option("--data", bench_data, "CSV with raw feature rows (random rows when omitted)")
      ->check(CLI::ExistingFile);
  bench->add_option("--label-column", bench_label, "Label column of --data")->capture_default_str();
  bench->add_option("--runs", runs, "Timed runs (>= 30)")->capture_default_str();
  bench->add_option("--current-ma", current, "Measured current above idle, mA")->capture_default_str();
  bench->add_option("--voltage", voltage, "Supply voltage, V")->capture_default_str();
  bench->add_option("--seed", bench_seed, "Seed for random inputs")->capture_default_str();

  // extract
  auto* extract = app.add_subcommand("extract", "Flow features from a pcap as CSV");
  std::string ex_pcap, ex_out, ex_schema, ex_label = "unlabeled";
  double ex_idle = 60.0;
  extract->add_option("--pcap", ex_pcap, "Input pcap")->required()->check(CLI::ExistingFile);
  extract->add_option("--out", ex_out, "Output CSV (stdout when omitted)");
  extract->add_option("--schema", ex_schema, "Feature schema JSON")->check(CLI::ExistingFile);
  extract->add_option("--idle-timeout", ex_idle, "Flow idle timeout, seconds")->capture_default_str();
  extract->add_option("--label", ex_label, "Value of the label column")->capture_default_str();

  // classify
  auto* classify = app.add_subcommand("classify", "Classify flows of a replayed pcap (NDJSON output)");
  std::string cl_model, cl_pcap, cl_schema, cl_out;
  double cl_idle = 60.0, cl_speed = 0.0;
  bool no_timing = false;
  classify->add_option("--model", cl_model, "Model file")->required()->check(CLI::ExistingFile);
  classify->add_option("--pcap", cl_pcap, "Input pcap")->required()->check(CLI::ExistingFile);
  classify->add_option("--schema", cl_schema, "Feature schema JSON")->check(CLI::ExistingFile);
  classify->add_option("--idle-timeout", cl_idle, "Flow idle timeout, seconds")->capture_default_str();
  classify->add_option("--speed", cl_speed, "Replay pacing: 0 = unpaced, 1 = real time")->capture_default_str();
  classify->add_flag("--no-timing", no_timing, "Omit per-stage timings (deterministic output)");
  classify->add_option("--out", cl_out, "Output NDJSON (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    Layered l;
    if (!config_path.empty()) l.config = load_json_file(config_path);
    if (pre->parsed()) return cmd_preprocess(l, pre_data, pre_out, pre_scaler);
    if (grid->parsed()) return cmd_gridsearch(l, grid_data, grid_budget, grid_so, family, family_flag);
    if (nas->parsed()) return cmd_nas(l, nas_data, nas_budget, nas_so, nas_flags);
    if (train->parsed()) return cmd_train(l, train_data, model_type, params, train_seed, train_val, train_out);
    if (eval->parsed()) return cmd_eval(l, eval_data, eval_model, folds, eval_seed);
    if (prof->parsed()) return cmd_profile(l, prof_budget, prof_model, prof_desc, input_len, n_classes);
    if (bench->parsed()) return cmd_bench(bench_model, bench_data, bench_label, runs, current, voltage, bench_seed);
    if (extract->parsed()) return cmd_extract(ex_pcap, ex_out, ex_schema, ex_idle, ex_label);
    if (classify->parsed()) return cmd_classify(cl_model, cl_pcap, cl_schema, cl_idle, cl_speed, no_timing, cl_out);
  } catch (const std::exception& e) {
    std::cerr << "hwids: error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kUsage;
}

}  // namespace hwids::cli
