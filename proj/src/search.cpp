#include "hwids/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <mutex>
#include <numeric>

namespace hwids::search {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

const char* status_name(Status s) { return s == Status::Evaluated ? "evaluated" : "rejected_hardware"; }

}  // namespace

void to_json(nlohmann::json& j, const CandidateResult& r) {
  j = nlohmann::json::object();
  j["index"] = r.index;
  if (r.generation >= 0) j["generation"] = r.generation;
  std::visit([&j](const auto& d) { j["descriptor"] = d; }, r.descriptor);
  j["profile"] = r.profile;
  if (r.profile_partial) j["profile_partial"] = true;
  j["status"] = status_name(r.status);
  if (r.status == Status::Evaluated) j["val_accuracy"] = r.val_accuracy;
  j["wall_time_s"] = r.wall_time_s;
}

bool ranks_before(const CandidateResult& a, const CandidateResult& b) {
  if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
  if (a.profile.compute != b.profile.compute) return a.profile.compute < b.profile.compute;
  if (a.profile.flash_bytes != b.profile.flash_bytes) return a.profile.flash_bytes < b.profile.flash_bytes;
  if (a.generation != b.generation) return a.generation < b.generation;
  return a.index < b.index;
}

// ---------------------------------------------------------------------------
// Grid search

GridSpace GridSpace::defaults(trees::Family family) {
  GridSpace s;
  s.family = family;
  s.n_trees = {2, 10, 20, 50, 100, 150};
  s.max_depth = {5, 10, 15, 20, 25, 30};
  s.min_child_size = {5, 10, 20, 30, 40};
  s.colsample = {0.6, 0.8, 1.0};
  s.subsample = {0.7, 0.8, 1.0};
  if (family == trees::Family::GbdtLeafwise) s.num_leaves = {8, 16, 32, 64};
  return s;
}

std::size_t GridSpace::size() const {
  std::size_t n = n_trees.size() * max_depth.size() * min_child_size.size() * colsample.size() * subsample.size();
  if (family == trees::Family::GbdtLeafwise) n *= num_leaves.size();
  return n;
}

void to_json(nlohmann::json& j, const GridSpace& s) {
  j = nlohmann::json{{"family", trees::to_string(s.family)},
                     {"n_trees", s.n_trees},
                     {"max_depth", s.max_depth},
                     {"min_child_size", s.min_child_size},
                     {"colsample", s.colsample},
                     {"subsample", s.subsample}};
  if (s.family == trees::Family::GbdtLeafwise) j["num_leaves"] = s.num_leaves;
  if (s.family != trees::Family::RandomForest) j["learning_rate"] = s.learning_rate;
}

void apply_overrides(const nlohmann::json& j, GridSpace& s) {
  if (j.contains("n_trees")) j.at("n_trees").get_to(s.n_trees);
  if (j.contains("max_depth")) j.at("max_depth").get_to(s.max_depth);
  if (j.contains("min_child_size")) j.at("min_child_size").get_to(s.min_child_size);
  if (j.contains("colsample")) j.at("colsample").get_to(s.colsample);
  if (j.contains("subsample")) j.at("subsample").get_to(s.subsample);
  if (j.contains("num_leaves")) j.at("num_leaves").get_to(s.num_leaves);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(s.learning_rate);
}

std::vector<trees::HyperParams> enumerate_grid(const GridSpace& space) {
  const bool leafwise = space.family == trees::Family::GbdtLeafwise;
  const std::vector<int> leaves = leafwise ? space.num_leaves : std::vector<int>{trees::HyperParams{}.num_leaves};
  std::vector<trees::HyperParams> out;
  out.reserve(space.size());
  for (int nt : space.n_trees) {
    for (int md : space.max_depth) {
      for (int mc : space.min_child_size) {
        for (double cs : space.colsample) {
          for (double ss : space.subsample) {
            for (int nl : leaves) {
              trees::HyperParams hp;
              hp.family = space.family;
              hp.n_trees = nt;
              hp.max_depth = md;
              hp.min_child_size = mc;
              hp.colsample = cs;
              hp.subsample = ss;
              hp.num_leaves = nl;
              hp.learning_rate = space.learning_rate;
              out.push_back(hp);
            }
          }
        }
      }
    }
  }
  return out;
}

const CandidateResult& GridSearchOutcome::best() const {
  if (ranking.empty()) throw NoFeasibleCandidate("no feasible candidate");
  return results[ranking.front()];
}

std::vector<CandidateResult> GridSearchOutcome::ranked() const {
  std::vector<CandidateResult> out;
  for (auto i : ranking) out.push_back(results[i]);
  return out;
}

std::uint64_t grid_candidate_seed(std::uint64_t seed, std::size_t index) { return derive_seed(seed, {index}); }

double tree_accuracy(const trees::Ensemble& m, const dataio::Dataset& data) {
  if (data.rows() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    if (trees::predict_class(m, data.features.row(r)) == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.rows());
}

namespace {

// Incremental tree profile: the cost of a growing ensemble only increases, so
// a partial ensemble over budget can be rejected before training finishes.
class BudgetWatch {
 public:
  explicit BudgetWatch(const hwcost::Budget& b) : budget_(b) {}

  bool within(const trees::Ensemble& e) {
    for (; seen_ < e.trees.size(); ++seen_) {
      const auto& t = e.trees[seen_];
      const auto depth = static_cast<std::uint64_t>(t.depth());
      flash_ += t.nodes.size() * hwcost::kTreeNodeBytes + hwcost::kTreeHeaderBytes;
      ops_ += depth + 1;
      max_depth_ = std::max(max_depth_, depth);
    }
    hwcost::Profile p;
    p.flash_bytes = flash_;
    p.compute = ops_;
    p.ram_bytes = max_depth_ * hwcost::kTraversalFrameBytes +
                  static_cast<std::uint64_t>(e.n_classes + e.n_features) * hwcost::kScalarBytes +
                  hwcost::kTreeFixedStateBytes;
    return hwcost::check_budget(p, budget_).feasible;
  }

 private:
  hwcost::Budget budget_;
  std::size_t seen_ = 0;
  std::uint64_t flash_ = 0, ops_ = 0, max_depth_ = 0;
};

double overshoot(const hwcost::Profile& p, const hwcost::Budget& b) {
  auto axis = [](std::uint64_t v, std::uint64_t limit) {
    if (v <= limit) return 0.0;
    return static_cast<double>(v - limit) / static_cast<double>(std::max<std::uint64_t>(limit, 1));
  };
  return axis(p.flash_bytes, b.flash_max) + axis(p.ram_bytes, b.ram_max) + axis(p.compute, b.compute_max);
}

}  // namespace

GridSearchOutcome constrained_grid_search(const GridSpace& space, const hwcost::Budget& budget,
                                          const dataio::Dataset& train, const dataio::Dataset& val,
                                          std::uint64_t seed, const GridSearchOptions& options) {
  const auto grid = enumerate_grid(space);
  GridSearchOutcome out;
  out.results.resize(grid.size());
  std::mutex emit_mutex;

  parallel_for(grid.size(), options.workers, [&](std::size_t i) {
    const auto start = Clock::now();
    const auto& hp = grid[i];
    BudgetWatch watch(budget);
    trees::TrainControl control;
    if (options.early_reject) control.keep_going = [&watch](const trees::Ensemble& e) { return watch.within(e); };
    const trees::Ensemble model = trees::train(train, hp, grid_candidate_seed(seed, i), control);

    CandidateResult r;
    r.descriptor = hp;
    r.index = i;
    r.profile = hwcost::profile_tree_ensemble(model);
    r.profile_partial = model.truncated;
    if (hwcost::check_budget(r.profile, budget).feasible && !model.truncated) {
      r.status = Status::Evaluated;
      r.val_accuracy = tree_accuracy(model, val);
    } else {
      r.status = Status::RejectedHardware;
    }
    r.wall_time_s = seconds_since(start);
    out.results[i] = r;
    if (options.on_result) {
      std::lock_guard lock(emit_mutex);
      options.on_result(r);
    }
  });

  for (std::size_t i = 0; i < out.results.size(); ++i) {
    const auto& r = out.results[i];
    if (r.status == Status::Evaluated) {
      out.ranking.push_back(i);
    } else if (!out.best_infeasible ||
               overshoot(r.profile, budget) < overshoot(out.results[*out.best_infeasible].profile, budget)) {
      out.best_infeasible = i;
    }
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return ranks_before(out.results[a], out.results[b]); });
  return out;
}

// ---------------------------------------------------------------------------
// NAS

void NasConfig::validate() const {
  if (generations < 0 || children_per_generation < 1 || initial_population < 1 || attempt_cap < 1) {
    throw ConfigError("NAS counts must be positive");
  }
  if (max_blocks < 1 || max_blocks > cnn::Arch::kMaxBlocks) throw ConfigError("max_blocks must lie in [1, 6]");
  if (p_add < 0 || p_remove < 0 || p_modify < 0 || std::abs(p_add + p_remove + p_modify - 1.0) > 1e-9) {
    throw ConfigError("mutation probabilities must be non-negative and sum to 1");
  }
}

void to_json(nlohmann::json& j, const NasConfig& c) {
  j = nlohmann::json{{"generations", c.generations},
                     {"children_per_generation", c.children_per_generation},
                     {"initial_population", c.initial_population},
                     {"max_blocks", c.max_blocks},
                     {"p_add", c.p_add},
                     {"p_remove", c.p_remove},
                     {"p_modify", c.p_modify},
                     {"attempt_cap", c.attempt_cap},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NasConfig& c) {
  c.generations = j.value("generations", c.generations);
  c.children_per_generation = j.value("children_per_generation", c.children_per_generation);
  c.initial_population = j.value("initial_population", c.initial_population);
  c.max_blocks = j.value("max_blocks", c.max_blocks);
  c.p_add = j.value("p_add", c.p_add);
  c.p_remove = j.value("p_remove", c.p_remove);
  c.p_modify = j.value("p_modify", c.p_modify);
  c.attempt_cap = j.value("attempt_cap", c.attempt_cap);
  c.seed = j.value("seed", c.seed);
}

namespace {

constexpr int kResampleCap = 100;

int draw_int(Rng& rng, int lo, int hi) { return static_cast<int>(uniform_int(rng, lo, hi)); }

double draw_dropout(const CnnSpace& s, Rng& rng) {
  // Two-decimal grid over [dropout_min, dropout_max].
  const int steps = static_cast<int>(std::llround((s.dropout_max - s.dropout_min) * 100.0));
  return std::round((s.dropout_min + 0.01 * draw_int(rng, 0, steps)) * 100.0) / 100.0;
}

void draw_pool(const CnnSpace& s, Rng& rng, cnn::Block& b) {
  switch (draw_int(rng, 0, 2)) {
    case 0: b.pool = cnn::PoolKind::None; break;
    case 1: b.pool = cnn::PoolKind::Max; break;
    default: b.pool = cnn::PoolKind::Avg; break;
  }
  b.pool_size = b.pool == cnn::PoolKind::None ? 2 : draw_int(rng, s.pool_size_min, s.pool_size_max);
}

cnn::Block random_block(const CnnSpace& s, Rng& rng) {
  cnn::Block b;
  b.filters = draw_int(rng, s.filters_min, s.filters_max);
  b.kernel = draw_int(rng, s.kernel_min, s.kernel_max);
  b.stride = draw_int(rng, s.stride_min, s.stride_max);
  b.padding = draw_int(rng, 0, 1) == 0 ? cnn::Padding::Same : cnn::Padding::Valid;
  b.dropout = draw_dropout(s, rng);
  draw_pool(s, rng, b);
  return b;
}

bool valid_geometry(const cnn::Arch& a) {
  try {
    cnn::shape_trace(a);
    return true;
  } catch (const ConfigError&) {
    return false;
  }
}

// Resamples one attribute of `b` to a different value.
void modify_block(const CnnSpace& s, Rng& rng, cnn::Block& b) {
  const cnn::Block before = b;
  for (int tries = 0; tries < 64 && b == before; ++tries) {
    switch (draw_int(rng, 0, 5)) {
      case 0: b.filters = draw_int(rng, s.filters_min, s.filters_max); break;
      case 1: b.kernel = draw_int(rng, s.kernel_min, s.kernel_max); break;
      case 2: b.stride = draw_int(rng, s.stride_min, s.stride_max); break;
      case 3: b.padding = b.padding == cnn::Padding::Same ? cnn::Padding::Valid : cnn::Padding::Same; break;
      case 4: b.dropout = draw_dropout(s, rng); break;
      default: draw_pool(s, rng, b); break;
    }
  }
}

}  // namespace

cnn::Arch random_arch(const CnnSpace& space, int input_len, int n_classes, Rng& rng) {
  for (int attempt = 0; attempt <= kResampleCap; ++attempt) {
    cnn::Arch a;
    a.input_len = input_len;
    a.n_classes = n_classes;
    const int blocks = draw_int(rng, 1, std::min(space.initial_blocks_max, cnn::Arch::kMaxBlocks));
    for (int i = 0; i < blocks; ++i) a.blocks.push_back(random_block(space, rng));
    if (valid_geometry(a)) return a;
  }
  throw ConfigError("random_arch: no valid architecture after " + std::to_string(kResampleCap) +
                    " resamples (input length " + std::to_string(input_len) + ")");
}

Mutation mutate(const cnn::Arch& parent, const CnnSpace& space, const NasConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < kResampleCap; ++attempt) {
    Mutation m;
    m.arch = parent;
    const double u = uniform01(rng);
    m.kind = u < cfg.p_add ? MutationKind::Add : (u < cfg.p_add + cfg.p_remove ? MutationKind::Remove : MutationKind::Modify);
    const auto n = static_cast<int>(parent.blocks.size());
    if (m.kind == MutationKind::Add && n >= cfg.max_blocks) m.kind = MutationKind::Modify;
    if (m.kind == MutationKind::Remove && n <= 1) m.kind = MutationKind::Modify;

    switch (m.kind) {
      case MutationKind::Add: {
        const int pos = draw_int(rng, 0, n);
        m.arch.blocks.insert(m.arch.blocks.begin() + pos, random_block(space, rng));
        break;
      }
      case MutationKind::Remove: {
        const int pos = draw_int(rng, 0, n - 1);
        m.arch.blocks.erase(m.arch.blocks.begin() + pos);
        break;
      }
      case MutationKind::Modify: {
        const int pos = draw_int(rng, 0, n - 1);
        modify_block(space, rng, m.arch.blocks[static_cast<std::size_t>(pos)]);
        break;
      }
    }
    if (valid_geometry(m.arch)) return m;
  }
  return Mutation{parent, MutationKind::Modify, true};
}

CandidateTrainer make_cnn_trainer(const dataio::Dataset& train, const dataio::Dataset& val, cnn::TrainConfig cfg) {
  return [&train, &val, cfg](const cnn::Arch& arch, std::uint64_t seed) {
    cnn::TrainConfig local = cfg;
    local.seed = derive_seed(seed, {1});
    auto [model, history] = cnn::train(cnn::init_model(arch, seed), train, val, local);
    TrainedCandidate out;
    out.val_accuracy = cnn::evaluate(model, val.rows() ? val : train).accuracy;
    out.model = std::make_shared<const cnn::Model>(std::move(model));
    return out;
  };
}

NasOutcome evolve(const NasConfig& cfg, const CnnSpace& space, const hwcost::Budget& budget, int input_len,
                  int n_classes, const CandidateTrainer& trainer, const NasOptions& options) {
  cfg.validate();
  NasOutcome out;
  std::mutex emit_mutex;
  auto record = [&](CandidateResult r) {
    if (options.on_result) {
      std::lock_guard lock(emit_mutex);
      options.on_result(r);
    }
    out.history.push_back(std::move(r));
    return out.history.size() - 1;
  };

  // Profiles each proposal, records hardware rejections, trains the feasible
  // ones (possibly in parallel) and returns their history indices.
  auto run_generation = [&](int generation, const std::vector<std::pair<std::size_t, cnn::Arch>>& feasible) {
    std::vector<CandidateResult> trained(feasible.size());
    std::vector<std::shared_ptr<const cnn::Model>> models(feasible.size());
    parallel_for(feasible.size(), options.workers, [&](std::size_t i) {
      const auto start = Clock::now();
      const auto& [index, arch] = feasible[i];
      auto result = trainer(arch, derive_seed(cfg.seed, {static_cast<std::uint64_t>(generation), index, 0xC0FFEE}));
      CandidateResult& r = trained[i];
      r.descriptor = arch;
      r.profile = hwcost::profile_cnn(arch);
      r.status = Status::Evaluated;
      r.val_accuracy = result.val_accuracy;
      r.generation = generation;
      r.index = index;
      r.wall_time_s = seconds_since(start);
      models[i] = std::move(result.model);
    });
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < trained.size(); ++i) {
      ids.push_back(record(trained[i]));
      if (!out.best || ranks_before(out.history.back(), out.history[*out.best])) {
        out.best = out.history.size() - 1;
        out.best_model = models[i];
      }
    }
    return ids;
  };

  auto propose = [&](int generation, std::size_t index, const cnn::Arch& arch,
                     std::vector<std::pair<std::size_t, cnn::Arch>>& feasible) {
    const auto profile = hwcost::profile_cnn(arch);
    if (hwcost::check_budget(profile, budget).feasible) {
      feasible.emplace_back(index, arch);
      return true;
    }
    CandidateResult r;
    r.descriptor = arch;
    r.profile = profile;
    r.status = Status::RejectedHardware;
    r.generation = generation;
    r.index = index;
    record(r);
    return false;
  };

  // Generation 0: random initial population.
  std::vector<std::pair<std::size_t, cnn::Arch>> feasible;
  for (int i = 0; i < cfg.initial_population; ++i) {
    Rng rng(derive_seed(cfg.seed, {0, static_cast<std::uint64_t>(i)}));
    propose(0, static_cast<std::size_t>(i), random_arch(space, input_len, n_classes, rng), feasible);
  }
  if (feasible.empty()) {
    out.diagnostic = "no hardware-feasible architecture in the initial population of " +
                     std::to_string(cfg.initial_population);
    return out;
  }
  auto ids = run_generation(0, feasible);
  std::size_t parent = ids.front();
  for (auto id : ids) {
    if (ranks_before(out.history[id], out.history[parent])) parent = id;
  }
  out.best_so_far.push_back(out.history[*out.best].val_accuracy);
  out.success = true;

  for (int g = 1; g <= cfg.generations; ++g) {
    feasible.clear();
    // Copied: recording rejections grows history.
    const auto parent_arch = std::get<cnn::Arch>(out.history[parent].descriptor);
    int attempts = 0;
    while (static_cast<int>(feasible.size()) < cfg.children_per_generation && attempts < cfg.attempt_cap) {
      Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(attempts)}));
      const auto child = mutate(parent_arch, space, cfg, rng);
      const auto index = static_cast<std::size_t>(attempts++);
      if (child.unchanged) continue;
      propose(g, index, child.arch, feasible);
    }
    if (feasible.empty()) {
      out.diagnostic = "generation " + std::to_string(g) + ": no hardware-valid child within " +
                       std::to_string(cfg.attempt_cap) + " attempts; search stopped early";
      break;
    }
    if (static_cast<int>(feasible.size()) < cfg.children_per_generation) {
      out.diagnostic = "generation " + std::to_string(g) + ": attempt cap reached with " +
                       std::to_string(feasible.size()) + " valid children";
    }
    ids = run_generation(g, feasible);
    std::size_t best_child = ids.front();
    for (auto id : ids) {
      if (ranks_before(out.history[id], out.history[best_child])) best_child = id;
    }
    // The parent is replaced only by a strictly more accurate child.
    if (out.history[best_child].val_accuracy > out.history[parent].val_accuracy) parent = best_child;
    out.best_so_far.push_back(out.history[*out.best].val_accuracy);
    out.generations_completed = g;
    if (verbose()) {
      std::cerr << "[nas] generation " << g << " best " << out.history[*out.best].val_accuracy << '\n';
    }
  }
  return out;
}

}  // namespace hwids::search
