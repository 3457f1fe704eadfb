#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hwids/cnn.hpp"
#include "hwids/dataio.hpp"
#include "hwids/hwcost.hpp"
#include "hwids/trees.hpp"
#include "json.hpp"

namespace hwids::search {

// ---------------------------------------------------------------------------
// Candidate bookkeeping shared by both searches.

enum class Status { Evaluated, RejectedHardware };

struct CandidateResult {
  std::variant<trees::HyperParams, cnn::Arch> descriptor;
  hwcost::Profile profile;
  /// Tree training stopped as soon as the partial ensemble broke the budget;
  /// `profile` is then a lower bound of the full model's cost.
  bool profile_partial = false;
  Status status = Status::Evaluated;
  double val_accuracy = 0.0;
  double wall_time_s = 0.0;
  int generation = -1;  // NAS only
  std::size_t index = 0;
};

void to_json(nlohmann::json& j, const CandidateResult& r);

/// Accuracy desc, then compute, flash, index asc.
bool ranks_before(const CandidateResult& a, const CandidateResult& b);

class NoFeasibleCandidate : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Tree grid search.

struct GridSpace {
  trees::Family family = trees::Family::RandomForest;
  std::vector<int> n_trees;
  std::vector<int> max_depth;
  std::vector<int> min_child_size;
  std::vector<double> colsample;
  std::vector<double> subsample;
  std::vector<int> num_leaves;  // leaf-wise boosting only
  double learning_rate = 0.1;

  /// The unified tree search space.
  static GridSpace defaults(trees::Family family);
  std::size_t size() const;
};

void to_json(nlohmann::json& j, const GridSpace& s);
/// Overrides the lists present in `j`, keeping the others.
void apply_overrides(const nlohmann::json& j, GridSpace& s);

/// Full Cartesian product in lexicographic order (last parameter fastest).
std::vector<trees::HyperParams> enumerate_grid(const GridSpace& space);

struct GridSearchOptions {
  std::size_t workers = 1;
  /// Abort a candidate's training once its partial ensemble exceeds the budget.
  bool early_reject = true;
  /// Called once per finished candidate, serialized, in completion order.
  std::function<void(const CandidateResult&)> on_result;
};

struct GridSearchOutcome {
  std::vector<CandidateResult> results;  // enumeration order
  std::vector<std::size_t> ranking;      // feasible results, best first
  /// Closest-to-feasible candidate when nothing fits.
  std::optional<std::size_t> best_infeasible;

  bool feasible() const { return !ranking.empty(); }
  const CandidateResult& best() const;
  std::vector<CandidateResult> ranked() const;
};

/// Per-candidate training seed used by the grid search.
std::uint64_t grid_candidate_seed(std::uint64_t seed, std::size_t index);

GridSearchOutcome constrained_grid_search(const GridSpace& space, const hwcost::Budget& budget,
                                          const dataio::Dataset& train, const dataio::Dataset& val,
                                          std::uint64_t seed, const GridSearchOptions& options = {});

double tree_accuracy(const trees::Ensemble& m, const dataio::Dataset& data);

// ---------------------------------------------------------------------------
// Evolutionary hardware-aware NAS over block-wise 1D CNNs.

struct CnnSpace {
  int filters_min = 16, filters_max = 256;
  int kernel_min = 2, kernel_max = 10;
  int stride_min = 1, stride_max = 10;
  double dropout_min = 0.1, dropout_max = 0.5;
  int pool_size_min = 2, pool_size_max = 3;
  int initial_blocks_max = 3;
};

struct NasConfig {
  int generations = 100;
  int children_per_generation = 15;
  int initial_population = 10;
  int max_blocks = 6;
  double p_add = 0.25;
  double p_remove = 0.25;
  double p_modify = 0.5;
  int attempt_cap = 200;
  std::uint64_t seed = 7;

  void validate() const;
};

void to_json(nlohmann::json& j, const NasConfig& c);
void from_json(const nlohmann::json& j, NasConfig& c);

/// 1..initial_blocks_max random blocks; resampled until the geometry is valid.
cnn::Arch random_arch(const CnnSpace& space, int input_len, int n_classes, Rng& rng);

enum class MutationKind { Add, Remove, Modify };

struct Mutation {
  cnn::Arch arch;
  MutationKind kind = MutationKind::Modify;
  /// No valid mutation found within 100 draws; `arch` is the parent.
  bool unchanged = false;
};

/// Applies one add/remove/modify mutation. A draw that is illegal for the
/// parent (remove from one block, add at max_blocks) becomes a modify.
Mutation mutate(const cnn::Arch& parent, const CnnSpace& space, const NasConfig& cfg, Rng& rng);

struct TrainedCandidate {
  double val_accuracy = 0.0;
  std::shared_ptr<const cnn::Model> model;
};

using CandidateTrainer = std::function<TrainedCandidate(const cnn::Arch&, std::uint64_t seed)>;

/// Trains from init_model(arch, seed) with `cfg` (seed overridden) and scores on `val`.
CandidateTrainer make_cnn_trainer(const dataio::Dataset& train, const dataio::Dataset& val, cnn::TrainConfig cfg);

struct NasOptions {
  std::size_t workers = 1;
  std::function<void(const CandidateResult&)> on_result;
};

struct NasOutcome {
  bool success = false;
  std::string diagnostic;
  std::vector<CandidateResult> history;
  std::optional<std::size_t> best;  // index into history
  std::shared_ptr<const cnn::Model> best_model;
  /// Best validation accuracy seen up to and including each generation.
  std::vector<double> best_so_far;
  int generations_completed = 0;
};

NasOutcome evolve(const NasConfig& cfg, const CnnSpace& space, const hwcost::Budget& budget, int input_len,
                  int n_classes, const CandidateTrainer& trainer, const NasOptions& options = {});

}  // namespace hwids::search
