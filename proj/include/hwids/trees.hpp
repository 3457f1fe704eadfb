#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hwids/dataio.hpp"
#include "json.hpp"

namespace hwids::trees {

enum class Family : std::uint8_t { RandomForest = 0, GbdtLeafwise = 1, GbdtLevelwise = 2 };

std::string to_string(Family f);
Family family_from_string(const std::string& s);

/// Unified tree hyperparameters. `num_leaves` only affects GbdtLeafwise.
struct HyperParams {
  Family family = Family::RandomForest;
  int n_trees = 10;
  int max_depth = 5;
  int min_child_size = 5;
  double colsample = 1.0;
  double subsample = 1.0;
  int num_leaves = 31;
  // Boosting only.
  double learning_rate = 0.1;
  double l2_reg = 1.0;

  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

void to_json(nlohmann::json& j, const HyperParams& hp);
void from_json(const nlohmann::json& j, HyperParams& hp);

/// One decision node. Inputs with x[feature] <= threshold go left.
/// Leaves carry a class id (forest) or a shrunken score (boosting) in `value`.
struct Node {
  std::int32_t feature = -1;
  float threshold = 0.0f;
  std::int32_t left = -1;
  std::int32_t right = -1;
  float value = 0.0f;
  bool is_leaf = true;
  /// Training rows (with bootstrap multiplicity) that reached this node.
  /// Not part of the persisted model.
  double support = 0.0;

  bool operator==(const Node& o) const {
    return feature == o.feature && threshold == o.threshold && left == o.left && right == o.right &&
           value == o.value && is_leaf == o.is_leaf;
  }
};

struct Tree {
  std::vector<Node> nodes;  // root at index 0
  /// Boosting: class whose score this tree contributes to. Forest: -1.
  int class_tag = -1;

  /// Edges on the longest root-to-leaf path (a lone leaf has depth 0).
  int depth() const;
  int leaf_count() const;
  /// Leaf reached by x, plus the number of comparisons made on the way.
  std::pair<const Node*, int> route(std::span<const double> x) const;

  bool operator==(const Tree&) const = default;
};

struct Ensemble {
  Family family = Family::RandomForest;
  int n_classes = 0;
  int n_features = 0;
  std::vector<Tree> trees;
  /// Set when training stopped early because `TrainControl::keep_going` said so.
  bool truncated = false;

  int max_depth() const;
  std::size_t node_count() const;

  bool operator==(const Ensemble& o) const {
    return family == o.family && n_classes == o.n_classes && n_features == o.n_features && trees == o.trees;
  }
};

/// Optional hook consulted after every finished tree; returning false stops
/// training and marks the ensemble truncated.
struct TrainControl {
  std::function<bool(const Ensemble&)> keep_going;
};

Ensemble train_random_forest(const dataio::Dataset& train, const HyperParams& hp, std::uint64_t seed,
                             const TrainControl& control = {});
Ensemble train_gbdt(const dataio::Dataset& train, const HyperParams& hp, std::uint64_t seed,
                    const TrainControl& control = {});
/// Dispatches on hp.family.
Ensemble train(const dataio::Dataset& train, const HyperParams& hp, std::uint64_t seed,
               const TrainControl& control = {});

/// Class probabilities: vote shares for forests, softmax of summed scores for boosting.
std::vector<double> predict_ensemble(const Ensemble& m, std::span<const double> x);
int predict_class(const Ensemble& m, std::span<const double> x);

/// Number of internal-node comparisons executed to classify x.
long long count_comparisons(const Ensemble& m, std::span<const double> x);

/// Mean multiclass log-loss of a boosted ensemble truncated to its first
/// `rounds` boosting rounds.
double gbdt_log_loss(const Ensemble& m, const dataio::Dataset& data, int rounds);

}  // namespace hwids::trees
