#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hwids/common.hpp"
#include "json.hpp"

namespace hwids::dataio {

/// Tabular dataset: one row per flow, one column per feature. Missing cells
/// are stored as NaN and missing labels as -1 until `clean` removes them.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;

  std::size_t rows() const { return features.rows; }
  std::size_t dim() const { return features.cols; }
  int n_classes() const { return static_cast<int>(class_names.size()); }

  /// Rows in the given order (indices may repeat).
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Per-class row counts, indexed by class id.
  std::vector<std::size_t> class_counts() const;

  bool operator==(const Dataset&) const = default;
};

/// Per-column min/max recorded by `minmax_scale` and reused at inference.
struct ScalerParams {
  std::vector<std::string> feature_names;
  std::vector<double> mins;
  std::vector<double> maxs;

  /// Scales one raw row into `out`, clamping to [0, 1]. Constant columns map to 0.
  void apply(std::span<const double> raw, std::span<double> out) const;
  std::vector<double> apply(std::span<const double> raw) const;

  bool operator==(const ScalerParams&) const = default;
};

void to_json(nlohmann::json& j, const ScalerParams& s);
void from_json(const nlohmann::json& j, ScalerParams& s);
void save_scaler(const ScalerParams& s, const std::filesystem::path& path);
ScalerParams load_scaler(const std::filesystem::path& path);

/// Fold index per row.
struct FoldPlan {
  int k = 0;
  std::vector<int> assignments;

  /// Row indices in fold `f` (ascending) and in all other folds (ascending).
  std::vector<std::size_t> test_rows(int f) const;
  std::vector<std::size_t> train_rows(int f) const;
};

struct LoadOptions {
  /// When set, labels are mapped onto this class list; unknown labels are a
  /// DataError. Otherwise classes are discovered and sorted (numerically if
  /// every label is an integer).
  std::optional<std::vector<std::string>> class_names;
};

/// Parses a header-first comma-separated file. Empty, "NaN" and "nan" cells
/// are loaded as missing.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column, const LoadOptions& options = {});
Dataset parse_csv(std::istream& in, const std::string& label_column, const LoadOptions& options = {});

/// Writes features plus a label column (class names) in the same CSV dialect.
void write_csv(const Dataset& d, const std::filesystem::path& path, const std::string& label_column = "label");

/// Drops rows with missing values and exact duplicates of earlier rows.
Dataset clean(const Dataset& d);

std::pair<Dataset, ScalerParams> minmax_scale(const Dataset& d);
Dataset apply_scaler(const Dataset& d, const ScalerParams& s);

/// Per-class holdout split with largest-remainder allocation of the
/// validation quota. Returned rows keep their original relative order.
std::pair<Dataset, Dataset> stratified_split(const Dataset& d, double holdout_frac, std::uint64_t seed);

/// Index-level variant of `stratified_split`: (train rows, val rows).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split_indices(const Dataset& d,
                                                                                       double holdout_frac,
                                                                                       std::uint64_t seed);

FoldPlan stratified_kfold(const Dataset& d, int k, std::uint64_t seed);

Matrix one_hot(std::span<const int> labels, int n_classes);

/// Maps class names through `mapping` (old name -> new name). Every class
/// present in the data must be mapped. New classes are sorted like load_csv.
Dataset remap_classes(const Dataset& d, const std::map<std::string, std::string>& mapping);

/// Built-in 15 -> 6 and 15 -> 2 mappings over the Edge-IIoTset attack labels.
std::map<std::string, std::string> default_class_mapping(int target_classes);

/// Sorts label strings: numerically when all parse as integers, otherwise lexicographically.
std::vector<std::string> sort_class_names(std::vector<std::string> names);

}  // namespace hwids::dataio
