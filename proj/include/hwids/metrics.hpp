#pragma once

#include <span>
#include <vector>

#include "hwids/common.hpp"
#include "json.hpp"

namespace hwids {

/// Classification quality summary shared by tree and CNN evaluation.
struct EvalReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Macro-F1 averages over classes that occur in either the truth or the
/// predictions; weighted-F1 weights each class by its true support.
EvalReport evaluate_predictions(std::span<const int> truth, std::span<const int> predicted, int n_classes);

void to_json(nlohmann::json& j, const EvalReport& r);

}  // namespace hwids
