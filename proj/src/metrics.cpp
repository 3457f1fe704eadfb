#include "hwids/metrics.hpp"

namespace hwids {

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

EvalReport evaluate_predictions(std::span<const int> truth, std::span<const int> predicted, int n_classes) {
  if (truth.size() != predicted.size()) throw ShapeError("truth/prediction length mismatch");
  const auto k = static_cast<std::size_t>(n_classes);
  EvalReport r;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(predicted[i]);
    if (t >= k || p >= k) throw DataError("class id outside [0, n_classes)");
    ++r.confusion[t][p];
    if (t == p) ++correct;
  }
  if (truth.empty()) return r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());

  double f1_sum = 0.0;
  double weighted = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = r.confusion[c][c], support = 0, predicted_c = 0;
    for (std::size_t j = 0; j < k; ++j) {
      support += r.confusion[c][j];
      predicted_c += r.confusion[j][c];
    }
    if (support == 0 && predicted_c == 0) continue;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(support + predicted_c);
    f1_sum += f1;
    weighted += f1 * static_cast<double>(support);
    ++counted;
  }
  r.macro_f1 = counted ? f1_sum / static_cast<double>(counted) : 0.0;
  r.weighted_f1 = weighted / static_cast<double>(truth.size());
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"accuracy", r.accuracy},
                     {"macro_f1", r.macro_f1},
                     {"weighted_f1", r.weighted_f1},
                     {"confusion", r.confusion}};
}

}  // namespace hwids
