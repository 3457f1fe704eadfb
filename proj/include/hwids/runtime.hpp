#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hwids/cnn.hpp"
#include "hwids/dataio.hpp"
#include "hwids/flowext.hpp"
#include "hwids/hwcost.hpp"
#include "hwids/trees.hpp"
#include "json.hpp"

namespace hwids::runtime {

enum class ModelKind : std::uint8_t { RandomForest = 0, GbdtLeafwise = 1, GbdtLevelwise = 2, Cnn = 3 };

std::string to_string(ModelKind k);

/// A deployable model: weights plus everything needed to turn raw feature
/// rows into class predictions.
struct ModelArtifact {
  ModelKind kind = ModelKind::RandomForest;
  /// Feature names are always set; mins/maxs may be empty (no scaling).
  dataio::ScalerParams scaler;
  std::vector<std::string> class_names;
  hwcost::Profile profile;
  /// Hyperparameters or architecture plus training settings, kept for
  /// re-training during cross-validation.
  nlohmann::json descriptor = nlohmann::json::object();
  std::variant<trees::Ensemble, cnn::Model> model;

  const std::vector<std::string>& feature_names() const { return scaler.feature_names; }
  std::size_t n_features() const { return scaler.feature_names.size(); }

  /// Scales `raw` and returns class probabilities.
  std::vector<double> predict_proba(std::span<const double> raw) const;
  int predict(std::span<const double> raw) const;
  /// Predictions for inputs that are already scaled.
  std::vector<double> predict_proba_scaled(std::span<const double> x) const;
};

ModelArtifact make_artifact(trees::Ensemble model, dataio::ScalerParams scaler, std::vector<std::string> class_names,
                            nlohmann::json descriptor = nlohmann::json::object());
ModelArtifact make_artifact(cnn::Model model, dataio::ScalerParams scaler, std::vector<std::string> class_names,
                            nlohmann::json descriptor = nlohmann::json::object());

// ---------------------------------------------------------------------------
// Binary format

inline constexpr char kMagic[4] = {'H', 'A', 'M', 'S'};
inline constexpr std::uint16_t kFormatVersion = 1;
/// magic(4) + version(2) + kind(1) + crc32(4) + payload length(4)
inline constexpr std::size_t kHeaderBytes = 15;

enum class FormatErrorKind { BadMagic, UnsupportedVersion, Truncated, ChecksumMismatch, Corrupt };

class ModelFormatError : public DataError {
 public:
  ModelFormatError(FormatErrorKind kind, const std::string& what) : DataError(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

std::vector<std::uint8_t> serialize(const ModelArtifact& a);
/// Validates magic, version, length, checksum and shapes, in that order.
ModelArtifact deserialize(std::span<const std::uint8_t> bytes);

void save_model(const ModelArtifact& a, const std::filesystem::path& path);
ModelArtifact load_model(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Benchmarking

struct LatencyStats {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t runs = 0;
};

inline constexpr std::size_t kMinBenchRuns = 30;
inline constexpr std::size_t kWarmupRuns = 5;

/// Times `predict` on single rows (batch size 1), cycling through `inputs`.
/// The first kWarmupRuns calls are not recorded. Throws ConfigError when
/// runs < kMinBenchRuns or there are no inputs.
LatencyStats benchmark_latency(const std::function<void(std::span<const double>)>& predict, const Matrix& inputs,
                               std::size_t runs);
/// Same, timing ModelArtifact::predict_proba (scaling included).
LatencyStats benchmark_latency(const ModelArtifact& a, const Matrix& inputs, std::size_t runs);

struct BenchResult {
  LatencyStats latency;
  double current_mA = 0.0;
  double voltage_V = 5.0;
  double power_mW = 0.0;
  double energy_mJ = 0.0;
};

/// power = I * V; energy = power * latency / 1000. Currents are measured
/// deltas above the idle baseline. Throws ConfigError on negative inputs.
BenchResult energy_report(double latency_ms, double current_mA, double voltage_V = 5.0);
BenchResult energy_report(const LatencyStats& latency, double current_mA, double voltage_V = 5.0);

void to_json(nlohmann::json& j, const BenchResult& b);

// ---------------------------------------------------------------------------
// Streaming classification

struct PredictionRecord {
  flowext::FlowKey key;
  std::uint64_t first_us = 0;
  std::uint64_t packets = 0;
  int class_id = 0;
  std::string class_name;
  double probability = 0.0;
  double extract_ms = 0.0;
  double infer_ms = 0.0;
  double total_ms = 0.0;
};

/// With `timings` false the record is deterministic (no stage timings).
nlohmann::json to_json(const PredictionRecord& r, bool timings = true);

/// Throws ConfigError listing missing and extra names when the model's
/// features are not exactly the schema's features. Returns, for each model
/// feature, its position in the schema.
std::vector<std::size_t> match_schema(const std::vector<std::string>& model_features,
                                      const std::vector<std::string>& schema);

struct StreamSummary {
  std::size_t flows = 0;
  flowext::ParseStats stats;
};

/// Aggregates packets into flows and classifies each flow as it is sealed,
/// and every remaining flow when the source is exhausted.
StreamSummary classify_stream(const ModelArtifact& a, flowext::PacketSource& source,
                              const flowext::FeatureSchema& schema,
                              const std::function<void(const PredictionRecord&)>& emit,
                              std::uint64_t idle_timeout_us = 60'000'000);

}  // namespace hwids::runtime
