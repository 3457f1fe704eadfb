#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hwids/dataio.hpp"
#include "hwids/metrics.hpp"
#include "json.hpp"

namespace hwids::cnn {

enum class Padding : std::uint8_t { Same = 0, Valid = 1 };
enum class PoolKind : std::uint8_t { None = 0, Max = 1, Avg = 2 };

/// conv -> batch-norm -> ReLU -> optional pooling -> dropout
struct Block {
  int filters = 16;
  int kernel = 3;
  int stride = 1;
  Padding padding = Padding::Same;
  double dropout = 0.1;
  PoolKind pool = PoolKind::None;
  int pool_size = 2;

  bool operator==(const Block&) const = default;
};

/// Blocks applied to a (length = input_len, channels = 1) sequence, followed
/// by flatten -> dense -> softmax.
struct Arch {
  std::vector<Block> blocks;
  int input_len = 0;
  int n_classes = 0;

  static constexpr int kMaxBlocks = 6;

  bool operator==(const Arch&) const = default;
};

void to_json(nlohmann::json& j, const Block& b);
void from_json(const nlohmann::json& j, Block& b);
void to_json(nlohmann::json& j, const Arch& a);
void from_json(const nlohmann::json& j, Arch& a);

struct LayerShape {
  std::string kind;  // "input", "conv", "pool", "dense"
  int block = -1;
  int length = 0;
  int channels = 0;
};

/// Output shape of every shape-changing layer. Throws ConfigError naming the
/// offending block when a length drops below 1, or when the block count is
/// outside [1, kMaxBlocks].
std::vector<LayerShape> shape_trace(const Arch& arch);

template <typename T>
struct Parameters {
  struct BlockParams {
    std::vector<T> weight;  // [filters][in_channels][kernel]
    std::vector<T> bias;
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;

    bool operator==(const BlockParams&) const = default;
  };
  std::vector<BlockParams> blocks;
  std::vector<T> dense_weight;  // [n_classes][flat_features]
  std::vector<T> dense_bias;

  bool operator==(const Parameters&) const = default;
};

struct Model {
  Arch arch;
  Parameters<float> params;

  /// Every stored scalar, batch-norm running statistics included.
  std::size_t parameter_count() const;
  /// All parameters in storage order (per block: weight, bias, gamma, beta,
  /// running mean, running var; then dense weight, dense bias).
  std::vector<float> flatten() const;
  void unflatten(std::span<const float> flat);

  bool operator==(const Model&) const = default;
};

/// He-uniform conv/dense weights, zero biases, BN scale 1 / shift 0, running stats (0, 1).
Model init_model(const Arch& arch, std::uint64_t seed);

enum class Mode { Train, Infer };

/// Class probabilities for each row of `batch` (width = input_len). Train mode
/// normalizes with batch statistics and applies dropout drawn from `dropout_seed`.
Matrix forward(const Model& model, const Matrix& batch, Mode mode, std::uint64_t dropout_seed = 0);
std::vector<double> predict_proba(const Model& model, std::span<const double> x);

struct TrainConfig {
  int max_epochs = 100;
  double initial_lr = 0.008;
  int batch_size = 2048;
  double plateau_decay_factor = 0.5;
  int plateau_patience = 5;
  double min_lr = 1e-5;
  int early_stop_patience = 10;
  double min_improvement = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double bn_momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Validation-loss tracker driving learning-rate decay and early stopping.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainConfig& cfg);

  struct Step {
    bool improved = false;
    bool lr_reduced = false;
    bool stop = false;
  };

  /// Feeds one epoch's validation loss (epochs are numbered from 1).
  Step observe(double val_loss);

  double lr() const { return lr_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  TrainConfig cfg_;
  double lr_;
  double best_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int plateau_wait_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Mini-batch Adam with plateau decay and early stopping on validation loss;
/// returns the weights of the best validation epoch. An empty `val` set makes
/// the training loss the monitored quantity.
std::pair<Model, History> train(Model model, const dataio::Dataset& train, const dataio::Dataset& val,
                                const TrainConfig& cfg);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Parameters skipped because a perturbation flipped a ReLU or a max-pool
  /// choice, where finite differences are not meaningful.
  std::size_t skipped_kinks = 0;
};

/// Compares back-propagated gradients with central finite differences in
/// 64-bit precision, on a random batch of `rows` (<= 8) rows, dropout off.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6). An arch with no blocks
/// (dense head only) is accepted here.
GradCheckResult gradient_check(const Arch& arch, std::uint64_t seed, double eps, int rows = 8);

EvalReport evaluate(const Model& model, const dataio::Dataset& data);

}  // namespace hwids::cnn
