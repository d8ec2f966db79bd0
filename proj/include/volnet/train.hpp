#ifndef VOLNET_TRAIN_HPP
#define VOLNET_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volnet/data.hpp"
#include "volnet/eval.hpp"
#include "volnet/network.hpp"

namespace volnet {

enum class PlateauMonitor { validation, test };

struct TrainConfig {
  Task task = Task::AD_NC;
  std::string preset = "proposed-4roi";
  int width = 8;    // f0 / g0
  int hidden = 64;  // baseline hidden dense width
  double keep_prob = 0.5;
  Index tau = 5;
  Index eta = 15;
  Index eta0 = 15;  // reference batch size for lr0
  double lr0 = 1e-3;
  int max_epochs = 40;
  double plateau_factor = 0.5;
  int patience = 5;
  double min_delta = 1e-4;
  double lr_min = 1e-6;
  double rho = 0.9;
  double epsilon = 1e-7;
  PlateauMonitor monitor = PlateauMonitor::validation;
  std::uint64_t seed = 7;
};

void validate(const TrainConfig& config);  // InvalidConfig
nlohmann::json config_to_json(const TrainConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& doc);
// Hex digest of every field that shapes a run except max_epochs, so a run may
// be resumed with a larger epoch budget.
std::string config_digest(const TrainConfig& config);

NetworkSpec network_for(const TrainConfig& config);

// Weights ~ U(-a, a), a = sqrt(6 / (fan_in + fan_out)); biases and beta 0,
// gamma 1, running statistics reset.
void xavier_init(Network<float>& net, std::uint64_t seed);

double scale_lr(double lr0, Index eta0, Index eta);

struct OptimizerState {
  std::vector<TensorF> mean_square;  // one per trainable tensor, in parameter order
};

OptimizerState make_optimizer_state(const Network<float>& net);

// s <- rho s + (1 - rho) g^2; theta <- theta - lr g / (sqrt(s) + epsilon).
// Every gradient is checked before anything is touched.
void rmsprop_step(const std::vector<ParameterRef<float>>& params, OptimizerState& state, double lr, double rho,
                  double epsilon);

class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double min_delta, double lr_min);

  // Feeds one epoch's monitored loss; returns the learning rate to use next.
  double step(double loss);

  double lr() const { return lr_; }
  nlohmann::json state() const;
  void load_state(const nlohmann::json& state);

 private:
  double lr_, factor_, min_delta_, lr_min_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;  // NaN when the validation set is empty
  double test_loss = 0.0, test_acc = 0.0;
  double lr = 0.0;  // rate used during the epoch
  Index iterations = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

std::string history_csv(const TrainHistory& history);
nlohmann::json history_to_json(const TrainHistory& history);
TrainHistory history_from_json(const nlohmann::json& doc);

// Everything needed to continue a run after `epoch` completed epochs.
struct TrainState {
  int epoch = 0;
  ParameterStore<float> params;
  OptimizerState optimizer;
  nlohmann::json scheduler;
  TrainHistory history;
  ParameterStore<float> best;
  int best_epoch = 0;  // 0: the initialization
  double best_loss = std::numeric_limits<double>::infinity();
};

struct Checkpoint {
  nlohmann::json meta;  // preset, task, epoch, config digest, architecture options
  TrainState state;
};

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also checks the checkpoint against `net` (preset, tensor names and shapes).
Checkpoint load_checkpoint(const std::filesystem::path& path, const Network<float>& net);  // FormatError
// Rebuilds the configuration recorded in a checkpoint.
TrainConfig checkpoint_config(const Checkpoint& checkpoint);

struct TrainResult {
  ParameterStore<float> best;
  int best_epoch = 0;
  TrainHistory history;
  TrainState final_state;
};

struct TrainHooks {
  std::function<void(const TrainState&, bool improved)> on_epoch;  // after each completed epoch
  std::function<void(const std::string&)> log;
};

TrainResult train_loop(const TrainConfig& config, const Manifest& manifest, const DatasetSplit& split,
                       const TrainHooks& hooks = {}, const TrainState* resume = nullptr);

}  // namespace volnet

#endif
