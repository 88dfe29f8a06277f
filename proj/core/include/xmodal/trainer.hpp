#pragma once

#include "xmodal/embedding_store.hpp"
#include "xmodal/losses.hpp"
#include "xmodal/student.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xmodal {

/// Every knob of a transfer or pretraining run.
struct TrainConfig {
  // objective
  double temperature = 0.01;
  double lambda_ism = 10.0;
  bool csm_enabled = true;
  LossVariant loss_variant = LossVariant::CeEntMin;
  bool smoothing_enabled = true;
  double smoothing_alpha = 0.2;
  double smoothing_mix = 1.0;
  double ent_weight = 1.0;
  Reduction reduction = Reduction::Mean;

  // optimisation
  double lr0 = 0.5;
  double lr_min = 0.0;
  double weight_decay = 1e-6;
  double sgd_momentum = 0.0;
  double ema_momentum = 0.99;
  std::size_t batch_size = 256;
  std::size_t epochs = 200;
  /// First SGDR cycle length in epochs; 0 means "epochs" (one cycle).
  double restart_period = 0.0;
  double restart_mult = 2.0;
  std::uint64_t seed = 0;
  /// Feed the EMA shadow (instead of the live student) into the loss.
  bool shadow_in_loss = false;

  // student
  Architecture architecture = Architecture::Linear;
  std::size_t hidden_dim = 64;

  // self-supervised pretraining
  std::size_t pretrain_epochs = 0;
  double nce_temperature = 0.1;
  std::size_t proj_dim = kDefaultProjectionDim;
  double view_noise = 0.1;
  double view_dropout = 0.1;
  double pretrain_lr = 0.5;

  // evaluation
  double probe_c = 30.0;
  bool probe_c_search = false;

  /// Throws InvalidConfig naming the first offending key.
  void validate() const;

  LossConfig loss_config() const;

  /// Applies one key=value pair. Throws InvalidConfig on unknown keys or
  /// unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Stable, ordered key=value view of every field.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;

  static std::vector<std::string> keys();
};

/// Raw `key = value` lines in file order; '#' starts a comment and dashes in
/// keys become underscores.
std::vector<std::pair<std::string, std::string>> read_key_value_file(
    const std::filesystem::path& path);

/// read_key_value_file applied to `base`.
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = {});

/// Cosine annealing with warm restarts, evaluated at `epoch` (fractional
/// epochs allowed). Exactly lr0 at every restart boundary.
double sgdr_lr(double epoch, const TrainConfig& config);

struct CurveRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double csm_ce = 0.0;
  double ent_min = 0.0;
  double ism = 0.0;
  double total = 0.0;
  std::optional<double> zeroshot_acc;
};

struct TrainState {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  std::vector<CurveRow> history;
  /// Heavy-ball buffer; empty unless sgd_momentum > 0.
  Parameters velocity;
};

/// One SGD step on the live student, then one EMA step of the shadow.
/// Uses state.lr as the learning rate and advances state.step. Throws
/// NonFiniteLoss (with the step index) on a non-finite loss or parameter.
LossReport train_step(StudentModel& model, MomentumStudent& shadow, const Matrix& batch_inputs,
                      const Matrix& batch_teacher_unit, const Matrix& anchors_unit,
                      const TrainConfig& config, TrainState& state);

struct TransferOptions {
  /// Starting weights, e.g. from pretraining. Freshly initialised otherwise.
  std::optional<StudentModel> init;
  /// Anchors the CSM term is trained against; defaults to the bundle's.
  std::optional<AnchorSet> train_anchors;
  /// Bundle used for the per-epoch zero-shot column (its own anchors and
  /// labels); defaults to the training bundle.
  const DatasetBundle* eval_bundle = nullptr;
};

struct TransferResult {
  StudentModel model;
  MomentumStudent shadow;
  TrainState state;
  std::vector<CurveRow> curve;

  Checkpoint checkpoint() const;
};

/// The full transfer loop: shuffled mini-batches, SGDR, weight decay, EMA,
/// one curve row per epoch. Deterministic for a given (bundle, config).
TransferResult run_transfer(const DatasetBundle& bundle, const TrainConfig& config,
                            const TransferOptions& options = {});

struct PretrainResult {
  StudentModel model;
  ProjectionHead head;
  std::vector<double> epoch_loss;
};

/// SimCLR-style pretraining of the student on bundle.inputs only.
PretrainResult run_pretrain(const DatasetBundle& bundle, const TrainConfig& config);

/// Zero-shot accuracy of `model` on `bundle` against its own anchors, or
/// nullopt when the bundle has no labels.
std::optional<double> zero_shot_accuracy(const StudentModel& model, const DatasetBundle& bundle);

/// Writes the curve CSV; `echo` lines are prefixed with "# " above the header.
void write_curve_csv(const std::vector<CurveRow>& rows, const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::string>>& echo = {});
std::vector<CurveRow> read_curve_csv(const std::filesystem::path& path);

inline constexpr const char* kCurveHeader = "epoch,step,lr,csm_ce,ent_min,ism,total,zeroshot_acc";

}  // namespace xmodal
