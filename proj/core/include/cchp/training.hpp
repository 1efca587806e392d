// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Variational objective, context sampling, teacher-forcing curriculum
 *         and the minibatch optimizer loop.
 */
#pragma once

#include "cchp/gesture_domain.hpp"
#include "cchp/model.hpp"
#include "cchp/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cchp {

// ---- closed-form densities ------------------------------------------------

/// KL(q || p) between diagonal Gaussians, summed over dimensions.
double gaussian_kl(const GaussianLatent& q, const GaussianLatent& p);

/// Negative log density of y under N(mean, diag(var)).
double gaussian_nll(const OperationFrame& y, const Vector& mean, const Vector& var);

// ---- configuration --------------------------------------------------------

struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 32;
  int epochs = 738;
  /// Overrides epochs * steps_per_epoch when set.
  std::optional<long> max_steps;
  double input_variance = 1e-6;

  double tf_initial = 0.9;
  long tf_hold_steps = 600;
  /// Step at which the linear decay reaches zero, as a fraction of total steps.
  double tf_decay_end = 0.5;
  /// Constant p_TF instead of the curriculum.
  std::optional<double> tf_fixed;

  double p_dims_plus = 0.5;
  double p_user_plus = 0.5;
  int slice_min = 5;         // T_min
  double slice_limit = 0.5;  // p_cxt
  int context_clips = 3;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;

  std::uint64_t seed = 1;
  long log_every = 1;
  long checkpoint_every = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class Variant { Main, FixedTf, CtxProbs, DummyLstm, NoTemporal };

/// One member of the ablation grid. Tags: CCHP_main, CCHP_fixed_TF(p),
/// CCHP_ctx_probs(pD,pU), DummyLSTM, NoTemporalAblation.
struct BaselineSpec {
  Variant variant = Variant::Main;
  double p_tf = 0.9;
  double p_dims_plus = 0.5;
  double p_user_plus = 0.5;

  std::string tag() const;
  static BaselineSpec parse(std::string_view tag);
  static std::string supported();

  void apply(TrainConfig& train, ModelConfig& model) const;
};

struct ScheduleState {
  long step = 0;
  double p_tf = 0.9;
};

// ---- sampling -------------------------------------------------------------

/// Total optimizer steps implied by cfg for `n_train` clips (drop-last).
long steps_per_epoch(const TrainConfig& cfg, std::size_t n_train);
long total_steps(const TrainConfig& cfg, std::size_t n_train);

double tf_schedule(long step, const TrainConfig& cfg, long total);

std::vector<bool> teacher_mask(double p_tf, std::size_t length, Rng& rng);

DynamicGesture perturb_input(const DynamicGesture& x, double variance, Rng& rng);

/// Returns a strict slice (x, y)[t0 : t0 + K] of the clip with K >= slice_min and
/// t0 + K <= floor(slice_limit * |x|).
Clip slice_clip(const Clip& clip, const TrainConfig& cfg, Rng& rng);

struct ContextDraw {
  std::vector<Clip> clips;
  bool same_user = false;
  bool same_dims = false;
  bool sliced = false;
};

/// One policy clip (user/dimension relation drawn with p_U+ / p_D+) followed by
/// cfg.context_clips - 1 random clips. The target never appears unsliced.
ContextDraw sample_context(std::span<const Clip> pool, const Clip& target, const TrainConfig& cfg,
                           Rng& rng);

// ---- objective ------------------------------------------------------------

struct StepMetrics {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double mse = 0.0;  // per frame and dimension
};

/// Builds the batched ELBO on `tape`: z ~ q(z | context, target), teacher mask at
/// rate p_tf, loss = sum_t NLL + KL (averaged over the batch).
BatchForward elbo_loss(const CchpModel& model, ad::Tape& tape, std::span<const Episode> batch,
                       double p_tf, Rng& rng);

StepMetrics summarize(const BatchForward& forward);

// ---- optimizer ------------------------------------------------------------

class Adam {
 public:
  Adam(const ParameterStore& params, double lr, double beta1, double beta2, double epsilon);
  /// Applies one update from the accumulated gradients.
  void step(ParameterStore& params);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, epsilon_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Rescales all gradients so their global norm is at most max_norm; returns the
/// norm before clipping.
double clip_gradients(const ParameterStore& params, double max_norm);

// ---- training loop --------------------------------------------------------

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(long step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

struct TrainRecord {
  long step = 0;
  long epoch = 0;
  StepMetrics metrics;
  double p_tf = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHooks {
  /// Append-only JSONL metrics log; empty disables.
  std::filesystem::path metrics_log;
  /// Directory for periodic checkpoints (step_XXXXXX); empty disables.
  std::filesystem::path checkpoint_dir;
  std::function<void(const TrainRecord&)> on_step;
};

struct TrainResult {
  CchpModel model;
  std::vector<TrainRecord> history;
  ScheduleState schedule;
};

TrainResult train(const TrainConfig& cfg, const BaselineSpec& spec, const ModelConfig& model_cfg,
                  const Dataset& data, const TrainHooks& hooks = {});

}  // namespace cchp
