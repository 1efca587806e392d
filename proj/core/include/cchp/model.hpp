// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Recurrent latent-variable policy from gestures to operations.
 *
 * Encoder: per frame, a finger MLP embeds each of the six segments, a hand
 * MLP fuses them with the previous hidden state, and an LSTM consumes the
 * hand feature together with the previous operation. Frame features
 * f_a(h, y) are mean-aggregated over every context frame and mapped to a
 * diagonal Gaussian over z.
 *
 * Decoder: the same cell architecture (own parameters by default) tracks the
 * target stream; its hidden state queries the context hidden states through
 * a shared key/query projection, and six independent heads map
 * (attention read-out, hidden state, z) to a Gaussian per motion dimension.
 *
 * Two entry points exist: single-stream functions used for streaming
 * inference and oracle tests, and forward_batch() used by training and
 * evaluation. Both share the same layer code.
 */
#pragma once

#include "cchp/autodiff.hpp"
#include "cchp/gesture_domain.hpp"
#include "cchp/parameters.hpp"
#include "cchp/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cchp {

enum class Architecture {
  Cchp,        // full model
  NoTemporal,  // previous-operation inputs replaced by zeros
  DummyLstm,   // context-free hand features + two stacked LSTMs, NLL only
};

std::string_view architecture_name(Architecture a);
Architecture parse_architecture(std::string_view name);

struct ModelConfig {
  int gesture_dim = 36;
  int op_dim = 6;
  int latent_dim = 32;
  int hidden = 128;
  int n_segments = 6;
  std::vector<int> finger_layers{32, 32};          // from the 6 segment features
  std::vector<int> hand_layers{128, 64, 32};       // from n_segments * finger + hidden
  std::vector<int> agg_layers{128, 128, 128, 128};  // from hidden + op_dim
  std::vector<int> phi_trunk{128, 128, 128, 128};   // from hidden; two linear heads follow
  int kq_dim = 32;
  std::vector<int> head_layers{128, 64};  // per motion dimension, then 2 outputs
  bool share_cell = false;
  double variance_floor = 1e-6;
  Architecture architecture = Architecture::Cchp;

  int segment_dim() const { return gesture_dim / n_segments; }
  int finger_dim() const { return finger_layers.back(); }
  int hand_input() const { return n_segments * finger_dim() + hidden; }
  int cell_input() const { return hand_layers.back() + op_dim; }
  int head_input() const {
    return architecture == Architecture::DummyLstm ? hidden : op_dim + hidden + latent_dim;
  }

  static ModelConfig full();
  /// Hidden widths scaled to `hidden`; used for desk-scale experiments.
  static ModelConfig reduced(int hidden);
  /// Very small network for finite-difference checks.
  static ModelConfig tiny(int hidden = 8, int latent = 4);

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct GaussianLatent {
  Vector mean;
  Vector var;
};

struct RecurrentState {
  Vector h;
  Vector c;
};

/// Everything the decoder needs from the user's context clips.
struct ContextEncoding {
  Matrix h;                          // N_C x H context hidden states
  Matrix y;                          // N_C x D_y context operations
  Matrix keys;                       // N_C x kq, f_kq(h)
  GaussianLatent latent;             // approximate prior q(z | context)
  Vector summary;                    // aggregated s_C
  std::vector<std::size_t> offsets;  // first frame of each clip; offsets.size() == #clips
  std::size_t frames() const { return static_cast<std::size_t>(h.rows()); }
};

struct AttentionResult {
  Vector weights;  // N_C
  Vector readout;  // D_y
};

struct StepPrediction {
  Vector mean;
  Vector var;
  Vector readout;
  Vector attention;
  RecurrentState state;
};

struct TeacherSignal {
  const HandlingOperation* truth = nullptr;
  /// mask[t] = true feeds truth[t] into step t + 1; otherwise the predicted mean.
  std::vector<bool> mask;
};

/// Stable names of the learnable layers; indices point into the store.
struct LinearRef {
  std::size_t w = 0, b = 0;
};
struct MlpRef {
  std::vector<LinearRef> layers;
};
struct CellRef {
  MlpRef finger, hand;
  LinearRef lstm;
};

class CchpModel {
 public:
  CchpModel(ModelConfig config, std::uint64_t init_seed);
  /// Adopts existing parameters; names and shapes must match the config.
  CchpModel(ModelConfig config, ParameterStore params);

  const ModelConfig& config() const { return config_; }
  const ParameterStore& parameters() const { return params_; }
  ParameterStore& parameters() { return params_; }

  // Layer handles (used by the forward implementations).
  const CellRef& encoder_cell() const { return enc_cell_; }
  const CellRef& decoder_cell() const { return config_.share_cell ? enc_cell_ : dec_cell_; }
  const CellRef& second_cell() const { return dummy_cell2_; }
  const MlpRef& aggregation() const { return agg_; }
  const MlpRef& phi_trunk() const { return phi_trunk_; }
  const LinearRef& phi_mean() const { return phi_mean_; }
  const LinearRef& phi_var() const { return phi_var_; }
  const LinearRef& key_query() const { return kq_; }
  const std::vector<MlpRef>& heads() const { return heads_; }

  bool uses_context() const { return config_.architecture != Architecture::DummyLstm; }
  bool uses_previous_operation() const { return config_.architecture != Architecture::NoTemporal; }

 private:
  void build(bool initialize, std::uint64_t seed);

  ModelConfig config_;
  ParameterStore params_;
  CellRef enc_cell_, dec_cell_, dummy_cell2_;
  MlpRef agg_, phi_trunk_;
  LinearRef phi_mean_, phi_var_, kq_;
  std::vector<MlpRef> heads_;
};

// ---- single-stream operations ---------------------------------------------

RecurrentState zero_state(const CchpModel& model);

/// One encoder-cell step on the encoder parameters.
RecurrentState encoder_cell_step(const CchpModel& model, const GestureFrame& x,
                                 const OperationFrame& y_prev, const RecurrentState& prev);

/// Encodes one or more (gesture, operation) clips into the approximate prior.
ContextEncoding encode_latent(const CchpModel& model, std::span<const Clip> clips);

AttentionResult context_attention(const CchpModel& model, const ContextEncoding& enc,
                                  const Vector& hidden);

StepPrediction decoder_step(const CchpModel& model, const GestureFrame& x, const Vector& y_prev,
                            const RecurrentState& prev, const ContextEncoding& enc, const Vector& z);

std::vector<StepPrediction> rollout(const CchpModel& model, const DynamicGesture& gesture,
                                    const ContextEncoding& enc, const Vector& z,
                                    const std::optional<TeacherSignal>& teacher = std::nullopt);

/// Reparameterized draw z = mean + sqrt(var) * eps.
Vector sample_latent(const GaussianLatent& latent, Rng& rng);

// ---- batched forward ------------------------------------------------------

/// One target clip with its context clips.
struct Episode {
  Clip target;
  std::vector<Clip> context;
};

enum class LatentSource { Posterior, Prior };

struct ForwardOptions {
  LatentSource latent = LatentSource::Posterior;
  /// T x B mask, 1 = feed ground truth into the next step. Empty = autoregressive.
  Matrix teacher;
  /// B x D_z standard-normal draws for z; empty uses the latent mean.
  Matrix noise;
  bool compute_posterior = true;
  bool keep_attention = false;
};

struct BatchForward {
  ad::Var loss;  // nll + kl (both averaged over elements)
  ad::Var nll;
  ad::Var kl;
  Vector nll_per_element;
  Vector kl_per_element;
  Vector sq_error_per_element;  // summed over valid steps and dimensions
  std::vector<int> lengths;
  std::vector<Matrix> means;      // per step, B x D_y
  std::vector<Matrix> variances;  // per step, B x D_y
  std::vector<Matrix> attention;  // per step, B x N_max (if requested)
  std::vector<std::vector<std::size_t>> context_offsets;
  Matrix prior_mean, prior_var, posterior_mean, posterior_var;
};

BatchForward forward_batch(const CchpModel& model, ad::Tape& tape, std::span<const Episode> batch,
                           const ForwardOptions& options);

}  // namespace cchp
