// SPDX-License-Identifier: Apache-2.0
/**
 * @file   synthetic_users.hpp
 * @brief  Procedural demonstrators with known gesture styles.
 *
 * Each synthetic user maps every dominant axis to a sparse affine template in
 * the 36-D gesture space. A demonstration is a band-limited velocity profile
 * on one or two axes; the gesture is the superposition of the axis templates
 * applied to the (possibly time-shifted) profiles, plus a resting bias and
 * isotropic style noise.
 */
#pragma once

#include "cchp/gesture_domain.hpp"
#include "cchp/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <map>
#include <string>
#include <vector>

namespace cchp {

struct AxisTemplate {
  std::array<bool, kNumSegments> moving{};  // segment support
  double amplitude = 1.0;                    // in [0.5, 2.0]
  int lag_frames = 0;                        // gesture leads the operation by this many frames
  bool mirrored = false;                     // user signals this axis with the opposite hand motion
  std::size_t motion = 0;                    // hand motion used for the axis: 0-2 sweep, 3-5 twist
  std::array<float, kGestureDim> direction{};  // gesture response to a unit axis velocity
};

struct UserStyle {
  std::string user_id;
  std::map<DominantAxis, AxisTemplate> templates;
  std::array<float, kGestureDim> resting_bias{};
  double motion_scale = 1.0;
  double style_noise = 0.01;
};

struct GenConfig {
  int n_in_sample_users = 10;
  int n_out_sample_users = 5;
  int clips_per_user = 72;
  double rate_hz = 10.0;
  double min_seconds = 2.0;
  double max_seconds = 5.0;
  double translation_peak_min = 0.10;  // m/s
  double translation_peak_max = 0.20;
  double rotation_peak_min = 0.15;  // rad/s
  double rotation_peak_max = 0.30;
  double label_noise = 0.002;
  double style_noise = 0.01;
  double mirror_probability = 0.0;  // chance an axis template is sign-flipped
  /// Each user assigns the six hand motions to robot axes in their own order.
  bool shuffle_motions = false;
  std::uint64_t seed = 7;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct DominantSample {
  HandlingOperation operation;  // labeled operation, including labeling noise
  HandlingOperation intended;   // noise-free profile the demonstrator acted on
  AxisSet active;
};

/// Random axes: n_active must be 1 or 2.
DominantSample sample_dominant_operation(Rng& rng, const GenConfig& config, int n_active);
DominantSample sample_dominant_operation(Rng& rng, const GenConfig& config, const AxisSet& axes);

UserStyle sample_user_style(const std::string& user_id, Rng& rng, const GenConfig& config);

/// Renders the demonstrator's gesture for an operation. Throws if the style
/// lacks a template for an axis the operation moves along.
DynamicGesture render_gesture(const UserStyle& style, const HandlingOperation& op, Rng& rng);

struct GeneratedDataset {
  Dataset dataset;
  std::vector<UserStyle> styles;
};

GeneratedDataset build_dataset(const GenConfig& config, Rng& rng);
inline GeneratedDataset build_dataset(const GenConfig& config) {
  Rng rng(config.seed);
  return build_dataset(config, rng);
}

}  // namespace cchp
