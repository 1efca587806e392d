// SPDX-License-Identifier: Apache-2.0
#include "cchp/synthetic_users.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cchp {

namespace {

constexpr double kGestureGain = 2.0;

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("GenConfig.") + field + ": " + what);
}

std::string user_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "u%02d", index);
  return buf;
}

std::vector<AxisSet> all_axis_pairs() {
  std::vector<AxisSet> pairs;
  for (std::size_t a = 0; a < kAllAxes.size(); ++a) {
    for (std::size_t b = a + 1; b < kAllAxes.size(); ++b) pairs.push_back({kAllAxes[a], kAllAxes[b]});
  }
  return pairs;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  std::shuffle(v.begin(), v.end(), rng.engine());
}

}  // namespace

void GenConfig::validate() const {
  require(n_in_sample_users > 0, "n_in_sample_users", "must be positive");
  require(n_out_sample_users > 0, "n_out_sample_users", "must be positive");
  require(clips_per_user > 0 && clips_per_user % 12 == 0, "clips_per_user",
          "must be a positive multiple of 12");
  require(rate_hz > 0.0, "rate_hz", "must be positive");
  require(min_seconds > 0.0 && min_seconds <= max_seconds, "min_seconds", "must lie in (0, max_seconds]");
  require(translation_peak_min > 0.0 && translation_peak_min <= translation_peak_max,
          "translation_peak_min", "must lie in (0, translation_peak_max]");
  require(rotation_peak_min > 0.0 && rotation_peak_min <= rotation_peak_max, "rotation_peak_min",
          "must lie in (0, rotation_peak_max]");
  require(label_noise >= 0.0, "label_noise", "must be non-negative");
  require(style_noise >= 0.0, "style_noise", "must be non-negative");
  require(mirror_probability >= 0.0 && mirror_probability <= 1.0, "mirror_probability", "must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"n_in_sample_users", c.n_in_sample_users},
                     {"n_out_sample_users", c.n_out_sample_users},
                     {"clips_per_user", c.clips_per_user},
                     {"rate_hz", c.rate_hz},
                     {"min_seconds", c.min_seconds},
                     {"max_seconds", c.max_seconds},
                     {"translation_peak_min", c.translation_peak_min},
                     {"translation_peak_max", c.translation_peak_max},
                     {"rotation_peak_min", c.rotation_peak_min},
                     {"rotation_peak_max", c.rotation_peak_max},
                     {"label_noise", c.label_noise},
                     {"style_noise", c.style_noise},
                     {"mirror_probability", c.mirror_probability},
                     {"shuffle_motions", c.shuffle_motions},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  static const std::vector<std::string> known{
      "n_in_sample_users", "n_out_sample_users", "clips_per_user",       "rate_hz",
      "min_seconds",       "max_seconds",        "translation_peak_min", "translation_peak_max",
      "rotation_peak_min", "rotation_peak_max",  "label_noise",          "style_noise",
      "mirror_probability", "shuffle_motions",      "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("GenConfig." + key + ": unknown field");
    }
  }
  auto get = [&]<typename T>(const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("GenConfig.") + key + ": wrong type");
    }
  };
  get("n_in_sample_users", c.n_in_sample_users);
  get("n_out_sample_users", c.n_out_sample_users);
  get("clips_per_user", c.clips_per_user);
  get("rate_hz", c.rate_hz);
  get("min_seconds", c.min_seconds);
  get("max_seconds", c.max_seconds);
  get("translation_peak_min", c.translation_peak_min);
  get("translation_peak_max", c.translation_peak_max);
  get("rotation_peak_min", c.rotation_peak_min);
  get("rotation_peak_max", c.rotation_peak_max);
  get("label_noise", c.label_noise);
  get("style_noise", c.style_noise);
  get("mirror_probability", c.mirror_probability);
  get("shuffle_motions", c.shuffle_motions);
  get("seed", c.seed);
}

DominantSample sample_dominant_operation(Rng& rng, const GenConfig& config, int n_active) {
  if (n_active != 1 && n_active != 2) throw std::invalid_argument("n_active must be 1 or 2");
  std::vector<DominantAxis> axes(kAllAxes.begin(), kAllAxes.end());
  shuffle(axes, rng);
  AxisSet chosen(axes.begin(), axes.begin() + n_active);
  return sample_dominant_operation(rng, config, chosen);
}

DominantSample sample_dominant_operation(Rng& rng, const GenConfig& config, const AxisSet& axes) {
  if (axes.empty() || axes.size() > 2) throw std::invalid_argument("expected 1 or 2 active axes");
  const double seconds = rng.uniform(config.min_seconds, config.max_seconds);
  const int max_frames = static_cast<int>(std::floor(config.rate_hz * config.max_seconds + 1e-9));
  const int n = std::clamp(static_cast<int>(std::lround(seconds * config.rate_hz)), 1, max_frames);

  DominantSample s;
  s.active = axes;
  s.intended.rate_hz = s.operation.rate_hz = config.rate_hz;
  s.intended.frames.resize(static_cast<std::size_t>(n));
  const double duration = n / config.rate_hz;

  for (DominantAxis axis : axes) {
    const bool rot = is_rotation(axis);
    const double peak = rot ? rng.uniform(config.rotation_peak_min, config.rotation_peak_max)
                            : rng.uniform(config.translation_peak_min, config.translation_peak_max);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    // Half-sine envelope plus up to two slow modulating tones (<= 1 Hz).
    const int n_tones = rng.uniform_int(0, 2);
    std::array<double, 2> amp{}, freq{}, phase{};
    for (int k = 0; k < n_tones; ++k) {
      amp[static_cast<std::size_t>(k)] = rng.uniform(0.0, 0.15);
      freq[static_cast<std::size_t>(k)] = rng.uniform(0.2, 1.0);
      phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int t = 0; t < n; ++t) {
      const double time = (t + 0.5) / config.rate_hz;
      double mod = 1.0;
      for (int k = 0; k < n_tones; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        mod += amp[kk] * std::sin(2.0 * std::numbers::pi * freq[kk] * time + phase[kk]);
      }
      const double v = sign * peak * std::sin(std::numbers::pi * time / duration) * mod;
      s.intended.frames[static_cast<std::size_t>(t)].velocity[axis_index(axis)] = static_cast<float>(v);
    }
  }

  s.operation = s.intended;
  for (auto& f : s.operation.frames) {
    for (float& v : f.velocity) v = static_cast<float>(v + rng.normal(0.0, config.label_noise));
  }
  return s;
}

UserStyle sample_user_style(const std::string& user_id, Rng& rng, const GenConfig& config) {
  UserStyle style;
  style.user_id = user_id;
  style.style_noise = config.style_noise;
  style.motion_scale = rng.uniform(0.7, 1.4);

  // With shuffled motions every user draws hand motions and resting posture from
  // one population-wide vocabulary; only the assignment to axes and the motion
  // scale are personal, so a gesture alone does not reveal its user.
  Rng population(config.seed ^ 0x6d6f74696f6e73ULL);
  Rng& shape = config.shuffle_motions ? population : rng;

  // Hand frame yaw relative to the workpiece frame.
  const double yaw = shape.uniform(-0.5, 0.5);
  const Eigen::Matrix3d frame = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const bool rotate_in_place = shape.bernoulli(0.5);
  const double coupling = rotate_in_place ? 0.0 : shape.uniform(0.3, 0.8);
  const bool fingers_extended = shape.bernoulli(0.5);

  for (std::size_t i = 0; i < kNumSegments; ++i) {
    for (std::size_t k = 0; k < kSegmentFeatures; ++k) {
      const double posture = fingers_extended ? 0.03 : -0.03;
      style.resting_bias[i * kSegmentFeatures + k] =
          static_cast<float>((i < 5 ? posture : 0.0) + shape.uniform(-0.03, 0.03));
    }
  }

  struct MotionShape {
    std::array<bool, kNumSegments> moving{};
    std::array<double, kNumSegments> weight{};
  };
  std::array<MotionShape, kOperationDim> shapes;
  for (MotionShape& m : shapes) {
    m.moving[5] = true;  // palm always participates
    int n_fingers = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      m.moving[i] = shape.bernoulli(0.5);
      n_fingers += m.moving[i] ? 1 : 0;
    }
    if (n_fingers == 0) m.moving[static_cast<std::size_t>(shape.uniform_int(0, 4))] = true;
    for (double& w : m.weight) w = shape.uniform(0.6, 1.0);
  }

  std::array<std::size_t, kOperationDim> motions{0, 1, 2, 3, 4, 5};
  if (config.shuffle_motions) {
    for (std::size_t i = motions.size() - 1; i > 0; --i) {
      std::swap(motions[i], motions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    }
  }

  for (DominantAxis axis : kAllAxes) {
    AxisTemplate tpl;
    tpl.motion = motions[axis_index(axis)];
    tpl.amplitude = rng.uniform(0.5, 2.0);
    tpl.lag_frames = rng.uniform_int(0, 2);
    tpl.mirrored = rng.bernoulli(config.mirror_probability);
    const MotionShape& m = shapes[tpl.motion];
    tpl.moving = m.moving;

    const std::size_t a = tpl.motion;
    const Eigen::Vector3d unit = frame.col(static_cast<Eigen::Index>(a % 3));
    // Rotating while moving sweeps the hand along a perpendicular direction.
    const Eigen::Vector3d sweep = frame.col(static_cast<Eigen::Index>((a + 1) % 3));
    for (std::size_t i = 0; i < kNumSegments; ++i) {
      if (!tpl.moving[i]) continue;
      const double w = (tpl.mirrored ? -1.0 : 1.0) * kGestureGain * tpl.amplitude * style.motion_scale * m.weight[i];
      for (std::size_t k = 0; k < 3; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        if (a >= 3) {
          tpl.direction[i * kSegmentFeatures + 3 + k] = static_cast<float>(w * unit(kk));
          tpl.direction[i * kSegmentFeatures + k] = static_cast<float>(w * coupling * sweep(kk));
        } else {
          tpl.direction[i * kSegmentFeatures + k] = static_cast<float>(w * unit(kk));
        }
      }
    }
    style.templates.emplace(axis, tpl);
  }
  return style;
}

DynamicGesture render_gesture(const UserStyle& style, const HandlingOperation& op, Rng& rng) {
  const std::size_t n = op.size();
  DynamicGesture g;
  g.rate_hz = op.rate_hz;
  g.frames.resize(n);
  for (DominantAxis axis : kAllAxes) {
    const std::size_t a = axis_index(axis);
    const bool moves = std::any_of(op.frames.begin(), op.frames.end(),
                                   [a](const OperationFrame& f) { return f.velocity[a] != 0.0f; });
    if (moves && !style.templates.contains(axis)) {
      throw std::invalid_argument("render_gesture: style " + style.user_id + " has no template for " +
                                  std::string(axis_name(axis)));
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    std::array<double, kGestureDim> acc{};
    for (std::size_t f = 0; f < kGestureDim; ++f) acc[f] = style.resting_bias[f];
    for (const auto& [axis, tpl] : style.templates) {
      const std::size_t src = t + static_cast<std::size_t>(tpl.lag_frames);
      if (src >= n) continue;
      const double v = op.frames[src].velocity[axis_index(axis)];
      if (v == 0.0) continue;
      for (std::size_t f = 0; f < kGestureDim; ++f) acc[f] += tpl.direction[f] * v;
    }
    for (std::size_t f = 0; f < kGestureDim; ++f) {
      g.frames[t].at(f) = static_cast<float>(acc[f] + rng.normal(0.0, style.style_noise));
    }
  }
  return g;
}

GeneratedDataset build_dataset(const GenConfig& config, Rng& rng) {
  config.validate();
  GeneratedDataset out;
  const int n_users = config.n_in_sample_users + config.n_out_sample_users;
  const int per_user = config.clips_per_user;
  const int n_single = per_user / 3;
  const int n_double = per_user - n_single;
  const std::vector<AxisSet> pairs = all_axis_pairs();

  for (int u = 0; u < n_users; ++u) {
    Rng user_rng = rng.derive(static_cast<std::uint64_t>(u));
    const std::string uid = user_name(u);
    const bool in_sample = u < config.n_in_sample_users;
    (in_sample ? out.dataset.users_in : out.dataset.users_out).push_back(uid);
    UserStyle style = sample_user_style(uid, user_rng, config);

    // Single-dimension clips cycle through the axes so each split covers them evenly.
    std::vector<std::pair<AxisSet, bool>> plan;  // (axes, goes to train)
    for (int k = 0; k < n_single; ++k) {
      const DominantAxis axis = kAllAxes[static_cast<std::size_t>((k / 2) % 6)];
      plan.emplace_back(AxisSet{axis}, k % 2 == 0);
    }
    // Double-dimension clips: half train; half of the test half reuses train pairs.
    std::vector<AxisSet> shuffled = pairs;
    shuffle(shuffled, user_rng);
    const std::size_t n_train_pairs = std::min<std::size_t>(8, shuffled.size() - 1);
    const std::vector<AxisSet> seen(shuffled.begin(), shuffled.begin() + static_cast<long>(n_train_pairs));
    const std::vector<AxisSet> unseen(shuffled.begin() + static_cast<long>(n_train_pairs), shuffled.end());
    const int half = n_double / 2;
    for (int k = 0; k < half; ++k) plan.emplace_back(seen[static_cast<std::size_t>(k) % seen.size()], true);
    for (int k = 0; k < half / 2; ++k) plan.emplace_back(seen[static_cast<std::size_t>(k) % seen.size()], false);
    for (int k = 0; k < half - half / 2; ++k) {
      plan.emplace_back(unseen[static_cast<std::size_t>(k) % unseen.size()], false);
    }

    for (std::size_t k = 0; k < plan.size(); ++k) {
      const auto& [axes, to_train] = plan[k];
      DominantSample sample = sample_dominant_operation(user_rng, config, axes);
      Clip clip;
      clip.user_id = uid;
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%02zu", uid.c_str(), k);
      clip.clip_id = id;
      clip.gesture = render_gesture(style, sample.intended, user_rng);
      clip.operation = std::move(sample.operation);
      clip.active_dims = sample.active;
      if (!in_sample) {
        out.dataset.test_out_sample.push_back(std::move(clip));
      } else if (to_train) {
        out.dataset.train.push_back(std::move(clip));
      } else {
        out.dataset.test_in_sample.push_back(std::move(clip));
      }
    }
    out.styles.push_back(std::move(style));
  }
  return out;
}

}  // namespace cchp
