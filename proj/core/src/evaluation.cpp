// SPDX-License-Identifier: Apache-2.0
#include "cchp/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace cchp {

std::string_view setting_name(TestSetting s) {
  switch (s) {
    case TestSetting::DpUp: return "DpUp";
    case TestSetting::DpUm: return "DpUm";
    case TestSetting::DmUp: return "DmUp";
    case TestSetting::DmUm: return "DmUm";
    case TestSetting::Unseen: return "Unseen";
    case TestSetting::Noisy: return "Noisy";
  }
  return "?";
}

TestSetting parse_setting(std::string_view name) {
  for (TestSetting s : kAllSettings) {
    if (setting_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown test setting: " + std::string(name) +
                              " (expected DpUp, DpUm, DmUp, DmUm, Unseen or Noisy)");
}

NoiseLevel NoiseLevel::level(int k) {
  if (k < 0) throw std::invalid_argument("noise level must be >= 0");
  return {k, 0.01 * k, 0.005 * k};
}

std::vector<NoiseLevel> default_noise_levels() {
  std::vector<NoiseLevel> out;
  for (int k = 0; k <= 10; ++k) out.push_back(NoiseLevel::level(k));
  return out;
}

DynamicGesture add_gesture_noise(const DynamicGesture& x, double sigma_t, double sigma_r, Rng& rng) {
  DynamicGesture out = x;
  for (auto& frame : out.frames) {
    for (auto& seg : frame.segments) {
      for (std::size_t j = 0; j < kSegmentFeatures; ++j) {
        const double eps = rng.normal();  // drawn unconditionally so levels share draws
        seg[j] = static_cast<float>(seg[j] + (j < 3 ? sigma_t : sigma_r) * eps);
      }
    }
  }
  return out;
}

namespace {

constexpr std::uint64_t kContextStream = 0;
constexpr std::uint64_t kLatentStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

Rng stream_for(std::uint64_t seed, std::size_t target, std::uint64_t stream) {
  return Rng(seed).derive(3 * static_cast<std::uint64_t>(target) + stream);
}

bool nested(const AxisSet& a, const AxisSet& b) {
  return std::includes(a.begin(), a.end(), b.begin(), b.end()) ||
         std::includes(b.begin(), b.end(), a.begin(), a.end());
}

bool disjoint(const AxisSet& a, const AxisSet& b) {
  return std::none_of(a.begin(), a.end(), [&](DominantAxis x) { return b.contains(x); });
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(v.size()) - 1))];
}

/// Draws n clips of `user` from the training split that relate to the target's
/// active dimensions as requested. D+ prefers identical dimension sets and falls
/// back to nested ones (a single axis of a two-axis target, or vice versa).
std::vector<Clip> draw_context(const std::vector<Clip>& train, const std::string& user, const Clip& target,
                               bool same_dims, int n, Rng& rng) {
  std::vector<const Clip*> primary, secondary;
  for (const Clip& c : train) {
    if (c.user_id != user) continue;
    if (same_dims) {
      if (c.active_dims == target.active_dims) {
        primary.push_back(&c);
      } else if (nested(c.active_dims, target.active_dims)) {
        secondary.push_back(&c);
      }
    } else if (disjoint(c.active_dims, target.active_dims)) {
      primary.push_back(&c);
    }
  }
  if (primary.empty() && secondary.empty()) {
    throw std::invalid_argument("no training clips of user " + user + " fit the context rule for " + target.clip_id);
  }
  std::vector<Clip> out;
  for (auto* tier : {&primary, &secondary}) {
    std::vector<const Clip*> v = *tier;
    std::shuffle(v.begin(), v.end(), rng.engine());
    for (const Clip* c : v) {
      if (static_cast<int>(out.size()) == n) break;
      out.push_back(*c);
    }
  }
  const std::vector<const Clip*>& refill = primary.empty() ? secondary : primary;
  while (static_cast<int>(out.size()) < n) out.push_back(*pick(refill, rng));
  return out;
}

}  // namespace

std::vector<Episode> build_episodes(const Dataset& data, TestSetting setting, const EvalConfig& cfg,
                                    std::uint64_t seed, std::optional<NoiseLevel> noise) {
  if (cfg.context_clips < 1) throw std::invalid_argument("EvalConfig.context_clips: must be >= 1");
  const bool unseen = setting == TestSetting::Unseen;
  const std::vector<Clip>& targets = unseen ? data.test_out_sample : data.test_in_sample;
  if (targets.empty()) {
    throw std::invalid_argument(std::string("setting ") + std::string(setting_name(setting)) +
                                " requires a non-empty " + (unseen ? "test_out_sample" : "test_in_sample") + " split");
  }
  if (data.train.empty() || data.users_in.empty()) throw std::invalid_argument("evaluation requires a training split");

  bool same_user = true, same_dims = true;
  switch (setting) {
    case TestSetting::DpUp:
    case TestSetting::Noisy: break;
    case TestSetting::DpUm: same_user = false; break;
    case TestSetting::DmUp: same_dims = false; break;
    case TestSetting::DmUm: same_user = same_dims = false; break;
    case TestSetting::Unseen: same_user = false; break;
  }
  std::optional<NoiseLevel> perturb = noise;
  if (setting == TestSetting::Noisy && !perturb) perturb = NoiseLevel{-1, cfg.noisy_sigma_r, cfg.noisy_sigma_t};

  std::vector<Episode> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Clip& target = targets[i];
    Rng rng = stream_for(seed, i, kContextStream);
    std::string user = target.user_id;
    if (!same_user) {
      std::vector<std::string> others;
      for (const auto& u : data.users_in) {
        if (u != target.user_id) others.push_back(u);
      }
      if (others.empty()) throw std::invalid_argument("cross-user setting needs at least two users");
      user = pick(others, rng);
    }
    Episode e;
    e.target = target;
    e.context = draw_context(data.train, user, target, same_dims, cfg.context_clips, rng);
    if (perturb) {
      Rng nrng = stream_for(seed, i, kNoiseStream);
      e.target.gesture = add_gesture_noise(target.gesture, perturb->sigma_t, perturb->sigma_r, nrng);
    }
    out.push_back(std::move(e));
  }
  return out;
}

EvalResult evaluate(const CchpModel& model, const Dataset& data, TestSetting setting, const EvalConfig& cfg,
                    std::uint64_t seed, std::optional<NoiseLevel> noise) {
  if (cfg.batch_size < 1) throw std::invalid_argument("EvalConfig.batch_size: must be >= 1");
  const std::vector<Episode> episodes = build_episodes(data, setting, cfg, seed, noise);
  const int dz = model.config().latent_dim;
  const bool context = model.uses_context();

  double elbo_sum = 0.0, sq_sum = 0.0, zero_sum = 0.0, frames = 0.0, hf = 0.0, total = 0.0;
  const auto n = episodes.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t count = std::min(bs, n - start);
    std::span<const Episode> batch(episodes.data() + start, count);
    ForwardOptions options;
    options.latent = LatentSource::Prior;
    options.compute_posterior = context;
    if (context && cfg.sample_latent) {
      options.noise.resize(static_cast<Eigen::Index>(count), dz);
      for (std::size_t b = 0; b < count; ++b) {
        Rng zr = stream_for(seed, start + b, kLatentStream);
        for (int d = 0; d < dz; ++d) options.noise(static_cast<Eigen::Index>(b), d) = zr.normal();
      }
    }
    ad::Tape tape(false);
    const BatchForward f = forward_batch(model, tape, batch, options);
    elbo_sum += (f.nll_per_element + f.kl_per_element).sum();
    sq_sum += f.sq_error_per_element.sum();
    for (std::size_t b = 0; b < count; ++b) {
      const Clip& target = batch[b].target;
      const int len = f.lengths[b];
      frames += len;
      for (const auto& y : target.operation.frames) {
        for (float v : y.velocity) zero_sum += static_cast<double>(v) * v;
      }
      if (len < 8) continue;
      std::vector<double> trace(static_cast<std::size_t>(len));
      for (Eigen::Index d = 0; d < model.config().op_dim; ++d) {
        for (int t = 0; t < len; ++t) trace[static_cast<std::size_t>(t)] = f.means[static_cast<std::size_t>(t)](static_cast<Eigen::Index>(b), d);
        const Spectrum s = spectrum(trace, target.operation.rate_hz);
        hf += s.hf_power;
        total += s.total_power;
      }
    }
  }
  EvalResult r;
  r.setting = setting;
  r.clips = n;
  const double dims = static_cast<double>(model.config().op_dim);
  r.mse = sq_sum / (frames * dims);
  r.zero_mse = zero_sum / (frames * dims);
  r.hf_ratio = total > 0.0 ? hf / total : 0.0;
  if (context) r.elbo = elbo_sum / static_cast<double>(n);
  return r;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

std::vector<SweepPoint> noise_sweep(const CchpModel& model, const Dataset& data, std::span<const NoiseLevel> levels,
                                    int repeats, const EvalConfig& cfg, std::uint64_t seed) {
  if (levels.empty()) throw std::invalid_argument("noise_sweep: no levels");
  if (repeats < 1) throw std::invalid_argument("noise_sweep: repeats must be >= 1");
  std::vector<SweepPoint> out;
  for (const NoiseLevel& level : levels) {
    std::vector<double> mse, elbo, hf;
    for (int r = 0; r < repeats; ++r) {
      const EvalResult e = evaluate(model, data, TestSetting::DpUp, cfg, seed + static_cast<std::uint64_t>(r), level);
      mse.push_back(e.mse);
      elbo.push_back(e.elbo.value_or(0.0));
      hf.push_back(e.hf_ratio);
    }
    SweepPoint p;
    p.level = level;
    std::tie(p.mse_mean, p.mse_std) = mean_std(mse);
    std::tie(p.elbo_mean, p.elbo_std) = mean_std(elbo);
    p.hf_ratio = mean_std(hf).first;
    out.push_back(p);
  }
  return out;
}

Spectrum spectrum(std::span<const double> trace, double rate_hz) {
  const std::size_t n = trace.size();
  if (n < 8) throw std::invalid_argument("spectrum: sequence shorter than 8 samples");
  if (!(rate_hz > 0.0)) throw std::invalid_argument("spectrum: rate must be positive");
  Spectrum s;
  s.frequency.resize(n);
  s.power.resize(n);
  const double cutoff = rate_hz / 4.0;
  for (std::size_t k = 0; k < n; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double phase = -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      re += trace[t] * std::cos(phase);
      im += trace[t] * std::sin(phase);
    }
    const std::size_t folded = std::min(k, n - k);
    s.frequency[k] = static_cast<double>(folded) * rate_hz / static_cast<double>(n);
    s.power[k] = re * re + im * im;
    s.total_power += s.power[k];
    if (s.frequency[k] > cutoff) s.hf_power += s.power[k];
  }
  s.hf_ratio = s.total_power > 0.0 ? s.hf_power / s.total_power : 0.0;
  return s;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

AttentionMap compute_attention(const CchpModel& model, const Clip& target, std::span<const Clip> context,
                               std::uint64_t seed) {
  const ContextEncoding enc = encode_latent(model, context);
  Rng rng(seed);
  const Vector z = sample_latent(enc.latent, rng);
  const auto steps = rollout(model, target.gesture, enc, z);
  AttentionMap map;
  map.target_id = target.clip_id;
  map.offsets = enc.offsets;
  for (const Clip& c : context) map.context_ids.push_back(c.clip_id);
  map.weights.resize(static_cast<Eigen::Index>(steps.size()), static_cast<Eigen::Index>(enc.frames()));
  for (std::size_t t = 0; t < steps.size(); ++t) map.weights.row(static_cast<Eigen::Index>(t)) = steps[t].attention.transpose();
  return map;
}

void write_attention(const AttentionMap& map, const std::filesystem::path& path) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index t = 0; t < map.weights.rows(); ++t) {
    std::vector<double> row(map.weights.row(t).data(), map.weights.row(t).data() + map.weights.cols());
    rows.push_back(row);
  }
  nlohmann::json clips = nlohmann::json::array();
  for (std::size_t i = 0; i < map.context_ids.size(); ++i) {
    const std::size_t end = i + 1 < map.offsets.size() ? map.offsets[i + 1] : static_cast<std::size_t>(map.weights.cols());
    clips.push_back({{"clip_id", map.context_ids[i]}, {"first", map.offsets[i]}, {"frames", end - map.offsets[i]}});
  }
  const nlohmann::json j{{"target_id", map.target_id},
                         {"n_target", map.weights.rows()},
                         {"n_context", map.weights.cols()},
                         {"context_clips", clips},
                         {"weights", rows}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump() << '\n';
}

bool cell_applies(std::string_view variant, TestSetting setting, bool elbo) {
  if (variant != "DummyLSTM") return true;
  if (elbo) return false;
  return setting == TestSetting::DpUp || setting == TestSetting::Unseen || setting == TestSetting::Noisy;
}

std::vector<TableCell> average_cells(std::span<const TableCell> per_seed) {
  struct Acc {
    double elbo = 0.0, mse = 0.0;
    int n_elbo = 0, n_mse = 0;
  };
  std::vector<std::string> order;
  std::map<std::pair<std::string, int>, Acc> acc;
  for (const TableCell& c : per_seed) {
    if (std::find(order.begin(), order.end(), c.variant) == order.end()) order.push_back(c.variant);
    Acc& a = acc[{c.variant, static_cast<int>(c.setting)}];
    if (c.elbo) {
      a.elbo += *c.elbo;
      ++a.n_elbo;
    }
    if (c.mse) {
      a.mse += *c.mse;
      ++a.n_mse;
    }
  }
  std::vector<TableCell> out;
  for (const auto& v : order) {
    for (TestSetting s : kAllSettings) {
      auto it = acc.find({v, static_cast<int>(s)});
      if (it == acc.end()) continue;
      TableCell c{v, s, std::nullopt, std::nullopt};
      if (it->second.n_elbo > 0) c.elbo = it->second.elbo / it->second.n_elbo;
      if (it->second.n_mse > 0) c.mse = it->second.mse / it->second.n_mse;
      out.push_back(c);
    }
  }
  return out;
}

std::string make_table(std::span<const TableCell> cells) {
  std::vector<std::string> variants;
  for (const TableCell& c : cells) {
    if (std::find(variants.begin(), variants.end(), c.variant) == variants.end()) variants.push_back(c.variant);
  }
  auto find = [&](const std::string& v, TestSetting s) -> const TableCell* {
    for (const TableCell& c : cells) {
      if (c.variant == v && c.setting == s) return &c;
    }
    return nullptr;
  };
  auto value = [&](const std::string& v, TestSetting s, bool elbo) -> std::optional<double> {
    if (!cell_applies(v, s, elbo)) return std::nullopt;
    const TableCell* c = find(v, s);
    if (c == nullptr) return std::nullopt;
    return elbo ? c->elbo : c->mse;
  };
  std::map<std::pair<int, bool>, double> minima;
  for (TestSetting s : kAllSettings) {
    for (bool elbo : {true, false}) {
      for (const auto& v : variants) {
        if (auto x = value(v, s, elbo)) {
          auto key = std::make_pair(static_cast<int>(s), elbo);
          auto it = minima.find(key);
          if (it == minima.end() || *x < it->second) minima[key] = *x;
        }
      }
    }
  }
  auto fmt = [&](std::optional<double> x, TestSetting s, bool elbo) {
    if (!x) return std::string("NA");
    char buf[48];
    std::snprintf(buf, sizeof buf, elbo ? "%.2f" : "%.5f", *x);
    return minima.at({static_cast<int>(s), elbo}) == *x ? "**" + std::string(buf) + "**" : std::string(buf);
  };
  std::string out = "| Model |";
  std::string rule = "|---|";
  for (TestSetting s : kAllSettings) {
    out += " " + std::string(setting_name(s)) + " ELBO | " + std::string(setting_name(s)) + " MSE |";
    rule += "---:|---:|";
  }
  out += "\n" + rule + "\n";
  for (const auto& v : variants) {
    out += "| " + v + " |";
    for (TestSetting s : kAllSettings) {
      out += " " + fmt(value(v, s, true), s, true) + " | " + fmt(value(v, s, false), s, false) + " |";
    }
    out += "\n";
  }
  return out;
}

void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"setting", std::string(setting_name(r.setting))},
                     {"mse", r.mse},
                     {"zero_mse", r.zero_mse},
                     {"hf_ratio", r.hf_ratio},
                     {"clips", r.clips}};
  j["elbo"] = r.elbo ? nlohmann::json(*r.elbo) : nlohmann::json(nullptr);
}

}  // namespace cchp
