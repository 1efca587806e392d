// SPDX-License-Identifier: Apache-2.0
#include "cchp/training.hpp"

#include "cchp/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

namespace cchp {

// ---- closed-form densities ------------------------------------------------

double gaussian_kl(const GaussianLatent& q, const GaussianLatent& p) {
  const Eigen::Index n = q.mean.size();
  if (q.var.size() != n || p.mean.size() != n || p.var.size() != n) {
    throw std::invalid_argument("gaussian_kl: dimension mismatch");
  }
  if ((q.var.array() <= 0.0).any() || (p.var.array() <= 0.0).any()) {
    throw std::invalid_argument("gaussian_kl: variances must be positive");
  }
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = q.mean(i) - p.mean(i);
    kl += 0.5 * (std::log(p.var(i)) - std::log(q.var(i)) + (q.var(i) + d * d) / p.var(i) - 1.0);
  }
  return kl;
}

double gaussian_nll(const OperationFrame& y, const Vector& mean, const Vector& var) {
  if (mean.size() != static_cast<Eigen::Index>(kOperationDim) || var.size() != mean.size()) {
    throw std::invalid_argument("gaussian_nll: dimension mismatch");
  }
  double nll = 0.0;
  for (std::size_t d = 0; d < kOperationDim; ++d) {
    const auto i = static_cast<Eigen::Index>(d);
    if (!(var(i) > 0.0)) throw std::invalid_argument("gaussian_nll: variance must be positive");
    const double r = y.velocity[d] - mean(i);
    nll += 0.5 * (std::log(2.0 * std::numbers::pi * var(i)) + r * r / var(i));
  }
  return nll;
}

// ---- configuration --------------------------------------------------------

void TrainConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig.learning_rate: must be positive");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig.batch_size: must be >= 1");
  if (epochs < 1 && !max_steps) throw std::invalid_argument("TrainConfig.epochs: must be >= 1");
  if (max_steps && *max_steps < 1) throw std::invalid_argument("TrainConfig.max_steps: must be >= 1");
  if (input_variance < 0.0) throw std::invalid_argument("TrainConfig.input_variance: must be >= 0");
  if (!prob(tf_initial)) throw std::invalid_argument("TrainConfig.tf_initial: not a probability");
  if (tf_hold_steps < 0) throw std::invalid_argument("TrainConfig.tf_hold_steps: must be >= 0");
  if (!(tf_decay_end > 0.0 && tf_decay_end <= 1.0)) {
    throw std::invalid_argument("TrainConfig.tf_decay_end: must be in (0, 1]");
  }
  if (tf_fixed && !prob(*tf_fixed)) throw std::invalid_argument("TrainConfig.tf_fixed: not a probability");
  if (!prob(p_dims_plus)) throw std::invalid_argument("TrainConfig.p_dims_plus: not a probability");
  if (!prob(p_user_plus)) throw std::invalid_argument("TrainConfig.p_user_plus: not a probability");
  if (slice_min < 1) throw std::invalid_argument("TrainConfig.slice_min: must be >= 1");
  if (!(slice_limit > 0.0 && slice_limit <= 1.0)) {
    throw std::invalid_argument("TrainConfig.slice_limit: must be in (0, 1]");
  }
  if (context_clips < 1) throw std::invalid_argument("TrainConfig.context_clips: must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw std::invalid_argument("TrainConfig.adam_beta1: must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw std::invalid_argument("TrainConfig.adam_beta2: must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw std::invalid_argument("TrainConfig.adam_epsilon: must be positive");
  if (grad_clip < 0.0) throw std::invalid_argument("TrainConfig.grad_clip: must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                     {"epochs", c.epochs},               {"input_variance", c.input_variance},
                     {"tf_initial", c.tf_initial},       {"tf_hold_steps", c.tf_hold_steps},
                     {"tf_decay_end", c.tf_decay_end},   {"p_dims_plus", c.p_dims_plus},
                     {"p_user_plus", c.p_user_plus},     {"slice_min", c.slice_min},
                     {"slice_limit", c.slice_limit},     {"context_clips", c.context_clips},
                     {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2},
                     {"adam_epsilon", c.adam_epsilon},   {"grad_clip", c.grad_clip},
                     {"seed", c.seed},                   {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every}};
  j["max_steps"] = c.max_steps ? nlohmann::json(*c.max_steps) : nlohmann::json(nullptr);
  j["tf_fixed"] = c.tf_fixed ? nlohmann::json(*c.tf_fixed) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known{
      "learning_rate", "batch_size",  "epochs",        "max_steps",  "input_variance", "tf_initial",
      "tf_hold_steps", "tf_decay_end", "tf_fixed",     "p_dims_plus", "p_user_plus",   "slice_min",
      "slice_limit",   "context_clips", "adam_beta1",  "adam_beta2", "adam_epsilon",   "grad_clip",
      "seed",          "log_every",   "checkpoint_every"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("TrainConfig." + key + ": unknown field");
    }
  }
  auto get = [&]<typename T>(const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("TrainConfig.") + key + ": wrong type");
    }
  };
  auto get_opt = [&]<typename T>(const char* key, std::optional<T>& out) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  };
  get("learning_rate", c.learning_rate);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get_opt("max_steps", c.max_steps);
  get("input_variance", c.input_variance);
  get("tf_initial", c.tf_initial);
  get("tf_hold_steps", c.tf_hold_steps);
  get("tf_decay_end", c.tf_decay_end);
  get_opt("tf_fixed", c.tf_fixed);
  get("p_dims_plus", c.p_dims_plus);
  get("p_user_plus", c.p_user_plus);
  get("slice_min", c.slice_min);
  get("slice_limit", c.slice_limit);
  get("context_clips", c.context_clips);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_epsilon", c.adam_epsilon);
  get("grad_clip", c.grad_clip);
  get("seed", c.seed);
  get("log_every", c.log_every);
  get("checkpoint_every", c.checkpoint_every);
}

namespace {

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::vector<double> parse_args(std::string_view tag, std::string_view prefix, std::size_t count) {
  if (!tag.starts_with(prefix) || !tag.ends_with(")")) return {};
  std::string inner(tag.substr(prefix.size(), tag.size() - prefix.size() - 1));
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= inner.size()) {
    const std::size_t comma = inner.find(',', pos);
    const std::string part = inner.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      return {};
    }
    if (used != part.size()) return {};
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out.size() == count ? out : std::vector<double>{};
}

}  // namespace

std::string BaselineSpec::tag() const {
  switch (variant) {
    case Variant::Main: return "CCHP_main";
    case Variant::FixedTf: return "CCHP_fixed_TF(" + format_g(p_tf) + ")";
    case Variant::CtxProbs: return "CCHP_ctx_probs(" + format_g(p_dims_plus) + "," + format_g(p_user_plus) + ")";
    case Variant::DummyLstm: return "DummyLSTM";
    case Variant::NoTemporal: return "NoTemporalAblation";
  }
  return "?";
}

std::string BaselineSpec::supported() {
  return "CCHP_main, CCHP_fixed_TF(p), CCHP_ctx_probs(pD,pU), DummyLSTM, NoTemporalAblation";
}

BaselineSpec BaselineSpec::parse(std::string_view tag) {
  BaselineSpec s;
  auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (tag == "CCHP_main") return s;
  if (tag == "DummyLSTM") {
    s.variant = Variant::DummyLstm;
    return s;
  }
  if (tag == "NoTemporalAblation") {
    s.variant = Variant::NoTemporal;
    return s;
  }
  if (auto a = parse_args(tag, "CCHP_fixed_TF(", 1); !a.empty() && in_unit(a[0])) {
    s.variant = Variant::FixedTf;
    s.p_tf = a[0];
    return s;
  }
  if (auto a = parse_args(tag, "CCHP_ctx_probs(", 2); !a.empty() && in_unit(a[0]) && in_unit(a[1])) {
    s.variant = Variant::CtxProbs;
    s.p_dims_plus = a[0];
    s.p_user_plus = a[1];
    return s;
  }
  throw std::invalid_argument("unknown variant \"" + std::string(tag) + "\"; supported: " + supported());
}

void BaselineSpec::apply(TrainConfig& train, ModelConfig& model) const {
  switch (variant) {
    case Variant::Main: break;
    case Variant::FixedTf: train.tf_fixed = p_tf; break;
    case Variant::CtxProbs:
      train.p_dims_plus = p_dims_plus;
      train.p_user_plus = p_user_plus;
      break;
    case Variant::DummyLstm: model.architecture = Architecture::DummyLstm; break;
    case Variant::NoTemporal: model.architecture = Architecture::NoTemporal; break;
  }
}

// ---- sampling -------------------------------------------------------------

long steps_per_epoch(const TrainConfig& cfg, std::size_t n_train) {
  return static_cast<long>(n_train / static_cast<std::size_t>(cfg.batch_size));
}

long total_steps(const TrainConfig& cfg, std::size_t n_train) {
  if (cfg.max_steps) return *cfg.max_steps;
  return steps_per_epoch(cfg, n_train) * cfg.epochs;
}

double tf_schedule(long step, const TrainConfig& cfg, long total) {
  if (cfg.tf_fixed) return *cfg.tf_fixed;
  if (step <= cfg.tf_hold_steps) return cfg.tf_initial;
  const long end = std::max(cfg.tf_hold_steps + 1, std::lround(cfg.tf_decay_end * static_cast<double>(total)));
  if (step >= end) return 0.0;
  return cfg.tf_initial * static_cast<double>(end - step) / static_cast<double>(end - cfg.tf_hold_steps);
}

std::vector<bool> teacher_mask(double p_tf, std::size_t length, Rng& rng) {
  if (!(p_tf >= 0.0 && p_tf <= 1.0)) throw std::invalid_argument("teacher_mask: p_tf not a probability");
  std::vector<bool> mask(length);
  for (std::size_t t = 0; t < length; ++t) mask[t] = rng.bernoulli(p_tf);
  return mask;
}

DynamicGesture perturb_input(const DynamicGesture& x, double variance, Rng& rng) {
  if (variance < 0.0) throw std::invalid_argument("perturb_input: negative variance");
  DynamicGesture out = x;
  if (variance == 0.0) return out;
  const double sd = std::sqrt(variance);
  for (auto& frame : out.frames) {
    for (auto& seg : frame.segments) {
      for (auto& v : seg) v = static_cast<float>(v + sd * rng.normal());
    }
  }
  return out;
}

Clip slice_clip(const Clip& clip, const TrainConfig& cfg, Rng& rng) {
  const int n = static_cast<int>(clip.size());
  const int limit = std::min(n - 1, static_cast<int>(std::floor(cfg.slice_limit * n)));
  if (limit < cfg.slice_min) {
    throw std::invalid_argument("slice_clip: clip " + clip.clip_id + " of " + std::to_string(n) +
                                " frames is too short for slice_min " + std::to_string(cfg.slice_min));
  }
  const int k = rng.uniform_int(cfg.slice_min, limit);
  const int t0 = rng.uniform_int(0, limit - k);
  Clip out;
  out.user_id = clip.user_id;
  out.clip_id = clip.clip_id + "[" + std::to_string(t0) + ":" + std::to_string(t0 + k) + "]";
  out.active_dims = clip.active_dims;
  out.gesture.rate_hz = clip.gesture.rate_hz;
  out.operation.rate_hz = clip.operation.rate_hz;
  out.gesture.frames.assign(clip.gesture.frames.begin() + t0, clip.gesture.frames.begin() + t0 + k);
  out.operation.frames.assign(clip.operation.frames.begin() + t0, clip.operation.frames.begin() + t0 + k);
  return out;
}

namespace {

bool disjoint(const AxisSet& a, const AxisSet& b) {
  return std::none_of(a.begin(), a.end(), [&](DominantAxis x) { return b.contains(x); });
}

}  // namespace

ContextDraw sample_context(std::span<const Clip> pool, const Clip& target, const TrainConfig& cfg, Rng& rng) {
  if (pool.size() < static_cast<std::size_t>(cfg.context_clips) + 1) {
    throw std::invalid_argument("sample_context: dataset too small");
  }
  ContextDraw draw;
  draw.same_user = rng.bernoulli(cfg.p_user_plus);
  draw.same_dims = rng.bernoulli(cfg.p_dims_plus);

  std::vector<std::size_t> strict, relaxed;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Clip& c = pool[i];
    if ((c.user_id == target.user_id) != draw.same_user) continue;
    if (draw.same_dims) {
      if (c.active_dims == target.active_dims) {
        strict.push_back(i);
      } else if (!disjoint(c.active_dims, target.active_dims)) {
        relaxed.push_back(i);  // no identical set for this relation: share at least one axis
      }
    } else if (disjoint(c.active_dims, target.active_dims)) {
      strict.push_back(i);
    } else if (c.active_dims != target.active_dims) {
      relaxed.push_back(i);
    }
  }
  const std::vector<std::size_t>& candidates = strict.empty() ? relaxed : strict;
  if (candidates.empty()) {
    throw std::invalid_argument("sample_context: no clip satisfies the context relation for " + target.clip_id);
  }
  const Clip& chosen = pool[candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))]];
  if (chosen.clip_id == target.clip_id && chosen.user_id == target.user_id) {
    draw.clips.push_back(slice_clip(chosen, cfg, rng));
    draw.sliced = true;
  } else {
    draw.clips.push_back(chosen);
  }

  for (int k = 1; k < cfg.context_clips; ++k) {
    for (;;) {
      const Clip& c = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      if (c.clip_id == target.clip_id && c.user_id == target.user_id) continue;
      draw.clips.push_back(c);
      break;
    }
  }
  return draw;
}

// ---- objective ------------------------------------------------------------

BatchForward elbo_loss(const CchpModel& model, ad::Tape& tape, std::span<const Episode> batch, double p_tf,
                       Rng& rng) {
  const auto b_count = static_cast<Eigen::Index>(batch.size());
  Eigen::Index steps = 0;
  for (const Episode& e : batch) steps = std::max(steps, static_cast<Eigen::Index>(e.target.size()));
  ForwardOptions options;
  options.latent = LatentSource::Posterior;
  options.compute_posterior = model.uses_context();
  options.teacher = Matrix::Zero(steps, b_count);
  for (Eigen::Index b = 0; b < b_count; ++b) {
    const auto mask = teacher_mask(p_tf, batch[static_cast<std::size_t>(b)].target.size(), rng);
    for (std::size_t t = 0; t < mask.size(); ++t) options.teacher(static_cast<Eigen::Index>(t), b) = mask[t] ? 1.0 : 0.0;
  }
  if (model.uses_context()) {
    options.noise.resize(b_count, model.config().latent_dim);
    for (Eigen::Index i = 0; i < options.noise.size(); ++i) options.noise.data()[i] = rng.normal();
  }
  return forward_batch(model, tape, batch, options);
}

StepMetrics summarize(const BatchForward& f) {
  StepMetrics m;
  m.loss = f.loss.scalar();
  m.nll = f.nll.scalar();
  m.kl = f.kl.scalar();
  const double frames = std::accumulate(f.lengths.begin(), f.lengths.end(), 0.0);
  const double dims = f.means.empty() ? 1.0 : static_cast<double>(f.means.front().cols());
  m.mse = f.sq_error_per_element.sum() / (frames * dims);
  return m;
}

// ---- optimizer ------------------------------------------------------------

Adam::Adam(const ParameterStore& params, double lr, double beta1, double beta2, double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (const Parameter& p : params) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void Adam::step(ParameterStore& params) {
  if (params.size() != m_.size()) throw std::invalid_argument("Adam: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (p.grad.size() == 0) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + epsilon_);
  }
}

double clip_gradients(const ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params) {
    if (p.grad.size() != 0) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const Parameter& p : params) p.grad *= s;
  }
  return norm;
}

// ---- training loop --------------------------------------------------------

TrainResult train(const TrainConfig& base_cfg, const BaselineSpec& spec, const ModelConfig& base_model,
                  const Dataset& data, const TrainHooks& hooks) {
  TrainConfig cfg = base_cfg;
  ModelConfig mcfg = base_model;
  spec.apply(cfg, mcfg);
  cfg.validate();
  mcfg.validate();
  const std::vector<Clip>& pool = data.train;
  if (pool.empty()) throw std::invalid_argument("train: empty training split");
  const long per_epoch = steps_per_epoch(cfg, pool.size());
  if (per_epoch < 1) throw std::invalid_argument("train: fewer training clips than one batch");
  const long total = total_steps(cfg, pool.size());

  Rng root(cfg.seed);
  Rng init_rng = root.derive(0);
  Rng rng = root.derive(1);
  TrainResult result{CchpModel(mcfg, init_rng.engine()()), {}, {}};
  CchpModel& model = result.model;
  Adam adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);

  std::ofstream log;
  if (!hooks.metrics_log.empty()) {
    if (hooks.metrics_log.has_parent_path()) std::filesystem::create_directories(hooks.metrics_log.parent_path());
    log.open(hooks.metrics_log, std::ios::app);
    if (!log) throw std::runtime_error("cannot open metrics log " + hooks.metrics_log.string());
  }
  const auto start = std::chrono::steady_clock::now();
  auto metadata = [&](long step) {
    return nlohmann::json{{"step", step}, {"variant", spec.tag()}, {"train_config", cfg}};
  };

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (long epoch = 0; step < total; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (long k = 0; k < per_epoch && step < total; ++k, ++step) {
      std::vector<Episode> batch;
      batch.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const Clip& target = pool[order[static_cast<std::size_t>(k * cfg.batch_size + i)]];
        Episode e;
        e.target = target;
        e.target.gesture = perturb_input(target.gesture, cfg.input_variance, rng);
        if (model.uses_context()) {
          e.context = sample_context(pool, target, cfg, rng).clips;
          for (Clip& c : e.context) c.gesture = perturb_input(c.gesture, cfg.input_variance, rng);
        }
        batch.push_back(std::move(e));
      }

      const double p_tf = tf_schedule(step, cfg, total);
      ad::Tape tape;
      model.parameters().zero_grad();
      const BatchForward f = elbo_loss(model, tape, batch, p_tf, rng);
      const StepMetrics metrics = summarize(f);
      if (!std::isfinite(metrics.loss)) throw TrainingDiverged(step, "non-finite loss");
      tape.backward(f.loss);
      clip_gradients(model.parameters(), cfg.grad_clip);
      adam.step(model.parameters());
      if (!model.parameters().all_finite()) throw TrainingDiverged(step, "non-finite parameters");

      TrainRecord rec{step, epoch, metrics, p_tf,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
      result.schedule = {step, p_tf};
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) {
        log << nlohmann::json{{"step", rec.step},     {"epoch", rec.epoch},     {"loss", metrics.loss},
                              {"nll", metrics.nll},   {"kl", metrics.kl},       {"mse", metrics.mse},
                              {"p_tf", rec.p_tf},     {"wall_time", rec.wall_seconds}}
                   .dump()
            << '\n';
        log.flush();
      }
      if (hooks.on_step) hooks.on_step(rec);
      result.history.push_back(rec);
      if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%06ld", step + 1);
        save_checkpoint(model, hooks.checkpoint_dir / name, metadata(step + 1));
      }
    }
  }
  if (!hooks.checkpoint_dir.empty()) save_checkpoint(model, hooks.checkpoint_dir / "final", metadata(step));
  return result;
}

}  // namespace cchp
