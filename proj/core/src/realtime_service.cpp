// SPDX-License-Identifier: Apache-2.0
#include "cchp/realtime_service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cchp {

// ---- configuration --------------------------------------------------------

void SessionConfig::validate() const {
  if (!(input_rate_hz > 0.0)) throw std::invalid_argument("SessionConfig.input_rate_hz: must be positive");
  if (!(emit_rate_hz > 0.0)) throw std::invalid_argument("SessionConfig.emit_rate_hz: must be positive");
  const double ratio = input_rate_hz / emit_rate_hz;
  if (ratio < 1.0 || std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw std::invalid_argument("SessionConfig.emit_rate_hz: must divide input_rate_hz");
  }
  if (window < 1) throw std::invalid_argument("SessionConfig.window: must be >= 1");
  if (!(clamp_translation > 0.0)) throw std::invalid_argument("SessionConfig.clamp_translation: must be positive");
  if (!(clamp_rotation > 0.0)) throw std::invalid_argument("SessionConfig.clamp_rotation: must be positive");
}

int SessionConfig::emit_every() const { return static_cast<int>(std::lround(input_rate_hz / emit_rate_hz)); }

void to_json(nlohmann::json& j, const SessionConfig& c) {
  j = nlohmann::json{{"checkpoint", c.checkpoint},
                     {"context_ids", c.context_ids},
                     {"input_rate_hz", c.input_rate_hz},
                     {"emit_rate_hz", c.emit_rate_hz},
                     {"window", c.window},
                     {"clamp_translation", c.clamp_translation},
                     {"clamp_rotation", c.clamp_rotation},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SessionConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("SessionConfig: expected an object");
  static const std::vector<std::string> known{"checkpoint", "context_ids", "input_rate_hz", "emit_rate_hz",
                                              "window",     "clamp_translation", "clamp_rotation", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("SessionConfig." + key + ": unknown field");
    }
  }
  auto get = [&]<typename T>(const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("SessionConfig.") + key + ": wrong type");
    }
  };
  get("checkpoint", c.checkpoint);
  get("context_ids", c.context_ids);
  get("input_rate_hz", c.input_rate_hz);
  get("emit_rate_hz", c.emit_rate_hz);
  get("window", c.window);
  get("clamp_translation", c.clamp_translation);
  get("clamp_rotation", c.clamp_rotation);
  get("seed", c.seed);
}

// ---- post-processing ------------------------------------------------------

PostProcessor::PostProcessor(int window, int every, double clamp_translation, double clamp_rotation)
    : window_(static_cast<std::size_t>(window)), every_(every) {
  if (window < 1 || every < 1) throw std::invalid_argument("PostProcessor: window and period must be >= 1");
  for (std::size_t d = 0; d < kOperationDim; ++d) limit_[d] = d < 3 ? clamp_translation : clamp_rotation;
}

std::optional<Twist> PostProcessor::push(const Twist& raw) {
  buffer_.push_back(raw);
  if (buffer_.size() > window_) buffer_.pop_front();
  ++count_;
  if (count_ % every_ != 0) return std::nullopt;
  Twist out{};
  for (const Twist& v : buffer_) {
    for (std::size_t d = 0; d < kOperationDim; ++d) out[d] += v[d];
  }
  const double n = static_cast<double>(buffer_.size());
  for (std::size_t d = 0; d < kOperationDim; ++d) out[d] = std::clamp(out[d] / n, -limit_[d], limit_[d]);
  return out;
}

void PostProcessor::reset() {
  buffer_.clear();
  count_ = 0;
}

// ---- session --------------------------------------------------------------

Session::Session(std::shared_ptr<const CchpModel> model, std::vector<Clip> context, SessionConfig cfg)
    : model_(std::move(model)),
      clips_(std::move(context)),
      cfg_(std::move(cfg)),
      rng_(cfg_.seed),
      post_(std::max(cfg_.window, 1), std::max(cfg_.emit_every(), 1), cfg_.clamp_translation, cfg_.clamp_rotation) {
  cfg_.validate();
  if (!model_) throw ServiceError("checkpoint", "no model loaded");
  if (!model_->uses_context()) throw ServiceError("checkpoint", "model does not take a context");
  if (clips_.empty()) throw ServiceError("context_required", "context required");
  encoding_ = encode_latent(*model_, clips_);
  ++encode_count_;
  z_ = sample_latent(encoding_.latent, rng_);
  reset_stream();
}

void Session::reset_stream() {
  state_ = zero_state(*model_);
  y_prev_ = Vector::Zero(model_->config().op_dim);
  post_.reset();
}

FrameResult Session::push_frame(const GestureFrame& x, std::optional<long> t) {
  if (paused_) throw ServiceError("session_paused", "session paused");
  const auto start = std::chrono::steady_clock::now();
  FrameResult r;
  r.t = t.value_or(frames_);
  r.raw = decoder_step(*model_, x, y_prev_, state_, encoding_, z_);
  state_ = r.raw.state;
  y_prev_ = r.raw.mean;
  ++frames_;
  Twist raw{};
  for (std::size_t d = 0; d < kOperationDim; ++d) raw[d] = r.raw.mean(static_cast<Eigen::Index>(d));
  if (auto v = post_.push(raw)) {
    pose_ = integrate_pose(pose_, *v, cfg_.emit_period());
    r.command = Command{r.t, *v, pose_};
  }
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

void Session::pause() { paused_ = true; }

bool Session::resume() { return resume(rng_); }

bool Session::resume(Rng& rng) {
  if (!paused_) return false;
  z_ = sample_latent(encoding_.latent, rng);
  reset_stream();
  paused_ = false;
  return true;
}

// ---- protocol -------------------------------------------------------------

nlohmann::json error_message(const std::string& code, const std::string& detail) {
  return {{"type", "error"}, {"code", code}, {"detail", detail}};
}

GestureFrame parse_frame(const nlohmann::json& segments) {
  if (!segments.is_array() || segments.size() != kNumSegments) {
    throw ServiceError("bad_frame", "expected " + std::to_string(kNumSegments) + " segments, got " +
                                        (segments.is_array() ? std::to_string(segments.size()) : "non-array"));
  }
  GestureFrame f;
  for (std::size_t s = 0; s < kNumSegments; ++s) {
    const auto& seg = segments[s];
    if (!seg.is_array() || seg.size() != kSegmentFeatures) {
      throw ServiceError("bad_frame", "segment " + std::to_string(s) + ": expected " +
                                          std::to_string(kSegmentFeatures) + " features");
    }
    for (std::size_t k = 0; k < kSegmentFeatures; ++k) {
      if (!seg[k].is_number()) throw ServiceError("bad_frame", "segment " + std::to_string(s) + ": non-numeric feature");
      const double v = seg[k].get<double>();
      if (!std::isfinite(v)) throw ServiceError("bad_frame", "segment " + std::to_string(s) + ": non-finite feature");
      f.segments[s][k] = static_cast<float>(v);
    }
  }
  return f;
}

namespace {

nlohmann::json to_array(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

ProtocolHandler::ProtocolHandler(const ServiceResources& resources, std::string session_id)
    : resources_(resources), session_id_(std::move(session_id)) {}

std::vector<nlohmann::json> ProtocolHandler::handle(const std::string& text) {
  nlohmann::json message;
  try {
    message = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    return {error_message("bad_message", std::string("invalid JSON: ") + e.what())};
  }
  return handle(message);
}

std::vector<nlohmann::json> ProtocolHandler::open(const nlohmann::json& message) {
  SessionConfig cfg = resources_.defaults;
  if (message.contains("config")) from_json(message.at("config"), cfg);
  cfg.validate();
  std::vector<Clip> context;
  for (const auto& id : cfg.context_ids) {
    auto it = std::find_if(resources_.context_db.begin(), resources_.context_db.end(),
                           [&](const Clip& c) { return c.clip_id == id; });
    if (it == resources_.context_db.end()) throw ServiceError("unknown_clip", "context clip not found: " + id);
    context.push_back(*it);
  }
  if (context.empty()) throw ServiceError("context_required", "context required");
  if (!resources_.load_model) throw ServiceError("checkpoint", "no model loader configured");
  std::shared_ptr<const CchpModel> model;
  try {
    model = resources_.load_model(cfg.checkpoint);
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError("checkpoint", e.what());
  }
  session_ = std::make_unique<Session>(std::move(model), std::move(context), cfg);
  return {{{"type", "opened"}, {"session_id", session_id_}, {"n_context_frames", session_->context().frames()}}};
}

std::vector<nlohmann::json> ProtocolHandler::handle(const nlohmann::json& message) {
  try {
    if (!message.is_object() || !message.contains("type") || !message.at("type").is_string()) {
      return {error_message("bad_message", "message must be an object with a string \"type\"")};
    }
    const std::string type = message.at("type").get<std::string>();
    if (closed_) return {error_message("closed", "session closed")};
    if (type == "open") {
      if (session_) return {error_message("already_open", "session already open")};
      return open(message);
    }
    if (type == "close") {
      closed_ = true;
      session_.reset();
      return {{{"type", "closed"}}};
    }
    if (!session_) return {error_message("not_open", "no open session")};
    if (type == "frame") {
      if (!message.contains("segments")) throw ServiceError("bad_frame", "frame without segments");
      std::optional<long> t;
      if (message.contains("t")) {
        if (!message.at("t").is_number_integer()) throw ServiceError("bad_frame", "t must be an integer");
        t = message.at("t").get<long>();
      }
      const GestureFrame x = parse_frame(message.at("segments"));
      const FrameResult r = session_->push_frame(x, t);
      std::vector<nlohmann::json> out;
      out.push_back({{"type", "raw"},
                     {"t", r.t},
                     {"mean", to_array(r.raw.mean)},
                     {"var", to_array(r.raw.var)},
                     {"attention", to_array(r.raw.attention)},
                     {"latency_ms", r.latency_ms}});
      if (r.command) {
        const auto& q = r.command->pose.orientation;
        const auto& p = r.command->pose.position;
        out.push_back({{"type", "command"},
                       {"t", r.command->t},
                       {"velocity", r.command->velocity},
                       {"pose",
                        {{"position", {p.x(), p.y(), p.z()}}, {"quaternion", {q.w(), q.x(), q.y(), q.z()}}}}});
      }
      return out;
    }
    if (type == "pause") {
      session_->pause();
      return {{{"type", "paused"}}};
    }
    if (type == "resume") {
      if (!session_->resume()) {
        return {{{"type", "resumed"}, {"z_resampled", false}, {"warning", "session was not paused"}}};
      }
      return {{{"type", "resumed"}, {"z_resampled", true}}};
    }
    return {error_message("bad_message", "unknown message type: " + type)};
  } catch (const ServiceError& e) {
    return {error_message(e.code(), e.what())};
  } catch (const std::invalid_argument& e) {
    return {error_message("bad_config", e.what())};
  } catch (const std::exception& e) {
    return {error_message("internal", e.what())};
  }
}

}  // namespace cchp
