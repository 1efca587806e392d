// SPDX-License-Identifier: Apache-2.0
/**
 * @file   realtime_service.hpp
 * @brief  Streaming inference sessions and the JSON message protocol.
 *
 * A Session decodes one gesture frame per push, keeps a sliding window of
 * the most recent raw mean predictions and, on every k-th frame (k = input
 * rate / emit rate), emits the clamped window mean as a velocity command. The
 * virtual workpiece pose integrates each command over one emission period.
 *
 * ProtocolHandler maps text messages to session calls. It owns at most one
 * session and never throws on bad input; errors become "error" replies.
 */
#pragma once

#include "cchp/gesture_domain.hpp"
#include "cchp/model.hpp"
#include "cchp/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cchp {

using Twist = std::array<double, kOperationDim>;

struct SessionConfig {
  std::string checkpoint;                // resolved by the caller
  std::vector<std::string> context_ids;  // clip ids in the context database
  double input_rate_hz = 10.0;
  double emit_rate_hz = 2.0;
  int window = 10;
  double clamp_translation = 0.10;  // m/s
  double clamp_rotation = 0.30;     // rad/s
  std::uint64_t seed = 0;

  void validate() const;
  int emit_every() const;
  double emit_period() const { return 1.0 / emit_rate_hz; }
};

void to_json(nlohmann::json& j, const SessionConfig& c);
/// Fields absent from j keep their current values.
void from_json(const nlohmann::json& j, SessionConfig& c);

/// Structured failure with a stable machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(std::string code, const std::string& detail)
      : std::runtime_error(detail), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

/// Moving average over the last `window` raw predictions, emitted on every
/// `every`-th push and clamped componentwise.
class PostProcessor {
 public:
  PostProcessor(int window, int every, double clamp_translation, double clamp_rotation);

  std::optional<Twist> push(const Twist& raw);
  void reset();

  const std::deque<Twist>& buffer() const { return buffer_; }
  long pushes() const { return count_; }

 private:
  std::size_t window_;
  long every_;
  Twist limit_{};
  std::deque<Twist> buffer_;
  long count_ = 0;
};

struct Command {
  long t = 0;
  Twist velocity{};
  Pose pose;
};

struct FrameResult {
  long t = 0;
  StepPrediction raw;
  std::optional<Command> command;
  double latency_ms = 0.0;
};

class Session {
 public:
  /// Encodes the context once and samples the initial z from the prior.
  Session(std::shared_ptr<const CchpModel> model, std::vector<Clip> context, SessionConfig cfg);

  FrameResult push_frame(const GestureFrame& x, std::optional<long> t = std::nullopt);

  void pause();
  /// Resamples z from the session's own stream. Returns false (no-op) when not paused.
  bool resume();
  /// Same, drawing z from the caller's stream.
  bool resume(Rng& rng);

  bool paused() const { return paused_; }
  const Vector& z() const { return z_; }
  const ContextEncoding& context() const { return encoding_; }
  const std::vector<Clip>& context_clips() const { return clips_; }
  const Pose& pose() const { return pose_; }
  const PostProcessor& post() const { return post_; }
  const SessionConfig& config() const { return cfg_; }
  long frames() const { return frames_; }
  std::size_t encode_count() const { return encode_count_; }

 private:
  void reset_stream();

  std::shared_ptr<const CchpModel> model_;
  std::vector<Clip> clips_;
  SessionConfig cfg_;
  ContextEncoding encoding_;
  std::size_t encode_count_ = 0;
  Rng rng_;
  Vector z_;
  RecurrentState state_;
  Vector y_prev_;
  PostProcessor post_;
  bool paused_ = false;
  long frames_ = 0;
  Pose pose_;
};

/// Parses {"segments": [[6 reals] x 6]} (or a bare array) into a frame.
GestureFrame parse_frame(const nlohmann::json& segments);

/// Resolves checkpoints and context clips for incoming "open" requests.
struct ServiceResources {
  std::function<std::shared_ptr<const CchpModel>(const std::string& checkpoint)> load_model;
  std::vector<Clip> context_db;
  SessionConfig defaults;
};

class ProtocolHandler {
 public:
  explicit ProtocolHandler(const ServiceResources& resources, std::string session_id = "s0");

  /// Handles one client message and returns the replies in order.
  std::vector<nlohmann::json> handle(const std::string& text);
  std::vector<nlohmann::json> handle(const nlohmann::json& message);

  bool closed() const { return closed_; }
  const Session* session() const { return session_.get(); }

 private:
  std::vector<nlohmann::json> open(const nlohmann::json& message);

  const ServiceResources& resources_;
  std::string session_id_;
  std::unique_ptr<Session> session_;
  bool closed_ = false;
};

nlohmann::json error_message(const std::string& code, const std::string& detail);

}  // namespace cchp
