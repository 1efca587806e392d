// SPDX-License-Identifier: Apache-2.0
#include "cchp/gesture_domain.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace cchp {

namespace {
constexpr std::array<std::string_view, 6> kAxisNames{"TX", "TY", "TZ", "RX", "RY", "RZ"};
}  // namespace

std::string_view axis_name(DominantAxis axis) { return kAxisNames[axis_index(axis)]; }

std::optional<DominantAxis> parse_axis(std::string_view name) {
  for (std::size_t i = 0; i < kAxisNames.size(); ++i) {
    if (kAxisNames[i] == name) return static_cast<DominantAxis>(i);
  }
  return std::nullopt;
}

std::vector<Violation> validate_clip(const Clip& clip, const ValidationLimits& limits) {
  std::vector<Violation> out;
  const std::size_t n_x = clip.gesture.size();
  const std::size_t n_y = clip.operation.size();
  if (clip.user_id.empty()) out.push_back({"user_id", std::nullopt, "user id is empty"});
  if (clip.clip_id.empty()) out.push_back({"clip_id", std::nullopt, "clip id is empty"});
  if (n_x == 0 || n_y == 0) out.push_back({"nonempty", std::nullopt, "empty sequence"});
  if (n_x != n_y) {
    out.push_back({"length mismatch", std::min(n_x, n_y),
                   "gesture has " + std::to_string(n_x) + " frames, operation has " +
                       std::to_string(n_y)});
  }
  if (clip.gesture.rate_hz != clip.operation.rate_hz || !(clip.gesture.rate_hz > 0.0)) {
    out.push_back({"rate", std::nullopt, "gesture and operation rates differ or are not positive"});
  }
  const double max_frames = clip.gesture.rate_hz * limits.max_seconds;
  if (static_cast<double>(std::max(n_x, n_y)) > max_frames + 1e-9) {
    out.push_back({"length exceeds 5 s", static_cast<std::size_t>(max_frames),
                   std::to_string(std::max(n_x, n_y)) + " frames at " +
                       format_real(clip.gesture.rate_hz) + " Hz"});
  }
  if (clip.active_dims.empty() || clip.active_dims.size() > 2) {
    out.push_back({"active_dims size", std::nullopt,
                   "expected 1 or 2 active dimensions, got " + std::to_string(clip.active_dims.size())});
  }
  for (std::size_t t = 0; t < n_x; ++t) {
    for (const auto& seg : clip.gesture.frames[t].segments) {
      if (!std::all_of(seg.begin(), seg.end(), [](float v) { return std::isfinite(v); })) {
        out.push_back({"finite gesture", t, "non-finite gesture feature"});
        break;
      }
    }
  }
  for (std::size_t t = 0; t < n_y; ++t) {
    const auto& v = clip.operation.frames[t].velocity;
    for (std::size_t d = 0; d < kOperationDim; ++d) {
      if (!std::isfinite(v[d])) {
        out.push_back({"finite operation", t, "non-finite velocity"});
        break;
      }
      const double bound = d < 3 ? limits.max_translation : limits.max_rotation;
      if (std::abs(v[d]) > bound) {
        out.push_back({"operation bound", t,
                       std::string(kAxisNames[d]) + " = " + format_real(v[d]) + " exceeds " +
                           format_real(bound)});
        break;
      }
    }
  }
  return out;
}

std::array<double, kOperationDim> mean_abs_velocity(const HandlingOperation& op) {
  if (op.frames.empty()) throw std::invalid_argument("empty sequence");
  std::array<double, kOperationDim> mean{};
  for (const auto& f : op.frames) {
    for (std::size_t d = 0; d < kOperationDim; ++d) mean[d] += std::abs(static_cast<double>(f.velocity[d]));
  }
  for (double& m : mean) m /= static_cast<double>(op.frames.size());
  return mean;
}

AxisSet active_dimensions(const HandlingOperation& op, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("active_dimensions: threshold must be positive");
  const auto mean = mean_abs_velocity(op);
  AxisSet out;
  for (std::size_t d = 0; d < kOperationDim; ++d) {
    if (mean[d] > threshold) out.insert(static_cast<DominantAxis>(d));
  }
  return out;
}

AxisSet active_dimensions(const HandlingOperation& op) {
  const auto mean = mean_abs_velocity(op);
  const double top = *std::max_element(mean.begin(), mean.end());
  if (top <= 0.0) return {};
  return active_dimensions(op, 0.25 * top);
}

Pose integrate_pose(const Pose& pose, const std::array<double, kOperationDim>& twist, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("integrate_pose: dt must be positive");
  if (!std::all_of(twist.begin(), twist.end(), [](double v) { return std::isfinite(v); })) {
    throw std::invalid_argument("integrate_pose: non-finite velocity");
  }
  Pose next = pose;
  next.position += Eigen::Vector3d(twist[0], twist[1], twist[2]) * dt;
  const Eigen::Vector3d omega(twist[3], twist[4], twist[5]);
  const double angle = omega.norm() * dt;
  if (angle > 0.0) {
    const Eigen::Quaterniond step(Eigen::AngleAxisd(angle, omega.normalized()));
    next.orientation = pose.orientation * step;
  }
  next.orientation.normalize();
  return next;
}

Pose integrate_pose(const Pose& pose, const OperationFrame& frame, double dt) {
  std::array<double, kOperationDim> twist{};
  for (std::size_t d = 0; d < kOperationDim; ++d) twist[d] = frame.velocity[d];
  return integrate_pose(pose, twist, dt);
}

std::string format_real(double value) {
  if (value == 0.0) value = 0.0;  // drop the sign of -0 so text round-trips are stable
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

std::string serialize_clip(const Clip& clip) {
  std::string s;
  s.reserve(64 + clip.size() * 300);
  s += "{\"user_id\":";
  s += nlohmann::json(clip.user_id).dump();
  s += ",\"clip_id\":";
  s += nlohmann::json(clip.clip_id).dump();
  s += ",\"rate_hz\":";
  s += format_real(clip.gesture.rate_hz);
  s += ",\"active_dims\":[";
  bool first = true;
  for (DominantAxis a : clip.active_dims) {
    if (!first) s += ',';
    first = false;
    s += '"';
    s += axis_name(a);
    s += '"';
  }
  s += "],\"frames_x\":[";
  for (std::size_t t = 0; t < clip.gesture.size(); ++t) {
    if (t) s += ',';
    s += '[';
    const auto& segs = clip.gesture.frames[t].segments;
    for (std::size_t i = 0; i < kNumSegments; ++i) {
      if (i) s += ',';
      s += '[';
      for (std::size_t j = 0; j < kSegmentFeatures; ++j) {
        if (j) s += ',';
        s += format_real(segs[i][j]);
      }
      s += ']';
    }
    s += ']';
  }
  s += "],\"frames_y\":[";
  for (std::size_t t = 0; t < clip.operation.size(); ++t) {
    if (t) s += ',';
    s += '[';
    for (std::size_t d = 0; d < kOperationDim; ++d) {
      if (d) s += ',';
      s += format_real(clip.operation.frames[t].velocity[d]);
    }
    s += ']';
  }
  s += "]}";
  return s;
}

namespace {

const nlohmann::json& require(const nlohmann::json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(line, field, "missing field");
  return *it;
}

float to_real(const nlohmann::json& v, std::size_t line, const std::string& field) {
  if (!v.is_number()) throw ParseError(line, field, "expected a number");
  return static_cast<float>(v.get<double>());
}

}  // namespace

Clip deserialize_clip(std::string_view record, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(record);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, "<record>", e.what());
  }
  if (!j.is_object()) throw ParseError(line, "<record>", "expected an object");

  Clip clip;
  const auto& uid = require(j, "user_id", line);
  if (!uid.is_string()) throw ParseError(line, "user_id", "expected a string");
  clip.user_id = uid.get<std::string>();
  const auto& cid = require(j, "clip_id", line);
  if (!cid.is_string()) throw ParseError(line, "clip_id", "expected a string");
  clip.clip_id = cid.get<std::string>();
  const auto& rate = require(j, "rate_hz", line);
  if (!rate.is_number() || !(rate.get<double>() > 0.0)) {
    throw ParseError(line, "rate_hz", "expected a positive number");
  }
  clip.gesture.rate_hz = clip.operation.rate_hz = rate.get<double>();

  const auto& dims = require(j, "active_dims", line);
  if (!dims.is_array()) throw ParseError(line, "active_dims", "expected an array");
  for (const auto& d : dims) {
    const auto axis = d.is_string() ? parse_axis(d.get<std::string>()) : std::nullopt;
    if (!axis) throw ParseError(line, "active_dims", "unknown axis " + d.dump());
    clip.active_dims.insert(*axis);
  }

  const auto& fx = require(j, "frames_x", line);
  if (!fx.is_array()) throw ParseError(line, "frames_x", "expected an array");
  clip.gesture.frames.resize(fx.size());
  for (std::size_t t = 0; t < fx.size(); ++t) {
    const std::string where = "frames_x[" + std::to_string(t) + "]";
    const auto& frame = fx[t];
    if (!frame.is_array() || frame.size() != kNumSegments) {
      throw ParseError(line, where, "expected 6 segments");
    }
    for (std::size_t i = 0; i < kNumSegments; ++i) {
      const auto& seg = frame[i];
      if (!seg.is_array() || seg.size() != kSegmentFeatures) {
        throw ParseError(line, where + "[" + std::to_string(i) + "]", "expected 6 features");
      }
      for (std::size_t k = 0; k < kSegmentFeatures; ++k) {
        clip.gesture.frames[t].segments[i][k] = to_real(seg[k], line, where);
      }
    }
  }

  const auto& fy = require(j, "frames_y", line);
  if (!fy.is_array()) throw ParseError(line, "frames_y", "expected an array");
  clip.operation.frames.resize(fy.size());
  for (std::size_t t = 0; t < fy.size(); ++t) {
    const std::string where = "frames_y[" + std::to_string(t) + "]";
    const auto& frame = fy[t];
    if (!frame.is_array() || frame.size() != kOperationDim) {
      throw ParseError(line, where, "expected 6 velocity components");
    }
    for (std::size_t d = 0; d < kOperationDim; ++d) {
      clip.operation.frames[t].velocity[d] = to_real(frame[d], line, where);
    }
  }
  return clip;
}

void write_clips(std::ostream& out, const std::vector<Clip>& clips) {
  for (const auto& c : clips) out << serialize_clip(c) << '\n';
}

std::vector<Clip> read_clips(std::istream& in) {
  std::vector<Clip> clips;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    clips.push_back(deserialize_clip(line, n));
  }
  return clips;
}

void write_clip_file(const std::string& path, const std::vector<Clip>& clips) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  write_clips(out, clips);
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Clip> read_clip_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return read_clips(in);
}

namespace {

void collect_users(const std::vector<Clip>& clips, std::vector<std::string>& users) {
  for (const Clip& c : clips) {
    if (std::find(users.begin(), users.end(), c.user_id) == users.end()) users.push_back(c.user_id);
  }
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  write_clip_file((root / "train.jsonl").string(), data.train);
  write_clip_file((root / "test_in_sample.jsonl").string(), data.test_in_sample);
  write_clip_file((root / "test_out_sample.jsonl").string(), data.test_out_sample);
}

Dataset read_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  Dataset d;
  d.train = read_clip_file((root / "train.jsonl").string());
  d.test_in_sample = read_clip_file((root / "test_in_sample.jsonl").string());
  d.test_out_sample = read_clip_file((root / "test_out_sample.jsonl").string());
  collect_users(d.train, d.users_in);
  collect_users(d.test_in_sample, d.users_in);
  collect_users(d.test_out_sample, d.users_out);
  return d;
}

}  // namespace cchp
