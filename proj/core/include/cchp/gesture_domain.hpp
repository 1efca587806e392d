// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gesture_domain.hpp
 * @brief  Gesture and handling-operation vocabulary: frames, clips, poses.
 *
 * Frame features are stored in single precision. The clip file format writes
 * reals with 9 significant digits, which round-trips every float exactly.
 */
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cchp {

inline constexpr std::size_t kNumSegments = 6;
inline constexpr std::size_t kSegmentFeatures = 6;
inline constexpr std::size_t kGestureDim = kNumSegments * kSegmentFeatures;  // 36
inline constexpr std::size_t kOperationDim = 6;

/// One hand command sample: five fingers plus the palm, each carrying
/// translational velocity (features 0-2) and direction change rate (3-5).
struct GestureFrame {
  std::array<std::array<float, kSegmentFeatures>, kNumSegments> segments{};

  float& at(std::size_t flat) { return segments[flat / kSegmentFeatures][flat % kSegmentFeatures]; }
  float at(std::size_t flat) const { return segments[flat / kSegmentFeatures][flat % kSegmentFeatures]; }
  bool operator==(const GestureFrame&) const = default;
};

/// Cartesian velocity (vx, vy, vz, wx, wy, wz).
struct OperationFrame {
  std::array<float, kOperationDim> velocity{};
  bool operator==(const OperationFrame&) const = default;
};

struct DynamicGesture {
  std::vector<GestureFrame> frames;
  double rate_hz = 10.0;
  std::size_t size() const { return frames.size(); }
  bool operator==(const DynamicGesture&) const = default;
};

struct HandlingOperation {
  std::vector<OperationFrame> frames;
  double rate_hz = 10.0;
  std::size_t size() const { return frames.size(); }
  bool operator==(const HandlingOperation&) const = default;
};

enum class DominantAxis { TX = 0, TY, TZ, RX, RY, RZ };
inline constexpr std::array<DominantAxis, 6> kAllAxes{DominantAxis::TX, DominantAxis::TY,
                                                      DominantAxis::TZ, DominantAxis::RX,
                                                      DominantAxis::RY, DominantAxis::RZ};

using AxisSet = std::set<DominantAxis>;

std::string_view axis_name(DominantAxis axis);
std::optional<DominantAxis> parse_axis(std::string_view name);
inline std::size_t axis_index(DominantAxis axis) { return static_cast<std::size_t>(axis); }
inline bool is_rotation(DominantAxis axis) { return axis_index(axis) >= 3; }

struct Clip {
  std::string user_id;
  std::string clip_id;
  DynamicGesture gesture;
  HandlingOperation operation;
  AxisSet active_dims;

  std::size_t size() const { return gesture.size(); }
  bool operator==(const Clip&) const = default;
};

struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
};

struct Dataset {
  std::vector<Clip> train;
  std::vector<Clip> test_in_sample;
  std::vector<Clip> test_out_sample;
  std::vector<std::string> users_in;
  std::vector<std::string> users_out;
};

struct Violation {
  std::string invariant;
  std::optional<std::size_t> frame;
  std::string detail;
};

struct ValidationLimits {
  double max_seconds = 5.0;
  double max_translation = 1.0;  // m/s
  double max_rotation = 3.15;    // rad/s
};

/// Lists every violated Clip invariant; never throws.
std::vector<Violation> validate_clip(const Clip& clip, const ValidationLimits& limits = {});

/// Axes whose mean absolute velocity over the clip exceeds threshold.
AxisSet active_dimensions(const HandlingOperation& op, double threshold);
/// Default rule: threshold = 25% of the largest per-axis mean magnitude.
AxisSet active_dimensions(const HandlingOperation& op);
/// Per-axis mean absolute velocity.
std::array<double, kOperationDim> mean_abs_velocity(const HandlingOperation& op);

/// First-order body-frame exponential update of a pose by a twist over dt.
Pose integrate_pose(const Pose& pose, const OperationFrame& frame, double dt);
Pose integrate_pose(const Pose& pose, const std::array<double, kOperationDim>& twist, double dt);

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::string field, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ", field '" + field + "': " + what),
        line_(line),
        field_(std::move(field)) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// One-line canonical record (no trailing newline).
std::string serialize_clip(const Clip& clip);
/// Parses one record; line is used for error locations.
Clip deserialize_clip(std::string_view record, std::size_t line = 1);

void write_clips(std::ostream& out, const std::vector<Clip>& clips);
std::vector<Clip> read_clips(std::istream& in);
void write_clip_file(const std::string& path, const std::vector<Clip>& clips);
std::vector<Clip> read_clip_file(const std::string& path);

/// Dataset directory layout: train.jsonl, test_in_sample.jsonl, test_out_sample.jsonl.
/// User lists are recovered from the clips in first-seen order.
void write_dataset(const std::string& dir, const Dataset& data);
Dataset read_dataset(const std::string& dir);

/// Formats a real with 9 significant digits, as used by every text artifact.
std::string format_real(double value);

}  // namespace cchp
