// SPDX-License-Identifier: Apache-2.0
#include "cchp/gesture_domain.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>

using namespace cchp;

namespace {

Clip small_clip() {
  Clip c;
  c.user_id = "u00";
  c.clip_id = "u00-c000";
  c.active_dims = {DominantAxis::TX, DominantAxis::RZ};
  for (int t = 0; t < 4; ++t) {
    GestureFrame g;
    for (std::size_t i = 0; i < kGestureDim; ++i) g.at(i) = 0.01f * static_cast<float>(i) - 0.1f * t;
    OperationFrame y;
    y.velocity = {0.1f * t, 0, 0, 0, 0, -0.05f * t};
    c.gesture.frames.push_back(g);
    c.operation.frames.push_back(y);
  }
  return c;
}

bool has(const std::vector<Violation>& v, const std::string& name) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.invariant == name; });
}

}  // namespace

TEST(Clip, SerializationRoundTripIsIdentity) {
  const Clip c = small_clip();
  const std::string line = serialize_clip(c);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const Clip back = deserialize_clip(line);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_clip(back), line);
}

TEST(Clip, GeneratedClipsRoundTrip) {
  const auto& d = cchp::testing::default_dataset();
  std::stringstream ss;
  write_clips(ss, d.train);
  const auto back = read_clips(ss);
  ASSERT_EQ(back.size(), d.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) ASSERT_EQ(back[i], d.train[i]) << i;
}

TEST(Clip, DatasetDirectoryRoundTrip) {
  const auto& d = cchp::testing::default_dataset();
  const auto dir = std::filesystem::temp_directory_path() / "cchp_dataset_test";
  std::filesystem::remove_all(dir);
  write_dataset(dir.string(), d);
  const Dataset back = read_dataset(dir.string());
  EXPECT_EQ(back.train, d.train);
  EXPECT_EQ(back.test_in_sample, d.test_in_sample);
  EXPECT_EQ(back.test_out_sample, d.test_out_sample);
  EXPECT_EQ(back.users_in, d.users_in);
  EXPECT_EQ(back.users_out, d.users_out);
  std::filesystem::remove_all(dir);
}

TEST(Clip, ParseErrorsNameTheField) {
  const std::string good = serialize_clip(small_clip());
  auto expect_field = [](const std::string& text, const std::string& field) {
    try {
      deserialize_clip(text, 7);
      FAIL() << "accepted: " << text;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.field().substr(0, field.size()), field);
      EXPECT_EQ(e.line(), 7u);
    }
  };
  expect_field("{not json", "<record>");
  nlohmann::json j = nlohmann::json::parse(good);
  j.erase("user_id");
  expect_field(j.dump(), "user_id");
  j = nlohmann::json::parse(good);
  j["active_dims"] = {"TW"};
  expect_field(j.dump(), "active_dims");
  j = nlohmann::json::parse(good);
  j["frames_x"][1].erase(j["frames_x"][1].begin());
  expect_field(j.dump(), "frames_x");
  j = nlohmann::json::parse(good);
  j["frames_y"][0][2] = "fast";
  expect_field(j.dump(), "frames_y");
}

TEST(Clip, ValidationListsEveryViolation) {
  EXPECT_TRUE(validate_clip(small_clip()).empty());
  Clip c = small_clip();
  c.operation.frames.pop_back();
  c.active_dims.clear();
  c.gesture.frames[0].at(3) = std::numeric_limits<float>::quiet_NaN();
  const auto v = validate_clip(c);
  EXPECT_TRUE(has(v, "length mismatch"));
  EXPECT_TRUE(has(v, "active_dims size"));
  EXPECT_TRUE(has(v, "finite gesture"));

  Clip longer = small_clip();
  longer.gesture.frames.resize(51);
  longer.operation.frames.resize(51);
  EXPECT_TRUE(has(validate_clip(longer), "length exceeds 5 s"));
  Clip fast = small_clip();
  fast.operation.frames[1].velocity[0] = 2.0f;
  EXPECT_TRUE(has(validate_clip(fast), "operation bound"));
}

TEST(Clip, ActiveDimensions) {
  HandlingOperation op;
  for (int t = 0; t < 10; ++t) {
    OperationFrame f;
    f.velocity = {0.2f, 0.001f, 0.0f, 0.0f, 0.1f, 0.0f};
    op.frames.push_back(f);
  }
  EXPECT_EQ(active_dimensions(op), (AxisSet{DominantAxis::TX, DominantAxis::RY}));
  EXPECT_EQ(active_dimensions(op, 0.15), (AxisSet{DominantAxis::TX}));
  EXPECT_EQ(parse_axis("RZ"), DominantAxis::RZ);
  EXPECT_FALSE(parse_axis("QQ").has_value());
}

TEST(Pose, IntegrationOfTranslationAndRotation) {
  Pose p;
  p = integrate_pose(p, std::array<double, 6>{0.1, 0, 0, 0, 0, 0}, 0.5);
  EXPECT_NEAR(p.position.x(), 0.05, 1e-15);
  // quarter turn about z in 5 steps of pi/10
  for (int i = 0; i < 5; ++i) p = integrate_pose(p, std::array<double, 6>{0, 0, 0, 0, 0, std::numbers::pi / 5}, 0.5);
  const Eigen::Vector3d x = p.orientation * Eigen::Vector3d::UnitX();
  EXPECT_NEAR(x.y(), 1.0, 1e-12);
  EXPECT_NEAR(p.orientation.norm(), 1.0, 1e-12);
  EXPECT_THROW(integrate_pose(p, std::array<double, 6>{}, 0.0), std::invalid_argument);
}
