// SPDX-License-Identifier: Apache-2.0
#include "cchp/synthetic_users.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <map>
#include <set>

using namespace cchp;
using cchp::testing::default_dataset;

TEST(Dataset, SplitCountsPerUser) {
  const Dataset& d = default_dataset();
  ASSERT_EQ(d.users_in.size(), 10u);
  ASSERT_EQ(d.users_out.size(), 5u);
  EXPECT_EQ(d.train.size(), 360u);
  EXPECT_EQ(d.test_in_sample.size(), 360u);
  EXPECT_EQ(d.test_out_sample.size(), 360u);
  for (const auto& u : d.users_in) {
    std::set<AxisSet> train_pairs;
    int tr1 = 0, tr2 = 0, te1 = 0, te2 = 0, te2_seen = 0;
    for (const Clip& c : d.train) {
      if (c.user_id != u) continue;
      (c.active_dims.size() == 1 ? tr1 : tr2)++;
      if (c.active_dims.size() == 2) train_pairs.insert(c.active_dims);
    }
    for (const Clip& c : d.test_in_sample) {
      if (c.user_id != u) continue;
      (c.active_dims.size() == 1 ? te1 : te2)++;
      if (c.active_dims.size() == 2 && train_pairs.contains(c.active_dims)) ++te2_seen;
    }
    EXPECT_EQ(tr1 + tr2, 36) << u;
    EXPECT_EQ(te1 + te2, 36) << u;
    EXPECT_EQ(tr1, 12) << u;
    EXPECT_EQ(te1, 12) << u;
    EXPECT_EQ(tr2, 24) << u;
    EXPECT_EQ(te2, 24) << u;
    EXPECT_EQ(te2_seen, 12) << u;
  }
  for (const auto& u : d.users_out) {
    EXPECT_EQ(std::count_if(d.test_out_sample.begin(), d.test_out_sample.end(),
                            [&](const Clip& c) { return c.user_id == u; }),
              72);
  }
}

TEST(Dataset, ClipsAreValidAndUniquelyNamed) {
  const Dataset& d = default_dataset();
  std::set<std::string> ids;
  for (const auto* split : {&d.train, &d.test_in_sample, &d.test_out_sample}) {
    for (const Clip& c : *split) {
      const auto v = validate_clip(c);
      EXPECT_TRUE(v.empty()) << c.clip_id << ": " << (v.empty() ? "" : v.front().detail);
      EXPECT_GE(c.size(), 20u);
      EXPECT_LE(c.size(), 50u);
      EXPECT_TRUE(ids.insert(c.clip_id).second) << c.clip_id;
      EXPECT_EQ(active_dimensions(c.operation), c.active_dims) << c.clip_id;
    }
  }
}

TEST(Dataset, SingleAxisClipsCoverEveryAxisInBothSplits) {
  const Dataset& d = default_dataset();
  for (const auto* split : {&d.train, &d.test_in_sample}) {
    std::map<std::pair<std::string, DominantAxis>, int> n;
    for (const Clip& c : *split) {
      if (c.active_dims.size() == 1) ++n[{c.user_id, *c.active_dims.begin()}];
    }
    for (const auto& u : d.users_in) {
      for (DominantAxis a : kAllAxes) EXPECT_EQ((n[{u, a}]), 2);
    }
  }
}

TEST(Dataset, SeedDeterminesOutput) {
  GenConfig c;
  c.n_in_sample_users = 2;
  c.n_out_sample_users = 1;
  const auto a = build_dataset(c).dataset;
  const auto b = build_dataset(c).dataset;
  EXPECT_EQ(a.train, b.train);
  c.seed = 8;
  EXPECT_NE(build_dataset(c).dataset.train, a.train);
}

TEST(Dataset, ConfigValidationAndJson) {
  GenConfig c;
  c.clips_per_user = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  GenConfig d;
  nlohmann::json j = d;
  j["seed"] = 99;
  from_json(j, d);
  EXPECT_EQ(d.seed, 99u);
  j["colour"] = 1;
  EXPECT_THROW(from_json(j, d), std::invalid_argument);
}

TEST(Users, StylesDifferAcrossUsers) {
  GenConfig c;
  Rng r1(1), r2(2);
  const UserStyle a = sample_user_style("a", r1, c), b = sample_user_style("b", r2, c);
  ASSERT_EQ(a.templates.size(), 6u);
  int differing = 0;
  for (DominantAxis axis : kAllAxes) differing += a.templates.at(axis).direction != b.templates.at(axis).direction;
  EXPECT_EQ(differing, 6);
}

TEST(Users, GestureIsBiasPlusPerAxisResponse) {
  // With noise disabled the rendered gesture for a two-axis operation equals the
  // sum of the single-axis renders minus one copy of the resting bias.
  GenConfig c;
  c.style_noise = 0.0;
  c.label_noise = 0.0;
  Rng rs(3);
  UserStyle style = sample_user_style("u", rs, c);
  style.style_noise = 0.0;
  Rng ro(4);
  const DominantSample s = sample_dominant_operation(ro, c, AxisSet{DominantAxis::TY, DominantAxis::RX});
  HandlingOperation ty = s.intended, rx = s.intended, none = s.intended;
  for (std::size_t t = 0; t < s.intended.size(); ++t) {
    ty.frames[t].velocity = {0, s.intended.frames[t].velocity[1], 0, 0, 0, 0};
    rx.frames[t].velocity = {0, 0, 0, s.intended.frames[t].velocity[3], 0, 0};
    none.frames[t].velocity = {};
  }
  Rng g(5);
  const auto both = render_gesture(style, s.intended, g);
  const auto a = render_gesture(style, ty, g);
  const auto b = render_gesture(style, rx, g);
  const auto z = render_gesture(style, none, g);
  for (std::size_t t = 0; t < both.size(); ++t) {
    for (std::size_t i = 0; i < kGestureDim; ++i) {
      ASSERT_NEAR(both.frames[t].at(i), a.frames[t].at(i) + b.frames[t].at(i) - z.frames[t].at(i), 1e-5);
    }
  }
}

TEST(Users, ShuffledMotionsShareOneVocabulary) {
  GenConfig c;
  c.shuffle_motions = true;
  Rng r1(1), r2(2);
  const UserStyle a = sample_user_style("a", r1, c), b = sample_user_style("b", r2, c);
  EXPECT_EQ(a.resting_bias, b.resting_bias);
  std::set<std::size_t> motions;
  bool reassigned = false;
  for (DominantAxis axis : kAllAxes) {
    const AxisTemplate& ta = a.templates.at(axis);
    motions.insert(ta.motion);
    reassigned = reassigned || ta.motion != b.templates.at(axis).motion;
    // The same motion moves the same segments for every user.
    for (DominantAxis other : kAllAxes) {
      const AxisTemplate& tb = b.templates.at(other);
      if (tb.motion == ta.motion) EXPECT_EQ(tb.moving, ta.moving);
    }
  }
  EXPECT_EQ(motions.size(), 6u);
  EXPECT_TRUE(reassigned);
  c.shuffle_motions = false;
  Rng r3(1);
  const UserStyle d = sample_user_style("a", r3, c);
  for (DominantAxis axis : kAllAxes) EXPECT_EQ(d.templates.at(axis).motion, axis_index(axis));
}
