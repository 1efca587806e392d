// SPDX-License-Identifier: Apache-2.0
#include "cchp/evaluation.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace cchp;
using cchp::testing::default_dataset;

TEST(Settings, NamesRoundTrip) {
  for (TestSetting s : kAllSettings) EXPECT_EQ(parse_setting(setting_name(s)), s);
  EXPECT_THROW(parse_setting("DpUx"), std::invalid_argument);
}

TEST(Noise, SweepLevels) {
  const auto levels = default_noise_levels();
  ASSERT_EQ(levels.size(), 11u);
  EXPECT_EQ(levels[0].sigma_r, 0.0);
  EXPECT_EQ(levels[0].sigma_t, 0.0);
  EXPECT_NEAR(levels[10].sigma_r, 0.1, 1e-15);
  EXPECT_NEAR(levels[10].sigma_t, 0.05, 1e-15);
  EXPECT_NEAR(levels[4].sigma_r, 0.04, 1e-15);
}

TEST(Noise, GestureNoiseStatistics) {
  DynamicGesture x;
  x.frames.resize(4000);
  Rng rng(3);
  const DynamicGesture y = add_gesture_noise(x, 0.05, 0.02, rng);
  double st = 0, sr = 0;
  for (const auto& f : y.frames) {
    for (std::size_t s = 0; s < kNumSegments; ++s) {
      for (std::size_t k = 0; k < 3; ++k) st += double(f.segments[s][k]) * f.segments[s][k];
      for (std::size_t k = 3; k < 6; ++k) sr += double(f.segments[s][k]) * f.segments[s][k];
    }
  }
  const double n = 4000.0 * 18.0;
  EXPECT_NEAR(std::sqrt(st / n), 0.05, 0.05 * 0.02);
  EXPECT_NEAR(std::sqrt(sr / n), 0.02, 0.02 * 0.02);
  Rng r2(3);
  EXPECT_EQ(add_gesture_noise(x, 0.0, 0.0, r2), x);
}

TEST(Spectrum, ConstantSignalHasNoHighFrequency) {
  const std::vector<double> c(40, 0.3);
  const Spectrum s = spectrum(c, 10.0);
  EXPECT_NEAR(s.hf_ratio, 0.0, 1e-20);
  EXPECT_NEAR(s.total_power, (0.3 * 40) * (0.3 * 40), 1e-9);
}

TEST(Spectrum, PureTonesFallOnTheExpectedSide) {
  const int n = 40;
  std::vector<double> low(n), high(n), alt(n);
  for (int t = 0; t < n; ++t) {
    low[t] = std::sin(2 * std::numbers::pi * 1.0 * t / 10.0);   // 1 Hz
    high[t] = std::sin(2 * std::numbers::pi * 4.0 * t / 10.0);  // 4 Hz
    alt[t] = t % 2 ? 1.0 : -1.0;                                // Nyquist
  }
  EXPECT_LT(spectrum(low, 10.0).hf_ratio, 1e-20);
  EXPECT_NEAR(spectrum(high, 10.0).hf_ratio, 1.0, 1e-12);
  EXPECT_NEAR(spectrum(alt, 10.0).hf_ratio, 1.0, 1e-12);
  // Parseval: sum |X_k|^2 = n sum x_t^2
  double e = 0;
  for (double v : low) e += v * v;
  EXPECT_NEAR(spectrum(low, 10.0).total_power, n * e, 1e-9);
  EXPECT_THROW(spectrum(std::vector<double>(4, 1.0), 10.0), std::invalid_argument);
}

TEST(Spearman, KnownValues) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{2, 4, 8, 16, 32}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  // Ties use average ranks: y ranks (1.5, 1.5, 3, 4, 5)
  const double r = spearman(x, std::vector<double>{1, 1, 2, 3, 4});
  const double rx[5] = {1, 2, 3, 4, 5}, ry[5] = {1.5, 1.5, 3, 4, 5};
  double mx = 3, my = 3, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 5; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  EXPECT_NEAR(r, sxy / std::sqrt(sxx * syy), 1e-15);
}

TEST(Episodes, ContextRelationsMatchTheSetting) {
  const Dataset& d = default_dataset();
  EvalConfig cfg;
  auto disjoint = [](const AxisSet& a, const AxisSet& b) {
    return std::none_of(a.begin(), a.end(), [&](DominantAxis x) { return b.contains(x); });
  };
  for (TestSetting s : kAllSettings) {
    const auto eps = build_episodes(d, s, cfg, 4);
    ASSERT_EQ(eps.size(), 360u);
    for (const Episode& e : eps) {
      ASSERT_EQ(e.context.size(), 3u);
      for (const Clip& c : e.context) {
        const bool from_train = std::any_of(d.train.begin(), d.train.end(), [&](const Clip& t) { return t == c; });
        ASSERT_TRUE(from_train);
        const bool same_user = c.user_id == e.target.user_id;
        switch (s) {
          case TestSetting::DpUp:
          case TestSetting::Noisy: EXPECT_TRUE(same_user); break;
          case TestSetting::DpUm:
          case TestSetting::DmUm:
          case TestSetting::Unseen: EXPECT_FALSE(same_user); break;
          case TestSetting::DmUp: EXPECT_TRUE(same_user); break;
        }
        if (s == TestSetting::DmUp || s == TestSetting::DmUm) {
          EXPECT_TRUE(disjoint(c.active_dims, e.target.active_dims));
        } else {
          // D+ may fall back to nested sets, never to disjoint ones
          EXPECT_FALSE(disjoint(c.active_dims, e.target.active_dims));
        }
      }
    }
  }
  const auto clean = build_episodes(d, TestSetting::DpUp, cfg, 4);
  const auto noisy = build_episodes(d, TestSetting::Noisy, cfg, 4);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    EXPECT_EQ(clean[i].context, noisy[i].context);
    EXPECT_EQ(clean[i].target.operation, noisy[i].target.operation);
    EXPECT_NE(clean[i].target.gesture, noisy[i].target.gesture);
  }
}

TEST(Evaluate, PredictZeroBaselineAndDeterminism) {
  const Dataset& d = default_dataset();
  const CchpModel m(ModelConfig::tiny(8, 4), 1);
  EvalConfig cfg;
  const EvalResult a = evaluate(m, d, TestSetting::DmUm, cfg, 2);
  const EvalResult b = evaluate(m, d, TestSetting::DmUm, cfg, 2);
  EXPECT_EQ(a.mse, b.mse);
  ASSERT_TRUE(a.elbo.has_value());
  EXPECT_EQ(*a.elbo, *b.elbo);
  double sq = 0, n = 0;
  for (const Clip& c : d.test_in_sample) {
    for (const auto& y : c.operation.frames) {
      for (float v : y.velocity) sq += double(v) * v;
      n += 6;
    }
  }
  EXPECT_NEAR(a.zero_mse, sq / n, 1e-12);
  EXPECT_EQ(a.clips, 360u);
  // Zero noise reproduces the clean evaluation exactly.
  const EvalResult clean = evaluate(m, d, TestSetting::DpUp, cfg, 2);
  const EvalResult l0 = evaluate(m, d, TestSetting::DpUp, cfg, 2, NoiseLevel::level(0));
  EXPECT_EQ(clean.mse, l0.mse);
}

TEST(Evaluate, DummyModelHasNoElbo) {
  ModelConfig c = ModelConfig::tiny(8, 4);
  c.architecture = Architecture::DummyLstm;
  const CchpModel m(c, 1);
  const EvalResult r = evaluate(m, default_dataset(), TestSetting::DpUp, EvalConfig{}, 0);
  EXPECT_FALSE(r.elbo.has_value());
  EXPECT_GT(r.mse, 0.0);
}

TEST(Attention, ExportIsNormalized) {
  const Dataset& d = default_dataset();
  const CchpModel m(ModelConfig::tiny(8, 4), 1);
  const std::vector<Clip> ctx{d.train[0], d.train[1]};
  const AttentionMap map = compute_attention(m, d.test_in_sample[0], ctx, 3);
  ASSERT_EQ(map.weights.rows(), static_cast<Eigen::Index>(d.test_in_sample[0].size()));
  ASSERT_EQ(map.weights.cols(), static_cast<Eigen::Index>(d.train[0].size() + d.train[1].size()));
  for (Eigen::Index r = 0; r < map.weights.rows(); ++r) EXPECT_NEAR(map.weights.row(r).sum(), 1.0, 1e-12);
  const auto path = std::filesystem::temp_directory_path() / "cchp_attention_test.json";
  write_attention(map, path);
  std::ifstream in(path);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("weights").size(), d.test_in_sample[0].size());
  EXPECT_EQ(j.at("context_clips").size(), 2u);
  EXPECT_EQ(j.at("context_clips")[1].at("first"), d.train[0].size());
  std::filesystem::remove(path);
}

TEST(Table, MarksMinimaAndNotApplicableCells) {
  std::vector<TableCell> cells;
  for (TestSetting s : kAllSettings) {
    cells.push_back({"CCHP_main", s, 10.0, 0.002});
    cells.push_back({"CCHP_main", s, 12.0, 0.004});  // second seed
    cells.push_back({"DummyLSTM", s, std::nullopt, 0.001});
  }
  const auto avg = average_cells(cells);
  ASSERT_EQ(avg.size(), 12u);
  EXPECT_NEAR(*avg[0].elbo, 11.0, 1e-12);
  EXPECT_NEAR(*avg[0].mse, 0.003, 1e-15);
  const std::string t = make_table(avg);
  EXPECT_NE(t.find("| DpUp ELBO | DpUp MSE |"), std::string::npos);
  EXPECT_NE(t.find("**11.00**"), std::string::npos);
  // DummyLSTM: no ELBO, MSE only where a context-free model applies
  const auto line = t.substr(t.find("| DummyLSTM |"));
  EXPECT_EQ(line.substr(0, line.find('\n')),
            "| DummyLSTM | NA | **0.00100** | NA | NA | NA | NA | NA | NA | NA | **0.00100** | NA | **0.00100** |");
}
