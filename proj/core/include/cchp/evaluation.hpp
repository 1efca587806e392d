// SPDX-License-Identifier: Apache-2.0
/**
 * @file   evaluation.hpp
 * @brief  Test settings, ELBO/MSE metrics, noise sweeps, spectra and
 *         attention export.
 *
 * Every setting draws its context from the training split; only the choice of
 * user and active dimensions differs. Random draws are keyed by (seed, target
 * index), so two settings that share a context rule see the same contexts and
 * latent samples, and a zero-noise sweep level reproduces the clean result.
 */
#pragma once

#include "cchp/gesture_domain.hpp"
#include "cchp/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cchp {

enum class TestSetting { DpUp, DpUm, DmUp, DmUm, Unseen, Noisy };

inline constexpr std::array<TestSetting, 6> kAllSettings{TestSetting::DpUp, TestSetting::DpUm,
                                                         TestSetting::DmUp, TestSetting::DmUm,
                                                         TestSetting::Unseen, TestSetting::Noisy};

std::string_view setting_name(TestSetting s);
TestSetting parse_setting(std::string_view name);

struct NoiseLevel {
  int index = 0;
  double sigma_r = 0.0;  // rotational gesture features
  double sigma_t = 0.0;  // translational gesture features

  /// Level k of the 0..10 sweep: sigma_r = 0.01 k, sigma_t = 0.005 k.
  static NoiseLevel level(int k);
};

std::vector<NoiseLevel> default_noise_levels();

struct EvalConfig {
  int context_clips = 3;
  int batch_size = 32;
  double noisy_sigma_t = 0.050;
  double noisy_sigma_r = 0.025;
  /// Draw z from q(z | context); false uses its mean.
  bool sample_latent = true;
};

struct EvalResult {
  TestSetting setting = TestSetting::DpUp;
  /// Mean per-clip negative ELBO: sum_t NLL + KL. Absent for context-free models.
  std::optional<double> elbo;
  double mse = 0.0;       // per frame and dimension
  double zero_mse = 0.0;  // predict-zero baseline on the same targets
  double hf_ratio = 0.0;  // pooled high-frequency power ratio of predicted means
  std::size_t clips = 0;
};

/// Adds N(0, sigma_t^2) to translational and N(0, sigma_r^2) to rotational features.
DynamicGesture add_gesture_noise(const DynamicGesture& x, double sigma_t, double sigma_r, Rng& rng);

/// Target clips and contexts for one setting (targets optionally perturbed).
std::vector<Episode> build_episodes(const Dataset& data, TestSetting setting, const EvalConfig& cfg,
                                    std::uint64_t seed, std::optional<NoiseLevel> noise = std::nullopt);

EvalResult evaluate(const CchpModel& model, const Dataset& data, TestSetting setting, const EvalConfig& cfg,
                    std::uint64_t seed, std::optional<NoiseLevel> noise = std::nullopt);

struct SweepPoint {
  NoiseLevel level;
  double mse_mean = 0.0, mse_std = 0.0;
  double elbo_mean = 0.0, elbo_std = 0.0;
  double hf_ratio = 0.0;  // mean over repeats
};

std::vector<SweepPoint> noise_sweep(const CchpModel& model, const Dataset& data,
                                    std::span<const NoiseLevel> levels, int repeats, const EvalConfig& cfg,
                                    std::uint64_t seed);

struct Spectrum {
  std::vector<double> frequency;  // folded, Hz
  std::vector<double> power;      // |X_k|^2, two-sided
  double hf_ratio = 0.0;
  double hf_power = 0.0;
  double total_power = 0.0;
};

/// Naive DFT of trace; high-frequency power is the share above rate_hz / 4.
Spectrum spectrum(std::span<const double> trace, double rate_hz);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct AttentionMap {
  Matrix weights;  // N_T x N_C
  std::vector<std::string> context_ids;
  std::vector<std::size_t> offsets;  // first column of each context clip
  std::string target_id;
};

AttentionMap compute_attention(const CchpModel& model, const Clip& target, std::span<const Clip> context,
                               std::uint64_t seed);
void write_attention(const AttentionMap& map, const std::filesystem::path& path);

struct TableCell {
  std::string variant;
  TestSetting setting = TestSetting::DpUp;
  std::optional<double> elbo;
  std::optional<double> mse;
};

/// Mean of per-seed cells grouped by (variant, setting), in first-seen variant order.
std::vector<TableCell> average_cells(std::span<const TableCell> per_seed);

/// Markdown table of (ELBO, MSE) per variant and setting; column minima in bold.
std::string make_table(std::span<const TableCell> cells);

/// Whether a variant's cell is reported (the context-free baseline only has
/// context-independent MSE cells).
bool cell_applies(std::string_view variant, TestSetting setting, bool elbo);

void to_json(nlohmann::json& j, const EvalResult& r);

}  // namespace cchp
