// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  On-disk model snapshots.
 *
 * A checkpoint is a directory holding manifest.json (model config, tensor
 * table, caller metadata) and params.bin (little-endian float64 tensors in
 * store order, row-major).
 */
#pragma once

#include "cchp/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>

namespace cchp {

void save_checkpoint(const CchpModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  CchpModel model;
  nlohmann::json metadata;
};

/// Throws std::runtime_error on missing files, truncated data or table mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace cchp
