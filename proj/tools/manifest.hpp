// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace cchp::cli {

/// git-style blob id: sha1("blob <size>\0" + content), lowercase hex.
std::string blob_hash(const std::string& content);
std::string file_hash(const std::filesystem::path& path);

/// Resolves relative artifact paths against $CCHP_ARTIFACT_ROOT when set.
std::filesystem::path artifact_path(const std::string& path);

std::string utc_timestamp();

class RunManifest {
 public:
  RunManifest(std::string command, nlohmann::json config, std::uint64_t seed);

  void add_input(const std::filesystem::path& path);
  void add_artifact(const std::filesystem::path& path);
  /// Hashes every regular file under dir (sorted), recording each as an artifact.
  void add_artifact_tree(const std::filesystem::path& dir);

  void write(const std::filesystem::path& path);

 private:
  nlohmann::json doc_;
};

}  // namespace cchp::cli
