// SPDX-License-Identifier: Apache-2.0
#include "manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cchp::cli {

namespace fs = std::filesystem;

std::string blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return blob_hash(ss.str());
}

fs::path artifact_path(const std::string& path) {
  const fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("CCHP_ARTIFACT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / p;
  return p;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest::RunManifest(std::string command, nlohmann::json config, std::uint64_t seed) {
  doc_ = {{"command", std::move(command)},
          {"config", std::move(config)},
          {"seed", seed},
          {"inputs", nlohmann::json::array()},
          {"artifacts", nlohmann::json::array()},
          {"started_at", utc_timestamp()}};
}

void RunManifest::add_input(const fs::path& path) {
  doc_["inputs"].push_back({{"path", path.string()}, {"hash", file_hash(path)}});
}

void RunManifest::add_artifact(const fs::path& path) {
  doc_["artifacts"].push_back({{"path", path.string()}, {"hash", file_hash(path)}});
}

void RunManifest::add_artifact_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) add_artifact(f);
}

void RunManifest::write(const fs::path& path) {
  doc_["finished_at"] = utc_timestamp();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc_.dump(2) << '\n';
}

}  // namespace cchp::cli
