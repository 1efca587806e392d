// SPDX-License-Identifier: Apache-2.0
#include "cchp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cchp {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void save_checkpoint(const CchpModel& model, const fs::path& dir, const nlohmann::json& metadata) {
  fs::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "params.bin").string());
  for (const Parameter& p : model.parameters()) {
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    offset += static_cast<std::size_t>(p.value.size());
  }
  bin.close();
  if (!bin) throw std::runtime_error("short write to " + (dir / "params.bin").string());

  nlohmann::json manifest{{"format", "cchp-checkpoint-1"},
                          {"model", model.config()},
                          {"scalars", offset},
                          {"tensors", tensors},
                          {"metadata", metadata}};
  std::ofstream js(dir / "manifest.json", std::ios::trunc);
  if (!js) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  js << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw std::runtime_error("checkpoint not found: " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "cchp-checkpoint-1") {
    throw std::runtime_error("unsupported checkpoint format in " + dir.string());
  }
  const ModelConfig config = manifest.at("model").get<ModelConfig>();
  const auto scalars = manifest.at("scalars").get<std::size_t>();

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint data missing: " + (dir / "params.bin").string());
  std::vector<double> data(scalars);
  bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(scalars * sizeof(double)));
  if (static_cast<std::size_t>(bin.gcount()) != scalars * sizeof(double)) {
    throw std::runtime_error("checkpoint data truncated in " + dir.string());
  }

  ParameterStore store;
  for (const auto& t : manifest.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto off = t.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(rows * cols) > scalars) {
      throw std::runtime_error("tensor " + t.at("name").get<std::string>() + " exceeds checkpoint data");
    }
    Matrix m(rows, cols);
    std::memcpy(m.data(), data.data() + off, static_cast<std::size_t>(rows * cols) * sizeof(double));
    store.add(t.at("name").get<std::string>(), std::move(m));
  }
  try {
    return LoadedCheckpoint{CchpModel(config, std::move(store)), manifest.value("metadata", nlohmann::json::object())};
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("checkpoint " + dir.string() + ": " + e.what());
  }
}

}  // namespace cchp
