// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, evaluation and serving.

#include "manifest.hpp"

#include "cchp/checkpoint.hpp"
#include "cchp/evaluation.hpp"
#include "cchp/realtime_service.hpp"
#include "cchp/synthetic_users.hpp"
#include "cchp/training.hpp"
#include "cchp/ws_server.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cchp::cli {
namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write-test";
  {
    std::ofstream out(probe);
    if (!out) throw std::runtime_error("output directory is not writable: " + dir.string());
  }
  fs::remove(probe, ec);
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m = ModelConfig::full();
  json rest = j;
  if (rest.contains("preset")) {
    const std::string preset = rest.at("preset").get<std::string>();
    const int hidden = rest.value("hidden", 64);
    if (preset == "reduced") {
      m = ModelConfig::reduced(hidden);
    } else if (preset != "full") {
      throw std::invalid_argument("model.preset: expected \"full\" or \"reduced\"");
    }
    rest.erase("preset");
    if (preset == "reduced") rest.erase("hidden");
  }
  from_json(rest, m);
  m.validate();
  return m;
}

struct TrainFile {
  TrainConfig train;
  ModelConfig model = ModelConfig::reduced(64);
  json raw = json::object();
};

TrainFile read_train_file(const std::string& path) {
  TrainFile f;
  if (path.empty()) return f;
  f.raw = read_json_file(path);
  for (const auto& [key, _] : f.raw.items()) {
    if (key != "train" && key != "model") throw std::invalid_argument(key + ": unknown section (expected train, model)");
  }
  if (f.raw.contains("train")) from_json(f.raw.at("train"), f.train);
  if (f.raw.contains("model")) f.model = model_from_json(f.raw.at("model"));
  return f;
}

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::string& out_arg, std::optional<std::uint64_t> seed) {
  GenConfig cfg;
  if (!config_path.empty()) from_json(read_json_file(config_path), cfg);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  const fs::path out = artifact_path(out_arg);
  ensure_writable_dir(out);
  Rng rng(cfg.seed);
  const GeneratedDataset g = build_dataset(cfg, rng);
  write_dataset(out.string(), g.dataset);
  RunManifest m("gen-data", json(cfg), cfg.seed);
  if (!config_path.empty()) m.add_input(config_path);
  for (const char* f : {"train.jsonl", "test_in_sample.jsonl", "test_out_sample.jsonl"}) m.add_artifact(out / f);
  m.write(out / "manifest.json");
  std::printf("wrote %zu train / %zu in-sample test / %zu out-sample test clips to %s\n", g.dataset.train.size(),
              g.dataset.test_in_sample.size(), g.dataset.test_out_sample.size(), out.string().c_str());
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& variant,
              const std::string& out_arg, std::optional<std::uint64_t> seed, std::optional<long> steps) {
  const BaselineSpec spec = BaselineSpec::parse(variant);
  TrainFile file = read_train_file(config_path);
  if (seed) file.train.seed = *seed;
  if (steps) file.train.max_steps = *steps;
  file.train.validate();
  const Dataset data = read_dataset(data_dir);
  const fs::path out = artifact_path(out_arg);
  ensure_writable_dir(out);
  fs::remove(out / "metrics.jsonl");

  TrainHooks hooks;
  hooks.metrics_log = out / "metrics.jsonl";
  hooks.checkpoint_dir = out / "checkpoints";
  const long total = total_steps(file.train, data.train.size());
  hooks.on_step = [total](const TrainRecord& r) {
    if (r.step % 50 == 0 || r.step + 1 == total) {
      std::printf("step %ld/%ld loss %.3f nll %.3f kl %.4f mse %.6f p_tf %.3f (%.0f s)\n", r.step + 1, total,
                  r.metrics.loss, r.metrics.nll, r.metrics.kl, r.metrics.mse, r.p_tf, r.wall_seconds);
      std::fflush(stdout);
    }
  };
  const TrainResult result = train(file.train, spec, file.model, data, hooks);
  json cfg{{"train", file.train}, {"model", result.model.config()}, {"variant", spec.tag()}};
  RunManifest m("train", cfg, file.train.seed);
  if (!config_path.empty()) m.add_input(config_path);
  for (const char* f : {"train.jsonl"}) m.add_input(fs::path(data_dir) / f);
  m.add_artifact(out / "metrics.jsonl");
  m.add_artifact_tree(out / "checkpoints");
  m.write(out / "manifest.json");
  std::printf("checkpoint: %s\n", (out / "checkpoints" / "final").string().c_str());
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::vector<std::string>& names,
             std::uint64_t seed, const std::string& out_arg) {
  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const Dataset data = read_dataset(data_dir);
  std::vector<TestSetting> settings;
  for (const auto& n : names) settings.push_back(parse_setting(n));
  if (settings.empty()) settings.assign(kAllSettings.begin(), kAllSettings.end());
  const std::string variant = loaded.metadata.value("variant", std::string("CCHP_main"));

  EvalConfig ecfg;
  json results = json::array();
  std::vector<TableCell> cells;
  for (TestSetting s : settings) {
    const EvalResult r = evaluate(loaded.model, data, s, ecfg, seed);
    results.push_back(r);
    cells.push_back({variant, s, r.elbo, r.mse});
    std::printf("%-7s mse %.6f (predict-zero %.6f)%s\n", std::string(setting_name(s)).c_str(), r.mse, r.zero_mse,
                r.elbo ? (" elbo-loss " + std::to_string(*r.elbo)).c_str() : "");
  }
  const fs::path out = artifact_path(out_arg);
  ensure_writable_dir(out);
  const json report{{"variant", variant}, {"checkpoint", ckpt}, {"seed", seed}, {"results", results}};
  write_text(out / "report.json", report.dump(2) + "\n");
  write_text(out / "report.md", make_table(cells));
  RunManifest m("eval", json{{"settings", names}, {"eval", {{"context_clips", ecfg.context_clips}}}}, seed);
  m.add_input(fs::path(ckpt) / "params.bin");
  m.add_input(fs::path(data_dir) / "test_in_sample.jsonl");
  m.add_artifact(out / "report.json");
  m.add_artifact(out / "report.md");
  m.write(out / "manifest.json");
  return 0;
}

int cmd_table(const std::vector<std::string>& reports, const std::string& out_arg) {
  std::vector<TableCell> cells;
  for (const auto& path : reports) {
    const json r = read_json_file(path);
    const std::string variant = r.at("variant").get<std::string>();
    for (const auto& e : r.at("results")) {
      TableCell c{variant, parse_setting(e.at("setting").get<std::string>()), std::nullopt, e.at("mse").get<double>()};
      if (!e.at("elbo").is_null()) c.elbo = e.at("elbo").get<double>();
      cells.push_back(c);
    }
  }
  const std::string table = make_table(average_cells(cells));
  if (out_arg.empty()) {
    std::cout << table;
  } else {
    write_text(artifact_path(out_arg), table);
  }
  return 0;
}

// ---- sweep-noise -------------------------------------------------------------

int cmd_sweep(const std::string& ckpt, const std::string& data_dir, int repeats, std::uint64_t seed,
              const std::string& out_arg) {
  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const Dataset data = read_dataset(data_dir);
  const auto levels = default_noise_levels();
  const auto curve = noise_sweep(loaded.model, data, levels, repeats, EvalConfig{}, seed);
  json points = json::array();
  std::vector<double> lv, mse;
  for (const SweepPoint& p : curve) {
    points.push_back({{"level", p.level.index},
                      {"sigma_r", p.level.sigma_r},
                      {"sigma_t", p.level.sigma_t},
                      {"mse_mean", p.mse_mean},
                      {"mse_std", p.mse_std},
                      {"elbo_mean", p.elbo_mean},
                      {"elbo_std", p.elbo_std},
                      {"hf_ratio", p.hf_ratio}});
    lv.push_back(p.level.index);
    mse.push_back(p.mse_mean);
    std::printf("level %2d  mse %.6f +- %.6f  hf %.4f\n", p.level.index, p.mse_mean, p.mse_std, p.hf_ratio);
  }
  const double rho = spearman(lv, mse);
  std::printf("spearman(level, mse) = %.4f\n", rho);
  const fs::path out = artifact_path(out_arg);
  ensure_writable_dir(out);
  write_text(out / "sweep.json", json{{"repeats", repeats}, {"spearman", rho}, {"points", points}}.dump(2) + "\n");
  RunManifest m("sweep-noise", json{{"repeats", repeats}, {"levels", levels.size()}}, seed);
  m.add_input(fs::path(ckpt) / "params.bin");
  m.add_artifact(out / "sweep.json");
  m.write(out / "manifest.json");
  return 0;
}

// ---- export-attention --------------------------------------------------------

const Clip& find_clip(const Dataset& d, const std::string& id) {
  for (const auto* split : {&d.train, &d.test_in_sample, &d.test_out_sample}) {
    for (const Clip& c : *split) {
      if (c.clip_id == id) return c;
    }
  }
  throw std::invalid_argument("clip not found: " + id);
}

int cmd_export_attention(const std::string& ckpt, const std::string& data_dir, const std::string& target_id,
                         const std::vector<std::string>& context_ids, std::uint64_t seed, const std::string& out_arg) {
  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const Dataset data = read_dataset(data_dir);
  std::vector<Clip> context;
  for (const auto& id : context_ids) context.push_back(find_clip(data, id));
  const AttentionMap map = compute_attention(loaded.model, find_clip(data, target_id), context, seed);
  const fs::path out = artifact_path(out_arg);
  write_attention(map, out);
  RunManifest m("export-attention", json{{"target", target_id}, {"context", context_ids}}, seed);
  m.add_input(fs::path(ckpt) / "params.bin");
  m.add_artifact(out);
  m.write(out.string() + ".manifest.json");
  std::printf("attention %ldx%ld written to %s\n", static_cast<long>(map.weights.rows()),
              static_cast<long>(map.weights.cols()), out.string().c_str());
  return 0;
}

// ---- serve -----------------------------------------------------------------

WebSocketServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

int cmd_serve(const std::string& ckpt, const std::string& context_path, const std::string& bind, double clamp_t,
              double clamp_r, std::uint64_t seed) {
  ServiceResources res;
  res.context_db = read_clip_file(context_path);
  res.defaults.checkpoint = ckpt;
  res.defaults.clamp_translation = clamp_t;
  res.defaults.clamp_rotation = clamp_r;
  res.defaults.seed = seed;
  for (const Clip& c : res.context_db) res.defaults.context_ids.push_back(c.clip_id);
  res.defaults.validate();

  auto cache = std::make_shared<std::map<std::string, std::shared_ptr<const CchpModel>>>();
  auto mu = std::make_shared<std::mutex>();
  res.load_model = [cache, mu](const std::string& path) {
    std::lock_guard lock(*mu);
    auto it = cache->find(path);
    if (it != cache->end()) return it->second;
    auto model = std::make_shared<const CchpModel>(load_checkpoint(path).model);
    cache->emplace(path, model);
    return std::shared_ptr<const CchpModel>(model);
  };
  res.load_model(ckpt);  // fail fast on a bad checkpoint

  WebSocketServer server(bind, std::move(res), &std::cerr);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::printf("serving on port %u\n", server.port());
  std::fflush(stdout);
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace
}  // namespace cchp::cli

int main(int argc, char** argv) {
  using namespace cchp::cli;
  CLI::App app{"Gesture-conditioned handling policy: data, training, evaluation and serving"};
  app.require_subcommand(1);

  std::string config, out, data, variant = "CCHP_main", ckpt, context, bind = "127.0.0.1:8765", target;
  std::vector<std::string> settings, reports, context_ids;
  std::optional<std::uint64_t> seed_opt;
  std::optional<long> steps_opt;
  std::uint64_t seed = 0;
  int repeats = 5;
  double clamp_t = 0.10, clamp_r = 0.30;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic demonstration dataset");
  gen->add_option("--config", config, "GenConfig JSON file");
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_option("--seed", seed_opt, "Override the generator seed");

  auto* tr = app.add_subcommand("train", "Train one model variant");
  tr->add_option("--config", config, "JSON file with optional \"train\" and \"model\" sections");
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--variant", variant, "Variant tag: " + cchp::BaselineSpec::supported());
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_option("--seed", seed_opt, "Override the training seed");
  tr->add_option("--steps", steps_opt, "Override the number of optimizer steps");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test settings");
  ev->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--settings", settings, "Subset of DpUp DpUm DmUp DmUm Unseen Noisy (default: all)");
  ev->add_option("--seed", seed, "Evaluation seed");
  ev->add_option("--out", out, "Report directory")->required();

  auto* tb = app.add_subcommand("table", "Combine eval reports into one table (means over seeds)");
  tb->add_option("reports", reports, "report.json files")->required();
  tb->add_option("--out", out, "Markdown output (default: stdout)");

  auto* sw = app.add_subcommand("sweep-noise", "Input-noise robustness sweep over 11 levels");
  sw->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  sw->add_option("--data", data, "Dataset directory")->required();
  sw->add_option("--repeats", repeats, "Repeats per level");
  sw->add_option("--seed", seed, "Base evaluation seed");
  sw->add_option("--out", out, "Output directory")->required();

  auto* ea = app.add_subcommand("export-attention", "Export the attention map of one rollout");
  ea->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  ea->add_option("--data", data, "Dataset directory")->required();
  ea->add_option("--target", target, "Target clip id")->required();
  ea->add_option("--context", context_ids, "Context clip ids")->required();
  ea->add_option("--seed", seed, "Latent sampling seed");
  ea->add_option("--out", out, "Output JSON file")->required();

  auto* sv = app.add_subcommand("serve", "Run the streaming WebSocket service");
  sv->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
  sv->add_option("--context", context, "Clip file (JSONL) holding the user context database")->required();
  sv->add_option("--bind", bind, "host:port");
  sv->add_option("--clamp-t", clamp_t, "Translation clamp (m/s)");
  sv->add_option("--clamp-r", clamp_r, "Rotation clamp (rad/s)");
  sv->add_option("--seed", seed, "Latent sampling seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(config, out, seed_opt);
    if (*tr) return cmd_train(config, data, variant, out, seed_opt, steps_opt);
    if (*ev) return cmd_eval(ckpt, data, settings, seed, out);
    if (*tb) return cmd_table(reports, out);
    if (*sw) return cmd_sweep(ckpt, data, repeats, seed, out);
    if (*ea) return cmd_export_attention(ckpt, data, target, context_ids, seed, out);
    if (*sv) return cmd_serve(ckpt, context, bind, clamp_t, clamp_r, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
