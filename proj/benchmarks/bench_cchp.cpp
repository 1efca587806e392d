// SPDX-License-Identifier: Apache-2.0
#include "cchp/realtime_service.hpp"
#include "cchp/synthetic_users.hpp"
#include "cchp/training.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace cchp;

namespace {

const Dataset& data() {
  static const Dataset d = build_dataset(GenConfig{}).dataset;
  return d;
}

std::vector<Clip> context() { return {data().train[0], data().train[1], data().train[2]}; }

ModelConfig config_for(int hidden) { return hidden >= 128 ? ModelConfig::full() : ModelConfig::reduced(hidden); }

}  // namespace

// One optimizer step on a batch of 32 episodes: forward, backward, Adam.
static void BM_TrainStep(benchmark::State& state) {
  CchpModel model(config_for(static_cast<int>(state.range(0))), 1);
  TrainConfig cfg;
  Rng rng(2);
  std::vector<Episode> batch;
  for (std::size_t i = 0; i < 32; ++i) {
    const Clip& target = data().train[i * 11 % data().train.size()];
    batch.push_back({target, sample_context(data().train, target, cfg, rng).clips});
  }
  Adam adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  for (auto _ : state) {
    ad::Tape tape;
    model.parameters().zero_grad();
    const BatchForward f = elbo_loss(model, tape, batch, 0.5, rng);
    tape.backward(f.loss);
    adam.step(model.parameters());
    benchmark::DoNotOptimize(f.loss.scalar());
  }
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_EncodeContext(benchmark::State& state) {
  const CchpModel model(config_for(static_cast<int>(state.range(0))), 1);
  const auto ctx = context();
  for (auto _ : state) benchmark::DoNotOptimize(encode_latent(model, ctx).latent.mean.data());
}
BENCHMARK(BM_EncodeContext)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

// Per-frame serving cost once the context is encoded.
static void BM_DecoderStep(benchmark::State& state) {
  const CchpModel model(config_for(static_cast<int>(state.range(0))), 1);
  const ContextEncoding enc = encode_latent(model, context());
  const Clip& target = data().test_in_sample[0];
  RecurrentState s = zero_state(model);
  Vector y = Vector::Zero(kOperationDim);
  std::size_t t = 0;
  for (auto _ : state) {
    const StepPrediction p = decoder_step(model, target.gesture.frames[t], y, s, enc, enc.latent.mean);
    s = p.state;
    y = p.mean;
    if (++t == target.size()) {
      t = 0;
      s = zero_state(model);
    }
    benchmark::DoNotOptimize(p.mean.data());
  }
}
BENCHMARK(BM_DecoderStep)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

static void BM_SessionFrame(benchmark::State& state) {
  auto model = std::make_shared<const CchpModel>(ModelConfig::full(), 1);
  SessionConfig cfg;
  cfg.checkpoint = "bench";
  Session session(model, context(), cfg);
  const Clip& target = data().test_in_sample[0];
  std::size_t t = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(session.push_frame(target.gesture.frames[t]).raw.mean.data());
    t = (t + 1) % target.size();
  }
}
BENCHMARK(BM_SessionFrame)->Unit(benchmark::kMicrosecond);

static void BM_PostProcessor(benchmark::State& state) {
  PostProcessor p(10, 5, 0.10, 0.30);
  std::mt19937_64 g(3);
  std::normal_distribution<double> n(0.0, 0.2);
  std::vector<Twist> raw(1024);
  for (auto& r : raw)
    for (auto& v : r) v = n(g);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(p.push(raw[i]));
    i = (i + 1) & 1023;
  }
}
BENCHMARK(BM_PostProcessor);

static void BM_SerializeClip(benchmark::State& state) {
  const Clip& c = data().train[0];
  for (auto _ : state) benchmark::DoNotOptimize(deserialize_clip(serialize_clip(c)));
}
BENCHMARK(BM_SerializeClip)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
