// SPDX-License-Identifier: Apache-2.0
#include "cchp/checkpoint.hpp"
#include "cchp/model.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <random>

using namespace cchp;
using cchp::testing::default_dataset;
using cchp::testing::truncate;

namespace {

std::vector<Clip> some_context() {
  const auto& d = default_dataset();
  return {truncate(d.train[1], 9), truncate(d.train[2], 6), truncate(d.train[30], 12)};
}

Vector truth_row(const OperationFrame& y) {
  Vector v(6);
  for (int d = 0; d < 6; ++d) v(d) = y.velocity[static_cast<std::size_t>(d)];
  return v;
}

}  // namespace

TEST(ModelConfig, PresetsValidateAndRoundTrip) {
  for (const ModelConfig& c : {ModelConfig::full(), ModelConfig::reduced(64), ModelConfig::tiny()}) {
    EXPECT_NO_THROW(c.validate());
    nlohmann::json j = c;
    ModelConfig d = ModelConfig::tiny();
    from_json(j, d);
    EXPECT_EQ(nlohmann::json(d), j);
  }
  EXPECT_EQ(ModelConfig::full().head_input(), 6 + 128 + 32);
  nlohmann::json j = ModelConfig::full();
  j["hiden"] = 3;
  ModelConfig d;
  EXPECT_THROW(from_json(j, d), std::invalid_argument);
  ModelConfig bad = ModelConfig::full();
  bad.agg_layers.back() = 64;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Model, ParameterLayoutFollowsConfig) {
  const CchpModel m(ModelConfig::full(), 1);
  const auto* w0 = m.parameters().find("enc.finger.0.w");
  ASSERT_NE(w0, nullptr);
  EXPECT_EQ(w0->value.rows(), 6);
  EXPECT_EQ(w0->value.cols(), 32);
  const auto* lstm = m.parameters().find("enc.lstm.w");
  ASSERT_NE(lstm, nullptr);
  EXPECT_EQ(lstm->value.rows(), 32 + 6 + 128);
  EXPECT_EQ(lstm->value.cols(), 4 * 128);
  EXPECT_EQ(m.parameters().find("head.0.0.w")->value.rows(), 166);
  EXPECT_NE(m.parameters().find("dec.lstm.w"), nullptr);

  ModelConfig shared = ModelConfig::tiny();
  shared.share_cell = true;
  EXPECT_EQ(CchpModel(shared, 1).parameters().find("dec.lstm.w"), nullptr);
  ModelConfig dummy = ModelConfig::tiny();
  dummy.architecture = Architecture::DummyLstm;
  const CchpModel dm(dummy, 1);
  EXPECT_NE(dm.parameters().find("dec.lstm2.w"), nullptr);
  EXPECT_EQ(dm.parameters().find("kq.w"), nullptr);
}

TEST(Model, InitializationIsSeeded) {
  const CchpModel a(ModelConfig::tiny(), 4), b(ModelConfig::tiny(), 4), c(ModelConfig::tiny(), 5);
  EXPECT_EQ(a.parameters()[0].value, b.parameters()[0].value);
  EXPECT_NE(a.parameters()[0].value, c.parameters()[0].value);
}

TEST(Attention, RowsAreDistributions) {
  std::mt19937_64 g(1);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + trial % 17, d = 1 + trial % 5;
    Matrix q(1, d), k(n, d), v = Matrix::Zero(n, 1);
    for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = 3.0 * n01(g);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = 3.0 * n01(g);
    ad::Tape t(false);
    Matrix w;
    ad::masked_attention(t.constant(q), t.constant(k), v, Matrix::Ones(1, n), &w);
    ASSERT_NEAR(w.sum(), 1.0, 1e-12);
    ASSERT_GE(w.minCoeff(), 0.0);
  }
}

TEST(Attention, ModelAttentionSumsToOneAndIsUniformForIdenticalKeys) {
  const CchpModel m(ModelConfig::tiny(8, 4), 2);
  ContextEncoding enc = encode_latent(m, some_context());
  Vector h = Vector::LinSpaced(8, -1.0, 1.0);
  const AttentionResult a = context_attention(m, enc, h);
  EXPECT_NEAR(a.weights.sum(), 1.0, 1e-12);
  for (Eigen::Index r = 1; r < enc.keys.rows(); ++r) enc.keys.row(r) = enc.keys.row(0);
  const AttentionResult u = context_attention(m, enc, h);
  const double n = static_cast<double>(enc.frames());
  for (Eigen::Index i = 0; i < u.weights.size(); ++i) EXPECT_NEAR(u.weights(i), 1.0 / n, 1e-15);
  // Read-out with uniform weights is the mean context operation.
  EXPECT_LT((u.readout - enc.y.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, DecoderStepMatchesRolloutWithTeacher) {
  const CchpModel m(ModelConfig::tiny(8, 4), 3);
  const Clip& target = default_dataset().test_in_sample[4];
  const auto ctx = some_context();
  const ContextEncoding enc = encode_latent(m, ctx);
  const Vector z = enc.latent.mean;
  TeacherSignal teacher{&target.operation, std::vector<bool>(target.size(), true)};
  const auto full = rollout(m, target.gesture, enc, z, teacher);
  RecurrentState s = zero_state(m);
  Vector y = Vector::Zero(6);
  for (std::size_t t = 0; t < target.size(); ++t) {
    const StepPrediction p = decoder_step(m, target.gesture.frames[t], y, s, enc, z);
    ASSERT_TRUE(p.mean == full[t].mean) << "step " << t;
    ASSERT_TRUE(p.var == full[t].var);
    s = p.state;
    y = truth_row(target.operation.frames[t]);
  }
}

TEST(Model, AutoregressiveRolloutFeedsOwnMean) {
  const CchpModel m(ModelConfig::tiny(8, 4), 3);
  const Clip& target = default_dataset().test_in_sample[7];
  const ContextEncoding enc = encode_latent(m, some_context());
  const auto out = rollout(m, target.gesture, enc, enc.latent.mean);
  RecurrentState s = zero_state(m);
  Vector y = Vector::Zero(6);
  for (std::size_t t = 0; t < target.size(); ++t) {
    const StepPrediction p = decoder_step(m, target.gesture.frames[t], y, s, enc, enc.latent.mean);
    ASSERT_TRUE(p.mean == out[t].mean);
    s = p.state;
    y = p.mean;
  }
}

TEST(Model, LatentIsPermutationInvariant) {
  const CchpModel m(ModelConfig::reduced(16), 4);
  auto ctx = some_context();
  const ContextEncoding a = encode_latent(m, ctx);
  std::swap(ctx[0], ctx[2]);
  std::swap(ctx[1], ctx[2]);
  const ContextEncoding b = encode_latent(m, ctx);
  EXPECT_TRUE(a.latent.mean == b.latent.mean);
  EXPECT_TRUE(a.latent.var == b.latent.var);
  EXPECT_TRUE(a.summary == b.summary);
  // per-clip blocks follow the caller's order
  EXPECT_EQ(b.offsets, (std::vector<std::size_t>{0, 12, 21}));
  EXPECT_TRUE(b.keys.row(0) == a.keys.row(15));
}

TEST(Model, NoTemporalIgnoresPreviousOperation) {
  ModelConfig c = ModelConfig::tiny(8, 4);
  c.architecture = Architecture::NoTemporal;
  const CchpModel m(c, 5);
  const Clip& target = default_dataset().train[3];
  const ContextEncoding enc = encode_latent(m, some_context());
  const RecurrentState s = zero_state(m);
  const auto a = decoder_step(m, target.gesture.frames[0], Vector::Zero(6), s, enc, enc.latent.mean);
  const auto b = decoder_step(m, target.gesture.frames[0], Vector::Ones(6), s, enc, enc.latent.mean);
  EXPECT_TRUE(a.mean == b.mean);
}

TEST(Model, BatchedForwardAgreesWithSingleStream) {
  const CchpModel m(ModelConfig::tiny(8, 4), 6);
  const auto& d = default_dataset();
  std::vector<Episode> batch{{d.test_in_sample[0], {d.train[0], d.train[1]}},
                             {d.test_in_sample[1], {d.train[5]}},
                             {d.test_in_sample[2], {d.train[7], d.train[8], d.train[9]}}};
  ForwardOptions o;
  o.latent = LatentSource::Prior;
  o.compute_posterior = false;
  ad::Tape t(false);
  const BatchForward f = forward_batch(m, t, batch, o);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const ContextEncoding enc = encode_latent(m, batch[b].context);
    EXPECT_LT((f.prior_mean.row(b).transpose() - enc.latent.mean).cwiseAbs().maxCoeff(), 1e-12);
    const auto r = rollout(m, batch[b].target.gesture, enc, enc.latent.mean);
    for (std::size_t s = 0; s < r.size(); ++s) {
      ASSERT_LT((f.means[s].row(b).transpose() - r[s].mean).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Model, VariancesArePositive) {
  const CchpModel m(ModelConfig::tiny(8, 4), 7);
  const ContextEncoding enc = encode_latent(m, some_context());
  EXPECT_GT(enc.latent.var.minCoeff(), 0.0);
  const auto r = rollout(m, default_dataset().train[0].gesture, enc, enc.latent.mean);
  for (const auto& p : r) EXPECT_GE(p.var.minCoeff(), 1e-6);
}

TEST(Model, EmptyContextIsRejected) {
  const CchpModel m(ModelConfig::tiny(8, 4), 8);
  EXPECT_THROW(encode_latent(m, std::vector<Clip>{}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelConfig c = ModelConfig::tiny(8, 4);
  c.architecture = Architecture::NoTemporal;
  const CchpModel m(c, 9);
  const auto dir = std::filesystem::temp_directory_path() / "cchp_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir, {{"variant", "NoTemporalAblation"}, {"step", 12}});
  const LoadedCheckpoint l = load_checkpoint(dir);
  EXPECT_EQ(nlohmann::json(l.model.config()), nlohmann::json(c));
  EXPECT_EQ(l.metadata.at("step"), 12);
  ASSERT_EQ(l.model.parameters().size(), m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(l.model.parameters()[i].name, m.parameters()[i].name);
    EXPECT_TRUE(l.model.parameters()[i].value == m.parameters()[i].value);
  }
  std::filesystem::remove(dir / "params.bin");
  EXPECT_THROW(load_checkpoint(dir), std::runtime_error);
  std::filesystem::remove_all(dir);
}
