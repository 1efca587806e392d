// SPDX-License-Identifier: Apache-2.0
#include "cchp/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace cchp {

using ad::Tape;
using ad::Var;

// ---- configuration --------------------------------------------------------

std::string_view architecture_name(Architecture a) {
  switch (a) {
    case Architecture::Cchp: return "cchp";
    case Architecture::NoTemporal: return "no_temporal";
    case Architecture::DummyLstm: return "dummy_lstm";
  }
  return "?";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "cchp") return Architecture::Cchp;
  if (name == "no_temporal") return Architecture::NoTemporal;
  if (name == "dummy_lstm") return Architecture::DummyLstm;
  throw std::invalid_argument("unknown architecture: " + std::string(name));
}

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::reduced(int hidden) {
  ModelConfig c;
  c.hidden = hidden;
  c.hand_layers = {hidden, std::max(hidden / 2, 1), 32};
  c.agg_layers = {hidden, hidden, hidden, hidden};
  c.phi_trunk = {hidden, hidden, hidden, hidden};
  c.head_layers = {hidden, std::max(hidden / 2, 1)};
  return c;
}

ModelConfig ModelConfig::tiny(int hidden, int latent) {
  ModelConfig c;
  c.hidden = hidden;
  c.latent_dim = latent;
  c.finger_layers = {4, 4};
  c.hand_layers = {hidden, 4};
  c.agg_layers = {hidden, hidden};
  c.phi_trunk = {hidden, hidden};
  c.kq_dim = 4;
  c.head_layers = {hidden, 4};
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](const std::vector<int>& v) {
    return !v.empty() && std::all_of(v.begin(), v.end(), [](int w) { return w > 0; });
  };
  if (gesture_dim <= 0 || op_dim <= 0 || latent_dim <= 0 || hidden <= 0 || n_segments <= 0 ||
      kq_dim <= 0) {
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  }
  if (gesture_dim % n_segments != 0) throw std::invalid_argument("ModelConfig.gesture_dim: not divisible by n_segments");
  if (!positive(finger_layers)) throw std::invalid_argument("ModelConfig.finger_layers: invalid widths");
  if (!positive(hand_layers)) throw std::invalid_argument("ModelConfig.hand_layers: invalid widths");
  if (!positive(agg_layers) || agg_layers.back() != hidden) {
    throw std::invalid_argument("ModelConfig.agg_layers: must end at hidden");
  }
  if (!positive(phi_trunk)) throw std::invalid_argument("ModelConfig.phi_trunk: invalid widths");
  if (!positive(head_layers)) throw std::invalid_argument("ModelConfig.head_layers: invalid widths");
  if (!(variance_floor > 0.0)) throw std::invalid_argument("ModelConfig.variance_floor: must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"gesture_dim", c.gesture_dim},       {"op_dim", c.op_dim},
                     {"latent_dim", c.latent_dim},         {"hidden", c.hidden},
                     {"n_segments", c.n_segments},         {"finger_layers", c.finger_layers},
                     {"hand_layers", c.hand_layers},       {"agg_layers", c.agg_layers},
                     {"phi_trunk", c.phi_trunk},           {"kq_dim", c.kq_dim},
                     {"head_layers", c.head_layers},       {"share_cell", c.share_cell},
                     {"variance_floor", c.variance_floor},
                     {"architecture", std::string(architecture_name(c.architecture))}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("ModelConfig: expected an object");
  static const std::vector<std::string> known{"gesture_dim", "op_dim",      "latent_dim", "hidden",
                                              "n_segments",  "finger_layers", "hand_layers", "agg_layers",
                                              "phi_trunk",   "kq_dim",      "head_layers", "share_cell",
                                              "variance_floor", "architecture"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("ModelConfig." + key + ": unknown field");
    }
  }
  auto get = [&]<typename T>(const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("ModelConfig.") + key + ": wrong type");
    }
  };
  get("gesture_dim", c.gesture_dim);
  get("op_dim", c.op_dim);
  get("latent_dim", c.latent_dim);
  get("hidden", c.hidden);
  get("n_segments", c.n_segments);
  get("finger_layers", c.finger_layers);
  get("hand_layers", c.hand_layers);
  get("agg_layers", c.agg_layers);
  get("phi_trunk", c.phi_trunk);
  get("kq_dim", c.kq_dim);
  get("head_layers", c.head_layers);
  get("share_cell", c.share_cell);
  get("variance_floor", c.variance_floor);
  if (j.contains("architecture")) c.architecture = parse_architecture(j.at("architecture").get<std::string>());
}

// ---- construction ---------------------------------------------------------

namespace {

struct Builder {
  ParameterStore& store;
  bool init;
  Rng rng;

  Matrix uniform(int rows, int cols, double bound) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
  }

  Matrix orthogonal(int n) {
    Matrix g(n, n);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR();
    for (int k = 0; k < n; ++k) {
      if (r(k, k) < 0) q.col(k) *= -1.0;
    }
    return q;
  }

  std::size_t add(const std::string& name, Matrix value) {
    return store.add(name, std::move(value));
  }

  // He-uniform ahead of a ReLU, LeCun-uniform otherwise; zero biases.
  LinearRef linear(const std::string& name, int in, int out, bool relu_follows = false) {
    const double bound = std::sqrt((relu_follows ? 6.0 : 3.0) / static_cast<double>(in));
    LinearRef ref;
    ref.w = add(name + ".w", init ? uniform(in, out, bound) : Matrix::Zero(in, out));
    ref.b = add(name + ".b", Matrix::Zero(1, out));
    return ref;
  }

  MlpRef mlp(const std::string& name, int in, const std::vector<int>& widths, bool relu_last = false) {
    MlpRef ref;
    int prev = in;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const bool relu = l + 1 < widths.size() || relu_last;
      ref.layers.push_back(linear(name + "." + std::to_string(l), prev, widths[l], relu));
      prev = widths[l];
    }
    return ref;
  }

  LinearRef lstm(const std::string& name, int in, int hidden) {
    LinearRef ref;
    Matrix w = Matrix::Zero(in + hidden, 4 * hidden);
    Matrix b = Matrix::Zero(1, 4 * hidden);
    if (init) {
      w.topRows(in) = uniform(in, 4 * hidden, std::sqrt(3.0 / static_cast<double>(in)));
      for (int g = 0; g < 4; ++g) w.block(in, g * hidden, hidden, hidden) = orthogonal(hidden);
      b.middleCols(hidden, hidden).setOnes();  // forget gate starts open
    }
    ref.w = add(name + ".w", std::move(w));
    ref.b = add(name + ".b", std::move(b));
    return ref;
  }

  CellRef cell(const std::string& prefix, const ModelConfig& c) {
    CellRef ref;
    ref.finger = mlp(prefix + ".finger", c.segment_dim(), c.finger_layers);
    ref.hand = mlp(prefix + ".hand", c.hand_input(), c.hand_layers);
    ref.lstm = lstm(prefix + ".lstm", c.cell_input(), c.hidden);
    return ref;
  }
};

void check_shape(const Parameter& p, Eigen::Index rows, Eigen::Index cols) {
  if (p.value.rows() != rows || p.value.cols() != cols) {
    throw std::invalid_argument("parameter " + p.name + " has shape " + std::to_string(p.value.rows()) +
                                "x" + std::to_string(p.value.cols()) + ", expected " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  }
}

}  // namespace

CchpModel::CchpModel(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  build(true, init_seed);
}

CchpModel::CchpModel(ModelConfig config, ParameterStore params) : config_(std::move(config)) {
  config_.validate();
  build(false, 0);
  if (params.size() != params_.size()) {
    throw std::invalid_argument("parameter count mismatch: got " + std::to_string(params.size()) +
                                ", expected " + std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    const Parameter* src = params.find(p.name);
    if (src == nullptr) throw std::invalid_argument("missing parameter " + p.name);
    check_shape(*src, p.value.rows(), p.value.cols());
    p.value = src->value;
  }
}

void CchpModel::build(bool initialize, std::uint64_t seed) {
  Builder b{params_, initialize, Rng(seed)};
  const ModelConfig& c = config_;
  if (c.architecture == Architecture::DummyLstm) {
    dec_cell_ = b.cell("dec", c);
    dummy_cell2_.lstm = b.lstm("dec.lstm2", c.hidden, c.hidden);
  } else {
    enc_cell_ = b.cell("enc", c);
    agg_ = b.mlp("agg", c.hidden + c.op_dim, c.agg_layers);
    phi_trunk_ = b.mlp("phi.trunk", c.hidden, c.phi_trunk, true);
    phi_mean_ = b.linear("phi.mean", c.phi_trunk.back(), c.latent_dim);
    phi_var_ = b.linear("phi.var", c.phi_trunk.back(), c.latent_dim);
    kq_ = b.linear("kq", c.hidden, c.kq_dim);
    if (!c.share_cell) dec_cell_ = b.cell("dec", c);
  }
  std::vector<int> head_widths = c.head_layers;
  head_widths.push_back(2);
  for (int d = 0; d < c.op_dim; ++d) {
    heads_.push_back(b.mlp("head." + std::to_string(d), c.head_input(), head_widths));
  }
}

// ---- layer code shared by both entry points --------------------------------

namespace {

struct StateVar {
  Var h, c;
};

Var linear(Tape& t, const ParameterStore& p, const LinearRef& ref, const Var& x) {
  return ad::add_row(ad::matmul(x, t.parameter(p[ref.w])), t.parameter(p[ref.b]));
}

Var mlp(Tape& t, const ParameterStore& p, const MlpRef& ref, Var x, bool relu_last = false) {
  for (std::size_t l = 0; l < ref.layers.size(); ++l) {
    x = linear(t, p, ref.layers[l], x);
    if (l + 1 < ref.layers.size() || relu_last) x = ad::relu(x);
  }
  return x;
}

StateVar lstm(Tape& t, const ParameterStore& p, const LinearRef& ref, const Var& input,
              const StateVar& prev, int hidden) {
  const Var gates = linear(t, p, ref, ad::concat_cols({input, prev.h}));
  const Var sig = ad::sigmoid(gates);
  const Var in_gate = ad::slice_cols(sig, 0, hidden);
  const Var forget = ad::slice_cols(sig, hidden, hidden);
  const Var cand = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
  const Var out_gate = ad::slice_cols(sig, 3 * hidden, hidden);
  const Var c = ad::add(ad::hadamard(forget, prev.c), ad::hadamard(in_gate, cand));
  const Var h = ad::hadamard(out_gate, ad::tanh(c));
  return {h, c};
}

StateVar cell_step(Tape& t, const CchpModel& m, const CellRef& ref, const Var& x, const Var& y_prev,
                   const StateVar& prev) {
  const ModelConfig& c = m.config();
  const ParameterStore& p = m.parameters();
  const Eigen::Index batch = x.rows();
  const Var segments = ad::reshape(x, batch * c.n_segments, c.segment_dim());
  const Var fingers = ad::reshape(mlp(t, p, ref.finger, segments), batch, c.n_segments * c.finger_dim());
  const Var hand = mlp(t, p, ref.hand, ad::concat_cols({fingers, prev.h}));
  return lstm(t, p, ref.lstm, ad::concat_cols({hand, y_prev}), prev, c.hidden);
}

struct LatentVars {
  Var mean, var;
};

LatentVars latent_head(Tape& t, const CchpModel& m, const Var& summary) {
  const ParameterStore& p = m.parameters();
  const Var trunk = mlp(t, p, m.phi_trunk(), summary, true);
  const Var mean = linear(t, p, m.phi_mean(), trunk);
  const Var var = ad::softplus(linear(t, p, m.phi_var(), trunk), m.config().variance_floor);
  return {mean, var};
}

struct HeadOut {
  Var mean, var;
};

HeadOut heads(Tape& t, const CchpModel& m, const Var& input) {
  const ParameterStore& p = m.parameters();
  std::vector<Var> means, raws;
  for (const MlpRef& head : m.heads()) {
    const Var o = mlp(t, p, head, input);
    means.push_back(ad::slice_cols(o, 0, 1));
    raws.push_back(ad::slice_cols(o, 1, 1));
  }
  return {ad::concat_cols(means), ad::softplus(ad::concat_cols(raws), m.config().variance_floor)};
}

Matrix row_of(const GestureFrame& x) {
  Matrix m(1, static_cast<Eigen::Index>(kGestureDim));
  for (std::size_t f = 0; f < kGestureDim; ++f) m(0, static_cast<Eigen::Index>(f)) = x.at(f);
  return m;
}

Matrix row_of(const OperationFrame& y) {
  Matrix m(1, static_cast<Eigen::Index>(kOperationDim));
  for (std::size_t d = 0; d < kOperationDim; ++d) m(0, static_cast<Eigen::Index>(d)) = y.velocity[d];
  return m;
}

Matrix row_of(const Vector& v) { return v.transpose(); }

void require_context_model(const CchpModel& m) {
  if (!m.uses_context()) throw std::logic_error("this operation requires a context-conditioned model");
}

/// Runs the encoder cell over a set of sequences (padded to the longest).
/// Returns the time-stacked hidden states, row t * S + s.
struct EncoderRun {
  Var hidden_all;
  Matrix ops_all;
  int steps = 0;
  int sequences = 0;
};

EncoderRun run_encoder(Tape& t, const CchpModel& m, std::span<const Clip* const> seqs) {
  const ModelConfig& c = m.config();
  const int s_count = static_cast<int>(seqs.size());
  int steps = 0;
  for (const Clip* s : seqs) steps = std::max(steps, static_cast<int>(s->size()));
  StateVar state{t.constant(Matrix::Zero(s_count, c.hidden)), t.constant(Matrix::Zero(s_count, c.hidden))};
  Matrix y_prev = Matrix::Zero(s_count, c.op_dim);
  std::vector<Var> hs;
  Matrix ops_all = Matrix::Zero(static_cast<Eigen::Index>(steps) * s_count, c.op_dim);
  for (int step = 0; step < steps; ++step) {
    Matrix x = Matrix::Zero(s_count, c.gesture_dim);
    Matrix y = Matrix::Zero(s_count, c.op_dim);
    for (int s = 0; s < s_count; ++s) {
      const Clip& clip = *seqs[static_cast<std::size_t>(s)];
      if (step >= static_cast<int>(clip.size())) continue;
      x.row(s) = row_of(clip.gesture.frames[static_cast<std::size_t>(step)]);
      y.row(s) = row_of(clip.operation.frames[static_cast<std::size_t>(step)]);
    }
    const Matrix y_in = m.uses_previous_operation() ? y_prev : Matrix::Zero(s_count, c.op_dim);
    state = cell_step(t, m, m.encoder_cell(), t.constant(std::move(x)), t.constant(y_in), state);
    hs.push_back(state.h);
    ops_all.middleRows(static_cast<Eigen::Index>(step) * s_count, s_count) = y;
    y_prev = std::move(y);
  }
  return {ad::concat_rows(hs), std::move(ops_all), steps, s_count};
}

}  // namespace

// ---- single-stream operations ---------------------------------------------

RecurrentState zero_state(const CchpModel& model) {
  const int h = model.config().hidden;
  return {Vector::Zero(h), Vector::Zero(h)};
}

RecurrentState encoder_cell_step(const CchpModel& model, const GestureFrame& x,
                                 const OperationFrame& y_prev, const RecurrentState& prev) {
  require_context_model(model);
  const int hidden = model.config().hidden;
  if (prev.h.size() != hidden || prev.c.size() != hidden) {
    throw std::invalid_argument("encoder_cell_step: state has wrong width");
  }
  Tape t(false);
  const Matrix y = model.uses_previous_operation() ? row_of(y_prev) : Matrix::Zero(1, model.config().op_dim);
  const StateVar s = cell_step(t, model, model.encoder_cell(), t.constant(row_of(x)), t.constant(y),
                               {t.constant(row_of(prev.h)), t.constant(row_of(prev.c))});
  return {s.h.value().row(0).transpose(), s.c.value().row(0).transpose()};
}

namespace {

bool canonical_less(const Clip& a, const Clip& b) {
  if (a.clip_id != b.clip_id) return a.clip_id < b.clip_id;
  if (a.size() != b.size()) return a.size() < b.size();
  const auto bytes = [](const auto& v) { return v.size() * sizeof(v[0]); };
  if (const int c = std::memcmp(a.gesture.frames.data(), b.gesture.frames.data(), bytes(a.gesture.frames)); c != 0) {
    return c < 0;
  }
  return std::memcmp(a.operation.frames.data(), b.operation.frames.data(), bytes(a.operation.frames)) < 0;
}

}  // namespace

ContextEncoding encode_latent(const CchpModel& model, std::span<const Clip> clips) {
  require_context_model(model);
  if (clips.empty()) throw std::invalid_argument("encode_latent: context required");
  for (const Clip& c : clips) {
    if (c.size() == 0 || c.operation.size() != c.size()) {
      throw std::invalid_argument("encode_latent: clip " + c.clip_id + " is empty or inconsistent");
    }
  }
  // Encode in a canonical clip order so the latent does not depend on how the
  // caller ordered the set, down to the last bit; outputs are mapped back below.
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return canonical_less(clips[a], clips[b]); });
  std::vector<const Clip*> seqs;
  for (std::size_t i : order) seqs.push_back(&clips[i]);
  Tape t(false);
  const ParameterStore& p = model.parameters();
  const EncoderRun run = run_encoder(t, model, seqs);

  std::vector<int> rows;
  ContextEncoding enc;
  for (int s = 0; s < run.sequences; ++s) {
    enc.offsets.push_back(rows.size());
    for (int step = 0; step < static_cast<int>(seqs[static_cast<std::size_t>(s)]->size()); ++step) {
      rows.push_back(step * run.sequences + s);
    }
  }
  const double w = 1.0 / static_cast<double>(rows.size());
  std::vector<int> group(static_cast<std::size_t>(run.hidden_all.rows()), -1);
  std::vector<double> weight(group.size(), 0.0);
  for (int r : rows) {
    group[static_cast<std::size_t>(r)] = 0;
    weight[static_cast<std::size_t>(r)] = w;
  }
  const Var features = mlp(t, p, model.aggregation(),
                           ad::concat_cols({run.hidden_all, t.constant(run.ops_all)}));
  const Var summary = ad::segment_sum(features, group, weight, 1);
  const LatentVars lat = latent_head(t, model, summary);
  const Var h_c = ad::gather_rows(run.hidden_all, rows);
  const Var keys = linear(t, p, model.key_query(), h_c);

  // Back to caller order: canonical block s holds input clip order[s].
  std::vector<std::size_t> canon_offset = enc.offsets;
  std::vector<std::size_t> slot(clips.size());
  for (std::size_t s = 0; s < order.size(); ++s) slot[order[s]] = s;
  const auto n_rows = static_cast<Eigen::Index>(rows.size());
  enc.h.resize(n_rows, h_c.cols());
  enc.keys.resize(n_rows, keys.cols());
  enc.y.resize(n_rows, model.config().op_dim);
  enc.offsets.clear();
  Eigen::Index out = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    enc.offsets.push_back(static_cast<std::size_t>(out));
    const auto from = static_cast<Eigen::Index>(canon_offset[slot[i]]);
    const auto len = static_cast<Eigen::Index>(clips[i].size());
    enc.h.middleRows(out, len) = h_c.value().middleRows(from, len);
    enc.keys.middleRows(out, len) = keys.value().middleRows(from, len);
    for (Eigen::Index k = 0; k < len; ++k) enc.y.row(out + k) = run.ops_all.row(rows[static_cast<std::size_t>(from + k)]);
    out += len;
  }
  enc.latent.mean = lat.mean.value().row(0).transpose();
  enc.latent.var = lat.var.value().row(0).transpose();
  enc.summary = summary.value().row(0).transpose();
  return enc;
}

AttentionResult context_attention(const CchpModel& model, const ContextEncoding& enc,
                                  const Vector& hidden) {
  require_context_model(model);
  if (enc.frames() == 0) throw std::invalid_argument("context_attention: empty context");
  Tape t(false);
  const Var q = linear(t, model.parameters(), model.key_query(), t.constant(row_of(hidden)));
  Matrix weights;
  const Var r = ad::masked_attention(q, t.constant(enc.keys), enc.y,
                                     Matrix::Ones(1, enc.h.rows()), &weights);
  return {weights.row(0).transpose(), r.value().row(0).transpose()};
}

StepPrediction decoder_step(const CchpModel& model, const GestureFrame& x, const Vector& y_prev,
                            const RecurrentState& prev, const ContextEncoding& enc, const Vector& z) {
  require_context_model(model);
  const ModelConfig& c = model.config();
  if (y_prev.size() != c.op_dim || z.size() != c.latent_dim || prev.h.size() != c.hidden) {
    throw std::invalid_argument("decoder_step: shape mismatch");
  }
  Tape t(false);
  const ParameterStore& p = model.parameters();
  const Matrix y_in = model.uses_previous_operation() ? row_of(y_prev) : Matrix::Zero(1, c.op_dim);
  const StateVar s = cell_step(t, model, model.decoder_cell(), t.constant(row_of(x)), t.constant(y_in),
                               {t.constant(row_of(prev.h)), t.constant(row_of(prev.c))});
  const Var q = linear(t, p, model.key_query(), s.h);
  Matrix weights;
  const Var r = ad::masked_attention(q, t.constant(enc.keys), enc.y, Matrix::Ones(1, enc.h.rows()), &weights);
  const HeadOut out = heads(t, model, ad::concat_cols({r, s.h, t.constant(row_of(z))}));

  StepPrediction pred;
  pred.mean = out.mean.value().row(0).transpose();
  pred.var = out.var.value().row(0).transpose();
  pred.readout = r.value().row(0).transpose();
  pred.attention = weights.row(0).transpose();
  pred.state = {s.h.value().row(0).transpose(), s.c.value().row(0).transpose()};
  return pred;
}

std::vector<StepPrediction> rollout(const CchpModel& model, const DynamicGesture& gesture,
                                    const ContextEncoding& enc, const Vector& z,
                                    const std::optional<TeacherSignal>& teacher) {
  const std::size_t n = gesture.size();
  if (teacher) {
    if (teacher->truth == nullptr || teacher->truth->size() != n || teacher->mask.size() != n) {
      throw std::invalid_argument("rollout: teacher length mismatch");
    }
  }
  std::vector<StepPrediction> out;
  out.reserve(n);
  RecurrentState state = zero_state(model);
  Vector y_prev = Vector::Zero(model.config().op_dim);
  for (std::size_t t = 0; t < n; ++t) {
    StepPrediction pred = decoder_step(model, gesture.frames[t], y_prev, state, enc, z);
    state = pred.state;
    if (teacher && teacher->mask[t]) {
      y_prev = row_of(teacher->truth->frames[t]).row(0).transpose();
    } else {
      y_prev = pred.mean;
    }
    out.push_back(std::move(pred));
  }
  return out;
}

Vector sample_latent(const GaussianLatent& latent, Rng& rng) {
  if (latent.mean.size() != latent.var.size()) throw std::invalid_argument("sample_latent: shape mismatch");
  Vector z(latent.mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = latent.mean(i) + std::sqrt(latent.var(i)) * rng.normal();
  return z;
}

// ---- batched forward ------------------------------------------------------

BatchForward forward_batch(const CchpModel& model, Tape& t, std::span<const Episode> batch,
                           const ForwardOptions& options) {
  const ModelConfig& c = model.config();
  const ParameterStore& p = model.parameters();
  const int b_count = static_cast<int>(batch.size());
  if (b_count == 0) throw std::invalid_argument("forward_batch: empty batch");

  BatchForward out;
  int steps = 0;
  for (const Episode& e : batch) {
    if (e.target.size() == 0 || e.target.operation.size() != e.target.size()) {
      throw std::invalid_argument("forward_batch: target clip " + e.target.clip_id + " is empty or inconsistent");
    }
    out.lengths.push_back(static_cast<int>(e.target.size()));
    steps = std::max(steps, static_cast<int>(e.target.size()));
  }
  if (options.teacher.size() != 0 && (options.teacher.rows() < steps || options.teacher.cols() != b_count)) {
    throw std::invalid_argument("forward_batch: teacher mask shape mismatch");
  }

  // Encoder over context clips (and targets, for the posterior).
  Var keys;
  Matrix values, key_mask;
  Var z;
  Var kl = t.constant(Matrix::Zero(1, 1));
  const bool context = model.uses_context();
  const bool posterior = context && (options.compute_posterior || options.latent == LatentSource::Posterior);
  if (context) {
    std::vector<const Clip*> seqs;
    std::vector<int> owner;
    for (int b = 0; b < b_count; ++b) {
      const Episode& e = batch[static_cast<std::size_t>(b)];
      if (e.context.empty()) throw std::invalid_argument("forward_batch: episode without context");
      for (const Clip& cc : e.context) {
        if (cc.size() == 0 || cc.operation.size() != cc.size()) {
          throw std::invalid_argument("forward_batch: context clip " + cc.clip_id + " is empty or inconsistent");
        }
        seqs.push_back(&cc);
        owner.push_back(b);
      }
    }
    const int n_ctx = static_cast<int>(seqs.size());
    if (posterior) {
      for (int b = 0; b < b_count; ++b) {
        seqs.push_back(&batch[static_cast<std::size_t>(b)].target);
        owner.push_back(b);
      }
    }
    const EncoderRun run = run_encoder(t, model, seqs);
    const Var features = mlp(t, p, model.aggregation(),
                             ad::concat_cols({run.hidden_all, t.constant(run.ops_all)}));

    std::vector<double> prior_count(static_cast<std::size_t>(b_count), 0.0);
    std::vector<double> post_count(static_cast<std::size_t>(b_count), 0.0);
    for (int s = 0; s < run.sequences; ++s) {
      const double len = static_cast<double>(seqs[static_cast<std::size_t>(s)]->size());
      const auto b = static_cast<std::size_t>(owner[static_cast<std::size_t>(s)]);
      if (s < n_ctx) prior_count[b] += len;
      post_count[b] += len;
    }
    const auto rows = static_cast<std::size_t>(run.hidden_all.rows());
    std::vector<int> g_prior(rows, -1), g_post(rows, -1);
    std::vector<double> w_prior(rows, 0.0), w_post(rows, 0.0);
    for (int step = 0; step < run.steps; ++step) {
      for (int s = 0; s < run.sequences; ++s) {
        if (step >= static_cast<int>(seqs[static_cast<std::size_t>(s)]->size())) continue;
        const auto r = static_cast<std::size_t>(step * run.sequences + s);
        const int b = owner[static_cast<std::size_t>(s)];
        if (s < n_ctx) {
          g_prior[r] = b;
          w_prior[r] = 1.0 / prior_count[static_cast<std::size_t>(b)];
        }
        g_post[r] = b;
        w_post[r] = 1.0 / post_count[static_cast<std::size_t>(b)];
      }
    }
    const LatentVars prior = latent_head(t, model, ad::segment_sum(features, g_prior, w_prior, b_count));
    out.prior_mean = prior.mean.value();
    out.prior_var = prior.var.value();
    LatentVars post{};
    if (posterior) {
      post = latent_head(t, model, ad::segment_sum(features, g_post, w_post, b_count));
      out.posterior_mean = post.mean.value();
      out.posterior_var = post.var.value();
      kl = ad::gaussian_kl(post.mean, post.var, prior.mean, prior.var, Vector::Ones(b_count));
      const auto terms = 0.5 * ((out.prior_var.array().log() - out.posterior_var.array().log()) +
                                (out.posterior_var.array() +
                                 (out.posterior_mean.array() - out.prior_mean.array()).square()) /
                                    out.prior_var.array() -
                                1.0);
      out.kl_per_element = terms.rowwise().sum().matrix();
    } else {
      out.kl_per_element = Vector::Zero(b_count);
    }

    // Attention keys: every context frame of each element, padded to the longest.
    int n_keys = 0;
    out.context_offsets.resize(static_cast<std::size_t>(b_count));
    std::vector<std::vector<int>> key_rows(static_cast<std::size_t>(b_count));
    for (int s = 0; s < n_ctx; ++s) {
      auto& kr = key_rows[static_cast<std::size_t>(owner[static_cast<std::size_t>(s)])];
      out.context_offsets[static_cast<std::size_t>(owner[static_cast<std::size_t>(s)])].push_back(kr.size());
      for (int step = 0; step < static_cast<int>(seqs[static_cast<std::size_t>(s)]->size()); ++step) {
        kr.push_back(step * run.sequences + s);
      }
    }
    for (const auto& kr : key_rows) n_keys = std::max(n_keys, static_cast<int>(kr.size()));
    std::vector<int> gather(static_cast<std::size_t>(b_count * n_keys), -1);
    values = Matrix::Zero(b_count * n_keys, c.op_dim);
    key_mask = Matrix::Zero(b_count, n_keys);
    for (int b = 0; b < b_count; ++b) {
      const auto& kr = key_rows[static_cast<std::size_t>(b)];
      for (std::size_t u = 0; u < kr.size(); ++u) {
        const auto slot = static_cast<std::size_t>(b * n_keys) + u;
        gather[slot] = kr[u];
        values.row(static_cast<Eigen::Index>(slot)) = run.ops_all.row(kr[u]);
        key_mask(b, static_cast<Eigen::Index>(u)) = 1.0;
      }
    }
    keys = linear(t, p, model.key_query(), ad::gather_rows(run.hidden_all, std::move(gather)));

    const LatentVars& source = options.latent == LatentSource::Posterior ? post : prior;
    if (options.noise.size() != 0) {
      if (options.noise.rows() != b_count || options.noise.cols() != c.latent_dim) {
        throw std::invalid_argument("forward_batch: noise shape mismatch");
      }
      z = ad::add(source.mean, ad::hadamard(ad::sqrt(source.var), t.constant(options.noise)));
    } else {
      z = source.mean;
    }
  } else {
    out.kl_per_element = Vector::Zero(b_count);
  }

  // Decoder over the target streams.
  StateVar state{t.constant(Matrix::Zero(b_count, c.hidden)), t.constant(Matrix::Zero(b_count, c.hidden))};
  StateVar state2 = state;
  Var y_prev = t.constant(Matrix::Zero(b_count, c.op_dim));
  const Var zeros_y = y_prev;
  std::vector<Var> nll_terms;
  out.nll_per_element = Vector::Zero(b_count);
  out.sq_error_per_element = Vector::Zero(b_count);
  constexpr double kLog2Pi = 1.8378770664093453;
  for (int step = 0; step < steps; ++step) {
    Matrix x = Matrix::Zero(b_count, c.gesture_dim);
    Matrix y = Matrix::Zero(b_count, c.op_dim);
    Vector valid = Vector::Zero(b_count);
    for (int b = 0; b < b_count; ++b) {
      const Clip& target = batch[static_cast<std::size_t>(b)].target;
      if (step >= static_cast<int>(target.size())) continue;
      x.row(b) = row_of(target.gesture.frames[static_cast<std::size_t>(step)]);
      y.row(b) = row_of(target.operation.frames[static_cast<std::size_t>(step)]);
      valid(b) = 1.0;
    }
    const Var y_in = model.uses_previous_operation() ? y_prev : zeros_y;
    state = cell_step(t, model, model.decoder_cell(), t.constant(x), y_in, state);
    Var head_in;
    if (context) {
      const Var q = linear(t, p, model.key_query(), state.h);
      Matrix weights;
      const Var r = ad::masked_attention(q, keys, values, key_mask, options.keep_attention ? &weights : nullptr);
      if (options.keep_attention) out.attention.push_back(std::move(weights));
      head_in = ad::concat_cols({r, state.h, z});
    } else {
      state2 = lstm(t, p, model.second_cell().lstm, state.h, state2, c.hidden);
      head_in = state2.h;
    }
    const HeadOut pred = heads(t, model, head_in);
    nll_terms.push_back(ad::gaussian_nll(y, pred.mean, pred.var, valid));

    const Matrix& mv = pred.mean.value();
    const Matrix& vv = pred.var.value();
    const Eigen::ArrayXXd diff = mv.array() - y.array();
    const Eigen::ArrayXd nll_rows = (0.5 * ((kLog2Pi + vv.array().log()) + diff.square() / vv.array())).rowwise().sum();
    out.nll_per_element.array() += nll_rows * valid.array();
    out.sq_error_per_element.array() += diff.square().rowwise().sum() * valid.array();
    out.means.push_back(mv);
    out.variances.push_back(vv);

    if (options.teacher.size() != 0) {
      Matrix feed = Matrix::Zero(b_count, c.op_dim);
      Matrix keep = Matrix::Zero(b_count, c.op_dim);
      for (int b = 0; b < b_count; ++b) {
        const double m = options.teacher(step, b);
        feed.row(b) = m * y.row(b);
        keep.row(b).setConstant(1.0 - m);
      }
      y_prev = ad::add(t.constant(std::move(feed)), ad::hadamard(t.constant(std::move(keep)), pred.mean));
    } else {
      y_prev = pred.mean;
    }
  }

  Var nll_total = nll_terms.front();
  for (std::size_t i = 1; i < nll_terms.size(); ++i) nll_total = ad::add(nll_total, nll_terms[i]);
  out.nll = ad::scale(nll_total, 1.0 / b_count);
  out.kl = ad::scale(kl, 1.0 / b_count);
  out.loss = ad::add(out.nll, out.kl);
  return out;
}

}  // namespace cchp
