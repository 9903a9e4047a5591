#include "kurtail/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "kurtail/error.hpp"
#include "kurtail/parallel.hpp"
#include "kurtail/random.hpp"
#include "kurtail/stats.hpp"

namespace kurtail::pipeline {

using linalg::Matrix;
using rotor::ActivationSet;
using rotor::BlockKind;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument("config: '" + where + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.contains(key)) throw InvalidArgument("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string init_name(rotor::RotationInit i) {
  switch (i) {
    case rotor::RotationInit::random_orthogonal: return "random_orthogonal";
    case rotor::RotationInit::randomized_hadamard: return "randomized_hadamard";
    case rotor::RotationInit::identity: return "identity";
  }
  return "unknown";
}

rotor::RotationInit parse_init(const std::string& s) {
  for (auto i : {rotor::RotationInit::random_orthogonal, rotor::RotationInit::randomized_hadamard,
                 rotor::RotationInit::identity})
    if (init_name(i) == s) return i;
  throw InvalidArgument("config: unknown rotation init '" + s + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

Matrix strided_token_rows(const Matrix& x, std::size_t max_values) {
  const std::size_t cap = std::max<std::size_t>(1, max_values / std::max<std::size_t>(1, x.cols()));
  if (x.rows() <= cap) return x;
  Matrix out(cap, x.cols());
  for (std::size_t i = 0; i < cap; ++i) {
    const auto src = x.row(i * x.rows() / cap);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.quant.weights = toyformer::WeightMethod::gptq;
  return c;
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& s = c.synthetic;
  const auto& t = c.train;
  const auto& q = c.quant;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"model_file", c.model_file.string()},
      {"model",
       {{"d_model", m.d_model}, {"n_heads", m.n_heads}, {"d_ff", m.d_ff}, {"n_layers", m.n_layers},
        {"rope_base", m.rope_base}, {"vocab", m.vocab}, {"rms_epsilon", m.rms_epsilon}}},
      {"synthetic",
       {{"outlier_channels", s.outlier_channels}, {"outlier_low", s.outlier_low}, {"outlier_high", s.outlier_high},
        {"outlier_jitter", s.outlier_jitter}, {"weight_outlier_scale", s.weight_outlier_scale},
        {"latent_uniform", s.latent_uniform}, {"random_norm_scales", s.random_norm_scales}}},
      {"calibration",
       {{"dir", c.calibration_dir.string()}, {"sample_count", c.sample_count},
        {"sequence_length", c.sequence_length}, {"gptq_samples", c.gptq_samples},
        {"eval_sequences", c.eval_sequences}}},
      {"train",
       {{"iterations", t.iterations}, {"groups_per_batch", t.groups_per_batch},
        {"tokens_per_group", t.tokens_per_group}, {"eval_tokens_per_group", t.eval_tokens_per_group},
        {"kappa_u", t.kappa_u}, {"init", init_name(t.init)}, {"lr", t.optimizer.lr},
        {"beta1", t.optimizer.beta1}, {"beta2", t.optimizer.beta2}, {"eps", t.optimizer.eps},
        {"cayley_iterations", t.optimizer.cayley_iterations},
        {"second_moment", t.optimizer.second_moment == manifold::SecondMoment::scalar ? "scalar" : "elementwise"},
        {"cosine_decay", t.cosine_decay}, {"train_r2", c.train_r2}}},
      {"quant",
       {{"activation_bits", q.activation.bits}, {"activation_clip", q.activation.clip_quantile},
        {"kv_bits", q.kv.bits}, {"weight_bits", q.weight_bits}, {"weights", toyformer::to_string(q.weights)},
        {"gptq_act_order", q.gptq_act_order}, {"gptq_damping", q.gptq_damping},
        {"quantize_activations", q.quantize_activations}, {"quantize_kv", q.quantize_kv}}},
      {"online", {{"r3", c.online_r3}, {"r4", c.online_r4}, {"r5", c.online_r5}}},
      {"sensitivity", {{"alphas", c.alphas}, {"max_values", c.sensitivity_max_values}}},
      {"figure", {{"tokens", c.figure_tokens}}},
  };
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  try {
    reject_unknown(j, {"seed", "output_dir", "model_file", "model", "synthetic", "calibration", "train", "quant",
                       "online", "sensitivity", "figure"},
                   "config");
    read(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("model_file")) c.model_file = j.at("model_file").get<std::string>();
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m, {"d_model", "n_heads", "d_ff", "n_layers", "rope_base", "vocab", "rms_epsilon"}, "model");
      read(m, "d_model", c.model.d_model);
      read(m, "n_heads", c.model.n_heads);
      read(m, "d_ff", c.model.d_ff);
      read(m, "n_layers", c.model.n_layers);
      read(m, "rope_base", c.model.rope_base);
      read(m, "vocab", c.model.vocab);
      read(m, "rms_epsilon", c.model.rms_epsilon);
    }
    if (j.contains("synthetic")) {
      const json& s = j.at("synthetic");
      reject_unknown(s, {"outlier_channels", "outlier_low", "outlier_high", "outlier_jitter", "weight_outlier_scale",
                         "latent_uniform", "random_norm_scales"},
                     "synthetic");
      read(s, "outlier_channels", c.synthetic.outlier_channels);
      read(s, "outlier_low", c.synthetic.outlier_low);
      read(s, "outlier_high", c.synthetic.outlier_high);
      read(s, "outlier_jitter", c.synthetic.outlier_jitter);
      read(s, "weight_outlier_scale", c.synthetic.weight_outlier_scale);
      read(s, "latent_uniform", c.synthetic.latent_uniform);
      read(s, "random_norm_scales", c.synthetic.random_norm_scales);
    }
    if (j.contains("calibration")) {
      const json& k = j.at("calibration");
      reject_unknown(k, {"dir", "sample_count", "sequence_length", "gptq_samples", "eval_sequences"}, "calibration");
      if (k.contains("dir")) c.calibration_dir = k.at("dir").get<std::string>();
      read(k, "sample_count", c.sample_count);
      read(k, "sequence_length", c.sequence_length);
      read(k, "gptq_samples", c.gptq_samples);
      read(k, "eval_sequences", c.eval_sequences);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"iterations", "groups_per_batch", "tokens_per_group", "eval_tokens_per_group", "kappa_u",
                         "init", "lr", "beta1", "beta2", "eps", "cayley_iterations", "second_moment",
                         "cosine_decay", "train_r2"},
                     "train");
      read(t, "iterations", c.train.iterations);
      read(t, "groups_per_batch", c.train.groups_per_batch);
      read(t, "tokens_per_group", c.train.tokens_per_group);
      read(t, "eval_tokens_per_group", c.train.eval_tokens_per_group);
      read(t, "kappa_u", c.train.kappa_u);
      if (t.contains("init")) c.train.init = parse_init(t.at("init").get<std::string>());
      read(t, "lr", c.train.optimizer.lr);
      read(t, "beta1", c.train.optimizer.beta1);
      read(t, "beta2", c.train.optimizer.beta2);
      read(t, "eps", c.train.optimizer.eps);
      read(t, "cayley_iterations", c.train.optimizer.cayley_iterations);
      if (t.contains("second_moment")) {
        const std::string sm = t.at("second_moment").get<std::string>();
        if (sm == "scalar") {
          c.train.optimizer.second_moment = manifold::SecondMoment::scalar;
        } else if (sm == "elementwise") {
          c.train.optimizer.second_moment = manifold::SecondMoment::elementwise;
        } else {
          throw InvalidArgument("config: second_moment must be scalar or elementwise");
        }
      }
      read(t, "cosine_decay", c.train.cosine_decay);
      read(t, "train_r2", c.train_r2);
    }
    if (j.contains("quant")) {
      const json& q = j.at("quant");
      reject_unknown(q, {"activation_bits", "activation_clip", "kv_bits", "weight_bits", "weights", "gptq_act_order",
                         "gptq_damping", "quantize_activations", "quantize_kv"},
                     "quant");
      read(q, "activation_bits", c.quant.activation.bits);
      read(q, "activation_clip", c.quant.activation.clip_quantile);
      read(q, "kv_bits", c.quant.kv.bits);
      read(q, "weight_bits", c.quant.weight_bits);
      if (q.contains("weights")) c.quant.weights = toyformer::parse_weight_method(q.at("weights").get<std::string>());
      read(q, "gptq_act_order", c.quant.gptq_act_order);
      read(q, "gptq_damping", c.quant.gptq_damping);
      read(q, "quantize_activations", c.quant.quantize_activations);
      read(q, "quantize_kv", c.quant.quantize_kv);
    }
    if (j.contains("online")) {
      const json& o = j.at("online");
      reject_unknown(o, {"r3", "r4", "r5"}, "online");
      read(o, "r3", c.online_r3);
      read(o, "r4", c.online_r4);
      read(o, "r5", c.online_r5);
    }
    if (j.contains("sensitivity")) {
      const json& s = j.at("sensitivity");
      reject_unknown(s, {"alphas", "max_values"}, "sensitivity");
      read(s, "alphas", c.alphas);
      read(s, "max_values", c.sensitivity_max_values);
    }
    if (j.contains("figure")) {
      reject_unknown(j.at("figure"), {"tokens"}, "figure");
      read(j.at("figure"), "tokens", c.figure_tokens);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.model.validate();
  c.quant.activation.validate();
  c.quant.kv.validate();
  if (c.quant.weight_bits < 2) throw InvalidArgument("config: weight_bits must be >= 2");
  if (c.sample_count == 0 || c.sequence_length == 0) throw InvalidArgument("config: empty calibration");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

Seeds Seeds::from(std::uint64_t seed) {
  return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3),
          derive_seed(seed, 4), derive_seed(seed, 5), derive_seed(seed, 6)};
}

DecoderModel build_model(const RunConfig& c) {
  if (!c.model_file.empty()) return io::read_model(c.model_file);
  toyformer::SyntheticSpec spec = c.synthetic;
  spec.seed = Seeds::from(c.seed).model;
  return toyformer::make_synthetic_model(c.model, spec);
}

std::vector<TokenSequence> calibration_corpus(const RunConfig& c) {
  return toyformer::synthetic_corpus(c.model.vocab, c.sample_count, c.sequence_length, Seeds::from(c.seed).calibration);
}

std::vector<TokenSequence> evaluation_corpus(const RunConfig& c) {
  return toyformer::synthetic_corpus(c.model.vocab, c.eval_sequences, c.sequence_length, Seeds::from(c.seed).evaluation);
}

toyformer::OnlineRotations online_rotations(const RunConfig& c) {
  const std::uint64_t s = Seeds::from(c.seed).online;
  toyformer::OnlineRotations o;
  if (c.online_r3) o.r3 = toyformer::OnlineRotation::hadamard(derive_seed(s, 3));
  if (c.online_r4) o.r4 = toyformer::OnlineRotation::hadamard(derive_seed(s, 4));
  if (c.online_r5) o.r5 = toyformer::OnlineRotation::hadamard(derive_seed(s, 5));
  return o;
}

ActivationSet capture_activations(LayerSource& source, const std::vector<TokenSequence>& data,
                                  const fs::path& out_dir, const std::string& source_tag) {
  if (data.empty()) throw InvalidArgument("capture_activations: no calibration sequences");
  const toyformer::ModelConfig& cfg = source.config();
  ActivationSet acts;
  acts.d_model = cfg.d_model;
  acts.n_heads = cfg.n_heads;
  acts.sample_count = data.size();
  acts.sequence_length = data.front().size();
  acts.source = source_tag;

  std::vector<Matrix> hidden(data.size());
  {
    toyformer::DecoderModel shell;
    shell.config = cfg;
    shell.embedding = source.embedding();
    for (std::size_t i = 0; i < data.size(); ++i) hidden[i] = toyformer::embed(shell, data[i]);
  }
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const toyformer::LayerWeights w = source.load_layer(l);
    std::vector<toyformer::LayerCapture> caps(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
      std::vector<toyformer::LayerCapture> one;
      toyformer::ForwardOptions fo;
      fo.capture = &one;
      hidden[i] = toyformer::decoder_layer(cfg, w, source.online(), hidden[i], fo);
      caps[i] = std::move(one.front());
    });
    std::vector<Matrix> mhsa, ffn, value;
    for (auto& cap : caps) {
      mhsa.push_back(std::move(cap.points[static_cast<std::size_t>(toyformer::CapturePoint::mhsa_input)]));
      ffn.push_back(std::move(cap.points[static_cast<std::size_t>(toyformer::CapturePoint::ffn_input)]));
      value.push_back(std::move(cap.points[static_cast<std::size_t>(toyformer::CapturePoint::value_output)]));
    }
    acts.append(l, BlockKind::mhsa_input, linalg::vstack(mhsa));
    acts.append(l, BlockKind::ffn_input, linalg::vstack(ffn));
    acts.append(l, BlockKind::value_output, linalg::vstack(value));
  }
  if (!out_dir.empty()) io::save_activation_set(out_dir, acts);
  return acts;
}

RotationSet hadamard_rotations(const toyformer::ModelConfig& cfg, std::uint64_t seed,
                               const toyformer::OnlineRotations& online) {
  RotationSet r{linalg::randomized_hadamard(cfg.d_model, derive_seed(seed, 0)), {}, online};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    r.r2.push_back(linalg::block_diagonal(linalg::randomized_hadamard(cfg.head_dim(), derive_seed(seed, 1 + l)),
                                          cfg.n_heads));
  }
  return r;
}

ConditionRotations kurtail_rotations(const ActivationSet& acts, const toyformer::ModelConfig& cfg,
                                     const rotor::TrainConfig& train, bool train_r2,
                                     const toyformer::OnlineRotations& online) {
  rotor::TrainResult r1 = rotor::train_r1(acts, train);
  ConditionRotations out{"kurtail", RotationSet{r1.rotation, {}, online}, {}};
  out.training.push_back(std::move(r1));
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    if (train_r2) {
      rotor::TrainResult r2 = rotor::train_r2(acts, l, train);
      out.rotations.r2.push_back(r2.rotation);
      out.training.push_back(std::move(r2));
    } else {
      out.rotations.r2.push_back(linalg::OrthogonalMatrix::identity(cfg.d_model));
    }
  }
  return out;
}

ActivationSet rotate_activations(const ActivationSet& acts, const RotationSet& rot) {
  ActivationSet out;
  out.d_model = acts.d_model;
  out.n_heads = acts.n_heads;
  out.sample_count = acts.sample_count;
  out.sequence_length = acts.sequence_length;
  out.source = acts.source;
  for (const rotor::ActivationRecord& r : acts.records()) {
    const linalg::OrthogonalMatrix& q =
        r.block == BlockKind::value_output ? rot.r2.at(r.layer) : rot.r1;
    out.append(r.layer, r.block, linalg::matmul(r.tokens, q.matrix()));
  }
  return out;
}

double quantized_output_mse(const DecoderModel& reference, const DecoderModel& quantized,
                            const toyformer::QuantConfigSet& q, const std::vector<TokenSequence>& inputs) {
  if (inputs.empty()) throw InvalidArgument("quantized_output_mse: no inputs");
  std::vector<double> per(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const Matrix ref = toyformer::forward(reference, inputs[i]);
    toyformer::ForwardOptions fo;
    fo.quant = &q;
    const Matrix out = toyformer::forward(quantized, inputs[i], fo);
    double s = 0.0;
    for (std::size_t k = 0; k < ref.size(); ++k) {
      const double d = out.data()[k] - ref.data()[k];
      s += d * d;
    }
    per[i] = s / static_cast<double>(ref.size());
  });
  double total = 0.0;
  for (double v : per) total += v;
  return total / static_cast<double>(per.size());
}

std::vector<quant::SensitivityReport> sensitivity_reports(
    const std::vector<std::pair<std::string, ActivationSet>>& conditions, int bits, const std::vector<double>& alphas,
    std::size_t max_values) {
  struct Job {
    const std::string* condition;
    const rotor::ActivationRecord* record;
  };
  std::vector<Job> jobs;
  for (const auto& [name, acts] : conditions)
    for (BlockKind kind : {BlockKind::mhsa_input, BlockKind::ffn_input})
      for (const rotor::ActivationRecord* r : acts.of_kind(kind)) jobs.push_back({&name, r});
  if (jobs.empty()) throw InvalidArgument("sensitivity: no mhsa_input/ffn_input activations");
  std::vector<std::optional<quant::SensitivityReport>> out(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    const Matrix sample = strided_token_rows(jobs[i].record->tokens, max_values);
    quant::SensitivityReport rep = quant::sensitivity(sample.data(), bits, alphas);
    rep.condition = *jobs[i].condition;
    rep.layer = jobs[i].record->layer;
    rep.block = rotor::to_string(jobs[i].record->block);
    out[i] = std::move(rep);
  });
  std::vector<quant::SensitivityReport> reports;
  for (auto& r : out) reports.push_back(std::move(*r));
  return reports;
}

std::string sensitivity_csv(const std::vector<quant::SensitivityReport>& reports, const json& metadata) {
  std::ostringstream os;
  for (const auto& [key, value] : metadata.items()) os << "# " << key << ": " << value.dump() << "\n";
  os << "layer,block,condition,alpha,gamma\n";
  for (const quant::SensitivityReport& r : reports)
    for (std::size_t i = 0; i < r.alphas.size(); ++i)
      os << r.layer << "," << r.block << "," << r.condition << "," << fmt(r.alphas[i]) << "," << fmt(r.gamma[i])
         << "\n";
  return os.str();
}

std::vector<quant::SensitivityReport> parse_sensitivity_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  bool header = false;
  std::vector<quant::SensitivityReport> out;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    if (!header) {
      if (line != "layer,block,condition,alpha,gamma") throw InvalidArgument("sensitivity CSV: unexpected header");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw InvalidArgument("sensitivity CSV: expected 5 fields in '" + line + "'");
    const auto layer = static_cast<std::uint32_t>(std::stoul(f[0]));
    if (out.empty() || out.back().layer != layer || out.back().block != f[1] || out.back().condition != f[2]) {
      quant::SensitivityReport r;
      r.layer = layer;
      r.block = f[1];
      r.condition = f[2];
      out.push_back(std::move(r));
    }
    out.back().alphas.push_back(std::stod(f[3]));
    out.back().gamma.push_back(std::stod(f[4]));
  }
  if (!header) throw InvalidArgument("sensitivity CSV: missing header");
  return out;
}

namespace {

struct Prepared {
  DecoderModel original;
  DecoderModel folded;
  std::vector<TokenSequence> calibration;
  ActivationSet vanilla;
  ConditionRotations kurtail;
  RotationSet hadamard;
};

Prepared prepare(const RunConfig& c, bool write_files) {
  const Seeds seeds = Seeds::from(c.seed);
  DecoderModel original = stage("model", [&] { return build_model(c); });
  DecoderModel folded = stage("model", [&] { return toyformer::fold_rmsnorm(original); });
  if (folded.online.r3.active() || folded.online.r4.active() || folded.online.r5.active()) {
    throw StageError("model", "input model already carries online rotations");
  }
  std::vector<TokenSequence> cal = stage("capture", [&] { return calibration_corpus(c); });
  ActivationSet vanilla = stage("capture", [&] {
    if (!c.calibration_dir.empty()) return io::load_activation_set(c.calibration_dir);
    InMemoryLayerSource src(folded);
    return capture_activations(src, cal, write_files ? c.output_dir / "activations" : fs::path{});
  });
  const toyformer::OnlineRotations online = online_rotations(c);
  rotor::TrainConfig train = c.train;
  train.seed = seeds.training;
  ConditionRotations kur =
      stage("train", [&] { return kurtail_rotations(vanilla, folded.config, train, c.train_r2, online); });
  RotationSet had = stage("train", [&] { return hadamard_rotations(folded.config, seeds.hadamard, online); });
  return {std::move(original), std::move(folded), std::move(cal), std::move(vanilla), std::move(kur), std::move(had)};
}

json sensitivity_metadata(const RunConfig& c) {
  return json{{"seed", c.seed},
              {"bits", c.quant.activation.bits},
              {"quantizer", "per-tensor symmetric"},
              {"aggregation", "concatenated per-layer sample"},
              {"max_values", c.sensitivity_max_values}};
}

}  // namespace

std::vector<quant::SensitivityReport> run_sensitivity_experiment(const RunConfig& c) {
  Prepared p = prepare(c, false);
  return stage("evaluate", [&] {
    std::vector<std::pair<std::string, ActivationSet>> conds;
    conds.emplace_back("vanilla", p.vanilla);
    conds.emplace_back("hadamard", rotate_activations(p.vanilla, p.hadamard));
    conds.emplace_back("kurtail", rotate_activations(p.vanilla, p.kurtail.rotations));
    auto reports = sensitivity_reports(conds, c.quant.activation.bits, c.alphas, c.sensitivity_max_values);
    io::write_text(c.output_dir / "sensitivity.csv", sensitivity_csv(reports, sensitivity_metadata(c)));
    return reports;
  });
}

std::string outlier_figure_csv(const ActivationSet& before, const ActivationSet& after, std::size_t max_tokens) {
  std::ostringstream os;
  std::size_t width = 0;
  for (const rotor::ActivationRecord& r : before.records()) width = std::max(width, r.tokens.cols());
  os << "condition,layer,block,token,max_abs";
  for (std::size_t c = 0; c < width; ++c) os << ",c" << c;
  os << "\n";
  for (BlockKind kind : {BlockKind::mhsa_input, BlockKind::ffn_input}) {
    for (const rotor::ActivationRecord* b : before.of_kind(kind)) {
      const rotor::ActivationRecord* a = after.find(b->layer, kind);
      if (a == nullptr || a->tokens.rows() != b->tokens.rows() || a->tokens.cols() != b->tokens.cols()) {
        throw DimensionError("figure data: activation sets are not aligned");
      }
      for (auto [name, rec] : {std::pair{"before", b}, std::pair{"after", a}}) {
        const std::size_t n = std::min(max_tokens, rec->tokens.rows());
        for (std::size_t t = 0; t < n; ++t) {
          const auto row = rec->tokens.row(t);
          double mx = 0.0;
          for (double v : row) mx = std::max(mx, std::abs(v));
          os << name << "," << rec->layer << "," << rotor::to_string(kind) << "," << t << "," << fmt(mx);
          for (double v : row) os << "," << fmt(std::abs(v));
          os << "\n";
        }
      }
    }
  }
  return os.str();
}

std::string emit_outlier_figure_data(const RunConfig& c) {
  Prepared p = prepare(c, false);
  return stage("evaluate", [&] {
    const std::string csv =
        outlier_figure_csv(p.vanilla, rotate_activations(p.vanilla, p.kurtail.rotations), c.figure_tokens);
    io::write_text(c.output_dir / "outlier_figure.csv", csv);
    return csv;
  });
}

json run_end_to_end(const RunConfig& c) {
  Prepared p = prepare(c, true);
  const Seeds seeds = Seeds::from(c.seed);
  const std::vector<TokenSequence> eval = evaluation_corpus(c);

  stage("train", [&] {
    io::save_rotation_set(c.output_dir / "rotations" / "kurtail", p.kurtail.rotations);
    io::save_rotation_set(c.output_dir / "rotations" / "hadamard", p.hadamard);
    std::ostringstream log;
    log << "rotation,iteration,loss\n";
    for (std::size_t k = 0; k < p.kurtail.training.size(); ++k) {
      const std::string name = k == 0 ? "r1" : "r2_layer" + std::to_string(k - 1);
      const auto& losses = p.kurtail.training[k].loss_log;
      for (std::size_t i = 0; i < losses.size(); ++i) log << name << "," << i << "," << fmt(losses[i]) << "\n";
    }
    io::write_text(c.output_dir / "train_log.csv", log.str());
    return 0;
  });

  struct Condition {
    std::string name;
    DecoderModel model;
  };
  std::vector<Condition> conds = stage("fuse", [&] {
    std::vector<Condition> out;
    out.push_back({"vanilla", p.folded});
    out.push_back({"hadamard", toyformer::fuse_rotations(p.folded, p.hadamard)});
    out.push_back({"kurtail", toyformer::fuse_rotations(p.folded, p.kurtail.rotations)});
    return out;
  });
  const double invariance = stage("fuse", [&] {
    double worst = 0.0;
    for (const Condition& cond : conds) worst = std::max(worst, toyformer::invariance_report(p.original, cond.model, eval));
    return worst;
  });

  const std::vector<TokenSequence> gptq_cal(p.calibration.begin(),
                                            p.calibration.begin() + std::min(c.gptq_samples, p.calibration.size()));
  std::vector<DecoderModel> quantized = stage("quantize", [&] {
    std::vector<DecoderModel> out;
    for (const Condition& cond : conds) out.push_back(toyformer::quantize_weights(cond.model, c.quant, gptq_cal));
    return out;
  });

  json summary = stage("evaluate", [&] {
    json s;
    json cfg = to_json(c);
    cfg.erase("output_dir");
    s["config"] = cfg;
    s["seeds"] = {{"run", c.seed},           {"model", seeds.model},       {"calibration", seeds.calibration},
                  {"evaluation", seeds.evaluation}, {"training", seeds.training}, {"hadamard", seeds.hadamard},
                  {"online", seeds.online}};
    s["invariance_deviation"] = invariance;
    json mse, ppl;
    for (std::size_t i = 0; i < conds.size(); ++i) {
      const double m = quantized_output_mse(p.original, quantized[i], c.quant, eval);
      mse[conds[i].name] = m;
      ppl[conds[i].name] = std::exp(m);
    }
    s["quantized_output_mse"] = mse;
    s["toy_perplexity"] = ppl;

    const ActivationSet had_acts = rotate_activations(p.vanilla, p.hadamard);
    const ActivationSet kur_acts = rotate_activations(p.vanilla, p.kurtail.rotations);
    json kurt = json::array();
    for (const rotor::ActivationRecord& r : p.vanilla.records()) {
      kurt.push_back({{"layer", r.layer},
                      {"block", rotor::to_string(r.block)},
                      {"vanilla", stats::kurtosis(r.tokens.data()).kappa},
                      {"hadamard", stats::kurtosis(had_acts.at(r.layer, r.block).tokens.data()).kappa},
                      {"kurtail", stats::kurtosis(kur_acts.at(r.layer, r.block).tokens.data()).kappa}});
    }
    s["kurtosis"] = kurt;
    auto rate = [](const toyformer::SuccessRate& r) {
      json j{{"mean", r.mean}};
      for (const auto& [kind, pct] : r.per_block) j[rotor::to_string(kind)] = pct;
      return j;
    };
    s["success_rate"] = {{"kurtail_vs_vanilla", rate(toyformer::success_rate(p.vanilla, kur_acts))},
                         {"hadamard_vs_vanilla", rate(toyformer::success_rate(p.vanilla, had_acts))},
                         {"kurtail_vs_hadamard", rate(toyformer::success_rate(had_acts, kur_acts))}};
    json training = json::array();
    for (std::size_t k = 0; k < p.kurtail.training.size(); ++k) {
      const auto& t = p.kurtail.training[k];
      training.push_back({{"rotation", k == 0 ? std::string("r1") : "r2_layer" + std::to_string(k - 1)},
                          {"iterations", t.loss_log.size()},
                          {"initial_loss", t.initial_loss},
                          {"final_loss", t.final_loss}});
    }
    s["training"] = training;
    io::write_text(c.output_dir / "summary.json", s.dump(2) + "\n");
    return s;
  });
  return summary;
}

}  // namespace kurtail::pipeline
