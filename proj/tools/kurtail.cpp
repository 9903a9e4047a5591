// kurtail command-line front end.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "kurtail/error.hpp"
#include "kurtail/io.hpp"
#include "kurtail/pipeline.hpp"

namespace {

using namespace kurtail;
using pipeline::RunConfig;
using nlohmann::json;
namespace fs = std::filesystem;

// Options shared by every verb that builds a RunConfig.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> seq_len;
  std::optional<std::size_t> iterations;
  std::string weights;
  std::string model_file;
  std::optional<bool> train_r2;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed = cmd->add_option("--seed", c.seed, "run seed");
  if (seed_required) seed->required();
  cmd->add_option("--output-dir,-o", c.output_dir, "output directory");
  cmd->add_option("--samples", c.samples, "calibration sequences");
  cmd->add_option("--seq-len", c.seq_len, "calibration sequence length");
  cmd->add_option("--iterations", c.iterations, "rotation training iterations");
  cmd->add_option("--weights", c.weights, "weight quantizer: none, rtn or gptq");
  cmd->add_option("--model", c.model_file, "KTWT model file instead of a synthetic model");
  cmd->add_option("--train-r2", c.train_r2, "learn R2 (true) or keep it at identity (false)");
}

RunConfig resolve(const Common& c) {
  RunConfig r = c.config.empty() ? pipeline::default_run_config() : pipeline::load_run_config(c.config);
  if (c.seed) r.seed = *c.seed;
  if (!c.output_dir.empty()) r.output_dir = c.output_dir;
  if (c.samples) r.sample_count = *c.samples;
  if (c.seq_len) r.sequence_length = *c.seq_len;
  if (c.iterations) r.train.iterations = *c.iterations;
  if (!c.weights.empty()) r.quant.weights = toyformer::parse_weight_method(c.weights);
  if (!c.model_file.empty()) r.model_file = c.model_file;
  if (c.train_r2) r.train_r2 = *c.train_r2;
  return r;
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

int capture(const Common& opt) {
  const RunConfig c = resolve(opt);
  const toyformer::DecoderModel model = pipeline::build_model(c);
  const toyformer::DecoderModel folded = toyformer::fold_rmsnorm(model);
  io::write_model(c.output_dir / "model.ktwt", model);
  pipeline::InMemoryLayerSource src(folded);
  const rotor::ActivationSet acts =
      pipeline::capture_activations(src, pipeline::calibration_corpus(c), c.output_dir / "activations");
  print({{"model", (c.output_dir / "model.ktwt").string()},
         {"activations", (c.output_dir / "activations").string()},
         {"records", acts.records().size()}});
  return 0;
}

int train_rot(const Common& opt, const std::string& acts_dir) {
  RunConfig c = resolve(opt);
  const rotor::ActivationSet acts = io::load_activation_set(acts_dir);
  toyformer::ModelConfig cfg = c.model;
  cfg.d_model = acts.d_model;
  cfg.n_heads = acts.n_heads;
  std::uint32_t layers = 0;
  for (const rotor::ActivationRecord& r : acts.records()) layers = std::max(layers, r.layer + 1);
  cfg.n_layers = layers;
  rotor::TrainConfig train = c.train;
  train.seed = pipeline::Seeds::from(c.seed).training;
  const pipeline::ConditionRotations rot =
      pipeline::kurtail_rotations(acts, cfg, train, c.train_r2, pipeline::online_rotations(c));
  io::save_rotation_set(c.output_dir / "rotations", rot.rotations);
  json losses = json::array();
  for (std::size_t k = 0; k < rot.training.size(); ++k)
    losses.push_back({{"rotation", k == 0 ? std::string("r1") : "r2_layer" + std::to_string(k - 1)},
                      {"initial_loss", rot.training[k].initial_loss},
                      {"final_loss", rot.training[k].final_loss}});
  print({{"rotations", (c.output_dir / "rotations").string()}, {"training", losses}});
  return 0;
}

int fuse(const std::string& model, const std::string& rotations, const std::string& out) {
  const toyformer::DecoderModel folded = toyformer::fold_rmsnorm(io::read_model(model));
  io::write_model(out, toyformer::fuse_rotations(folded, io::load_rotation_set(rotations)));
  print({{"model", out}});
  return 0;
}

int quantize(const Common& opt, const std::string& model, const std::string& out) {
  RunConfig c = resolve(opt);
  const std::vector<toyformer::TokenSequence> cal = pipeline::calibration_corpus(c);
  const std::vector<toyformer::TokenSequence> gptq(cal.begin(), cal.begin() + std::min(c.gptq_samples, cal.size()));
  io::write_model(out, toyformer::quantize_weights(io::read_model(model), c.quant, gptq));
  print({{"model", out}, {"weights", toyformer::to_string(c.quant.weights)}});
  return 0;
}

int eval(const Common& opt, const std::string& reference, const std::string& model) {
  RunConfig c = resolve(opt);
  const toyformer::DecoderModel ref = io::read_model(reference);
  const toyformer::DecoderModel cand = io::read_model(model);
  const auto inputs = pipeline::evaluation_corpus(c);
  const double mse = pipeline::quantized_output_mse(ref, cand, c.quant, inputs);
  print({{"invariance_deviation", toyformer::invariance_report(ref, cand, inputs)},
         {"quantized_output_mse", mse},
         {"toy_perplexity", std::exp(mse)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kurtail: kurtosis-guided rotations for low-bit quantization"};
  app.require_subcommand(1);

  Common cap, tr, qu, ev, sens, fig, pipe;
  std::string acts_dir, fuse_model, fuse_rot, fuse_out, q_model, q_out, e_ref, e_model;

  auto* c_capture = app.add_subcommand("capture", "build or load a model and capture activations layer by layer");
  add_common(c_capture, cap, true);

  auto* c_train = app.add_subcommand("train-rot", "learn R1 and R2 from captured activations");
  add_common(c_train, tr, true);
  c_train->add_option("--acts", acts_dir, "KTAC directory")->required()->check(CLI::ExistingDirectory);

  auto* c_fuse = app.add_subcommand("fuse", "fold RMSNorm and fuse a rotation set into a model");
  c_fuse->add_option("--model", fuse_model, "input KTWT")->required()->check(CLI::ExistingFile);
  c_fuse->add_option("--rotations", fuse_rot, "rotation directory")->required()->check(CLI::ExistingDirectory);
  c_fuse->add_option("--out", fuse_out, "output KTWT")->required();

  auto* c_quant = app.add_subcommand("quantize", "quantize model weights with RTN or GPTQ");
  add_common(c_quant, qu, true);
  c_quant->add_option("--in", q_model, "input KTWT")->required()->check(CLI::ExistingFile);
  c_quant->add_option("--out", q_out, "output KTWT")->required();

  auto* c_eval = app.add_subcommand("eval", "compare a model against a full-precision reference");
  add_common(c_eval, ev, true);
  c_eval->add_option("--reference", e_ref, "full-precision KTWT")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--candidate", e_model, "KTWT to evaluate")->required()->check(CLI::ExistingFile);

  auto* c_sens = app.add_subcommand("sensitivity", "quantization sensitivity curves per condition");
  add_common(c_sens, sens, true);

  auto* c_fig = app.add_subcommand("figure-data", "per-token channel magnitudes before and after rotation");
  add_common(c_fig, fig, true);

  auto* c_pipe = app.add_subcommand("pipeline", "capture, train, fuse, quantize and evaluate");
  add_common(c_pipe, pipe, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_capture) return capture(cap);
    if (*c_train) return train_rot(tr, acts_dir);
    if (*c_fuse) return fuse(fuse_model, fuse_rot, fuse_out);
    if (*c_quant) return quantize(qu, q_model, q_out);
    if (*c_eval) return eval(ev, e_ref, e_model);
    if (*c_sens) {
      const RunConfig c = resolve(sens);
      pipeline::run_sensitivity_experiment(c);
      print({{"csv", (c.output_dir / "sensitivity.csv").string()}});
      return 0;
    }
    if (*c_fig) {
      const RunConfig c = resolve(fig);
      pipeline::emit_outlier_figure_data(c);
      print({{"csv", (c.output_dir / "outlier_figure.csv").string()}});
      return 0;
    }
    if (*c_pipe) {
      print(pipeline::run_end_to_end(resolve(pipe)));
      return 0;
    }
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
