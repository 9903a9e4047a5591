#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kurtail/io.hpp"
#include "kurtail/quant.hpp"
#include "kurtail/rotor.hpp"
#include "kurtail/toyformer.hpp"

namespace kurtail::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using toyformer::DecoderModel;
using toyformer::RotationSet;
using toyformer::TokenSequence;

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path output_dir = "kurtail_out";

  // Model: a KTWT file, or a synthetic model seeded from `seed`.
  fs::path model_file;
  toyformer::ModelConfig model;
  toyformer::SyntheticSpec synthetic;

  // Calibration: synthetic token sequences, or a directory of KTAC files.
  fs::path calibration_dir;
  std::size_t sample_count = 512;
  std::size_t sequence_length = 128;
  std::size_t gptq_samples = 128;
  std::size_t eval_sequences = 16;

  rotor::TrainConfig train;
  bool train_r2 = true;
  toyformer::QuantConfigSet quant;
  bool online_r3 = true;
  bool online_r4 = true;
  bool online_r5 = true;

  std::vector<double> alphas = {0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4};
  // Cap on values per (layer, block, condition) sample in the sensitivity run.
  std::size_t sensitivity_max_values = 1 << 18;
  // Tokens per record written to the outlier-figure CSV.
  std::size_t figure_tokens = 64;
};

RunConfig default_run_config();
json to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const json& j, RunConfig base = default_run_config());
RunConfig load_run_config(const fs::path& path);

// Sub-seeds derived from the run seed.
struct Seeds {
  std::uint64_t model, calibration, evaluation, training, hadamard, online;
  static Seeds from(std::uint64_t seed);
};

DecoderModel build_model(const RunConfig& c);
std::vector<TokenSequence> calibration_corpus(const RunConfig& c);
std::vector<TokenSequence> evaluation_corpus(const RunConfig& c);
toyformer::OnlineRotations online_rotations(const RunConfig& c);

// Source of per-layer weights for layer-wise capture.
class LayerSource {
 public:
  virtual ~LayerSource() = default;
  virtual const toyformer::ModelConfig& config() const = 0;
  virtual const toyformer::OnlineRotations& online() const = 0;
  virtual linalg::Matrix embedding() = 0;
  virtual toyformer::LayerWeights load_layer(std::size_t index) = 0;
};

class InMemoryLayerSource : public LayerSource {
 public:
  explicit InMemoryLayerSource(const DecoderModel& m) : model_(m) {}
  const toyformer::ModelConfig& config() const override { return model_.config; }
  const toyformer::OnlineRotations& online() const override { return model_.online; }
  linalg::Matrix embedding() override { return model_.embedding; }
  toyformer::LayerWeights load_layer(std::size_t index) override { return model_.layers.at(index); }

 private:
  const DecoderModel& model_;
};

class FileLayerSource : public LayerSource {
 public:
  explicit FileLayerSource(const fs::path& path) : reader_(path) {}
  const toyformer::ModelConfig& config() const override { return reader_.header().config; }
  const toyformer::OnlineRotations& online() const override { return reader_.header().online; }
  linalg::Matrix embedding() override { return reader_.embedding(); }
  toyformer::LayerWeights load_layer(std::size_t index) override { return reader_.layer(index); }

 private:
  io::WeightFileReader reader_;
};

// Layer-wise capture: one layer's weights resident at a time; every
// calibration sequence is advanced through that layer and its mhsa_input,
// ffn_input and value_output records are written to `out_dir` (when not
// empty) before the next layer is loaded.
rotor::ActivationSet capture_activations(LayerSource& source, const std::vector<TokenSequence>& data,
                                         const fs::path& out_dir, const std::string& source_tag = "synthetic");

struct ConditionRotations {
  std::string name;  // vanilla | hadamard | kurtail
  RotationSet rotations;
  std::vector<rotor::TrainResult> training;  // R1 then R2 per layer (kurtail only)
};

// Randomized Hadamard R1 and per-head block-diagonal R2.
RotationSet hadamard_rotations(const toyformer::ModelConfig& cfg, std::uint64_t seed,
                               const toyformer::OnlineRotations& online);
// Learned R1 (and R2 when enabled, identity otherwise).
ConditionRotations kurtail_rotations(const rotor::ActivationSet& acts, const toyformer::ModelConfig& cfg,
                                     const rotor::TrainConfig& train, bool train_r2,
                                     const toyformer::OnlineRotations& online);

// Rotates mhsa_input/ffn_input records by R1 and value_output records by R2,
// which equals capturing from the fused model.
rotor::ActivationSet rotate_activations(const rotor::ActivationSet& acts, const RotationSet& rot);

// Mean squared deviation of quantized-model logits from the full-precision
// reference model, averaged over sequences.
double quantized_output_mse(const DecoderModel& reference, const DecoderModel& quantized,
                            const toyformer::QuantConfigSet& q, const std::vector<TokenSequence>& inputs);

// Per-condition sensitivity over mhsa_input and ffn_input, one report per
// (condition, layer, block).
std::vector<quant::SensitivityReport> sensitivity_reports(
    const std::vector<std::pair<std::string, rotor::ActivationSet>>& conditions, int bits,
    const std::vector<double>& alphas, std::size_t max_values);

// '#' metadata lines then layer,block,condition,alpha,gamma.
std::string sensitivity_csv(const std::vector<quant::SensitivityReport>& reports, const json& metadata);
std::vector<quant::SensitivityReport> parse_sensitivity_csv(const std::string& text);

std::vector<quant::SensitivityReport> run_sensitivity_experiment(const RunConfig& c);

// condition,layer,block,token,max_abs,c0..c{n-1}, magnitudes per channel.
std::string outlier_figure_csv(const rotor::ActivationSet& before, const rotor::ActivationSet& after,
                               std::size_t max_tokens);
std::string emit_outlier_figure_data(const RunConfig& c);

// capture → train → fuse → quantize → evaluate. Writes summary.json, the
// vanilla KTAC files, rotations and the training log under output_dir and
// returns the summary. Stage failures surface as StageError.
json run_end_to_end(const RunConfig& c);

}  // namespace kurtail::pipeline
