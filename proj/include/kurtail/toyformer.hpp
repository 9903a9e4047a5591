#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kurtail/linalg.hpp"
#include "kurtail/quant.hpp"
#include "kurtail/rotor.hpp"

namespace kurtail::toyformer {

using linalg::Matrix;
using linalg::OrthogonalMatrix;
using TokenSequence = std::vector<std::uint32_t>;

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t n_layers = 4;
  double rope_base = 10000.0;
  std::size_t vocab = 256;
  double rms_epsilon = 1e-6;

  std::size_t head_dim() const { return n_heads == 0 ? 0 : d_model / n_heads; }
  // d_model = n_heads·head_dim; d_model, head_dim and d_ff powers of two;
  // head_dim even.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// All linear weights use y = x·W with W of shape d_in × d_out.
struct LayerWeights {
  Matrix wq, wk, wv, wo;      // d_model × d_model
  Matrix wup, wgate;          // d_model × d_ff
  Matrix wdown;               // d_ff × d_model
  std::vector<double> rms1;   // attention-norm scale
  std::vector<double> rms2;   // FFN-norm scale
};

enum class OnlineMode : std::uint32_t { off = 0, hadamard = 1 };

// Randomized Hadamard D·H applied to activations at inference time.
struct OnlineRotation {
  OnlineMode mode = OnlineMode::off;
  std::uint64_t seed = 0;

  bool active() const { return mode == OnlineMode::hadamard; }
  static OnlineRotation hadamard(std::uint64_t seed) { return {OnlineMode::hadamard, seed}; }
  friend bool operator==(const OnlineRotation&, const OnlineRotation&) = default;
};

struct OnlineRotations {
  OnlineRotation r3;  // per head on Q and K after RoPE
  OnlineRotation r4;  // attention output, size d_model, inverse folded into Wo
  OnlineRotation r5;  // FFN hidden, size d_ff, inverse folded into Wdown
  friend bool operator==(const OnlineRotations&, const OnlineRotations&) = default;
};

struct DecoderModel {
  ModelConfig config;
  Matrix embedding;               // vocab × d_model
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm; // d_model
  Matrix lm_head;                 // d_model × vocab
  // Online rotations the forward pass applies. fuse_rotations sets them.
  OnlineRotations online;
};

// Seeded synthetic model. Weights are N(0, 1/fan_in). With `outlier_channels`
// > 0 the embedding carries that many planted channels of magnitude drawn
// from [outlier_low, outlier_high] (random sign, per-token jitter) and the
// Wo/Wdown output columns of those channels are scaled by
// `weight_outlier_scale`. With `latent_uniform` the remaining channels are a
// uniform latent code seen through a hidden random orthogonal basis; without
// it they are standard normal.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t outlier_channels = 4;
  double outlier_low = 5.0;
  double outlier_high = 15.0;
  double outlier_jitter = 0.1;
  double weight_outlier_scale = 1.0;
  bool latent_uniform = true;
  // Draw RMSNorm scales from U[0.5, 1.5] instead of 1.
  bool random_norm_scales = false;
};

DecoderModel make_synthetic_model(const ModelConfig& cfg, const SyntheticSpec& spec);

// Seeded uniform random token sequences.
std::vector<TokenSequence> synthetic_corpus(std::size_t vocab, std::size_t sequences, std::size_t length,
                                            std::uint64_t seed);

bool has_unit_norms(const DecoderModel& m);

// Absorbs every RMSNorm scale into the rows of the following linear weights
// and sets the scales to 1.
DecoderModel fold_rmsnorm(const DecoderModel& m);

struct RotationSet {
  OrthogonalMatrix r1;                // d_model
  std::vector<OrthogonalMatrix> r2;   // per layer, d_model, block-diagonal per head
  OnlineRotations online;

  static RotationSet identity(const ModelConfig& cfg);
};

// Fuses R1/R2 (and the inverses of active R4/R5) into the weights and records
// the online rotations in the returned model. Requires unit norm scales and
// per-head block-diagonal R2.
DecoderModel fuse_rotations(const DecoderModel& m, const RotationSet& rot);

enum class WeightMethod : std::uint32_t { none = 0, rtn = 1, gptq = 2 };
std::string to_string(WeightMethod m);
WeightMethod parse_weight_method(const std::string& s);

struct QuantConfigSet {
  quant::QuantSpec activation = quant::QuantSpec::activation(4);
  quant::QuantSpec kv = quant::QuantSpec::kv_cache(4);
  WeightMethod weights = WeightMethod::rtn;
  int weight_bits = 4;
  bool gptq_act_order = false;
  double gptq_damping = 0.01;
  bool quantize_activations = true;
  bool quantize_kv = true;
};

enum class CapturePoint : std::size_t {
  mhsa_input = 0,   // normed attention input (feeds Wq/Wk/Wv)
  value_output,     // a·Wv
  attn_output,      // concatenated heads after R4 (feeds Wo)
  ffn_input,        // normed FFN input (feeds Wup/Wgate)
  ffn_hidden,       // SwiGLU product after R5 (feeds Wdown)
};
inline constexpr std::size_t kCapturePoints = 5;

// Full-precision values at each point, taken before that point's quantizer.
struct LayerCapture {
  std::array<Matrix, kCapturePoints> points;
  std::vector<Matrix> attention_probs;  // per head, filled when requested

  const Matrix& at(CapturePoint p) const { return points[static_cast<std::size_t>(p)]; }
};

struct ForwardOptions {
  // Activation and KV quantization; weights are expected pre-quantized.
  const QuantConfigSet* quant = nullptr;
  // One entry per layer is appended when set.
  std::vector<LayerCapture>* capture = nullptr;
  bool capture_attention_probs = false;
};

// Rotary embedding on a (tokens × head_dim) block, row t at position
// positions[t]; pairs (2i, 2i+1) rotate by positions[t]·base^(−2i/head_dim).
Matrix rope_apply(const Matrix& x, std::span<const double> positions, double base);

// x·(D·H) row-wise through the fast transform.
void apply_online_rotation(Matrix& x, const OnlineRotation& r, std::size_t block);

// One decoder layer on the residual stream h (tokens × d_model).
Matrix decoder_layer(const ModelConfig& cfg, const LayerWeights& w, const OnlineRotations& online,
                     const Matrix& h, const ForwardOptions& opts = {});

Matrix embed(const DecoderModel& m, std::span<const std::uint32_t> tokens);
// Final norm and unembedding.
Matrix output_head(const DecoderModel& m, const Matrix& h);

// Logits (tokens × vocab).
Matrix forward(const DecoderModel& m, std::span<const std::uint32_t> tokens, const ForwardOptions& opts = {});
Matrix forward_embedded(const DecoderModel& m, const Matrix& x, const ForwardOptions& opts = {});

// Weights replaced by their dequantized RTN or GPTQ versions. GPTQ Hessians
// come from a full-precision forward of `calibration`.
DecoderModel quantize_weights(const DecoderModel& m, const QuantConfigSet& q,
                              const std::vector<TokenSequence>& calibration);

// Worst over sequences of max|a − b| / max|a| on the logits.
double invariance_report(const DecoderModel& reference, const DecoderModel& candidate,
                         const std::vector<TokenSequence>& inputs);

// mhsa_input, ffn_input and value_output records from full-precision forwards.
rotor::ActivationSet capture_activation_set(const DecoderModel& m, const std::vector<TokenSequence>& inputs,
                                            const std::string& source = "synthetic");

struct SuccessRate {
  std::map<rotor::BlockKind, double> per_block;  // percent
  double mean = 0.0;                             // over block kinds
};

// Percentage of tokens whose max |value| under `bench` is strictly below that
// under `base`, pooled over layers per block kind.
SuccessRate success_rate(const rotor::ActivationSet& base, const rotor::ActivationSet& bench);

}  // namespace kurtail::toyformer
