#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kurtail/linalg.hpp"
#include "kurtail/manifold.hpp"
#include "kurtail/stats.hpp"

namespace kurtail::rotor {

using linalg::Matrix;
using linalg::OrthogonalMatrix;

enum class BlockKind : std::uint32_t { mhsa_input = 0, ffn_input = 1, value_output = 2 };

std::string to_string(BlockKind b);
// Accepts the names produced by to_string; throws InvalidArgument otherwise.
BlockKind parse_block_kind(const std::string& s);

struct ActivationRecord {
  std::uint32_t layer = 0;
  BlockKind block = BlockKind::mhsa_input;
  Matrix tokens;  // token × channel
};

// Captured activations of one model, tagged by (layer, block).
class ActivationSet {
 public:
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t sample_count = 0;
  std::size_t sequence_length = 0;
  std::string source;

  // Appends tokens to the (layer, block) record, creating it if needed.
  // Throws when the channel count disagrees with other records of the block.
  void append(std::uint32_t layer, BlockKind block, const Matrix& tokens);

  const std::vector<ActivationRecord>& records() const { return records_; }
  const ActivationRecord* find(std::uint32_t layer, BlockKind block) const;
  const ActivationRecord& at(std::uint32_t layer, BlockKind block) const;
  std::vector<const ActivationRecord*> of_kind(BlockKind block) const;
  std::size_t layer_count() const;

 private:
  std::vector<ActivationRecord> records_;
};

struct ProxyNet {
  OrthogonalMatrix rotation;
  bool use_rmsnorm = true;
  double rmsnorm_epsilon = 1e-6;
};

// y = RMSNorm(x·R) with unit scale, or x·R without the norm.
Matrix proxy_forward(const Matrix& x, const ProxyNet& net);

// ∂loss/∂R given ∂loss/∂y. Throws NumericalError on rows with ‖x·R‖ < 1e-10
// when the norm is active.
Matrix proxy_backward(const Matrix& x, const ProxyNet& net, const Matrix& upstream);

enum class RotationInit { random_orthogonal, randomized_hadamard, identity };

struct TrainConfig {
  std::size_t iterations = 100;
  std::size_t groups_per_batch = 8;
  std::size_t tokens_per_group = 1024;
  // Cap on rows per group for the full-batch loss evaluations.
  std::size_t eval_tokens_per_group = 4096;
  std::uint64_t seed = 0;
  double kappa_u = stats::kUniformKurtosis;
  double rmsnorm_epsilon = 1e-6;
  bool cosine_decay = true;
  RotationInit init = RotationInit::random_orthogonal;
  manifold::CayleyHyperparameters optimizer;
};

struct TrainResult {
  OrthogonalMatrix rotation;
  std::vector<double> loss_log;  // minibatch loss before each update
  double initial_loss = 0.0;     // full-batch loss at initialization
  double final_loss = 0.0;       // full-batch loss of the returned rotation
};

// Learns a rotation minimizing the kurtosis loss of proxy_forward over the
// given groups (one group per (layer, block)).
TrainResult train_rotation(const std::vector<Matrix>& groups, bool use_rmsnorm, const TrainConfig& cfg);

// R1 from the pooled mhsa_input and ffn_input records, with the norm.
TrainResult train_r1(const ActivationSet& acts, const TrainConfig& cfg);

// R2 for one layer from its value_output record, without the norm. A
// head_dim rotation is learned on the per-head value vectors and repeated
// block-diagonally to d_model.
TrainResult train_r2(const ActivationSet& acts, std::uint32_t layer, const TrainConfig& cfg);

// Rows of x (T × heads·head_dim) split into (T·heads) × head_dim.
Matrix split_heads(const Matrix& x, std::size_t n_heads);

}  // namespace kurtail::rotor
