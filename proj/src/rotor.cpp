#include "kurtail/rotor.hpp"

#include <algorithm>
#include <cmath>

#include "kurtail/error.hpp"
#include "kurtail/parallel.hpp"
#include "kurtail/random.hpp"

namespace kurtail::rotor {

using namespace linalg;

std::string to_string(BlockKind b) {
  switch (b) {
    case BlockKind::mhsa_input: return "mhsa_input";
    case BlockKind::ffn_input: return "ffn_input";
    case BlockKind::value_output: return "value_output";
  }
  return "unknown";
}

BlockKind parse_block_kind(const std::string& s) {
  for (BlockKind b : {BlockKind::mhsa_input, BlockKind::ffn_input, BlockKind::value_output})
    if (to_string(b) == s) return b;
  throw InvalidArgument("unknown block kind '" + s + "'");
}

void ActivationSet::append(std::uint32_t layer, BlockKind block, const Matrix& tokens) {
  if (tokens.rows() == 0 || tokens.cols() == 0) throw InvalidArgument("ActivationSet: empty tokens");
  if (!tokens.all_finite()) throw NumericalError("ActivationSet: non-finite activations");
  for (const ActivationRecord& r : records_) {
    if (r.block == block && r.tokens.cols() != tokens.cols()) {
      throw DimensionError("ActivationSet: " + to_string(block) + " channel count " +
                           std::to_string(tokens.cols()) + " differs from " +
                           std::to_string(r.tokens.cols()));
    }
  }
  for (ActivationRecord& r : records_) {
    if (r.layer == layer && r.block == block) {
      const Matrix parts[] = {r.tokens, tokens};
      r.tokens = vstack(parts);
      return;
    }
  }
  records_.push_back({layer, block, tokens});
}

const ActivationRecord* ActivationSet::find(std::uint32_t layer, BlockKind block) const {
  for (const ActivationRecord& r : records_)
    if (r.layer == layer && r.block == block) return &r;
  return nullptr;
}

const ActivationRecord& ActivationSet::at(std::uint32_t layer, BlockKind block) const {
  const ActivationRecord* r = find(layer, block);
  if (r == nullptr) {
    throw InvalidArgument("ActivationSet: no record for layer " + std::to_string(layer) + " " +
                          to_string(block));
  }
  return *r;
}

std::vector<const ActivationRecord*> ActivationSet::of_kind(BlockKind block) const {
  std::vector<const ActivationRecord*> out;
  for (const ActivationRecord& r : records_)
    if (r.block == block) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->layer < b->layer; });
  return out;
}

std::size_t ActivationSet::layer_count() const {
  std::size_t n = 0;
  for (const ActivationRecord& r : records_) n = std::max<std::size_t>(n, r.layer + 1);
  return n;
}

namespace {

void check_proxy_input(const Matrix& x, const ProxyNet& net) {
  if (x.cols() != net.rotation.dim()) {
    throw DimensionError("proxy: input has " + std::to_string(x.cols()) + " channels, rotation is " +
                         std::to_string(net.rotation.dim()));
  }
}

// RMSNorm (unit gain) of every row of z = x·R.
Matrix normalize_rows(Matrix z, double epsilon) {
  const double n = static_cast<double>(z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / n + epsilon);
    for (double& v : row) v *= inv;
  }
  return z;
}

// Backward through the norm given the pre-norm product z = x·R.
Matrix backward_from(const Matrix& x, const Matrix& z, const ProxyNet& net, const Matrix& upstream) {
  if (!net.use_rmsnorm) return matmul_tn(x, upstream);
  const double n = static_cast<double>(z.cols());
  Matrix dz(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto zr = z.row(i);
    const auto g = upstream.row(i);
    double ss = 0.0, gz = 0.0;
    for (std::size_t j = 0; j < zr.size(); ++j) {
      ss += zr[j] * zr[j];
      gz += g[j] * zr[j];
    }
    if (std::sqrt(ss) < 1e-10) throw NumericalError("proxy_backward: degenerate row " + std::to_string(i));
    const double r = std::sqrt(ss / n + net.rmsnorm_epsilon);
    const double c = gz / (n * r * r * r);
    auto out = dz.row(i);
    for (std::size_t j = 0; j < zr.size(); ++j) out[j] = g[j] / r - zr[j] * c;
  }
  return matmul_tn(x, dz);
}

}  // namespace

Matrix proxy_forward(const Matrix& x, const ProxyNet& net) {
  check_proxy_input(x, net);
  Matrix z = matmul(x, net.rotation.matrix());
  return net.use_rmsnorm ? normalize_rows(std::move(z), net.rmsnorm_epsilon) : z;
}

Matrix proxy_backward(const Matrix& x, const ProxyNet& net, const Matrix& upstream) {
  check_proxy_input(x, net);
  if (upstream.rows() != x.rows() || upstream.cols() != x.cols()) {
    throw DimensionError("proxy_backward: upstream gradient shape mismatch");
  }
  if (!net.use_rmsnorm) return matmul_tn(x, upstream);
  return backward_from(x, matmul(x, net.rotation.matrix()), net, upstream);
}

namespace {

OrthogonalMatrix initial_rotation(std::size_t n, const TrainConfig& cfg) {
  const std::uint64_t seed = derive_seed(cfg.seed, 1);
  switch (cfg.init) {
    case RotationInit::random_orthogonal: return random_orthogonal(n, seed);
    case RotationInit::randomized_hadamard: return randomized_hadamard(n, seed);
    case RotationInit::identity: return OrthogonalMatrix::identity(n);
  }
  return OrthogonalMatrix::identity(n);
}

Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Evenly strided subset of at most `cap` rows.
Matrix strided_rows(const Matrix& x, std::size_t cap) {
  if (x.rows() <= cap) return x;
  std::vector<std::size_t> idx(cap);
  for (std::size_t i = 0; i < cap; ++i) idx[i] = i * x.rows() / cap;
  return select_rows(x, idx);
}

struct BatchEval {
  double loss = 0.0;
  Matrix grad;
};

BatchEval evaluate(const std::vector<Matrix>& batch, const ProxyNet& net, double kappa_u, bool with_grad) {
  std::vector<Matrix> pre(batch.size()), outs(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    pre[i] = matmul(batch[i], net.rotation.matrix());
    outs[i] = net.use_rmsnorm ? normalize_rows(pre[i], net.rmsnorm_epsilon) : pre[i];
  });
  BatchEval ev;
  if (!with_grad) {
    ev.loss = stats::kurtosis_loss(outs, kappa_u);
    return ev;
  }
  const stats::LossGradient lg = stats::kurtosis_loss_and_gradient(outs, kappa_u);
  ev.loss = lg.loss;
  std::vector<Matrix> grads(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { grads[i] = backward_from(batch[i], pre[i], net, lg.grads[i]); });
  ev.grad = Matrix(net.rotation.dim(), net.rotation.dim());
  for (const Matrix& g : grads) ev.grad += g;
  return ev;
}

}  // namespace

TrainResult train_rotation(const std::vector<Matrix>& groups, bool use_rmsnorm, const TrainConfig& cfg) {
  if (groups.empty()) throw InvalidArgument("train_rotation: empty activation set");
  const std::size_t n = groups.front().cols();
  for (const Matrix& g : groups) {
    if (g.rows() == 0) throw InvalidArgument("train_rotation: empty group");
    if (g.cols() != n) throw DimensionError("train_rotation: groups disagree on channel count");
  }
  if (cfg.groups_per_batch == 0 || cfg.tokens_per_group == 0) {
    throw InvalidArgument("train_rotation: batch sizes must be positive");
  }

  ProxyNet net{initial_rotation(n, cfg), use_rmsnorm, cfg.rmsnorm_epsilon};
  std::vector<Matrix> eval_set;
  for (const Matrix& g : groups) eval_set.push_back(strided_rows(g, cfg.eval_tokens_per_group));

  TrainResult result{net.rotation, {}, 0.0, 0.0};
  result.initial_loss = evaluate(eval_set, net, cfg.kappa_u, false).loss;

  auto state = manifold::CayleyOptimizerState::create(n, cfg.optimizer);
  Rng rng(derive_seed(cfg.seed, 2));
  result.loss_log.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> chosen;
    if (groups.size() <= cfg.groups_per_batch) {
      for (std::size_t i = 0; i < groups.size(); ++i) chosen.push_back(i);
    } else {
      chosen = rng.sample_without_replacement(groups.size(), cfg.groups_per_batch);
    }
    std::vector<Matrix> batch;
    batch.reserve(chosen.size());
    for (std::size_t gi : chosen) {
      const Matrix& g = groups[gi];
      if (g.rows() <= cfg.tokens_per_group) {
        batch.push_back(g);
      } else {
        batch.push_back(select_rows(g, rng.sample_without_replacement(g.rows(), cfg.tokens_per_group)));
      }
    }
    BatchEval ev = evaluate(batch, net, cfg.kappa_u, true);
    if (!std::isfinite(ev.loss)) throw NumericalError("train_rotation: non-finite loss at iteration " + std::to_string(it));
    result.loss_log.push_back(ev.loss);
    const double scale = cfg.cosine_decay ? manifold::cosine_schedule(it, cfg.iterations) : 1.0;
    auto step = manifold::cayley_adam_step(net.rotation, ev.grad, std::move(state), scale);
    net.rotation = std::move(step.w);
    state = std::move(step.state);
  }
  result.rotation = net.rotation;
  result.final_loss = evaluate(eval_set, net, cfg.kappa_u, false).loss;
  return result;
}

TrainResult train_r1(const ActivationSet& acts, const TrainConfig& cfg) {
  std::vector<Matrix> groups;
  for (const ActivationRecord& r : acts.records())
    if (r.block == BlockKind::mhsa_input || r.block == BlockKind::ffn_input) groups.push_back(r.tokens);
  if (groups.empty()) throw InvalidArgument("train_r1: no mhsa_input/ffn_input records");
  return train_rotation(groups, true, cfg);
}

Matrix split_heads(const Matrix& x, std::size_t n_heads) {
  if (n_heads == 0 || x.cols() % n_heads != 0) {
    throw DimensionError("split_heads: " + std::to_string(x.cols()) + " channels not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  // Row-major storage already lists each token's heads contiguously.
  return Matrix(x.rows() * n_heads, x.cols() / n_heads, std::vector<double>(x.data().begin(), x.data().end()));
}

TrainResult train_r2(const ActivationSet& acts, std::uint32_t layer, const TrainConfig& cfg) {
  const ActivationRecord& rec = acts.at(layer, BlockKind::value_output);
  if (acts.n_heads == 0) throw InvalidArgument("train_r2: activation set has no head count");
  TrainConfig c = cfg;
  c.seed = derive_seed(cfg.seed, 100 + layer);
  TrainResult r = train_rotation({split_heads(rec.tokens, acts.n_heads)}, false, c);
  r.rotation = block_diagonal(r.rotation, acts.n_heads);
  return r;
}

}  // namespace kurtail::rotor
