#include "kurtail/toyformer.hpp"

#include <algorithm>
#include <cmath>

#include "kurtail/error.hpp"
#include "kurtail/gptq.hpp"
#include "kurtail/parallel.hpp"
#include "kurtail/random.hpp"

namespace kurtail::toyformer {

using namespace linalg;

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_ff == 0 || n_layers == 0 || vocab == 0) {
    throw InvalidArgument("ModelConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw InvalidArgument("ModelConfig: d_model must be divisible by n_heads");
  if (!is_power_of_two(d_model) || !is_power_of_two(head_dim()) || !is_power_of_two(d_ff)) {
    throw InvalidArgument("ModelConfig: d_model, head_dim and d_ff must be powers of two");
  }
  if (head_dim() % 2 != 0) throw InvalidArgument("ModelConfig: head_dim must be even for RoPE");
  if (!(rope_base > 0.0)) throw InvalidArgument("ModelConfig: rope_base must be positive");
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * scale;
  return m;
}

std::vector<double> norm_scales(Rng& rng, std::size_t n, bool random) {
  std::vector<double> s(n, 1.0);
  if (random)
    for (double& v : s) v = rng.uniform(0.5, 1.5);
  return s;
}

Matrix rmsnorm(const Matrix& h, std::span<const double> scale, double eps) {
  Matrix out(h.rows(), h.cols());
  const double n = static_cast<double>(h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    const auto src = h.row(i);
    double ss = 0.0;
    for (double v : src) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / n + eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] * inv * scale[j];
  }
  return out;
}

Matrix scale_rows(const Matrix& w, std::span<const double> s) {
  Matrix out = w;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= s[i];
  return out;
}

void softmax_causal(Matrix& scores) {
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j <= i; ++j) row[j] /= sum;
    for (std::size_t j = i + 1; j < row.size(); ++j) row[j] = 0.0;
  }
}

void check_square(const OrthogonalMatrix& r, std::size_t n, const char* what) {
  if (r.dim() != n) {
    throw DimensionError(std::string("fuse_rotations: ") + what + " has dim " + std::to_string(r.dim()) +
                         ", expected " + std::to_string(n));
  }
}

void check_block_diagonal(const OrthogonalMatrix& r, std::size_t block) {
  const Matrix& m = r.matrix();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (i / block != j / block && std::abs(m(i, j)) > 1e-12) {
        throw InvalidArgument("fuse_rotations: R2 must be block-diagonal per attention head");
      }
}

Matrix dequantized_rtn(const Matrix& w, int bits) {
  return quant::dequantize(quant::rtn_quantize_weights(w, bits));
}

}  // namespace

DecoderModel make_synthetic_model(const ModelConfig& cfg, const SyntheticSpec& spec) {
  cfg.validate();
  if (spec.outlier_channels > cfg.d_model) throw InvalidArgument("make_synthetic_model: too many outlier channels");
  Rng rng(spec.seed);
  const std::size_t d = cfg.d_model;
  DecoderModel m;
  m.config = cfg;

  if (spec.latent_uniform) {
    const double a = std::sqrt(3.0);
    Matrix u(cfg.vocab, d);
    for (double& v : u.data()) v = rng.uniform(-a, a);
    m.embedding = matmul(u, random_orthogonal(d, derive_seed(spec.seed, 11)).matrix());
  } else {
    m.embedding = gaussian(rng, cfg.vocab, d, 1.0);
  }
  const std::vector<std::size_t> outliers = rng.sample_without_replacement(d, spec.outlier_channels);
  for (std::size_t c : outliers) {
    const double mag = rng.uniform(spec.outlier_low, spec.outlier_high) * (rng.coin() ? -1.0 : 1.0);
    for (std::size_t t = 0; t < cfg.vocab; ++t) m.embedding(t, c) = mag * (1.0 + spec.outlier_jitter * rng.normal());
  }

  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights w;
    w.wq = gaussian(rng, d, d, sd);
    w.wk = gaussian(rng, d, d, sd);
    w.wv = gaussian(rng, d, d, sd);
    w.wo = gaussian(rng, d, d, sd);
    w.wup = gaussian(rng, d, cfg.d_ff, sd);
    w.wgate = gaussian(rng, d, cfg.d_ff, sd);
    w.wdown = gaussian(rng, cfg.d_ff, d, sf);
    for (std::size_t c : outliers) {
      for (std::size_t r = 0; r < d; ++r) w.wo(r, c) *= spec.weight_outlier_scale;
      for (std::size_t r = 0; r < cfg.d_ff; ++r) w.wdown(r, c) *= spec.weight_outlier_scale;
    }
    w.rms1 = norm_scales(rng, d, spec.random_norm_scales);
    w.rms2 = norm_scales(rng, d, spec.random_norm_scales);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = norm_scales(rng, d, spec.random_norm_scales);
  m.lm_head = gaussian(rng, d, cfg.vocab, sd);
  return m;
}

std::vector<TokenSequence> synthetic_corpus(std::size_t vocab, std::size_t sequences, std::size_t length,
                                            std::uint64_t seed) {
  if (vocab == 0 || length == 0) throw InvalidArgument("synthetic_corpus: vocab and length must be positive");
  Rng rng(seed);
  std::vector<TokenSequence> out(sequences, TokenSequence(length));
  for (auto& seq : out)
    for (auto& t : seq) t = static_cast<std::uint32_t>(rng.below(vocab));
  return out;
}

bool has_unit_norms(const DecoderModel& m) {
  auto ones = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 1.0; });
  };
  if (!ones(m.final_norm)) return false;
  for (const LayerWeights& w : m.layers)
    if (!ones(w.rms1) || !ones(w.rms2)) return false;
  return true;
}

DecoderModel fold_rmsnorm(const DecoderModel& m) {
  DecoderModel out = m;
  for (LayerWeights& w : out.layers) {
    w.wq = scale_rows(w.wq, w.rms1);
    w.wk = scale_rows(w.wk, w.rms1);
    w.wv = scale_rows(w.wv, w.rms1);
    w.wup = scale_rows(w.wup, w.rms2);
    w.wgate = scale_rows(w.wgate, w.rms2);
    std::fill(w.rms1.begin(), w.rms1.end(), 1.0);
    std::fill(w.rms2.begin(), w.rms2.end(), 1.0);
  }
  out.lm_head = scale_rows(out.lm_head, out.final_norm);
  std::fill(out.final_norm.begin(), out.final_norm.end(), 1.0);
  return out;
}

RotationSet RotationSet::identity(const ModelConfig& cfg) {
  RotationSet r{OrthogonalMatrix::identity(cfg.d_model), {}, {}};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) r.r2.push_back(OrthogonalMatrix::identity(cfg.d_model));
  return r;
}

DecoderModel fuse_rotations(const DecoderModel& m, const RotationSet& rot) {
  const ModelConfig& cfg = m.config;
  if (!has_unit_norms(m)) throw InvalidArgument("fuse_rotations: RMSNorm scales not folded (run fold_rmsnorm)");
  check_square(rot.r1, cfg.d_model, "R1");
  if (rot.r2.size() != m.layers.size()) {
    throw DimensionError("fuse_rotations: expected " + std::to_string(m.layers.size()) + " R2 matrices, got " +
                         std::to_string(rot.r2.size()));
  }
  for (const OrthogonalMatrix& r2 : rot.r2) {
    check_square(r2, cfg.d_model, "R2");
    check_block_diagonal(r2, cfg.head_dim());
  }
  if ((rot.online.r4.active() && m.online.r4.active()) || (rot.online.r5.active() && m.online.r5.active())) {
    throw InvalidArgument("fuse_rotations: model already carries R4/R5");
  }

  const Matrix& r1 = rot.r1.matrix();
  std::optional<Matrix> r4, r5;
  if (rot.online.r4.active()) r4 = randomized_hadamard(cfg.d_model, rot.online.r4.seed).matrix();
  if (rot.online.r5.active()) r5 = randomized_hadamard(cfg.d_ff, rot.online.r5.seed).matrix();

  DecoderModel out = m;
  out.embedding = matmul(m.embedding, r1);
  out.lm_head = matmul_tn(r1, m.lm_head);
  parallel_for(m.layers.size(), [&](std::size_t l) {
    const LayerWeights& w = m.layers[l];
    LayerWeights& o = out.layers[l];
    const Matrix& r2 = rot.r2[l].matrix();
    o.wq = matmul_tn(r1, w.wq);
    o.wk = matmul_tn(r1, w.wk);
    o.wv = matmul(matmul_tn(r1, w.wv), r2);
    o.wup = matmul_tn(r1, w.wup);
    o.wgate = matmul_tn(r1, w.wgate);
    o.wo = matmul_tn(r2, matmul(w.wo, r1));
    if (r4) o.wo = matmul_tn(*r4, o.wo);
    o.wdown = matmul(w.wdown, r1);
    if (r5) o.wdown = matmul_tn(*r5, o.wdown);
  });
  if (rot.online.r3.active()) out.online.r3 = rot.online.r3;
  if (rot.online.r4.active()) out.online.r4 = rot.online.r4;
  if (rot.online.r5.active()) out.online.r5 = rot.online.r5;
  return out;
}

std::string to_string(WeightMethod m) {
  switch (m) {
    case WeightMethod::none: return "none";
    case WeightMethod::rtn: return "rtn";
    case WeightMethod::gptq: return "gptq";
  }
  return "unknown";
}

WeightMethod parse_weight_method(const std::string& s) {
  for (WeightMethod m : {WeightMethod::none, WeightMethod::rtn, WeightMethod::gptq})
    if (to_string(m) == s) return m;
  throw InvalidArgument("unknown weight method '" + s + "' (expected none, rtn or gptq)");
}

Matrix rope_apply(const Matrix& x, std::span<const double> positions, double base) {
  const std::size_t hd = x.cols();
  if (hd % 2 != 0) throw InvalidArgument("rope_apply: head_dim must be even, got " + std::to_string(hd));
  if (positions.size() != x.rows()) throw DimensionError("rope_apply: one position per row required");
  Matrix out(x.rows(), hd);
  std::vector<double> freq(hd / 2);
  for (std::size_t i = 0; i < hd / 2; ++i) {
    freq[i] = std::pow(base, -static_cast<double>(2 * i) / static_cast<double>(hd));
  }
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto src = x.row(t);
    auto dst = out.row(t);
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const double th = positions[t] * freq[i];
      const double c = std::cos(th), s = std::sin(th);
      const double a = src[2 * i], b = src[2 * i + 1];
      dst[2 * i] = a * c - b * s;
      dst[2 * i + 1] = a * s + b * c;
    }
  }
  return out;
}

void apply_online_rotation(Matrix& x, const OnlineRotation& r, std::size_t block) {
  if (!r.active()) return;
  if (block == 0 || x.cols() % block != 0) throw DimensionError("online rotation: block does not tile the row");
  const std::vector<double> signs = hadamard_signs(block, r.seed);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    for (std::size_t b = 0; b < row.size(); b += block) {
      auto seg = row.subspan(b, block);
      for (std::size_t i = 0; i < block; ++i) seg[i] *= signs[i];
      fast_hadamard_transform_inplace(seg);
    }
  }
}

Matrix decoder_layer(const ModelConfig& cfg, const LayerWeights& w, const OnlineRotations& online,
                     const Matrix& h, const ForwardOptions& opts) {
  const std::size_t T = h.rows();
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  if (h.cols() != d) throw DimensionError("decoder_layer: residual width mismatch");
  const QuantConfigSet* q = opts.quant;
  const bool quant_act = q != nullptr && q->quantize_activations;
  const bool quant_kv = q != nullptr && q->quantize_kv;
  LayerCapture cap;

  Matrix a = rmsnorm(h, w.rms1, cfg.rms_epsilon);
  if (opts.capture) cap.points[0] = a;
  if (quant_act) a = quant::fake_quantize(a, q->activation);

  Matrix qm = matmul(a, w.wq);
  Matrix km = matmul(a, w.wk);
  Matrix vm = matmul(a, w.wv);
  if (opts.capture) cap.points[1] = vm;

  std::vector<double> pos(T);
  for (std::size_t t = 0; t < T; ++t) pos[t] = static_cast<double>(t);
  for (std::size_t head = 0; head < cfg.n_heads; ++head) {
    qm.set_col_block(head * hd, rope_apply(qm.col_block(head * hd, hd), pos, cfg.rope_base));
    km.set_col_block(head * hd, rope_apply(km.col_block(head * hd, hd), pos, cfg.rope_base));
  }
  apply_online_rotation(qm, online.r3, hd);
  apply_online_rotation(km, online.r3, hd);
  if (quant_kv) {
    km = quant::fake_quantize(km, q->kv);
    vm = quant::fake_quantize(vm, q->kv);
  }

  Matrix o(T, d);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t head = 0; head < cfg.n_heads; ++head) {
    const Matrix qh = qm.col_block(head * hd, hd);
    const Matrix kh = km.col_block(head * hd, hd);
    Matrix scores = matmul_nt(qh, kh);
    scores *= inv_sqrt;
    softmax_causal(scores);
    o.set_col_block(head * hd, matmul(scores, vm.col_block(head * hd, hd)));
    if (opts.capture && opts.capture_attention_probs) cap.attention_probs.push_back(std::move(scores));
  }
  apply_online_rotation(o, online.r4, d);
  if (opts.capture) cap.points[2] = o;
  if (quant_act) o = quant::fake_quantize(o, q->activation);

  Matrix h2 = h + matmul(o, w.wo);
  Matrix f = rmsnorm(h2, w.rms2, cfg.rms_epsilon);
  if (opts.capture) cap.points[3] = f;
  if (quant_act) f = quant::fake_quantize(f, q->activation);

  const Matrix gate = matmul(f, w.wgate);
  Matrix z = matmul(f, w.wup);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double g = gate.data()[i];
    z.data()[i] *= g / (1.0 + std::exp(-g));
  }
  apply_online_rotation(z, online.r5, cfg.d_ff);
  if (opts.capture) cap.points[4] = z;
  if (quant_act) z = quant::fake_quantize(z, q->activation);

  h2 += matmul(z, w.wdown);
  if (opts.capture) opts.capture->push_back(std::move(cap));
  return h2;
}

Matrix embed(const DecoderModel& m, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw InvalidArgument("embed: empty token sequence");
  Matrix x(tokens.size(), m.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= m.embedding.rows()) {
      throw InvalidArgument("embed: token " + std::to_string(tokens[t]) + " outside vocabulary");
    }
    const auto src = m.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

Matrix output_head(const DecoderModel& m, const Matrix& h) {
  return matmul(rmsnorm(h, m.final_norm, m.config.rms_epsilon), m.lm_head);
}

Matrix forward_embedded(const DecoderModel& m, const Matrix& x, const ForwardOptions& opts) {
  if (m.layers.size() != m.config.n_layers) throw DimensionError("forward: layer count mismatch");
  Matrix h = x;
  for (const LayerWeights& w : m.layers) h = decoder_layer(m.config, w, m.online, h, opts);
  return output_head(m, h);
}

Matrix forward(const DecoderModel& m, std::span<const std::uint32_t> tokens, const ForwardOptions& opts) {
  return forward_embedded(m, embed(m, tokens), opts);
}

DecoderModel quantize_weights(const DecoderModel& m, const QuantConfigSet& q,
                              const std::vector<TokenSequence>& calibration) {
  DecoderModel out = m;
  if (q.weights == WeightMethod::none) return out;
  if (q.weights == WeightMethod::rtn) {
    parallel_for(out.layers.size(), [&](std::size_t l) {
      LayerWeights& w = out.layers[l];
      for (Matrix* p : {&w.wq, &w.wk, &w.wv, &w.wo, &w.wup, &w.wgate, &w.wdown}) *p = dequantized_rtn(*p, q.weight_bits);
    });
    return out;
  }
  if (calibration.empty()) throw InvalidArgument("quantize_weights: GPTQ needs calibration sequences");
  // inputs[layer][point] collects one block per calibration sequence.
  std::vector<std::vector<std::vector<Matrix>>> inputs(m.layers.size(),
                                                       std::vector<std::vector<Matrix>>(kCapturePoints));
  for (const TokenSequence& seq : calibration) {
    std::vector<LayerCapture> cap;
    ForwardOptions fo;
    fo.capture = &cap;
    forward(m, seq, fo);
    for (std::size_t l = 0; l < cap.size(); ++l)
      for (std::size_t p = 0; p < kCapturePoints; ++p) inputs[l][p].push_back(std::move(cap[l].points[p]));
  }
  const gptq::GptqOptions go{q.gptq_act_order};
  parallel_for(out.layers.size(), [&](std::size_t l) {
    LayerWeights& w = out.layers[l];
    auto quantize_group = [&](CapturePoint p, std::initializer_list<Matrix*> weights) {
      const gptq::HessianEstimate h = gptq::collect_hessian(inputs[l][static_cast<std::size_t>(p)], q.gptq_damping);
      for (Matrix* wp : weights) *wp = quant::dequantize(gptq::gptq_quantize(*wp, h, q.weight_bits, go));
    };
    quantize_group(CapturePoint::mhsa_input, {&w.wq, &w.wk, &w.wv});
    quantize_group(CapturePoint::attn_output, {&w.wo});
    quantize_group(CapturePoint::ffn_input, {&w.wup, &w.wgate});
    quantize_group(CapturePoint::ffn_hidden, {&w.wdown});
  });
  return out;
}

double invariance_report(const DecoderModel& reference, const DecoderModel& candidate,
                         const std::vector<TokenSequence>& inputs) {
  if (reference.config.vocab != candidate.config.vocab || reference.config.d_model != candidate.config.d_model) {
    throw DimensionError("invariance_report: model shapes differ");
  }
  double worst = 0.0;
  for (const TokenSequence& seq : inputs) {
    const Matrix a = forward(reference, seq);
    const Matrix b = forward(candidate, seq);
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
      scale = std::max(scale, std::abs(a.data()[i]));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-300));
  }
  return worst;
}

rotor::ActivationSet capture_activation_set(const DecoderModel& m, const std::vector<TokenSequence>& inputs,
                                            const std::string& source) {
  if (inputs.empty()) throw InvalidArgument("capture_activation_set: no input sequences");
  rotor::ActivationSet acts;
  acts.d_model = m.config.d_model;
  acts.n_heads = m.config.n_heads;
  acts.sample_count = inputs.size();
  acts.sequence_length = inputs.front().size();
  acts.source = source;
  for (const TokenSequence& seq : inputs) {
    std::vector<LayerCapture> cap;
    ForwardOptions fo;
    fo.capture = &cap;
    forward(m, seq, fo);
    for (std::uint32_t l = 0; l < cap.size(); ++l) {
      acts.append(l, rotor::BlockKind::mhsa_input, cap[l].at(CapturePoint::mhsa_input));
      acts.append(l, rotor::BlockKind::ffn_input, cap[l].at(CapturePoint::ffn_input));
      acts.append(l, rotor::BlockKind::value_output, cap[l].at(CapturePoint::value_output));
    }
  }
  return acts;
}

SuccessRate success_rate(const rotor::ActivationSet& base, const rotor::ActivationSet& bench) {
  SuccessRate out;
  for (rotor::BlockKind kind : {rotor::BlockKind::mhsa_input, rotor::BlockKind::ffn_input}) {
    std::size_t wins = 0, total = 0;
    for (const rotor::ActivationRecord* b : base.of_kind(kind)) {
      const rotor::ActivationRecord* r = bench.find(b->layer, kind);
      if (r == nullptr || r->tokens.rows() != b->tokens.rows() || r->tokens.cols() != b->tokens.cols()) {
        throw DimensionError("success_rate: activation sets are not aligned at layer " + std::to_string(b->layer) +
                             " " + rotor::to_string(kind));
      }
      for (std::size_t t = 0; t < b->tokens.rows(); ++t) {
        double mb = 0.0, mr = 0.0;
        for (double v : b->tokens.row(t)) mb = std::max(mb, std::abs(v));
        for (double v : r->tokens.row(t)) mr = std::max(mr, std::abs(v));
        wins += mr < mb ? 1 : 0;
        ++total;
      }
    }
    if (total > 0) out.per_block[kind] = 100.0 * static_cast<double>(wins) / static_cast<double>(total);
  }
  if (out.per_block.empty()) throw InvalidArgument("success_rate: no mhsa_input/ffn_input records");
  for (const auto& [kind, pct] : out.per_block) out.mean += pct;
  out.mean /= static_cast<double>(out.per_block.size());
  return out;
}

}  // namespace kurtail::toyformer
