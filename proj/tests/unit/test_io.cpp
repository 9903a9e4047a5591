#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "kurtail/error.hpp"
#include "kurtail/io.hpp"
#include "oracles.hpp"

using namespace kurtail;
using namespace kurtail::io;
using linalg::Matrix;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("kurtail_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Values exactly representable in f32.
Matrix f32_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Matrix m = oracle::random_matrix(r, c, seed);
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

toyformer::DecoderModel small_model() {
  toyformer::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_layers = 2;
  c.vocab = 20;
  toyformer::SyntheticSpec s;
  s.seed = 3;
  s.random_norm_scales = true;
  auto m = toyformer::make_synthetic_model(c, s);
  m.online.r4 = toyformer::OnlineRotation::hadamard(99);
  return m;
}

}  // namespace

TEST(Ktac, HeaderLayout) {
  TempDir dir;
  const fs::path p = dir.path() / "a.ktac";
  write_activation_file(p, 3, rotor::BlockKind::value_output, f32_matrix(2, 5, 1));
  const std::string b = bytes(p);
  ASSERT_EQ(b.size(), 4u + 4 * 4 + 2 * 8 + 2 * 5 * 4);
  EXPECT_EQ(b.substr(0, 4), "KTAC");
  std::uint32_t u[4];
  std::memcpy(u, b.data() + 4, sizeof u);
  EXPECT_EQ(u[0], 1u);
  EXPECT_EQ(u[1], 0u);
  EXPECT_EQ(u[2], 3u);
  EXPECT_EQ(u[3], 2u);
  std::uint64_t rc[2];
  std::memcpy(rc, b.data() + 20, sizeof rc);
  EXPECT_EQ(rc[0], 2u);
  EXPECT_EQ(rc[1], 5u);
  EXPECT_EQ(activation_file_name(0, rotor::BlockKind::mhsa_input), "layer000_mhsa_input.ktac");
}

TEST(Ktac, RoundTripIsByteIdentical) {
  TempDir dir;
  const Matrix m = oracle::random_matrix(7, 9, 2);
  write_activation_file(dir.path() / "a.ktac", 1, rotor::BlockKind::ffn_input, m);
  const ActivationFile f = read_activation_file(dir.path() / "a.ktac");
  EXPECT_EQ(f.layer, 1u);
  EXPECT_EQ(f.block, rotor::BlockKind::ffn_input);
  for (std::size_t i = 0; i < m.size(); ++i)
    EXPECT_EQ(f.tokens.data()[i], static_cast<double>(static_cast<float>(m.data()[i])));
  write_activation_file(dir.path() / "b.ktac", f.layer, f.block, f.tokens);
  EXPECT_EQ(bytes(dir.path() / "a.ktac"), bytes(dir.path() / "b.ktac"));
}

TEST(Ktac, RejectsCorruptFiles) {
  TempDir dir;
  const fs::path p = dir.path() / "a.ktac";
  write_activation_file(p, 0, rotor::BlockKind::mhsa_input, f32_matrix(3, 3, 3));
  std::string b = bytes(p);
  std::ofstream(dir.path() / "trunc.ktac", std::ios::binary) << b.substr(0, b.size() - 4);
  EXPECT_THROW(read_activation_file(dir.path() / "trunc.ktac"), IoError);
  b[0] = 'X';
  std::ofstream(dir.path() / "magic.ktac", std::ios::binary) << b;
  EXPECT_THROW(read_activation_file(dir.path() / "magic.ktac"), IoError);
  EXPECT_THROW(read_activation_file(dir.path() / "missing.ktac"), IoError);
}

TEST(Ktac, ActivationSetRoundTrip) {
  TempDir dir;
  rotor::ActivationSet s;
  s.d_model = 6;
  s.n_heads = 2;
  s.sample_count = 4;
  s.sequence_length = 2;
  s.source = "synthetic";
  for (std::uint32_t l = 0; l < 2; ++l)
    for (auto b : {rotor::BlockKind::mhsa_input, rotor::BlockKind::ffn_input, rotor::BlockKind::value_output})
      s.append(l, b, f32_matrix(8, 6, 10 * l + static_cast<std::uint32_t>(b)));
  save_activation_set(dir.path(), s);
  const rotor::ActivationSet r = load_activation_set(dir.path());
  EXPECT_EQ(r.d_model, 6u);
  EXPECT_EQ(r.n_heads, 2u);
  EXPECT_EQ(r.source, "synthetic");
  ASSERT_EQ(r.records().size(), 6u);
  for (const auto& rec : s.records()) EXPECT_EQ(r.at(rec.layer, rec.block).tokens, rec.tokens);
}

TEST(Ktwt, RoundTripAndLayerStreaming) {
  TempDir dir;
  const auto m = small_model();
  write_model(dir.path() / "m.ktwt", m);
  const auto r = read_model(dir.path() / "m.ktwt");
  EXPECT_EQ(r.config, m.config);
  EXPECT_EQ(r.online, m.online);
  EXPECT_LE(linalg::max_abs_diff(r.layers[1].wdown, m.layers[1].wdown), 1e-6);
  EXPECT_EQ(r.layers[0].rms1.size(), 16u);
  write_model(dir.path() / "m2.ktwt", r);
  EXPECT_EQ(bytes(dir.path() / "m.ktwt"), bytes(dir.path() / "m2.ktwt"));

  WeightFileReader reader(dir.path() / "m.ktwt");
  EXPECT_EQ(reader.header().config, m.config);
  EXPECT_EQ(reader.layer(1).wq, r.layers[1].wq);
  EXPECT_EQ(reader.layer(0).wgate, r.layers[0].wgate);
  EXPECT_EQ(reader.embedding(), r.embedding);
  EXPECT_EQ(reader.lm_head(), r.lm_head);
  EXPECT_EQ(reader.final_norm(), r.final_norm);
  EXPECT_THROW(reader.layer(2), InvalidArgument);
}

TEST(Ktwt, StoredFusedModelStaysInvariant) {
  TempDir dir;
  const auto m = small_model();
  auto r = toyformer::RotationSet::identity(m.config);
  r.r1 = linalg::random_orthogonal(m.config.d_model, 5);
  const auto fused = toyformer::fuse_rotations(toyformer::fold_rmsnorm(m), r);
  write_model(dir.path() / "f.ktwt", fused);
  const auto inputs = toyformer::synthetic_corpus(m.config.vocab, 4, 12, 8);
  EXPECT_LE(toyformer::invariance_report(m, read_model(dir.path() / "f.ktwt"), inputs), 1e-5);
}

TEST(Ktwt, RejectsTruncatedFile) {
  TempDir dir;
  write_model(dir.path() / "m.ktwt", small_model());
  const std::string b = bytes(dir.path() / "m.ktwt");
  std::ofstream(dir.path() / "t.ktwt", std::ios::binary) << b.substr(0, b.size() - 8);
  EXPECT_THROW(WeightFileReader(dir.path() / "t.ktwt"), IoError);
  EXPECT_THROW(read_model(dir.path() / "t.ktwt"), IoError);
}

TEST(Ktrt, RotationRoundTrip) {
  TempDir dir;
  const auto q = linalg::random_orthogonal(16, 4);
  write_rotation(dir.path() / "r.ktrt", q);
  const auto r = read_rotation(dir.path() / "r.ktrt");
  EXPECT_LE(r.orthogonality_error(), 1e-12);
  EXPECT_LE(linalg::max_abs_diff(r.matrix(), q.matrix()), 1e-6);

  toyformer::ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  toyformer::RotationSet set = toyformer::RotationSet::identity(c);
  set.r1 = linalg::random_orthogonal(8, 5);
  set.online.r3 = toyformer::OnlineRotation::hadamard(12345678901234ULL);
  save_rotation_set(dir.path() / "rot", set);
  const auto back = load_rotation_set(dir.path() / "rot");
  EXPECT_EQ(back.r2.size(), 2u);
  EXPECT_EQ(back.online, set.online);
  EXPECT_LE(linalg::max_abs_diff(back.r1.matrix(), set.r1.matrix()), 1e-6);
}
