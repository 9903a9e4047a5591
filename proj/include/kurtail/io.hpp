#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kurtail/linalg.hpp"
#include "kurtail/rotor.hpp"
#include "kurtail/toyformer.hpp"

namespace kurtail::io {

namespace fs = std::filesystem;
using linalg::Matrix;
using linalg::OrthogonalMatrix;

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

// KTAC: one (layer, block) activation matrix.
//   "KTAC" | version u32 | dtype u32 | layer u32 | block u32 | rows u64 | cols u64
//   | rows·cols little-endian f32, row-major
struct ActivationFile {
  std::uint32_t layer = 0;
  rotor::BlockKind block = rotor::BlockKind::mhsa_input;
  Matrix tokens;
};

void write_activation_file(const fs::path& path, std::uint32_t layer, rotor::BlockKind block, const Matrix& tokens);
ActivationFile read_activation_file(const fs::path& path);
std::string activation_file_name(std::uint32_t layer, rotor::BlockKind block);

// One KTAC file per record plus capture.json with the set metadata.
void save_activation_set(const fs::path& dir, const rotor::ActivationSet& acts);
rotor::ActivationSet load_activation_set(const fs::path& dir);

// KTWT: full decoder model.
//   "KTWT" | version u32 | d_model u32 | n_heads u32 | d_ff u32 | n_layers u32
//   | vocab u32 | rope_base f64 | rms_epsilon f64
//   | (mode u32, seed u64) for r3, r4, r5
//   | f32 tensors: embedding, then per layer rms1 rms2 wq wk wv wo wup wgate
//     wdown, then final_norm, lm_head
void write_model(const fs::path& path, const toyformer::DecoderModel& m);
toyformer::DecoderModel read_model(const fs::path& path);

// Header fields of a KTWT file.
struct ModelHeader {
  toyformer::ModelConfig config;
  toyformer::OnlineRotations online;
};

// Streams a KTWT file one layer at a time; only the requested layer's weights
// are resident.
class WeightFileReader {
 public:
  explicit WeightFileReader(const fs::path& path);

  const ModelHeader& header() const { return header_; }
  Matrix embedding();
  toyformer::LayerWeights layer(std::size_t index);
  std::vector<double> final_norm();
  Matrix lm_head();

 private:
  std::uint64_t layer_offset(std::size_t index) const;
  std::uint64_t tail_offset() const;

  fs::path path_;
  std::ifstream in_;
  ModelHeader header_;
  std::uint64_t data_start_ = 0;
};

// KTRT: one rotation. "KTRT" | version u32 | dim u64 | dim² f32. The f32
// matrix is re-orthogonalized by QR when read.
void write_rotation(const fs::path& path, const OrthogonalMatrix& r);
OrthogonalMatrix read_rotation(const fs::path& path);

// r1.ktrt, r2_layerNNN.ktrt and online.json in one directory.
void save_rotation_set(const fs::path& dir, const toyformer::RotationSet& rot);
toyformer::RotationSet load_rotation_set(const fs::path& dir);

// Writes `text` to `path`, creating parent directories.
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace kurtail::io
