#include "kurtail/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "kurtail/error.hpp"

namespace kurtail::io {

using json = nlohmann::json;
using toyformer::DecoderModel;
using toyformer::LayerWeights;

namespace {

class Writer {
 public:
  explicit Writer(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }

  void magic(const char (&m)[5]) { out_.write(m, 4); }

  template <typename T>
  void scalar(T v) {
    static_assert(std::is_integral_v<T>);
    std::array<char, sizeof(T)> b{};
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    out_.write(b.data(), b.size());
  }

  void f64(double v) { scalar(std::bit_cast<std::uint64_t>(v)); }

  void f32_values(std::span<const double> values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
      for (int k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<char>((bits >> (8 * k)) & 0xff);
    }
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }

  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed for " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {}

  void expect_magic(const char (&m)[5]) {
    char got[4];
    read_bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0) throw IoError(name_ + ": bad magic, expected " + std::string(m, 4));
  }

  template <typename T>
  T scalar() {
    std::array<unsigned char, sizeof(T)> b{};
    read_bytes(reinterpret_cast<char*>(b.data()), b.size());
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
  }

  double f64() { return std::bit_cast<double>(scalar<std::uint64_t>()); }

  std::vector<double> f32_values(std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    read_bytes(reinterpret_cast<char*>(buf.data()), buf.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(buf[4 * i + k]) << (8 * k);
      out[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return out;
  }

  Matrix matrix(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, f32_values(rows * cols)); }

 private:
  void read_bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError(name_ + ": truncated file");
  }

  std::istream& in_;
  std::string name_;
};

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

void check_version(std::uint32_t v, const fs::path& path) {
  if (v != kFormatVersion) throw IoError(path.string() + ": unsupported format version " + std::to_string(v));
}

constexpr std::uint64_t kModelHeaderBytes = 4 + 4 * 6 + 8 * 2 + 3 * (4 + 8);

std::uint64_t layer_value_count(const toyformer::ModelConfig& c) {
  const std::uint64_t d = c.d_model, f = c.d_ff;
  return 2 * d + 4 * d * d + 3 * d * f;
}

void write_online(Writer& w, const toyformer::OnlineRotation& r) {
  w.scalar(static_cast<std::uint32_t>(r.mode));
  w.scalar(r.seed);
}

toyformer::OnlineRotation read_online(Reader& r) {
  const auto mode = r.scalar<std::uint32_t>();
  const auto seed = r.scalar<std::uint64_t>();
  if (mode > 1) throw IoError("unknown online rotation mode " + std::to_string(mode));
  return {static_cast<toyformer::OnlineMode>(mode), seed};
}

ModelHeader read_model_header(Reader& r, const fs::path& path) {
  r.expect_magic("KTWT");
  check_version(r.scalar<std::uint32_t>(), path);
  ModelHeader h;
  h.config.d_model = r.scalar<std::uint32_t>();
  h.config.n_heads = r.scalar<std::uint32_t>();
  h.config.d_ff = r.scalar<std::uint32_t>();
  h.config.n_layers = r.scalar<std::uint32_t>();
  h.config.vocab = r.scalar<std::uint32_t>();
  h.config.rope_base = r.f64();
  h.config.rms_epsilon = r.f64();
  h.online.r3 = read_online(r);
  h.online.r4 = read_online(r);
  h.online.r5 = read_online(r);
  try {
    h.config.validate();
  } catch (const Error& e) {
    throw IoError(path.string() + ": invalid model header (" + e.what() + ")");
  }
  return h;
}

LayerWeights read_layer(Reader& r, const toyformer::ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  LayerWeights w;
  w.rms1 = r.f32_values(d);
  w.rms2 = r.f32_values(d);
  w.wq = r.matrix(d, d);
  w.wk = r.matrix(d, d);
  w.wv = r.matrix(d, d);
  w.wo = r.matrix(d, d);
  w.wup = r.matrix(d, f);
  w.wgate = r.matrix(d, f);
  w.wdown = r.matrix(f, d);
  return w;
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

std::string activation_file_name(std::uint32_t layer, rotor::BlockKind block) {
  std::ostringstream os;
  os << "layer" << std::setw(3) << std::setfill('0') << layer << "_" << rotor::to_string(block) << ".ktac";
  return os.str();
}

void write_activation_file(const fs::path& path, std::uint32_t layer, rotor::BlockKind block, const Matrix& tokens) {
  Writer w(path);
  w.magic("KTAC");
  w.scalar(kFormatVersion);
  w.scalar(kDtypeF32);
  w.scalar(layer);
  w.scalar(static_cast<std::uint32_t>(block));
  w.scalar(static_cast<std::uint64_t>(tokens.rows()));
  w.scalar(static_cast<std::uint64_t>(tokens.cols()));
  w.f32_values(tokens.data());
  w.finish();
}

ActivationFile read_activation_file(const fs::path& path) {
  std::ifstream in = open_input(path);
  Reader r(in, path.string());
  r.expect_magic("KTAC");
  check_version(r.scalar<std::uint32_t>(), path);
  if (r.scalar<std::uint32_t>() != kDtypeF32) throw IoError(path.string() + ": unsupported dtype");
  ActivationFile f;
  f.layer = r.scalar<std::uint32_t>();
  const auto block = r.scalar<std::uint32_t>();
  if (block > 2) throw IoError(path.string() + ": unknown block code " + std::to_string(block));
  f.block = static_cast<rotor::BlockKind>(block);
  const auto rows = r.scalar<std::uint64_t>();
  const auto cols = r.scalar<std::uint64_t>();
  f.tokens = r.matrix(rows, cols);
  return f;
}

void save_activation_set(const fs::path& dir, const rotor::ActivationSet& acts) {
  fs::create_directories(dir);
  json meta;
  meta["d_model"] = acts.d_model;
  meta["n_heads"] = acts.n_heads;
  meta["sample_count"] = acts.sample_count;
  meta["sequence_length"] = acts.sequence_length;
  meta["source"] = acts.source;
  json files = json::array();
  for (const rotor::ActivationRecord& rec : acts.records()) {
    const std::string name = activation_file_name(rec.layer, rec.block);
    write_activation_file(dir / name, rec.layer, rec.block, rec.tokens);
    files.push_back({{"file", name}, {"layer", rec.layer}, {"block", rotor::to_string(rec.block)},
                     {"rows", rec.tokens.rows()}, {"cols", rec.tokens.cols()}});
  }
  meta["files"] = files;
  write_text(dir / "capture.json", json_text(meta));
}

rotor::ActivationSet load_activation_set(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text(dir / "capture.json"));
  } catch (const json::exception& e) {
    throw IoError((dir / "capture.json").string() + ": " + e.what());
  }
  rotor::ActivationSet acts;
  acts.d_model = meta.value("d_model", std::size_t{0});
  acts.n_heads = meta.value("n_heads", std::size_t{0});
  acts.sample_count = meta.value("sample_count", std::size_t{0});
  acts.sequence_length = meta.value("sequence_length", std::size_t{0});
  acts.source = meta.value("source", std::string{});
  for (const json& f : meta.at("files")) {
    ActivationFile a = read_activation_file(dir / f.at("file").get<std::string>());
    acts.append(a.layer, a.block, a.tokens);
  }
  return acts;
}

void write_model(const fs::path& path, const DecoderModel& m) {
  const toyformer::ModelConfig& c = m.config;
  c.validate();
  Writer w(path);
  w.magic("KTWT");
  w.scalar(kFormatVersion);
  for (std::size_t v : {c.d_model, c.n_heads, c.d_ff, c.n_layers, c.vocab}) w.scalar(static_cast<std::uint32_t>(v));
  w.f64(c.rope_base);
  w.f64(c.rms_epsilon);
  write_online(w, m.online.r3);
  write_online(w, m.online.r4);
  write_online(w, m.online.r5);
  w.f32_values(m.embedding.data());
  for (const LayerWeights& l : m.layers) {
    w.f32_values(l.rms1);
    w.f32_values(l.rms2);
    for (const Matrix* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.wup, &l.wgate, &l.wdown}) w.f32_values(t->data());
  }
  w.f32_values(m.final_norm);
  w.f32_values(m.lm_head.data());
  w.finish();
}

DecoderModel read_model(const fs::path& path) {
  WeightFileReader reader(path);
  DecoderModel m;
  m.config = reader.header().config;
  m.online = reader.header().online;
  m.embedding = reader.embedding();
  for (std::size_t l = 0; l < m.config.n_layers; ++l) m.layers.push_back(reader.layer(l));
  m.final_norm = reader.final_norm();
  m.lm_head = reader.lm_head();
  return m;
}

WeightFileReader::WeightFileReader(const fs::path& path) : path_(path), in_(open_input(path)) {
  Reader r(in_, path.string());
  header_ = read_model_header(r, path);
  data_start_ = kModelHeaderBytes;
  const auto& c = header_.config;
  const std::uint64_t expected =
      data_start_ + 4 * (c.vocab * c.d_model + c.n_layers * layer_value_count(c) + c.d_model + c.d_model * c.vocab);
  if (fs::file_size(path) != expected) {
    throw IoError(path.string() + ": size " + std::to_string(fs::file_size(path)) + " does not match header (" +
                  std::to_string(expected) + ")");
  }
}

std::uint64_t WeightFileReader::layer_offset(std::size_t index) const {
  const auto& c = header_.config;
  return data_start_ + 4 * (c.vocab * c.d_model + index * layer_value_count(c));
}

std::uint64_t WeightFileReader::tail_offset() const { return layer_offset(header_.config.n_layers); }

Matrix WeightFileReader::embedding() {
  in_.seekg(static_cast<std::streamoff>(data_start_));
  Reader r(in_, path_.string());
  return r.matrix(header_.config.vocab, header_.config.d_model);
}

LayerWeights WeightFileReader::layer(std::size_t index) {
  if (index >= header_.config.n_layers) throw InvalidArgument("WeightFileReader: layer index out of range");
  in_.seekg(static_cast<std::streamoff>(layer_offset(index)));
  Reader r(in_, path_.string());
  return read_layer(r, header_.config);
}

std::vector<double> WeightFileReader::final_norm() {
  in_.seekg(static_cast<std::streamoff>(tail_offset()));
  Reader r(in_, path_.string());
  return r.f32_values(header_.config.d_model);
}

Matrix WeightFileReader::lm_head() {
  in_.seekg(static_cast<std::streamoff>(tail_offset() + 4 * header_.config.d_model));
  Reader r(in_, path_.string());
  return r.matrix(header_.config.d_model, header_.config.vocab);
}

void write_rotation(const fs::path& path, const OrthogonalMatrix& rot) {
  Writer w(path);
  w.magic("KTRT");
  w.scalar(kFormatVersion);
  w.scalar(static_cast<std::uint64_t>(rot.dim()));
  w.f32_values(rot.matrix().data());
  w.finish();
}

OrthogonalMatrix read_rotation(const fs::path& path) {
  std::ifstream in = open_input(path);
  Reader r(in, path.string());
  r.expect_magic("KTRT");
  check_version(r.scalar<std::uint32_t>(), path);
  const auto n = r.scalar<std::uint64_t>();
  if (n == 0) throw IoError(path.string() + ": empty rotation");
  return linalg::qr_orthogonalize(r.matrix(n, n));
}

void save_rotation_set(const fs::path& dir, const toyformer::RotationSet& rot) {
  fs::create_directories(dir);
  write_rotation(dir / "r1.ktrt", rot.r1);
  for (std::size_t l = 0; l < rot.r2.size(); ++l) {
    std::ostringstream name;
    name << "r2_layer" << std::setw(3) << std::setfill('0') << l << ".ktrt";
    write_rotation(dir / name.str(), rot.r2[l]);
  }
  auto online = [](const toyformer::OnlineRotation& r) {
    return json{{"mode", r.active() ? "hadamard" : "off"}, {"seed", r.seed}};
  };
  json j{{"layers", rot.r2.size()},
         {"r3", online(rot.online.r3)},
         {"r4", online(rot.online.r4)},
         {"r5", online(rot.online.r5)}};
  write_text(dir / "online.json", json_text(j));
}

toyformer::RotationSet load_rotation_set(const fs::path& dir) {
  json j;
  try {
    j = json::parse(read_text(dir / "online.json"));
  } catch (const json::exception& e) {
    throw IoError((dir / "online.json").string() + ": " + e.what());
  }
  toyformer::RotationSet rot{read_rotation(dir / "r1.ktrt"), {}, {}};
  const auto layers = j.at("layers").get<std::size_t>();
  for (std::size_t l = 0; l < layers; ++l) {
    std::ostringstream name;
    name << "r2_layer" << std::setw(3) << std::setfill('0') << l << ".ktrt";
    rot.r2.push_back(read_rotation(dir / name.str()));
  }
  auto online = [](const json& o) {
    const std::string mode = o.at("mode").get<std::string>();
    if (mode != "off" && mode != "hadamard") throw IoError("online.json: unknown mode '" + mode + "'");
    return toyformer::OnlineRotation{mode == "hadamard" ? toyformer::OnlineMode::hadamard : toyformer::OnlineMode::off,
                                     o.at("seed").get<std::uint64_t>()};
  };
  rot.online.r3 = online(j.at("r3"));
  rot.online.r4 = online(j.at("r4"));
  rot.online.r5 = online(j.at("r5"));
  return rot;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace kurtail::io
