// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary container shared by checkpoints ("SVDT") and datasets ("SVDD"):
//
//   magic[4] | u32 version | u64 header_len | header (UTF-8 JSON)
//   | u64 section_count
//   | section*: u32 name_len | name | u64 rows | u64 cols | f64[rows*cols]
//   | u64 checksum (FNV-1a 64 over every preceding byte)
//
// All integers and floats are little-endian; floats are IEEE-754 binary64.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "clipsvd/adapt.hpp"
#include "clipsvd/config.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/model.hpp"
#include "clipsvd/synth_data.hpp"

namespace clipsvd {

inline constexpr std::string_view kCheckpointMagic = "SVDT";
inline constexpr std::string_view kDatasetMagic = "SVDD";
inline constexpr std::uint32_t kFormatVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingFileError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw MissingFileError("short write to " + path.string());
}

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double x) { put_le(out, std::bit_cast<std::uint64_t>(x)); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  double get_f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw FormatError("container truncated at byte " + std::to_string(pos_));
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct Section {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector data;
};

struct Container {
  std::string magic;
  Json header;
  std::vector<Section> sections;
};

inline std::string encode_container(const Container& c) {
  if (c.magic.size() != 4) throw UsageError("container magic must be 4 bytes");
  std::string out = c.magic;
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  const std::string header = c.header.dump();
  detail::put_le<std::uint64_t>(out, header.size());
  out += header;
  detail::put_le<std::uint64_t>(out, c.sections.size());
  for (const auto& s : c.sections) {
    if (s.data.size() != s.rows * s.cols) throw ShapeError("section " + s.name + ": data length");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    detail::put_le<std::uint64_t>(out, s.rows);
    detail::put_le<std::uint64_t>(out, s.cols);
    for (double x : s.data) detail::put_f64(out, x);
  }
  detail::put_le<std::uint64_t>(out, fnv1a64(out));
  return out;
}

/// Validates the checksum first, then the magic, version and layout.
inline Container decode_container(std::string_view bytes, std::string_view expected_magic) {
  if (bytes.size() < 4 + 4 + 8 + 8 + 8) throw FormatError("container too short (" + std::to_string(bytes.size()) + " bytes)");
  const std::string_view payload = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader tail(bytes.substr(bytes.size() - 8));
  const std::uint64_t stored = tail.get_le<std::uint64_t>();
  if (stored != fnv1a64(payload)) throw ChecksumError("container checksum mismatch");

  detail::ByteReader r(payload);
  Container c;
  c.magic = std::string(r.get_bytes(4));
  if (c.magic != expected_magic) {
    throw FormatError("bad magic '" + c.magic + "', expected '" + std::string(expected_magic) + "'");
  }
  const auto version = r.get_le<std::uint32_t>();
  if (version != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(version));
  const auto header_len = r.get_le<std::uint64_t>();
  if (header_len > r.remaining()) throw FormatError("header length exceeds file");
  const auto header = r.get_bytes(static_cast<std::size_t>(header_len));
  try {
    c.header = Json::parse(header);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  const auto count = r.get_le<std::uint64_t>();
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    Section s;
    const auto name_len = r.get_le<std::uint32_t>();
    s.name = std::string(r.get_bytes(name_len));
    if (!names.insert(s.name).second) throw FormatError("duplicate section " + s.name);
    s.rows = static_cast<std::size_t>(r.get_le<std::uint64_t>());
    s.cols = static_cast<std::size_t>(r.get_le<std::uint64_t>());
    if (s.cols != 0 && s.rows > r.remaining() / 8 / s.cols) throw FormatError("section " + s.name + " exceeds file");
    s.data.resize(s.rows * s.cols);
    for (auto& x : s.data) x = r.get_f64();
    c.sections.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last section");
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

struct SectionWriter {
  std::vector<Section>& out;

  void add(std::string name, std::size_t rows, std::size_t cols, std::span<const double> data) {
    out.push_back({std::move(name), rows, cols, Vector(data.begin(), data.end())});
  }
  void tensor(const std::string& name, const Matrix& m) { add(name, m.rows(), m.cols(), m.data()); }
  void vector(const std::string& name, const Vector& v) { add(name, 1, v.size(), v); }
  void scalar(const std::string& name, const double& x) { add(name, 1, 1, std::span<const double>(&x, 1)); }
  void linear(const std::string& name, const DenseLinear& lin) {
    tensor(name + ".weight", lin.weight);
    vector(name + ".bias", lin.bias);
  }
  void linear(const std::string& name, const SvdLinear& lin) {
    tensor(name + ".U", lin.factors.u);
    tensor(name + ".V", lin.factors.v);
    vector(name + ".s_initial", lin.s_initial);
    vector(name + ".s_current", lin.s_current);
    Vector mask(lin.mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = lin.mask[i] ? 1.0 : 0.0;
    vector(name + ".mask", mask);
    vector(name + ".bias", lin.bias);
  }
};

/// Fills a shape-correct skeleton from sections, checking every shape.
struct SectionReader {
  std::map<std::string, const Section*> by_name;
  std::size_t consumed = 0;

  const Section& take(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing section " + name);
    ++consumed;
    return *it->second;
  }
  static void expect(const Section& s, std::size_t rows, std::size_t cols) {
    if (s.rows != rows || s.cols != cols) {
      throw FormatError("section " + s.name + " has shape " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                        ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  }
  void tensor(const std::string& name, Matrix& m) {
    const Section& s = take(name);
    expect(s, m.rows(), m.cols());
    m = Matrix(s.rows, s.cols, s.data);
  }
  void vector(const std::string& name, Vector& v) {
    const Section& s = take(name);
    expect(s, 1, v.size());
    v = s.data;
  }
  void scalar(const std::string& name, double& x) {
    const Section& s = take(name);
    expect(s, 1, 1);
    x = s.data[0];
  }
  /// Biases may be absent (length 0) or full width.
  void bias(const std::string& name, Vector& v, std::size_t width) {
    const Section& s = take(name);
    if (s.rows != 1 || (s.cols != 0 && s.cols != width)) expect(s, 1, width);
    v = s.data;
  }
  void linear(const std::string& name, DenseLinear& lin) {
    tensor(name + ".weight", lin.weight);
    bias(name + ".bias", lin.bias, lin.out_dim());
  }
  void linear(const std::string& name, SvdLinear& lin) {
    const std::size_t in = lin.in_dim();
    const std::size_t out = lin.out_dim();
    const std::size_t r = lin.rank();
    tensor(name + ".U", lin.factors.u);
    tensor(name + ".V", lin.factors.v);
    vector(name + ".s_initial", lin.s_initial);
    vector(name + ".s_current", lin.s_current);
    Vector mask(r);
    vector(name + ".mask", mask);
    lin.mask.assign(r, false);
    for (std::size_t j = 0; j < r; ++j) {
      if (mask[j] != 0.0 && mask[j] != 1.0) throw FormatError("section " + name + ".mask holds a non-boolean value");
      lin.mask[j] = mask[j] == 1.0;
      if (!lin.mask[j] && lin.s_current[j] != lin.s_initial[j]) {
        throw FormatError("section " + name + ": a masked singular value differs from its initial value");
      }
    }
    bias(name + ".bias", lin.bias, out);
    lin.factors.s = lin.s_initial;
    lin.factors.source_rows = in;
    lin.factors.source_cols = out;
  }
};

inline SvdLinear svd_skeleton(std::size_t in, std::size_t out) {
  const std::size_t r = std::min(in, out);
  SvdLinear lin;
  lin.factors = {Matrix(in, r), Vector(r, 0.0), Matrix(out, r), in, out};
  lin.s_current = lin.s_initial = Vector(r, 0.0);
  lin.mask.assign(r, true);
  lin.bias.assign(out, 0.0);
  return lin;
}

inline Encoder<SvdLinear> svd_encoder_skeleton(const EncoderConfig& cfg) {
  Encoder<SvdLinear> enc;
  enc.config = cfg;
  const std::size_t d = cfg.embed_dim;
  const std::size_t parts = cfg.qkv_parts();
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    EncoderLayer<SvdLinear> layer;
    layer.q.assign(parts, svd_skeleton(d, d / parts));
    layer.k.assign(parts, svd_skeleton(d, d / parts));
    layer.v.assign(parts, svd_skeleton(d, d / parts));
    layer.o = svd_skeleton(d, d);
    layer.mlp_in = svd_skeleton(d, cfg.mlp_dim);
    layer.mlp_out = svd_skeleton(cfg.mlp_dim, d);
    layer.ln1 = layer.ln2 = LayerNormParams::identity(d);
    enc.layers.push_back(std::move(layer));
  }
  enc.ln_final = LayerNormParams::identity(d);
  return enc;
}

template <class Model>
Model fill_model(Model skeleton, const Container& c) {
  SectionReader reader;
  for (const auto& s : c.sections) reader.by_name[s.name] = &s;
  visit_model(skeleton, reader);
  if (reader.consumed != c.sections.size()) throw FormatError("checkpoint holds unexpected sections");
  return skeleton;
}

}  // namespace detail

template <class Lin>
std::string serialize_checkpoint(const DualEncoderModel<Lin>& model) {
  Container c;
  c.magic = kCheckpointMagic;
  c.header = {{"format", "checkpoint"},
              {"kind", GradTraits<Lin>::trains_all ? "dense" : "svd"},
              {"model", to_json(model.config)}};
  detail::SectionWriter w{c.sections};
  visit_model(model, w);
  return encode_container(c);
}

/// A checkpoint holds either a dense (pretraining) or decomposed model.
struct Checkpoint {
  ModelConfig config;
  std::optional<DenseModel> dense;
  std::optional<SvdModel> svd;

  bool is_svd() const noexcept { return svd.has_value(); }

  /// The decomposed view; dense checkpoints are decomposed on the fly
  /// (deterministic, so repeated calls agree bitwise).
  SvdModel as_svd(const RankMaskSpec& mask = {}) const {
    if (svd) return *svd;
    return decompose_model(*dense, mask);
  }
};

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  const Container c = decode_container(bytes, kCheckpointMagic);
  if (!c.header.is_object() || !c.header.contains("kind") || !c.header.contains("model") ||
      !c.header["kind"].is_string()) {
    throw FormatError("checkpoint header lacks kind/model");
  }
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(c.header["model"], "header.model");
    ck.config.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const std::string kind = c.header["kind"];
  if (kind == "dense") {
    DenseModel skeleton = init_dense_model(ck.config, 0);
    ck.dense = detail::fill_model(std::move(skeleton), c);
    ck.dense->config = ck.config;
  } else if (kind == "svd") {
    SvdModel skeleton;
    skeleton.config = ck.config;
    const DenseModel stems = init_dense_model(ck.config, 0);
    skeleton.vision_stem = stems.vision_stem;
    skeleton.text_stem = stems.text_stem;
    skeleton.proj_v = stems.proj_v;
    skeleton.proj_t = stems.proj_t;
    skeleton.vision = detail::svd_encoder_skeleton(ck.config.vision);
    skeleton.text = detail::svd_encoder_skeleton(ck.config.text);
    ck.svd = detail::fill_model(std::move(skeleton), c);
  } else {
    throw FormatError("unknown checkpoint kind '" + kind + "'");
  }
  return ck;
}

template <class Lin>
void save_checkpoint(const std::filesystem::path& path, const DualEncoderModel<Lin>& model) {
  write_file(path, serialize_checkpoint(model));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

inline std::string serialize_dataset(const Dataset& ds) {
  const auto& cfg = ds.config;
  const std::size_t n = ds.samples.size();
  Container c;
  c.magic = kDatasetMagic;
  c.header = {{"format", "dataset"}, {"config", to_json(cfg)}, {"num_samples", n}};
  Section patches{"patches", n, cfg.patches_per_image * cfg.patch_dim, {}};
  Section texts{"texts", n, cfg.text_length, {}};
  Section labels{"labels", n, 1, {}};
  Section latents{"latents", n, cfg.latent_dim, {}};
  for (const auto& s : ds.samples) {
    if (s.patches.size() != patches.cols || s.text.size() != texts.cols || s.latent.size() != latents.cols) {
      throw ShapeError("serialize_dataset: sample shape disagrees with config");
    }
    patches.data.insert(patches.data.end(), s.patches.data().begin(), s.patches.data().end());
    for (auto t : s.text) texts.data.push_back(static_cast<double>(t));
    labels.data.push_back(static_cast<double>(s.label));
    latents.data.insert(latents.data.end(), s.latent.begin(), s.latent.end());
  }
  Section class_texts{"class_texts", ds.class_texts.size(), cfg.text_length, {}};
  for (const auto& t : ds.class_texts) {
    for (auto id : t) class_texts.data.push_back(static_cast<double>(id));
  }
  Section prototypes{"prototypes", ds.prototypes.rows(), ds.prototypes.cols(), ds.prototypes.values()};
  c.sections = {std::move(prototypes), std::move(class_texts), std::move(patches), std::move(texts),
                std::move(labels), std::move(latents)};
  return encode_container(c);
}

namespace detail {

inline std::size_t as_index(double x, std::size_t bound, const std::string& what) {
  if (!(x >= 0.0) || x != std::floor(x) || x >= static_cast<double>(bound)) {
    throw FormatError(what + ": value " + std::to_string(x) + " is not an index below " + std::to_string(bound));
  }
  return static_cast<std::size_t>(x);
}

}  // namespace detail

inline Dataset parse_dataset(std::string_view bytes) {
  const Container c = decode_container(bytes, kDatasetMagic);
  if (!c.header.is_object() || !c.header.contains("config")) throw FormatError("dataset header lacks config");
  Dataset ds;
  try {
    ds.config = corpus_config_from_json(c.header["config"], "header.config");
    ds.config.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  const auto& cfg = ds.config;
  std::map<std::string, const Section*> by_name;
  for (const auto& s : c.sections) by_name[s.name] = &s;
  auto take = [&](const std::string& name, std::size_t cols) -> const Section& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("dataset: missing section " + name);
    if (it->second->cols != cols) throw FormatError("dataset: section " + name + " has the wrong width");
    return *it->second;
  };
  const Section& proto = take("prototypes", cfg.latent_dim);
  const Section& ctexts = take("class_texts", cfg.text_length);
  const Section& patches = take("patches", cfg.patches_per_image * cfg.patch_dim);
  const Section& texts = take("texts", cfg.text_length);
  const Section& labels = take("labels", 1);
  const Section& latents = take("latents", cfg.latent_dim);
  if (c.sections.size() != 6) throw FormatError("dataset holds unexpected sections");
  const std::size_t n = patches.rows;
  if (texts.rows != n || labels.rows != n || latents.rows != n) throw FormatError("dataset: sample sections disagree");
  if (proto.rows != cfg.num_classes || ctexts.rows != cfg.num_classes) {
    throw FormatError("dataset: class sections disagree with num_classes");
  }
  ds.prototypes = Matrix(proto.rows, proto.cols, proto.data);
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    std::vector<std::size_t> t;
    for (std::size_t j = 0; j < cfg.text_length; ++j) {
      t.push_back(detail::as_index(ctexts.data[k * cfg.text_length + j], cfg.vocab_size, "class_texts"));
    }
    ds.class_texts.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < n; ++i) {
    PairedSample s;
    const auto prow = std::span<const double>(patches.data).subspan(i * patches.cols, patches.cols);
    s.patches = Matrix(cfg.patches_per_image, cfg.patch_dim, Vector(prow.begin(), prow.end()));
    for (std::size_t j = 0; j < cfg.text_length; ++j) {
      s.text.push_back(detail::as_index(texts.data[i * cfg.text_length + j], cfg.vocab_size, "texts"));
    }
    s.label = detail::as_index(labels.data[i], cfg.num_classes, "labels");
    const auto lrow = std::span<const double>(latents.data).subspan(i * cfg.latent_dim, cfg.latent_dim);
    s.latent.assign(lrow.begin(), lrow.end());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file(path, serialize_dataset(ds)); }
inline Dataset load_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

// ---------------------------------------------------------------------------
// Adaptation records (JSON)
// ---------------------------------------------------------------------------

inline Json to_json(const AdaptationRecord& r) {
  Json layers = Json::array();
  for (const auto& e : r.layers) {
    std::vector<int> mask;
    for (bool b : e.mask) mask.push_back(b ? 1 : 0);
    layers.push_back({{"name", e.name}, {"s_initial", e.s_initial}, {"s_final", e.s_final}, {"mask", mask}});
  }
  return {{"layers", layers}, {"losses", r.losses}, {"batches", r.batches}};
}

inline AdaptationRecord record_from_json(const Json& j) {
  AdaptationRecord r;
  try {
    for (const auto& e : j.at("layers")) {
      AdaptationRecord::Entry entry;
      entry.name = e.at("name").get<std::string>();
      entry.s_initial = e.at("s_initial").get<Vector>();
      entry.s_final = e.at("s_final").get<Vector>();
      for (int b : e.at("mask").get<std::vector<int>>()) entry.mask.push_back(b != 0);
      if (entry.s_initial.size() != entry.s_final.size() || entry.mask.size() != entry.s_final.size()) {
        throw FormatError("record entry " + entry.name + " has inconsistent lengths");
      }
      r.layers.push_back(std::move(entry));
    }
    r.losses = j.at("losses").get<Vector>();
    r.batches = j.at("batches").get<std::vector<std::vector<std::size_t>>>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("adaptation record: ") + e.what());
  }
  return r;
}

inline Json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace clipsvd
