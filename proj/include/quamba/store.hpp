#pragma once

// Model container: one line of UTF-8 JSON manifest, '\n', then the raw
// little-endian tensor payload in manifest order.
//
// Quantized weights are stored as i8 with their scales in the embedded scale
// set under "layers.<L>.<tensor>"; activation scales sit next to them under
// their site names.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "quamba/error.hpp"
#include "quamba/model.hpp"
#include "quamba/qblock.hpp"
#include "quamba/scaleset.hpp"

namespace quamba {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr int kContainerVersion = 1;

inline std::string layer_key(std::size_t layer, std::string_view name) {
  return "layers." + std::to_string(layer) + "." + std::string(name);
}

// Site names under which a quantized block's activation scales are stored.
inline std::string y_site_name(Mode m) { return uses_hadamard(m) ? "y_had" : "y"; }

struct TensorRecord {
  std::string name;
  std::string dtype;  // "f32" or "i8"
  std::vector<std::size_t> shape;
  std::size_t byte_offset = 0;
  std::size_t byte_length = 0;
};

namespace detail {

class PayloadWriter {
 public:
  void f32(const std::string& name, std::vector<std::size_t> shape, std::span<const float> v) {
    add(name, "f32", std::move(shape), v.data(), v.size() * sizeof(float));
  }

  void i8(const std::string& name, const QTensor& q) {
    q.validate();
    if (q.bits > 8 || q.zero_point != 0) throw Error("container: tensor '" + name + "' does not fit i8 storage");
    std::vector<std::int8_t> bytes(q.values.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::int8_t>(q.values[i]);
    add(name, "i8", {q.rows, q.cols}, bytes.data(), bytes.size());
  }

  std::vector<TensorRecord> records;
  std::string payload;

 private:
  void add(const std::string& name, std::string dtype, std::vector<std::size_t> shape, const void* data,
           std::size_t n) {
    records.push_back({name, std::move(dtype), std::move(shape), payload.size(), n});
    payload.append(static_cast<const char*>(data), n);
  }
};

inline std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "i8") return 1;
  throw Error("container: unknown dtype '" + dtype + "'");
}

class PayloadReader {
 public:
  PayloadReader(std::vector<TensorRecord> records, std::string payload)
      : payload_(std::move(payload)) {
    std::size_t expected = 0;
    for (auto& r : records) {
      const std::size_t width = dtype_size(r.dtype);
      if (r.byte_offset != expected) throw Error("container: tensor '" + r.name + "' has a non-contiguous offset");
      if (r.byte_length != element_count(r.shape) * width) {
        throw Error("container: tensor '" + r.name + "' byte length does not match its shape");
      }
      expected += r.byte_length;
      if (!index_.emplace(r.name, r).second) throw Error("container: duplicate tensor '" + r.name + "'");
    }
    if (expected != payload_.size()) {
      throw Error("payload length mismatch: manifest declares " + std::to_string(expected) + " bytes, file has " +
                  std::to_string(payload_.size()));
    }
  }

  const TensorRecord& record(const std::string& name, const std::string& dtype) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("container: missing tensor '" + name + "'");
    if (it->second.dtype != dtype) throw Error("container: tensor '" + name + "' is not " + dtype);
    return it->second;
  }

  std::vector<float> f32_values(const std::string& name, std::size_t expect) const {
    const auto& r = record(name, "f32");
    if (element_count(r.shape) != expect) throw Error("container: tensor '" + name + "' has the wrong size");
    std::vector<float> v(expect);
    std::memcpy(v.data(), payload_.data() + r.byte_offset, r.byte_length);
    return v;
  }

  Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
    return Matrix(rows, cols, f32_values(name, rows * cols));
  }

  QTensor qtensor(const std::string& name, std::size_t rows, std::size_t cols, const ScaleSet& scales,
                  int bits) const {
    const auto& r = record(name, "i8");
    if (r.shape.size() != 2 || r.shape[0] != rows || r.shape[1] != cols) {
      throw Error("container: tensor '" + name + "' has the wrong shape");
    }
    QTensor q{rows, cols, std::vector<std::int32_t>(rows * cols), static_cast<float>(scales.at(name).scale), 0,
              bits};
    for (std::size_t i = 0; i < q.values.size(); ++i) {
      q.values[i] = static_cast<std::int8_t>(payload_[r.byte_offset + i]);
    }
    q.validate();
    return q;
  }

 private:
  std::string payload_;
  std::map<std::string, TensorRecord> index_;
};

inline nlohmann::json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"expand", c.expand},         {"d_state", c.d_state}, {"d_conv", c.d_conv},
          {"dt_rank", c.dt_rank},       {"bit_width", c.bits}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.expand = j.at("expand").get<std::size_t>();
  c.d_state = j.at("d_state").get<std::size_t>();
  c.d_conv = j.at("d_conv").get<std::size_t>();
  c.dt_rank = j.at("dt_rank").get<std::size_t>();
  c.bits = j.at("bit_width").get<int>();
  c.validate();
  return c;
}

inline std::vector<std::size_t> shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

inline void write_float_layer(PayloadWriter& w, std::size_t l, const SSMParams& p) {
  w.f32(layer_key(l, "in_proj"), shape_of(p.in_proj), p.in_proj.flat());
  w.f32(layer_key(l, "conv_weight"), shape_of(p.conv_weight), p.conv_weight.flat());
  w.f32(layer_key(l, "conv_bias"), {p.conv_bias.size()}, p.conv_bias);
  w.f32(layer_key(l, "x_proj_B"), shape_of(p.x_proj_B), p.x_proj_B.flat());
  w.f32(layer_key(l, "x_proj_C"), shape_of(p.x_proj_C), p.x_proj_C.flat());
  w.f32(layer_key(l, "dt_down"), shape_of(p.dt_down), p.dt_down.flat());
  w.f32(layer_key(l, "dt_up"), shape_of(p.dt_up), p.dt_up.flat());
  w.f32(layer_key(l, "dt_bias"), {p.dt_bias.size()}, p.dt_bias);
  w.f32(layer_key(l, "A"), shape_of(p.A), p.A.flat());
  w.f32(layer_key(l, "D"), {p.D.size()}, p.D);
  w.f32(layer_key(l, "out_proj"), shape_of(p.out_proj), p.out_proj.flat());
  w.f32(layer_key(l, "norm_weight"), {p.norm_weight.size()}, p.norm_weight);
}

inline SSMParams read_float_layer(const PayloadReader& r, std::size_t l, const BlockConfig& cfg) {
  const auto di = cfg.d_inner();
  SSMParams p;
  p.in_proj = r.matrix(layer_key(l, "in_proj"), cfg.d_model, 2 * di);
  p.conv_weight = r.matrix(layer_key(l, "conv_weight"), cfg.d_conv, di);
  p.conv_bias = r.f32_values(layer_key(l, "conv_bias"), di);
  p.x_proj_B = r.matrix(layer_key(l, "x_proj_B"), di, cfg.d_state);
  p.x_proj_C = r.matrix(layer_key(l, "x_proj_C"), di, cfg.d_state);
  p.dt_down = r.matrix(layer_key(l, "dt_down"), di, cfg.dt_rank);
  p.dt_up = r.matrix(layer_key(l, "dt_up"), cfg.dt_rank, di);
  p.dt_bias = r.f32_values(layer_key(l, "dt_bias"), di);
  p.A = r.matrix(layer_key(l, "A"), di, cfg.d_state);
  p.D = r.f32_values(layer_key(l, "D"), di);
  p.out_proj = r.matrix(layer_key(l, "out_proj"), di, cfg.d_model);
  p.norm_weight = r.f32_values(layer_key(l, "norm_weight"), cfg.d_model);
  return p;
}

inline void write_quant_layer(PayloadWriter& w, std::size_t l, const QuantizedBlock& q) {
  w.i8(layer_key(l, "in_proj"), q.in_proj);
  w.i8(layer_key(l, "conv_weight"), q.conv_weight);
  w.f32(layer_key(l, "conv_bias"), {q.conv_bias.size()}, q.conv_bias);
  w.i8(layer_key(l, "x_proj_B"), q.x_proj_B);
  w.i8(layer_key(l, "x_proj_C"), q.x_proj_C);
  w.i8(layer_key(l, "dt_down"), q.dt_down);
  w.i8(layer_key(l, "dt_up"), q.dt_up);
  w.i8(layer_key(l, "dt_bias"), q.dt_bias);
  w.i8(layer_key(l, "A"), q.A);
  w.i8(layer_key(l, "D"), q.D);
  w.i8(layer_key(l, "out_proj"), q.out_proj);
  w.f32(layer_key(l, "norm_weight"), {q.norm_weight.size()}, q.norm_weight);
}

inline QuantizedBlock read_quant_layer(const PayloadReader& r, std::size_t l, const ModelConfig& mc, Mode mode,
                                       const ScaleSet& s) {
  const auto cfg = mc.block();
  const auto di = cfg.d_inner();
  const int bits = mc.bits;
  QuantizedBlock q;
  q.mode = mode;
  q.bits = bits;
  q.plan = plan_for_dim(di);
  q.in_proj = r.qtensor(layer_key(l, "in_proj"), cfg.d_model, 2 * di, s, bits);
  q.conv_weight = r.qtensor(layer_key(l, "conv_weight"), cfg.d_conv, di, s, bits);
  q.conv_bias = r.f32_values(layer_key(l, "conv_bias"), di);
  q.x_proj_B = r.qtensor(layer_key(l, "x_proj_B"), di, cfg.d_state, s, bits);
  q.x_proj_C = r.qtensor(layer_key(l, "x_proj_C"), di, cfg.d_state, s, bits);
  q.dt_down = r.qtensor(layer_key(l, "dt_down"), di, cfg.dt_rank, s, bits);
  q.dt_up = r.qtensor(layer_key(l, "dt_up"), cfg.dt_rank, di, s, bits);
  q.dt_bias = r.qtensor(layer_key(l, "dt_bias"), 1, di, s, bits);
  q.A = r.qtensor(layer_key(l, "A"), di, cfg.d_state, s, bits);
  q.D = r.qtensor(layer_key(l, "D"), 1, di, s, bits);
  q.out_proj = r.qtensor(layer_key(l, "out_proj"), di, cfg.d_model, s, bits);
  q.norm_weight = r.f32_values(layer_key(l, "norm_weight"), cfg.d_model);
  auto scale = [&](std::string_view site) { return static_cast<float>(s.at(layer_key(l, site)).scale); };
  q.scales.in = scale("in");
  q.scales.in_proj_x = scale("in_proj.x");
  q.scales.x = scale("x");
  q.scales.B = scale("B");
  q.scales.C = scale("C");
  q.scales.dt_low = scale("dt_proj.low");
  q.scales.dt = scale("dt");
  q.scales.y = scale(y_site_name(mode));
  return q;
}

inline std::string encode(const nlohmann::json& manifest_base, const PayloadWriter& w) {
  nlohmann::json manifest = manifest_base;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& r : w.records) {
    manifest["tensors"].push_back({{"name", r.name},
                                   {"dtype", r.dtype},
                                   {"shape", r.shape},
                                   {"byte_offset", r.byte_offset},
                                   {"byte_length", r.byte_length}});
  }
  std::string out = manifest.dump();
  out.push_back('\n');
  out += w.payload;
  return out;
}

}  // namespace detail

inline std::string serialize_model(const Model& model) {
  detail::PayloadWriter w;
  nlohmann::json manifest;
  manifest["version"] = kContainerVersion;
  if (const auto* fm = std::get_if<FloatModel>(&model)) {
    fm->validate();
    manifest["kind"] = "float";
    manifest["mode"] = nullptr;
    manifest["config"] = detail::config_json(fm->config);
    manifest["scales"] = nullptr;
    w.f32("embedding", detail::shape_of(fm->embedding), fm->embedding.flat());
    for (std::size_t l = 0; l < fm->layers.size(); ++l) detail::write_float_layer(w, l, fm->layers[l]);
    w.f32("norm_f", {fm->norm_f.size()}, fm->norm_f);
  } else {
    const auto& qm = std::get<QuantizedModel>(model);
    manifest["kind"] = "quantized";
    manifest["mode"] = std::string(mode_name(qm.mode));
    manifest["config"] = detail::config_json(qm.config);
    manifest["scales"] = nlohmann::json::parse(to_json(qm.scales));
    w.f32("embedding", detail::shape_of(qm.embedding), qm.embedding.flat());
    for (std::size_t l = 0; l < qm.layers.size(); ++l) detail::write_quant_layer(w, l, qm.layers[l]);
    w.f32("norm_f", {qm.norm_f.size()}, qm.norm_f);
  }
  return detail::encode(manifest, w);
}

inline Model deserialize_model(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw Error("container: missing manifest terminator");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("container: malformed manifest: ") + ex.what());
  }
  try {
    if (m.at("version").get<int>() != kContainerVersion) throw Error("container: unsupported version");
    std::vector<TensorRecord> records;
    for (const auto& t : m.at("tensors")) {
      records.push_back({t.at("name").get<std::string>(), t.at("dtype").get<std::string>(),
                         t.at("shape").get<std::vector<std::size_t>>(), t.at("byte_offset").get<std::size_t>(),
                         t.at("byte_length").get<std::size_t>()});
    }
    const detail::PayloadReader r(std::move(records), std::string(bytes.substr(nl + 1)));
    const ModelConfig cfg = detail::config_from_json(m.at("config"));
    const auto kind = m.at("kind").get<std::string>();
    if (kind == "float") {
      FloatModel fm;
      fm.config = cfg;
      fm.embedding = r.matrix("embedding", cfg.vocab_size, cfg.d_model);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) fm.layers.push_back(detail::read_float_layer(r, l, cfg.block()));
      fm.norm_f = r.f32_values("norm_f", cfg.d_model);
      fm.validate();
      return fm;
    }
    if (kind == "quantized") {
      QuantizedModel qm;
      qm.config = cfg;
      qm.mode = parse_mode(m.at("mode").get<std::string>());
      qm.scales = scaleset_from_json(m.at("scales"));
      qm.embedding = r.matrix("embedding", cfg.vocab_size, cfg.d_model);
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        qm.layers.push_back(detail::read_quant_layer(r, l, cfg, qm.mode, qm.scales));
      }
      qm.norm_f = r.f32_values("norm_f", cfg.d_model);
      return qm;
    }
    throw Error("container: unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("container: malformed manifest: ") + ex.what());
  }
}

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace detail

inline void save_model(const Model& model, const std::string& path) {
  detail::write_file(path, serialize_model(model));
}

inline Model load_model(const std::string& path) { return deserialize_model(detail::read_file(path)); }

// JSON Lines, one {"tokens": [...]} object per line. Blank lines are skipped.
inline Corpus parse_corpus(std::string_view text) {
  Corpus c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sequence seq;
      for (const auto& t : j.at("tokens")) {
        if (!t.is_number_unsigned()) throw Error("token is not an unsigned integer");
        const auto v = t.get<std::uint64_t>();
        if (v > 0xffffffffULL) throw Error("token exceeds u32");
        seq.push_back(static_cast<Token>(v));
      }
      c.sequences.push_back(std::move(seq));
    } catch (const std::exception& ex) {
      throw Error("corpus line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return c;
}

inline std::string format_corpus(const Corpus& c) {
  std::string out;
  for (const auto& seq : c.sequences) {
    out += "{\"tokens\":[";
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(seq[i]);
    }
    out += "]}\n";
  }
  return out;
}

inline Corpus load_corpus(const std::string& path) { return parse_corpus(detail::read_file(path)); }

inline void save_corpus(const Corpus& c, const std::string& path) { detail::write_file(path, format_corpus(c)); }

// Ensures every token id is inside the model vocabulary.
inline void check_corpus(const Corpus& c, std::size_t vocab) {
  for (std::size_t i = 0; i < c.sequences.size(); ++i) {
    for (Token t : c.sequences[i]) {
      if (t >= vocab) {
        throw Error("corpus sequence " + std::to_string(i) + " has token " + std::to_string(t) +
                    " outside vocabulary of size " + std::to_string(vocab));
      }
    }
  }
}

}  // namespace quamba
