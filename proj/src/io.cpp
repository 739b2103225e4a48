// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace lisa {

namespace {

constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

std::string dtype_name(DType t) { return t == DType::f64 ? "f64" : "f32"; }

std::size_t dtype_size(const std::string& name) {
  if (name == "f64") return 8;
  if (name == "f32") return 4;
  throw InputError("unknown tensor dtype '" + name + "'");
}

Json tensor_entry(const std::string& name, const TensorD& t, DType dtype, std::uint64_t& offset) {
  const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * (dtype == DType::f64 ? 8 : 4);
  Json j{{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name(dtype)}, {"offset", offset}, {"nbytes", nbytes}};
  offset += nbytes;
  return j;
}

void append_tensor(std::string& blob, const TensorD& t, DType dtype) {
  if (dtype == DType::f64) {
    blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.numel()) * 8);
  } else {
    for (Index i = 0; i < t.numel(); ++i) {
      const float f = static_cast<float>(t.data()[i]);
      blob.append(reinterpret_cast<const char*>(&f), 4);
    }
  }
}

std::string lisa_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + ".lisa."; }

}  // namespace

std::string blob_path(const std::string& manifest_path) {
  const std::string ext = ".json";
  if (manifest_path.size() > ext.size() && manifest_path.compare(manifest_path.size() - ext.size(), ext.size(), ext) == 0) {
    return manifest_path.substr(0, manifest_path.size() - ext.size()) + ".bin";
  }
  return manifest_path + ".bin";
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw InputError("short write to " + path);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Json to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers}, {"d", c.d},         {"h", c.h},
              {"h_kv", c.h_kv},         {"d_k", c.d_k},     {"d_ff", c.d_ff},
              {"vocab", c.vocab},       {"max_len", c.max_len}, {"rope_base", c.rope_base},
              {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d = j.value("d", c.d);
    c.h = j.value("h", c.h);
    c.h_kv = j.value("h_kv", c.h);
    c.d_k = j.value("d_k", c.d_k);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab = j.value("vocab", c.vocab);
    c.max_len = j.value("max_len", c.max_len);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Json to_json(const LisaLayerConfig& c) {
  return Json{{"variant", std::string(to_string(c.variant))},
              {"ffn_hidden", c.ffn_hidden},
              {"r_q", c.r_q},
              {"r_k", c.r_k},
              {"nf_keep_original", c.nf_keep_original}};
}

LisaLayerConfig lisa_config_from_json(const Json& j, const LisaLayerConfig& defaults) {
  LisaLayerConfig c = defaults;
  try {
    if (j.contains("variant")) c.variant = parse_lisa_variant(j.at("variant").get<std::string>());
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    if (j.contains("rank")) c.r_q = c.r_k = j.at("rank").get<Index>();
    c.r_q = j.value("r_q", c.r_q);
    c.r_k = j.value("r_k", c.r_k);
    c.nf_keep_original = j.value("nf_keep_original", c.nf_keep_original);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("lisa config: ") + e.what());
  }
  return c;
}

Json to_json(const SharingConfig& s) {
  Json layers = Json::array();
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& l = s.layers[i];
    if (l.mode == AttentionMode::standard) continue;
    Json e{{"layer", i}, {"mode", std::string(to_string(l.mode))}};
    if (l.lisa) e["lisa"] = to_json(*l.lisa);
    layers.push_back(std::move(e));
  }
  return Json{{"n_layers", s.layers.size()}, {"nf", s.nf}, {"note", s.note}, {"layers", layers}};
}

SharingConfig sharing_from_json(const Json& j, Index n_layers) {
  if (!j.is_object()) throw ConfigError("sharing config must be a JSON object");
  SharingConfig s = SharingConfig::all_standard(n_layers);
  try {
    if (j.contains("n_layers") && j.at("n_layers").get<Index>() != n_layers) {
      throw ConfigError("sharing config is for " + std::to_string(j.at("n_layers").get<Index>()) +
                        " layers, model has " + std::to_string(n_layers));
    }
    s.nf = j.value("nf", false);
    s.note = j.value("note", std::string());
    const LisaLayerConfig defaults = j.contains("lisa") ? lisa_config_from_json(j.at("lisa")) : LisaLayerConfig{};
    std::vector<bool> seen(static_cast<std::size_t>(n_layers), false);
    auto assign = [&](Index idx, AttentionMode mode, std::optional<LisaLayerConfig> cfg) {
      if (idx < 0 || idx >= n_layers) {
        throw ConfigError("layer index " + std::to_string(idx) + " outside [0, " + std::to_string(n_layers) + ")");
      }
      if (seen[static_cast<std::size_t>(idx)]) throw ConfigError("layer " + std::to_string(idx) + " listed twice");
      seen[static_cast<std::size_t>(idx)] = true;
      s.layers[static_cast<std::size_t>(idx)] = LayerSharing{mode, mode == AttentionMode::lisa ? cfg : std::nullopt};
    };
    if (j.contains("layers")) {
      for (const Json& e : j.at("layers")) {
        const AttentionMode mode = parse_attention_mode(e.at("mode").get<std::string>());
        std::optional<LisaLayerConfig> cfg;
        if (mode == AttentionMode::lisa) cfg = e.contains("lisa") ? lisa_config_from_json(e.at("lisa"), defaults) : defaults;
        assign(e.at("layer").get<Index>(), mode, cfg);
      }
    }
    const std::string indexing = j.value("indexing", std::string("one_based"));
    if (indexing != "one_based" && indexing != "zero_based") throw ConfigError("indexing must be one_based or zero_based");
    const bool one_based = indexing == "one_based";
    for (const auto& [key, mode] : {std::pair{"lisa_layers", AttentionMode::lisa}, std::pair{"ds_layers", AttentionMode::ds},
                                    std::pair{"avg_layers", AttentionMode::avg}}) {
      if (!j.contains(key)) continue;
      for (Index idx : parse_layer_list(j.at(key).get<std::string>(), one_based)) assign(idx, mode, defaults);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("sharing config: ") + e.what());
  }
  return s;
}

SharingConfig load_sharing_config(const std::string& path, Index n_layers) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return sharing_from_json(j, n_layers);
}

std::string config_hash(const ModelConfig& model, const SharingConfig& sharing) {
  const std::string canon = Json{{"model", to_json(model)}, {"sharing", to_json(sharing)}}.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return hex64(h);
}

Json checkpoint_manifest(const Model& model, const Provenance& provenance, DType dtype) {
  model.validate();
  std::uint64_t offset = 0;
  Json tensors = Json::array();
  for (const auto& [name, t] : model.weights.named()) tensors.push_back(tensor_entry(name, *t, dtype, offset));
  Json lisa = Json::array();
  for (std::size_t i = 0; i < model.lisa.size(); ++i) {
    if (!model.lisa[i]) continue;
    Json lt = Json::array();
    for (const auto& [name, t] : model.lisa[i]->named()) lt.push_back(tensor_entry(lisa_prefix(i) + name, *t, dtype, offset));
    lisa.push_back(Json{{"layer", i}, {"config", to_json(model.lisa[i]->config)}, {"tensors", lt}});
  }
  return Json{{"format_version", kFormatVersion},
              {"model_config", to_json(model.config)},
              {"sharing", to_json(model.sharing)},
              {"tensors", tensors},
              {"lisa", lisa},
              {"blob_bytes", offset},
              {"provenance",
               {{"seed", provenance.seed},
                {"steps", provenance.steps},
                {"corpus_hash", provenance.corpus_hash},
                {"command", provenance.command}}}};
}

void save_checkpoint(const Model& model, const std::string& manifest_path, const Provenance& provenance, DType dtype) {
  const Json manifest = checkpoint_manifest(model, provenance, dtype);
  std::string blob;
  blob.reserve(manifest.at("blob_bytes").get<std::size_t>());
  for (const auto& [name, t] : model.weights.named()) append_tensor(blob, *t, dtype);
  for (const auto& p : model.lisa)
    if (p)
      for (const auto& [name, t] : p->named()) append_tensor(blob, *t, dtype);
  write_file(blob_path(manifest_path), blob);
  write_file(manifest_path, manifest.dump(2) + "\n");
}

namespace {

struct Span {
  std::uint64_t offset, nbytes;
};

TensorD read_tensor(const Json& e, const std::string& blob, std::vector<Span>& used) {
  const Shape shape = e.at("shape").get<Shape>();
  const std::size_t width = dtype_size(e.at("dtype").get<std::string>());
  const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
  const std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
  const std::string name = e.at("name").get<std::string>();
  if (nbytes != static_cast<std::uint64_t>(shape_numel(shape)) * width) {
    throw InputError("tensor " + name + ": byte count does not match its shape");
  }
  if (offset + nbytes > blob.size()) throw InputError("tensor " + name + " extends past the end of the blob");
  for (const Span& s : used) {
    if (offset < s.offset + s.nbytes && s.offset < offset + nbytes) throw InputError("tensor " + name + " overlaps another");
  }
  used.push_back({offset, nbytes});
  TensorD t(shape);
  if (width == 8) {
    std::memcpy(t.data(), blob.data() + offset, nbytes);
  } else {
    for (Index i = 0; i < t.numel(); ++i) {
      float f;
      std::memcpy(&f, blob.data() + offset + static_cast<std::uint64_t>(i) * 4, 4);
      t.data()[i] = f;
    }
  }
  return t;
}

}  // namespace

Checkpoint load_checkpoint(const std::string& manifest_path) {
  Json m;
  try {
    m = Json::parse(read_file(manifest_path));
  } catch (const Json::parse_error& e) {
    throw InputError("cannot parse manifest " + manifest_path + ": " + e.what());
  }
  const std::string blob = read_file(blob_path(manifest_path));
  Checkpoint ck;
  try {
    if (m.at("format_version").get<int>() != kFormatVersion) throw InputError("unsupported checkpoint format version");
    Model& model = ck.model;
    model.config = model_config_from_json(m.at("model_config"));
    model.sharing = sharing_from_json(m.at("sharing"), model.config.n_layers);
    model.lisa.assign(static_cast<std::size_t>(model.config.n_layers), std::nullopt);
    model.weights.layers.resize(static_cast<std::size_t>(model.config.n_layers));

    std::vector<Span> used;
    std::map<std::string, TensorD> loaded;
    for (const Json& e : m.at("tensors")) loaded[e.at("name").get<std::string>()] = read_tensor(e, blob, used);
    for (auto& [name, ptr] : model.weights.named()) {
      auto it = loaded.find(name);
      if (it == loaded.end()) throw InputError("checkpoint lacks tensor " + name);
      *ptr = std::move(it->second);
    }
    for (const Json& block : m.at("lisa")) {
      const std::size_t layer = block.at("layer").get<std::size_t>();
      if (layer >= model.lisa.size()) throw InputError("lisa block for a layer out of range");
      LisaParams p;
      p.config = lisa_config_from_json(block.at("config"));
      std::map<std::string, TensorD> lt;
      for (const Json& e : block.at("tensors")) lt[e.at("name").get<std::string>()] = read_tensor(e, blob, used);
      for (auto& [name, ptr] : p.named()) {
        auto it = lt.find(lisa_prefix(layer) + name);
        if (it == lt.end()) throw InputError("lisa block of layer " + std::to_string(layer) + " lacks " + name);
        *ptr = std::move(it->second);
      }
      model.lisa[layer] = std::move(p);
    }
    std::uint64_t total = 0;
    for (const Span& s : used) total += s.nbytes;
    if (total != blob.size()) throw InputError("blob length does not match the tensor directory");

    const Json& pv = m.at("provenance");
    ck.provenance.seed = pv.value("seed", std::uint64_t{0});
    ck.provenance.steps = pv.value("steps", Index{0});
    ck.provenance.corpus_hash = pv.value("corpus_hash", std::string());
    ck.provenance.command = pv.value("command", std::string());
  } catch (const Json::exception& e) {
    throw InputError("malformed manifest " + manifest_path + ": " + e.what());
  }
  ck.model.validate();
  return ck;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string CsvTable::str() const {
  std::string out;
  for (const auto& [k, v] : meta) out += "# " + k + "=" + v + "\n";
  auto line = [&out](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(fields[i]);
    }
    out += "\n";
  };
  line(columns);
  for (const auto& r : rows) line(r);
  return out;
}

}  // namespace lisa
