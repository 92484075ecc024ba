#pragma once

// Run configuration: typed sections backed by YAML, strict key checking,
// dotted `key=value` overrides and a canonical resolved echo.

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dgn/data.hpp"
#include "dgn/model.hpp"

namespace dgn {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 5;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t input_size = 64;
  bool hflip = false;
  std::size_t max_steps = 0;         // 0: run all epochs
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (warmup_epochs > epochs) throw ConfigError("train.warmup_epochs must not exceed train.epochs");
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (input_size == 0) throw ConfigError("train.input_size must be positive");
  }
};

struct DataConfig {
  std::string manifest;  // corpus manifest for train/eval/ablate
  std::size_t train_count = 32;
  std::size_t eval_count = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  double boundary_rate = 0.2;
};

struct EvalConfig {
  std::size_t thresholds = 256;
  std::string split = "train";
};

struct Config {
  std::uint64_t seed = 7;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  void validate() const {
    model.validate();
    train.validate();
    model.stages.check_resolution(train.input_size, train.input_size);
    if (eval.thresholds < 2) throw ConfigError("eval.thresholds must be >= 2");
    if (data.height == 0 || data.width == 0) throw ConfigError("data.height/width must be positive");
  }
};

inline std::string single_level_name(std::size_t j) { return j == 0 ? "none" : "F" + std::to_string(j); }

inline std::size_t parse_single_level(const std::string& s) {
  if (s == "none" || s == "0") return 0;
  if (s.size() == 2 && (s[0] == 'F' || s[0] == 'f') && s[1] >= '1' && s[1] <= '9') {
    return static_cast<std::size_t>(s[1] - '0');
  }
  throw ConfigError("model.single_level must be none or F<j>, got '" + s + "'");
}

inline std::string decoder_name(DecoderKind k) { return k == DecoderKind::DualGaze ? "dualgaze" : "none"; }

inline DecoderKind parse_decoder(const std::string& s) {
  if (s == "dualgaze") return DecoderKind::DualGaze;
  if (s == "none") return DecoderKind::None;
  throw ConfigError("model.decoder must be dualgaze or none, got '" + s + "'");
}

namespace detail {

template <typename T>
void emit_seq(YAML::Emitter& out, const std::vector<T>& v) {
  out << YAML::Flow << YAML::BeginSeq;
  for (const auto& x : v) out << x;
  out << YAML::EndSeq;
}

/// Rejects keys of `overlay` missing from `schema`, then copies values.
inline void merge_strict(YAML::Node base, const YAML::Node& overlay, const std::string& path) {
  if (!overlay.IsMap()) throw ConfigError("config: " + (path.empty() ? "document" : path) + " must be a mapping");
  for (const auto& kv : overlay) {
    const std::string key = kv.first.as<std::string>();
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base[key]) throw ConfigError("config: unknown key '" + full + "'");
    if (base[key].IsMap()) {
      merge_strict(base[key], kv.second, full);
    } else {
      base[key] = kv.second;
    }
  }
}

template <typename T>
T read_value(const YAML::Node& n, const std::string& key) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config: bad value for '" + key + "'");
  }
}

}  // namespace detail

inline std::string to_yaml(const Config& c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << c.seed;

  const auto& m = c.model;
  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "dims" << YAML::Value;
  detail::emit_seq(out, m.stages.dims);
  out << YAML::Key << "depths" << YAML::Value;
  detail::emit_seq(out, m.stages.depths);
  out << YAML::Key << "heads" << YAML::Value;
  detail::emit_seq(out, m.stages.heads);
  out << YAML::Key << "patch_stride" << YAML::Value << m.stages.patch_stride;
  out << YAML::Key << "adapter_bottleneck" << YAML::Value << m.stages.adapter_bottleneck;
  out << YAML::Key << "mlp_ratio" << YAML::Value << m.stages.mlp_ratio;
  out << YAML::Key << "query_tokens" << YAML::Value << m.query_tokens;
  out << YAML::Key << "prune_f4" << YAML::Value << m.prune_f4;
  out << YAML::Key << "single_level" << YAML::Value << single_level_name(m.single_level);
  out << YAML::Key << "decoder" << YAML::Value << decoder_name(m.decoder);
  out << YAML::Key << "mask_dim" << YAML::Value << m.mask_dim;
  out << YAML::Key << "freeze_backbone" << YAML::Value << m.freeze_backbone;
  out << YAML::Key << "full_finetune" << YAML::Value << m.full_finetune;
  out << YAML::EndMap;

  const auto& t = c.train;
  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << t.epochs;
  out << YAML::Key << "warmup_epochs" << YAML::Value << t.warmup_epochs;
  out << YAML::Key << "lr" << YAML::Value << t.lr;
  out << YAML::Key << "weight_decay" << YAML::Value << t.weight_decay;
  out << YAML::Key << "beta1" << YAML::Value << t.beta1;
  out << YAML::Key << "beta2" << YAML::Value << t.beta2;
  out << YAML::Key << "adam_eps" << YAML::Value << t.adam_eps;
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "input_size" << YAML::Value << t.input_size;
  out << YAML::Key << "hflip" << YAML::Value << t.hflip;
  out << YAML::Key << "max_steps" << YAML::Value << t.max_steps;
  out << YAML::Key << "checkpoint_every" << YAML::Value << t.checkpoint_every;
  out << YAML::EndMap;

  const auto& d = c.data;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "manifest" << YAML::Value << d.manifest;
  out << YAML::Key << "train_count" << YAML::Value << d.train_count;
  out << YAML::Key << "eval_count" << YAML::Value << d.eval_count;
  out << YAML::Key << "height" << YAML::Value << d.height;
  out << YAML::Key << "width" << YAML::Value << d.width;
  out << YAML::Key << "boundary_rate" << YAML::Value << d.boundary_rate;
  out << YAML::EndMap;

  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "thresholds" << YAML::Value << c.eval.thresholds;
  out << YAML::Key << "split" << YAML::Value << c.eval.split;
  out << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

inline Config from_yaml_node(const YAML::Node& n) {
  Config c;
  auto get = [&](const char* section, const char* key) -> YAML::Node {
    return section ? n[section][key] : n[key];
  };
  c.seed = detail::read_value<std::uint64_t>(get(nullptr, "seed"), "seed");
  auto& m = c.model;
  m.stages.dims = detail::read_value<std::vector<std::size_t>>(get("model", "dims"), "model.dims");
  m.stages.depths = detail::read_value<std::vector<std::size_t>>(get("model", "depths"), "model.depths");
  m.stages.heads = detail::read_value<std::vector<std::size_t>>(get("model", "heads"), "model.heads");
  m.stages.patch_stride = detail::read_value<std::size_t>(get("model", "patch_stride"), "model.patch_stride");
  m.stages.adapter_bottleneck =
      detail::read_value<std::size_t>(get("model", "adapter_bottleneck"), "model.adapter_bottleneck");
  m.stages.mlp_ratio = detail::read_value<std::size_t>(get("model", "mlp_ratio"), "model.mlp_ratio");
  m.query_tokens = detail::read_value<std::size_t>(get("model", "query_tokens"), "model.query_tokens");
  m.prune_f4 = detail::read_value<bool>(get("model", "prune_f4"), "model.prune_f4");
  m.single_level = parse_single_level(detail::read_value<std::string>(get("model", "single_level"), "model.single_level"));
  m.decoder = parse_decoder(detail::read_value<std::string>(get("model", "decoder"), "model.decoder"));
  m.mask_dim = detail::read_value<std::size_t>(get("model", "mask_dim"), "model.mask_dim");
  m.freeze_backbone = detail::read_value<bool>(get("model", "freeze_backbone"), "model.freeze_backbone");
  m.full_finetune = detail::read_value<bool>(get("model", "full_finetune"), "model.full_finetune");

  auto& t = c.train;
  t.epochs = detail::read_value<std::size_t>(get("train", "epochs"), "train.epochs");
  t.warmup_epochs = detail::read_value<std::size_t>(get("train", "warmup_epochs"), "train.warmup_epochs");
  t.lr = detail::read_value<double>(get("train", "lr"), "train.lr");
  t.weight_decay = detail::read_value<double>(get("train", "weight_decay"), "train.weight_decay");
  t.beta1 = detail::read_value<double>(get("train", "beta1"), "train.beta1");
  t.beta2 = detail::read_value<double>(get("train", "beta2"), "train.beta2");
  t.adam_eps = detail::read_value<double>(get("train", "adam_eps"), "train.adam_eps");
  t.batch_size = detail::read_value<std::size_t>(get("train", "batch_size"), "train.batch_size");
  t.input_size = detail::read_value<std::size_t>(get("train", "input_size"), "train.input_size");
  t.hflip = detail::read_value<bool>(get("train", "hflip"), "train.hflip");
  t.max_steps = detail::read_value<std::size_t>(get("train", "max_steps"), "train.max_steps");
  t.checkpoint_every = detail::read_value<std::size_t>(get("train", "checkpoint_every"), "train.checkpoint_every");

  auto& d = c.data;
  d.manifest = detail::read_value<std::string>(get("data", "manifest"), "data.manifest");
  d.train_count = detail::read_value<std::size_t>(get("data", "train_count"), "data.train_count");
  d.eval_count = detail::read_value<std::size_t>(get("data", "eval_count"), "data.eval_count");
  d.height = detail::read_value<std::size_t>(get("data", "height"), "data.height");
  d.width = detail::read_value<std::size_t>(get("data", "width"), "data.width");
  d.boundary_rate = detail::read_value<double>(get("data", "boundary_rate"), "data.boundary_rate");

  c.eval.thresholds = detail::read_value<std::size_t>(get("eval", "thresholds"), "eval.thresholds");
  c.eval.split = detail::read_value<std::string>(get("eval", "split"), "eval.split");
  return c;
}

/// Applies `key=value` (dotted key, YAML-parsed value) onto a node tree
/// that already holds every known key.
inline void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  YAML::Node parsed;
  try {
    parsed = YAML::Load(value.empty() ? "''" : value);
  } catch (const YAML::Exception&) {
    throw ConfigError("override '" + assignment + "': value does not parse");
  }
  YAML::Node overlay = parsed;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    YAML::Node wrap(YAML::NodeType::Map);
    wrap[*it] = overlay;
    overlay = wrap;
  }
  detail::merge_strict(root, overlay, "");
}

/// Defaults <- optional YAML file <- overrides, validated.
inline Config load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  YAML::Node root = YAML::Load(to_yaml(Config{}));
  if (!path.empty()) {
    YAML::Node file;
    try {
      file = YAML::LoadFile(path);
    } catch (const YAML::BadFile&) {
      throw IoError("cannot read config " + path);
    } catch (const YAML::Exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    if (!file.IsNull()) detail::merge_strict(root, file, "");
  }
  for (const auto& o : overrides) apply_override(root, o);
  Config c = from_yaml_node(root);
  c.validate();
  return c;
}

inline Config parse_config_text(const std::string& text) {
  YAML::Node root = YAML::Load(to_yaml(Config{}));
  YAML::Node doc;
  try {
    doc = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!doc.IsNull()) detail::merge_strict(root, doc, "");
  Config c = from_yaml_node(root);
  c.validate();
  return c;
}

}  // namespace dgn
