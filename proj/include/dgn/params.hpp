#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dgn/ops.hpp"
#include "dgn/random.hpp"

namespace dgn {

/// Which partition a parameter belongs to. The backbone partition is the
/// one frozen by default; adapters and the decoder always train.
enum class ParamGroup { Backbone, Adapter, Decoder };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Decoder: return "decoder";
  }
  return "?";
}

/// TruncNormal draws at `stddev`; FanIn draws at 1/sqrt(shape[0]), the
/// input width of a [in, out] weight or a [C_in, C_out, k, k] kernel.
enum class Init { Zeros, Ones, TruncNormal, FanIn };

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
  bool decay;  // weight decay applies
};

/// Ordered registry of every learnable array. Creation order is the
/// serialization order and is fixed by the model wiring.
class ParameterStore {
 public:
  Tensor create(const std::string& name, Shape shape, ParamGroup group, Init init, Rng& rng, bool decay = true,
                double stddev = 0.02) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    const std::size_t n = numel(shape);
    std::vector<Real> values(n, Real(0));
    if (init == Init::Ones) {
      std::fill(values.begin(), values.end(), Real(1));
    } else if (init == Init::TruncNormal || init == Init::FanIn) {
      if (init == Init::FanIn) stddev = 1.0 / std::sqrt(static_cast<double>(shape.at(0)));
      for (auto& v : values) v = static_cast<Real>(rng.truncated_normal(stddev));
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values));
    index_[name] = params_.size();
    params_.push_back({name, t, group, decay});
    return t;
  }

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }

  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  /// Total scalar count, optionally restricted to trainable entries.
  std::size_t scalar_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p.value.requires_grad()) n += p.value.numel();
    }
    return n;
  }

  std::size_t scalar_count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.group == g) n += p.value.numel();
    }
    return n;
  }

  void set_trainable(ParamGroup g, bool on) {
    for (auto& p : params_) {
      if (p.group == g) p.value.set_requires_grad(on);
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      if (p.value.requires_grad()) p.value.zero_grad();
    }
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Fan-in scaling everywhere. With a random (not pretrained) backbone, small
/// std-0.02 weights leave self-attention uniform and the features content-free.
inline Init default_weight_init(ParamGroup) { return Init::FanIn; }

/// Affine layer y = x W + b, W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                       ParamGroup group, Rng& rng, bool with_bias = true,
                       std::optional<Init> weight_init = std::nullopt) {
    Linear l;
    l.weight = store.create(name + ".weight", {in, out}, group, weight_init.value_or(default_weight_init(group)), rng);
    if (with_bias) l.bias = store.create(name + ".bias", {out}, group, Init::Zeros, rng);
    return l;
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in() const { return weight.size(0); }
  std::size_t out() const { return weight.size(1); }
};

struct LayerNormWeights {
  Tensor gain;
  Tensor bias;
  Real eps = Real(1e-5);

  static LayerNormWeights create(ParameterStore& store, const std::string& name, std::size_t dim, ParamGroup group,
                                 Rng& rng) {
    LayerNormWeights ln;
    ln.gain = store.create(name + ".gain", {dim}, group, Init::Ones, rng, /*decay=*/false);
    ln.bias = store.create(name + ".bias", {dim}, group, Init::Zeros, rng, /*decay=*/false);
    return ln;
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

}  // namespace dgn
