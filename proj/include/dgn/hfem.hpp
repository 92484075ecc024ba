#pragma once

// Hierarchical feature extraction (first gaze): a plain hierarchical ViT
// with stride-4 patch embedding, global self-attention blocks, 2x2 linear
// patch merging between stages, and a residual bottleneck adapter after
// every block.

#include <cmath>
#include <string>
#include <vector>

#include "dgn/params.hpp"

namespace dgn {

struct StageConfig {
  std::vector<std::size_t> dims{32, 64, 128, 256};
  std::vector<std::size_t> depths{1, 1, 2, 1};
  std::vector<std::size_t> heads{1, 2, 4, 8};
  std::size_t patch_stride = 4;
  std::size_t adapter_bottleneck = 8;
  std::size_t mlp_ratio = 4;

  std::size_t stages() const { return dims.size(); }

  /// Spatial stride of stage i (0-based) output.
  std::size_t stride(std::size_t i) const { return patch_stride << i; }

  void validate() const {
    if (dims.empty() || dims.size() != depths.size() || dims.size() != heads.size()) {
      throw ConfigError("stage config: dims/depths/heads must have equal non-zero length");
    }
    if (patch_stride == 0) throw ConfigError("stage config: patch_stride must be positive");
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i] == 0 || depths[i] == 0 || heads[i] == 0) {
        throw ConfigError("stage config: dims, depths and heads must be positive");
      }
      if (dims[i] % heads[i] != 0) {
        throw ConfigError("stage config: head width D_" + std::to_string(i + 1) + "/h = " + std::to_string(dims[i]) +
                          "/" + std::to_string(heads[i]) + " is not integral");
      }
      if (i > 0 && dims[i] != 2 * dims[i - 1]) {
        throw ConfigError("stage config: dims must double per stage");
      }
      if (adapter_bottleneck == 0 || adapter_bottleneck >= dims[i]) {
        throw ConfigError("stage config: adapter bottleneck must satisfy 0 < d < min(D_i)");
      }
    }
  }

  /// Throws unless H and W are divisible by the deepest stride.
  void check_resolution(std::size_t height, std::size_t width) const {
    const std::size_t req = stride(stages() - 1);
    if (height == 0 || width == 0 || height % req != 0 || width % req != 0) {
      throw DimensionError("encode: input " + std::to_string(height) + "x" + std::to_string(width) +
                           " must be divisible by " + std::to_string(req));
    }
  }
};

/// Token matrix [N x D] with its grid shape.
struct FeatureMap {
  Tensor tokens;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t dim() const { return tokens.size(1); }
  std::size_t count() const { return height * width; }
};

/// F_1..F_L (levels[0] is the finest).
struct PyramidFeatures {
  std::vector<FeatureMap> levels;
};

struct AdapterWeights {
  Linear down;  // W_1 [D x d], b_1
  Linear up;    // W_2 [d x D], b_2
};

struct BlockWeights {
  std::size_t heads = 1;
  LayerNormWeights norm1;
  Linear query, key, value, proj;
  LayerNormWeights norm2;
  Linear fc1, fc2;
  AdapterWeights adapter;
};

struct EncoderWeights {
  Linear patch_embed;               // [3 s^2 x D_1]
  std::vector<Linear> merges;       // merges[i]: stage i -> i+1, [4 D_i x D_{i+1}]
  std::vector<std::vector<BlockWeights>> blocks;

  static EncoderWeights create(ParameterStore& store, const StageConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderWeights w;
    const std::size_t s = cfg.patch_stride;
    w.patch_embed = Linear::create(store, "encoder.patch_embed", 3 * s * s, cfg.dims[0], ParamGroup::Backbone, rng);
    w.blocks.resize(cfg.stages());
    for (std::size_t i = 0; i < cfg.stages(); ++i) {
      const std::size_t D = cfg.dims[i];
      for (std::size_t j = 0; j < cfg.depths[i]; ++j) {
        const std::string p = "encoder.stage" + std::to_string(i + 1) + ".block" + std::to_string(j + 1);
        BlockWeights b;
        b.heads = cfg.heads[i];
        b.norm1 = LayerNormWeights::create(store, p + ".norm1", D, ParamGroup::Backbone, rng);
        b.query = Linear::create(store, p + ".attn.query", D, D, ParamGroup::Backbone, rng);
        b.key = Linear::create(store, p + ".attn.key", D, D, ParamGroup::Backbone, rng);
        b.value = Linear::create(store, p + ".attn.value", D, D, ParamGroup::Backbone, rng);
        b.proj = Linear::create(store, p + ".attn.proj", D, D, ParamGroup::Backbone, rng);
        b.norm2 = LayerNormWeights::create(store, p + ".norm2", D, ParamGroup::Backbone, rng);
        b.fc1 = Linear::create(store, p + ".mlp.fc1", D, D * cfg.mlp_ratio, ParamGroup::Backbone, rng);
        b.fc2 = Linear::create(store, p + ".mlp.fc2", D * cfg.mlp_ratio, D, ParamGroup::Backbone, rng);
        b.adapter.down =
            Linear::create(store, p + ".adapter.down", D, cfg.adapter_bottleneck, ParamGroup::Adapter, rng);
        // Zero second layer: the adapter starts as the identity.
        b.adapter.up = Linear::create(store, p + ".adapter.up", cfg.adapter_bottleneck, D, ParamGroup::Adapter, rng,
                                      true, Init::Zeros);
        w.blocks[i].push_back(std::move(b));
      }
      if (i + 1 < cfg.stages()) {
        w.merges.push_back(Linear::create(store, "encoder.merge" + std::to_string(i + 1), 4 * D, cfg.dims[i + 1],
                                          ParamGroup::Backbone, rng));
      }
    }
    return w;
  }
};

/// X + GELU(GELU(X W_1 + b_1) W_2 + b_2).
inline Tensor adapter_forward(const Tensor& x, const AdapterWeights& w) {
  if (x.dim() != 2 || x.size(1) != w.down.in() || w.up.out() != x.size(1)) {
    throw DimensionError("adapter: token width of " + to_string(x.shape()) + " does not match adapter width " +
                         std::to_string(w.down.in()));
  }
  return add(x, gelu(w.up(gelu(w.down(x)))));
}

/// Multi-head self-attention over tokens [N x D] with separate Q/K/V maps.
inline Tensor self_attention(const Tensor& x, const BlockWeights& b) {
  const std::size_t N = x.size(0), D = x.size(1), h = b.heads, dh = D / h;
  auto heads = [&](const Tensor& t) { return permute(reshape(t, {N, h, dh}), {1, 0, 2}); };
  Tensor o = attention(heads(b.query(x)), heads(b.key(x)), heads(b.value(x)),
                       Real(1) / std::sqrt(static_cast<Real>(dh)));
  return b.proj(reshape(permute(o, {1, 0, 2}), {N, D}));
}

struct EncodeOptions {
  bool use_adapters = true;
};

/// Fixed 2-D sinusoidal position code [H*W x D] (half the channels encode
/// the row, half the column), scaled to the embedding init magnitude.
inline Tensor position_code(std::size_t height, std::size_t width, std::size_t dim, Real amplitude = Real(0.02)) {
  std::vector<Real> pe(height * width * dim, Real(0));
  const std::size_t half = dim / 2;
  const std::size_t pairs = half / 2;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      Real* row = pe.data() + (y * width + x) * dim;
      for (std::size_t k = 0; k < pairs; ++k) {
        const Real freq = std::pow(Real(10000), -static_cast<Real>(k) / static_cast<Real>(std::max<std::size_t>(pairs, 1)));
        row[2 * k] = amplitude * std::sin(static_cast<Real>(y) * freq);
        row[2 * k + 1] = amplitude * std::cos(static_cast<Real>(y) * freq);
        row[half + 2 * k] = amplitude * std::sin(static_cast<Real>(x) * freq);
        row[half + 2 * k + 1] = amplitude * std::cos(static_cast<Real>(x) * freq);
      }
    }
  }
  return Tensor::from({height * width, dim}, std::move(pe));
}

/// Non-overlapping s x s patches of a [3 x H x W] image as rows [N x 3 s^2].
inline Tensor patchify(const Tensor& image, std::size_t s) {
  const std::size_t C = image.size(0), H = image.size(1), W = image.size(2);
  Tensor t = reshape(image, {C, H / s, s, W / s, s});
  t = permute(t, {1, 3, 0, 2, 4});
  return reshape(t, {(H / s) * (W / s), C * s * s});
}

/// 2x2 neighbourhood concatenation [h*w x D] -> [(h/2)(w/2) x 4D].
inline Tensor merge_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t D = tokens.size(1);
  Tensor t = reshape(tokens, {h / 2, 2, w / 2, 2, D});
  t = permute(t, {0, 2, 1, 3, 4});
  return reshape(t, {(h / 2) * (w / 2), 4 * D});
}

inline PyramidFeatures encode(const Tensor& image, const EncoderWeights& weights, const StageConfig& cfg,
                              const EncodeOptions& options = {}) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw DimensionError("encode: expected image [3 x H x W], got " + to_string(image.shape()));
  }
  cfg.check_resolution(image.size(1), image.size(2));
  std::size_t h = image.size(1) / cfg.patch_stride;
  std::size_t w = image.size(2) / cfg.patch_stride;
  Tensor x = weights.patch_embed(patchify(image, cfg.patch_stride));
  x = add(x, position_code(h, w, cfg.dims[0]));

  PyramidFeatures out;
  for (std::size_t i = 0; i < cfg.stages(); ++i) {
    if (i > 0) {
      x = weights.merges[i - 1](merge_tokens(x, h, w));
      h /= 2;
      w /= 2;
    }
    for (const auto& b : weights.blocks[i]) {
      x = add(x, self_attention(b.norm1(x), b));
      x = add(x, b.fc2(gelu(b.fc1(b.norm2(x)))));
      if (options.use_adapters) x = adapter_forward(x, b.adapter);
    }
    out.levels.push_back({x, h, w});
  }
  return out;
}

}  // namespace dgn
