#pragma once

// Saliency mask generation: the finest refined map is brought to full
// resolution by stride-2 transposed convolutions with a channel-reducing
// MLP, the cortical query is projected to the same width, and the logit
// map is their per-pixel dot product.

#include <string>
#include <vector>

#include "dgn/mgfrm.hpp"

namespace dgn {

struct MaskHeadWeights {
  std::size_t in_dim = 0;
  std::size_t mid_dim = 0;   // D_m
  std::size_t mask_dim = 0;  // D_mask
  std::vector<Tensor> deconv_kernels;  // [C_in x C_out x 2 x 2]
  std::vector<Tensor> deconv_biases;   // [C_out x 1 x 1]
  std::vector<Linear> mlp;             // D_m -> D_m/2 -> D_m/2 -> D_mask
  std::vector<Linear> query_mlp;       // D_in -> D_in -> D_mask

  std::size_t upsamplings() const { return deconv_kernels.size(); }
  std::size_t upscale() const { return std::size_t{1} << upsamplings(); }

  /// `upsamplings` stride-2 deconvolutions bring the input stride to 1.
  static MaskHeadWeights create(ParameterStore& store, std::size_t in_dim, std::size_t mid_dim, std::size_t mask_dim,
                                std::size_t upsamplings, Rng& rng) {
    if (in_dim == 0 || mid_dim < 2 || mask_dim == 0 || upsamplings == 0) {
      throw ConfigError("mask head: widths must be positive and at least one upsampling is required");
    }
    MaskHeadWeights w;
    w.in_dim = in_dim;
    w.mid_dim = mid_dim;
    w.mask_dim = mask_dim;
    for (std::size_t u = 0; u < upsamplings; ++u) {
      const std::string p = "smgm.deconv" + std::to_string(u + 1);
      const std::size_t cin = u == 0 ? in_dim : mid_dim;
      w.deconv_kernels.push_back(store.create(p + ".weight", {cin, mid_dim, 2, 2}, ParamGroup::Decoder,
                                              Init::FanIn, rng));
      w.deconv_biases.push_back(store.create(p + ".bias", {mid_dim, 1, 1}, ParamGroup::Decoder, Init::Zeros, rng));
    }
    const std::size_t hidden = mid_dim / 2;
    w.mlp.push_back(Linear::create(store, "smgm.mlp1", mid_dim, hidden, ParamGroup::Decoder, rng));
    w.mlp.push_back(Linear::create(store, "smgm.mlp2", hidden, hidden, ParamGroup::Decoder, rng));
    w.mlp.push_back(Linear::create(store, "smgm.mlp3", hidden, mask_dim, ParamGroup::Decoder, rng));
    w.query_mlp.push_back(Linear::create(store, "smgm.query_mlp1", in_dim, in_dim, ParamGroup::Decoder, rng));
    w.query_mlp.push_back(Linear::create(store, "smgm.query_mlp2", in_dim, mask_dim, ParamGroup::Decoder, rng));
    return w;
  }
};

/// Refined map -> F'' at full resolution [H*W x D_mask]:
/// (deconv -> GELU) per upsampling, then the 3-layer MLP.
inline FeatureMap upsample_head(const FeatureMap& refined, const MaskHeadWeights& w, std::size_t out_h,
                                std::size_t out_w) {
  if (refined.dim() != w.in_dim) {
    throw DimensionError("upsample_head: input width " + std::to_string(refined.dim()) + " != " +
                         std::to_string(w.in_dim));
  }
  if (refined.height * w.upscale() != out_h || refined.width * w.upscale() != out_w) {
    throw DimensionError("upsample_head: grid " + std::to_string(refined.height) + "x" +
                         std::to_string(refined.width) + " is not at stride " + std::to_string(w.upscale()) +
                         " of " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  Tensor map = tokens_to_map(refined.tokens, refined.height, refined.width);
  for (std::size_t u = 0; u < w.upsamplings(); ++u) {
    map = gelu(add(conv_transpose2d(map, w.deconv_kernels[u], 2), w.deconv_biases[u]));
  }
  Tensor x = map_to_tokens(map);
  x = gelu(w.mlp[0](x));
  x = gelu(w.mlp[1](x));
  x = w.mlp[2](x);
  return {x, out_h, out_w};
}

/// Q^ = MLP(mean over query tokens) [1 x D_mask]; a single token skips pooling.
inline Tensor query_head(const Tensor& queries, const MaskHeadWeights& w, bool force_pool = false) {
  if (queries.dim() != 2 || queries.size(1) != w.in_dim) {
    throw DimensionError("query_head: expected [k x " + std::to_string(w.in_dim) + "], got " +
                         to_string(queries.shape()));
  }
  Tensor q = queries;
  if (queries.size(0) > 1 || force_pool) q = reshape(mean(queries, 0), {1, w.in_dim});
  return w.query_mlp[1](gelu(w.query_mlp[0](q)));
}

/// S(x, y) = <F''(x, y, :), Q^> as an [H x W] logit map.
inline Tensor similarity_map(const FeatureMap& pixel_features, const Tensor& query) {
  if (query.dim() != 2 || query.size(0) != 1 || query.size(1) != pixel_features.dim()) {
    throw DimensionError("similarity_map: query " + to_string(query.shape()) + " does not match pixel width " +
                         std::to_string(pixel_features.dim()));
  }
  return reshape(matmul(pixel_features.tokens, transpose(query)), {pixel_features.height, pixel_features.width});
}

}  // namespace dgn
