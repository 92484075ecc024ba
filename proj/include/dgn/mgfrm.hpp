#pragma once

// Gaze-guided feature reconstruction (second gaze): feature tokens attend
// over the cortical query tokens (reverse cross-attention), top-down, with
// the refined deeper map upsampled and fused into each shallower stage.

#include <string>
#include <vector>

#include "dgn/mgqm.hpp"

namespace dgn {

/// Tokens [h*w x D] -> channel-major map [D x h x w].
inline Tensor tokens_to_map(const Tensor& tokens, std::size_t h, std::size_t w) {
  return permute(reshape(tokens, {h, w, tokens.size(1)}), {2, 0, 1});
}

/// Channel-major map [D x h x w] -> tokens [h*w x D].
inline Tensor map_to_tokens(const Tensor& map) {
  const std::size_t D = map.size(0), h = map.size(1), w = map.size(2);
  return reshape(permute(map, {1, 2, 0}), {h * w, D});
}

struct ReconstructionWeights {
  std::size_t top = 0;     // 1-based deepest stage processed
  std::size_t bottom = 0;  // 1-based shallowest stage processed
  std::vector<Linear> up;                     // up[i]: D_{i+2} -> D_{i+1}; defined for bottom-1 <= i < top-1
  std::vector<CrossAttentionWeights> attend;  // attend[i]; defined for bottom-1 <= i <= top-1

  /// Weights for the cascade top..bottom (both 1-based, top >= bottom).
  static ReconstructionWeights create(ParameterStore& store, const StageConfig& cfg, std::size_t top,
                                      std::size_t bottom, Rng& rng) {
    if (bottom < 1 || top < bottom || top > cfg.stages()) {
      throw ConfigError("reconstruction: invalid stage range " + std::to_string(top) + ".." + std::to_string(bottom));
    }
    ReconstructionWeights w;
    w.top = top;
    w.bottom = bottom;
    w.up.resize(cfg.stages());
    w.attend.resize(cfg.stages());
    for (std::size_t stage = top; stage >= bottom; --stage) {
      const std::size_t i = stage - 1;
      if (stage < top) {
        w.up[i] = Linear::create(store, "mgfrm.up" + std::to_string(stage), cfg.dims[i + 1], cfg.dims[i],
                                 ParamGroup::Decoder, rng, true, Init::TruncNormal);
      }
      // Small output projections keep F'_i close to F_i at initialization.
      w.attend[i] =
          CrossAttentionWeights::create(store, "mgfrm.mrca" + std::to_string(stage), cfg.dims[i], cfg.heads[i], rng,
                                        Init::TruncNormal);
      if (stage == 1) break;
    }
    return w;
  }
};

/// F~_i = Up_i(F'_{i+1}) + F_i, Up_i = bilinear 2x then channel projection.
inline Tensor fuse_up(const FeatureMap& deeper_refined, const FeatureMap& current, const Linear& projection) {
  if (deeper_refined.height * 2 != current.height || deeper_refined.width * 2 != current.width) {
    throw DimensionError("fuse_up: deeper grid " + std::to_string(deeper_refined.height) + "x" +
                         std::to_string(deeper_refined.width) + " is not half of " + std::to_string(current.height) +
                         "x" + std::to_string(current.width));
  }
  if (projection.in() != deeper_refined.dim() || projection.out() != current.dim()) {
    throw DimensionError("fuse_up: projection does not map width " + std::to_string(deeper_refined.dim()) + " to " +
                         std::to_string(current.dim()));
  }
  Tensor up = upsample2x(tokens_to_map(deeper_refined.tokens, deeper_refined.height, deeper_refined.width));
  return add(projection(map_to_tokens(up)), current.tokens);
}

/// F'_i = LN(F~_i + MRCA(F~_i, Q_i)): feature tokens are the queries, the
/// cortical query tokens supply keys and values.
inline CrossAttentionResult mrca(const Tensor& fused, const Tensor& cortical_queries, const CrossAttentionWeights& w) {
  return cross_attention(fused, cortical_queries, w);
}

struct ReconstructionResult {
  std::vector<Tensor> fused;       // F~_i per 0-based stage (undefined outside the cascade)
  std::vector<FeatureMap> refined; // F'_i
  std::vector<Tensor> updates;     // F''_i before the residual
  std::vector<AttentionTrace> traces;
};

inline ReconstructionResult run_reconstruction(const PyramidFeatures& features, const std::vector<Tensor>& queries,
                                               const ReconstructionWeights& w) {
  const std::size_t L = features.levels.size();
  if (w.top > L || queries.size() != L) {
    throw DimensionError("reconstruction: pyramid/query depth mismatch");
  }
  ReconstructionResult r;
  r.fused.resize(L);
  r.refined.resize(L);
  r.updates.resize(L);
  r.traces.resize(L);
  for (std::size_t stage = w.top; stage >= w.bottom; --stage) {
    const std::size_t i = stage - 1;
    const FeatureMap& f = features.levels[i];
    r.fused[i] = stage == w.top ? f.tokens : fuse_up(r.refined[i + 1], f, w.up[i]);
    auto a = mrca(r.fused[i], queries[i], w.attend[i]);
    r.refined[i] = {a.output, f.height, f.width};
    r.updates[i] = a.update;
    r.traces[i] = std::move(a.trace);
    if (stage == 1) break;
  }
  return r;
}

}  // namespace dgn
