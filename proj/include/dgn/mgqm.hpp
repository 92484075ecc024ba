#pragma once

// Gaze-localization queries: a learnable query token set is carried
// top-down through the pyramid (dimensional adaptation between stages) and
// refined at each stage by multi-head cross-attention over that stage's
// feature tokens.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dgn/hfem.hpp"

namespace dgn {

/// Projections for one multi-head cross-attention unit. Q/K/V maps carry
/// no bias; the output projection does. The unit finishes with
/// LN(source + update).
struct CrossAttentionWeights {
  std::size_t heads = 1;
  Linear query, key, value, out;
  LayerNormWeights norm;

  static CrossAttentionWeights create(ParameterStore& store, const std::string& name, std::size_t dim,
                                      std::size_t heads, Rng& rng,
                                      std::optional<Init> out_init = std::nullopt) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError(name + ": head width " + std::to_string(dim) + "/" + std::to_string(heads) +
                        " is not integral");
    }
    CrossAttentionWeights w;
    w.heads = heads;
    w.query = Linear::create(store, name + ".query", dim, dim, ParamGroup::Decoder, rng, false);
    w.key = Linear::create(store, name + ".key", dim, dim, ParamGroup::Decoder, rng, false);
    w.value = Linear::create(store, name + ".value", dim, dim, ParamGroup::Decoder, rng, false);
    w.out = Linear::create(store, name + ".out", dim, dim, ParamGroup::Decoder, rng, true, out_init);
    w.norm = LayerNormWeights::create(store, name + ".norm", dim, ParamGroup::Decoder, rng);
    return w;
  }

  std::size_t dim() const { return query.in(); }
};

/// Attention weights of one unit, laid out [heads x rows x keys].
struct AttentionTrace {
  std::size_t heads = 0;
  std::size_t rows = 0;
  std::size_t keys = 0;
  std::vector<Real> weights;

  Real at(std::size_t h, std::size_t r, std::size_t k) const { return weights[(h * rows + r) * keys + k]; }
};

struct CrossAttentionResult {
  Tensor output;  // LN(source + update)
  Tensor update;  // concatenated heads after the output projection
  AttentionTrace trace;
};

/// Rows of `source` [M x D] attend over rows of `context` [N x D].
inline CrossAttentionResult cross_attention(const Tensor& source, const Tensor& context,
                                            const CrossAttentionWeights& w) {
  if (source.dim() != 2 || context.dim() != 2) {
    throw DimensionError("cross_attention: expected token matrices, got " + to_string(source.shape()) + " and " +
                         to_string(context.shape()));
  }
  const std::size_t D = w.dim();
  if (source.size(1) != D || context.size(1) != D) {
    throw DimensionError("cross_attention: widths " + std::to_string(source.size(1)) + "/" +
                         std::to_string(context.size(1)) + " do not match stage width " + std::to_string(D));
  }
  const std::size_t h = w.heads, dh = D / h, M = source.size(0), N = context.size(0);
  auto split = [&](const Tensor& t, std::size_t rows) { return permute(reshape(t, {rows, h, dh}), {1, 0, 2}); };
  CrossAttentionResult r;
  r.trace.heads = h;
  r.trace.rows = M;
  r.trace.keys = N;
  Tensor o = attention(split(w.query(source), M), split(w.key(context), N), split(w.value(context), N),
                       Real(1) / std::sqrt(static_cast<Real>(dh)), &r.trace.weights);
  r.update = w.out(reshape(permute(o, {1, 0, 2}), {M, D}));
  r.output = w.norm(add(source, r.update));
  return r;
}

/// Q_i = LN(Q'_i + MHCA(Q'_i, F_i)).
inline CrossAttentionResult mhca(const Tensor& pseudo_query, const Tensor& features, const CrossAttentionWeights& w) {
  return cross_attention(pseudo_query, features, w);
}

/// Learnable state of the query module for a pyramid of L stages.
struct QueryModuleWeights {
  std::size_t tokens = 1;
  std::size_t lowest = 1;                      // shallowest stage with weights
  Tensor initial;                              // Q_init [k x D_L]
  std::vector<Linear> adapt;                   // adapt[i]: D_{i+2} -> D_{i+1} (0-based stage i < L-1)
  std::vector<CrossAttentionWeights> attend;   // one per stage

  std::size_t stages() const { return attend.size(); }

  /// Weights for stages L..lowest (1-based); shallower entries stay undefined.
  static QueryModuleWeights create(ParameterStore& store, const StageConfig& cfg, std::size_t tokens, Rng& rng,
                                   std::size_t lowest = 1) {
    if (tokens == 0) throw ConfigError("query module: token count must be >= 1");
    const std::size_t L = cfg.stages();
    if (lowest < 1 || lowest > L) throw ConfigError("query module: lowest stage out of range");
    QueryModuleWeights w;
    w.tokens = tokens;
    w.lowest = lowest;
    w.initial = store.create("mgqm.query_init", {tokens, cfg.dims[L - 1]}, ParamGroup::Decoder, Init::TruncNormal,
                             rng, /*decay=*/false);
    w.adapt.resize(L - 1);
    w.attend.resize(L);
    for (std::size_t stage = L; stage >= lowest; --stage) {
      const std::size_t i = stage - 1;
      if (stage < L) {
        w.adapt[i] = Linear::create(store, "mgqm.adapt" + std::to_string(stage), cfg.dims[i + 1], cfg.dims[i],
                                    ParamGroup::Decoder, rng);
      }
      w.attend[i] =
          CrossAttentionWeights::create(store, "mgqm.mhca" + std::to_string(stage), cfg.dims[i], cfg.heads[i], rng);
      if (stage == 1) break;
    }
    return w;
  }
};

/// Q'_i for 1-based stage i: Q_init at the top stage, else GELU(Q_{i+1} W + b).
inline Tensor propagate_query(const Tensor& deeper_query, std::size_t stage, const QueryModuleWeights& w) {
  const std::size_t L = w.stages();
  if (stage < 1 || stage > L) {
    throw DimensionError("propagate_query: stage " + std::to_string(stage) + " outside 1.." + std::to_string(L));
  }
  if (stage == L) return w.initial;
  if (stage < w.lowest) throw DimensionError("propagate_query: no weights for stage " + std::to_string(stage));
  const Linear& m = w.adapt[stage - 1];
  if (deeper_query.dim() != 2 || deeper_query.size(1) != m.in()) {
    throw DimensionError("propagate_query: expected width " + std::to_string(m.in()) + ", got " +
                         to_string(deeper_query.shape()));
  }
  return gelu(m(deeper_query));
}

/// Per-stage products of the cascade, indexed by 0-based stage. Stages
/// below `lowest` are left undefined.
struct QueryCascade {
  std::vector<Tensor> pseudo;
  std::vector<Tensor> queries;
  std::vector<AttentionTrace> traces;
};

/// Runs stages L..lowest (1-based, top-down).
inline QueryCascade run_query_cascade(const PyramidFeatures& features, const QueryModuleWeights& w,
                                      std::size_t lowest = 1) {
  const std::size_t L = w.stages();
  if (lowest < w.lowest) throw DimensionError("query cascade: no weights below stage " + std::to_string(w.lowest));
  if (features.levels.size() != L) {
    throw DimensionError("query cascade: pyramid has " + std::to_string(features.levels.size()) +
                         " levels, module expects " + std::to_string(L));
  }
  QueryCascade c;
  c.pseudo.resize(L);
  c.queries.resize(L);
  c.traces.resize(L);
  Tensor deeper;
  for (std::size_t stage = L; stage >= lowest && stage >= 1; --stage) {
    const std::size_t i = stage - 1;
    c.pseudo[i] = propagate_query(deeper, stage, w);
    auto r = mhca(c.pseudo[i], features.levels[i].tokens, w.attend[i]);
    c.queries[i] = r.output;
    c.traces[i] = std::move(r.trace);
    deeper = c.queries[i];
    if (stage == 1) break;
  }
  return c;
}

}  // namespace dgn
