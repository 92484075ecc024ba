#pragma once

// Full model wiring, ablation switches, and the parameter/FLOP counter.

#include <bit>
#include <cstdint>
#include <string>

#include "dgn/smgm.hpp"

namespace dgn {

enum class DecoderKind {
  DualGaze,  // query module + reconstruction module
  None,      // mask head straight on F_1 with a learnable query (baseline)
};

struct ModelConfig {
  StageConfig stages;              // full pyramid recipe (before pruning)
  std::size_t query_tokens = 1;    // k
  bool prune_f4 = false;           // drop the deepest stage everywhere
  std::size_t single_level = 0;    // 0: all levels; j: reconstruction uses only (F_j, Q_j)
  DecoderKind decoder = DecoderKind::DualGaze;
  std::size_t mask_dim = 32;       // D_mask
  bool freeze_backbone = true;
  bool full_finetune = false;

  /// Stage recipe after pruning.
  StageConfig effective_stages() const {
    StageConfig s = stages;
    if (prune_f4) {
      s.dims.pop_back();
      s.depths.pop_back();
      s.heads.pop_back();
    }
    return s;
  }

  /// 1-based stage the mask head reads from.
  std::size_t head_stage() const { return single_level == 0 ? 1 : single_level; }

  bool backbone_trainable() const { return full_finetune || !freeze_backbone; }

  void validate() const {
    stages.validate();
    if (stages.stages() != 4) throw ConfigError("model: the pyramid must have four stages");
    if (!std::has_single_bit(stages.patch_stride)) throw ConfigError("model: patch_stride must be a power of two");
    if (query_tokens == 0) throw ConfigError("model: query_tokens must be >= 1");
    if (mask_dim == 0) throw ConfigError("model: mask_dim must be positive");
    if (prune_f4 && single_level == 4) {
      throw ConfigError("model: prune_f4 contradicts single_level=F4");
    }
    const std::size_t L = effective_stages().stages();
    if (single_level > L) {
      throw ConfigError("model: single_level=F" + std::to_string(single_level) + " exceeds pyramid depth " +
                        std::to_string(L));
    }
    if (decoder == DecoderKind::None && single_level != 0) {
      throw ConfigError("model: single_level requires the dual-gaze decoder");
    }
  }
};

struct ForwardResult {
  Tensor logits;  // S [H x W]
  PyramidFeatures features;
  QueryCascade queries;
  ReconstructionResult reconstruction;
  FeatureMap pixel_features;  // F'' [H*W x D_mask]
  Tensor mask_query;          // Q^ [1 x D_mask]
};

class DualGazeNet {
 public:
  DualGazeNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const StageConfig s = config_.effective_stages();
    encoder_ = EncoderWeights::create(store_, s, rng);
    const std::size_t b = config_.head_stage();
    if (config_.decoder == DecoderKind::DualGaze) {
      queries_ = QueryModuleWeights::create(store_, s, config_.query_tokens, rng, b);
      const std::size_t top = config_.single_level == 0 ? s.stages() : config_.single_level;
      reconstruction_ = ReconstructionWeights::create(store_, s, top, b, rng);
    } else {
      probe_query_ = store_.create("head.query", {config_.query_tokens, s.dims[0]}, ParamGroup::Decoder,
                                   Init::TruncNormal, rng, /*decay=*/false);
    }
    const std::size_t ups = static_cast<std::size_t>(std::countr_zero(s.stride(b - 1)));
    head_ = MaskHeadWeights::create(store_, s.dims[b - 1], s.dims[0], config_.mask_dim, ups, rng);
    apply_partition();
  }

  /// Sets requires_grad per partition from the freeze/finetune switches.
  void apply_partition() {
    store_.set_trainable(ParamGroup::Backbone, config_.backbone_trainable());
    store_.set_trainable(ParamGroup::Adapter, true);
    store_.set_trainable(ParamGroup::Decoder, true);
  }

  ForwardResult forward(const Tensor& image) const {
    ForwardResult r;
    const StageConfig s = config_.effective_stages();
    r.features = encode(image, encoder_, s);
    const std::size_t H = image.size(1), W = image.size(2);
    const std::size_t b = config_.head_stage();
    Tensor query;
    FeatureMap head_input;
    if (config_.decoder == DecoderKind::DualGaze) {
      r.queries = run_query_cascade(r.features, queries_, b);
      r.reconstruction = run_reconstruction(r.features, r.queries.queries, reconstruction_);
      head_input = r.reconstruction.refined[b - 1];
      query = r.queries.queries[b - 1];
    } else {
      head_input = r.features.levels[0];
      query = probe_query_;
    }
    r.pixel_features = upsample_head(head_input, head_, H, W);
    r.mask_query = query_head(query, head_);
    r.logits = similarity_map(r.pixel_features, r.mask_query);
    return r;
  }

  Tensor logits(const Tensor& image) const { return forward(image).logits; }

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const EncoderWeights& encoder() const { return encoder_; }
  const QueryModuleWeights& query_module() const { return queries_; }
  const ReconstructionWeights& reconstruction() const { return reconstruction_; }
  const MaskHeadWeights& head() const { return head_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  EncoderWeights encoder_;
  QueryModuleWeights queries_;
  ReconstructionWeights reconstruction_;
  Tensor probe_query_;
  MaskHeadWeights head_;
};

struct ComplexityReport {
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  std::size_t backbone_params = 0;
  std::size_t adapter_params = 0;
  std::size_t decoder_params = 0;
  std::size_t attention_projection_params = 0;  // Q/K/V/output weight matrices
  std::uint64_t forward_macs = 0;               // multiply-accumulates at the given input size
};

/// Analytic multiply-accumulate count of one forward pass: every matmul,
/// attention product and transposed convolution. Elementwise ops,
/// normalization and resampling are not counted.
inline std::uint64_t forward_macs(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  const StageConfig s = cfg.effective_stages();
  s.check_resolution(height, width);
  const std::size_t L = s.stages();
  const std::uint64_t k = cfg.query_tokens;
  std::vector<std::uint64_t> N(L);
  for (std::size_t i = 0; i < L; ++i) N[i] = (height / s.stride(i)) * (width / s.stride(i));
  std::uint64_t macs = N[0] * (3 * s.patch_stride * s.patch_stride) * s.dims[0];
  for (std::size_t i = 0; i < L; ++i) {
    const std::uint64_t D = s.dims[i], n = N[i];
    const std::uint64_t per_block = 4 * n * D * D + 2 * n * n * D + 2 * n * D * D * s.mlp_ratio +
                                    2 * n * D * s.adapter_bottleneck;
    macs += per_block * s.depths[i];
    if (i + 1 < L) macs += N[i + 1] * 4 * D * s.dims[i + 1];
  }
  const std::size_t b = cfg.head_stage();
  if (cfg.decoder == DecoderKind::DualGaze) {
    // Query cascade L..b.
    for (std::size_t stage = L; stage >= b; --stage) {
      const std::size_t i = stage - 1;
      const std::uint64_t D = s.dims[i], n = N[i];
      if (stage < L) macs += k * s.dims[i + 1] * D;
      macs += k * D * D + 2 * n * D * D + 2 * k * n * D + k * D * D;
      if (stage == 1) break;
    }
    // Reconstruction top..b.
    const std::size_t top = cfg.single_level == 0 ? L : cfg.single_level;
    for (std::size_t stage = top; stage >= b; --stage) {
      const std::size_t i = stage - 1;
      const std::uint64_t D = s.dims[i], n = N[i];
      if (stage < top) macs += n * s.dims[i + 1] * D;
      macs += n * D * D + 2 * k * D * D + 2 * n * k * D + n * D * D;
      if (stage == 1) break;
    }
  }
  // Mask head.
  const std::uint64_t Dm = s.dims[0], Din = s.dims[b - 1], Dmask = cfg.mask_dim, hid = Dm / 2;
  std::uint64_t grid = N[b - 1];
  const std::size_t ups = static_cast<std::size_t>(std::countr_zero(s.stride(b - 1)));
  for (std::size_t u = 0; u < ups; ++u) {
    macs += (u == 0 ? Din : Dm) * Dm * 4 * grid;
    grid *= 4;
  }
  const std::uint64_t px = static_cast<std::uint64_t>(height) * width;
  macs += px * (Dm * hid + hid * hid + hid * Dmask);
  macs += Din * Din + Din * Dmask;
  macs += px * Dmask;
  return macs;
}

/// Exact parameter counts by enumerating a freshly built model, plus the
/// analytic forward cost.
inline ComplexityReport count_params_flops(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  DualGazeNet net(cfg, 0);
  ComplexityReport r;
  const auto& store = net.parameters();
  r.total_params = store.scalar_count();
  r.trainable_params = store.scalar_count(true);
  r.backbone_params = store.scalar_count(ParamGroup::Backbone);
  r.adapter_params = store.scalar_count(ParamGroup::Adapter);
  r.decoder_params = store.scalar_count(ParamGroup::Decoder);
  for (const auto& p : store.all()) {
    const auto& n = p.name;
    const bool attn = n.find(".attn.") != std::string::npos || n.find(".mhca") != std::string::npos ||
                      n.find(".mrca") != std::string::npos;
    const bool proj = n.ends_with("query.weight") || n.ends_with("key.weight") || n.ends_with("value.weight") ||
                      n.ends_with("proj.weight") || n.ends_with("out.weight");
    if (attn && proj) r.attention_projection_params += p.value.numel();
  }
  r.forward_macs = forward_macs(cfg, height, width);
  return r;
}

}  // namespace dgn
