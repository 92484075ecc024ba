#pragma once

// Training: AdamW with decoupled weight decay, linear warmup then constant
// lr, seeded per-epoch shuffles, gradient accumulation over a batch,
// checkpoint/resume, and train-set evaluation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dgn/checkpoint.hpp"
#include "dgn/config.hpp"
#include "dgn/loss.hpp"
#include "dgn/metrics.hpp"

namespace dgn {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string name;
  Tensor image;  // [3 x H x W]
  Tensor mask;   // [H x W]
};

/// Loads one manifest split at the given square size.
inline std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split, std::size_t size) {
  std::vector<Sample> out;
  for (const auto& e : m.split(split)) {
    auto p = load_pair(m.resolve(e.image).string(), m.resolve(e.mask).string(), size, size);
    out.push_back({e.name, std::move(p.image), std::move(p.mask)});
  }
  return out;
}

/// Mirrors a sample left-right.
inline Sample hflip(const Sample& s) {
  auto flip = [](const Tensor& t) {
    const Shape& sh = t.shape();
    const std::size_t W = sh.back();
    const std::size_t rows = t.numel() / W;
    std::vector<Real> v(t.numel());
    const auto& src = t.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t x = 0; x < W; ++x) v[r * W + x] = src[r * W + (W - 1 - x)];
    }
    return Tensor::from(sh, std::move(v));
  };
  return {s.name, flip(s.image), flip(s.mask)};
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

/// First/second moments per parameter, in store order.
struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;

  void init(const ParameterStore& store) {
    m.clear();
    v.clear();
    for (const auto& p : store.all()) {
      m.emplace_back(p.value.numel(), Real(0));
      v.emplace_back(p.value.numel(), Real(0));
    }
  }
};

/// One AdamW update at step t (1-based) over every trainable parameter.
/// Decay is decoupled (p <- p - lr wd p) and skipped where `decay` is off.
/// Returns false without touching anything if the update would produce a
/// non-finite value.
inline bool adamw_step(ParameterStore& store, AdamState& st, double lr, const AdamHyper& h, std::uint64_t t) {
  const double bc1 = 1 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1 - std::pow(h.beta2, static_cast<double>(t));
  auto& params = store.all();
  std::vector<std::vector<Real>> next(params.size()), next_m(params.size()), next_v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.requires_grad()) continue;
    const auto g = p.value.grad();
    const auto& x = p.value.values();
    const std::size_t n = x.size();
    next[i].resize(n);
    next_m[i].resize(n);
    next_v[i].resize(n);
    const double wd = p.decay ? h.weight_decay : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j];
      const double m = h.beta1 * st.m[i][j] + (1 - h.beta1) * gj;
      const double v = h.beta2 * st.v[i][j] + (1 - h.beta2) * gj * gj;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double xj = x[j];
      xj -= lr * wd * xj;
      xj -= lr * mhat / (std::sqrt(vhat) + h.eps);
      if (!std::isfinite(xj) || !std::isfinite(m) || !std::isfinite(v)) return false;
      next[i][j] = static_cast<Real>(xj);
      next_m[i][j] = static_cast<Real>(m);
      next_v[i][j] = static_cast<Real>(v);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.requires_grad()) continue;
    auto dst = p.value.mutable_data();
    std::copy(next[i].begin(), next[i].end(), dst.begin());
    st.m[i] = std::move(next_m[i]);
    st.v[i] = std::move(next_v[i]);
  }
  return true;
}

/// lr at 0-based update index s: linear ramp lr/W, 2lr/W, ..., lr over W
/// warmup updates, then constant.
inline double scheduled_lr(double lr, std::uint64_t s, std::uint64_t warmup_steps) {
  if (s < warmup_steps) return lr * static_cast<double>(s + 1) / static_cast<double>(warmup_steps);
  return lr;
}

/// Everything needed to continue training bit-exactly.
struct TrainSession {
  Config config;
  std::unique_ptr<DualGazeNet> net;
  AdamState adam;
  std::uint64_t step = 0;
  std::array<std::uint64_t, 4> data_rng{};  // shuffle rng at the start of the epoch holding `step`

  static TrainSession fresh(const Config& cfg) {
    cfg.validate();
    TrainSession s;
    s.config = cfg;
    s.net = std::make_unique<DualGazeNet>(cfg.model, cfg.seed);
    s.adam.init(s.net->parameters());
    s.data_rng = Rng(derive_seed(cfg.seed, 0x5348554646ULL)).state();
    return s;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.step = step;
    ck.rng_state = data_rng;
    ck.config = to_yaml(config);
    const auto& params = net->parameters().all();
    for (const auto& p : params) ck.arrays.push_back({p.name, p.value.shape(), p.value.values()});
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.arrays.push_back({"adam.m/" + params[i].name, params[i].value.shape(), adam.m[i]});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.arrays.push_back({"adam.v/" + params[i].name, params[i].value.shape(), adam.v[i]});
    }
    return ck;
  }

  static TrainSession from_checkpoint(const Checkpoint& ck) {
    TrainSession s = fresh(parse_config_text(ck.config));
    s.step = ck.step;
    s.data_rng = ck.rng_state;
    auto& params = s.net->parameters().all();
    if (ck.arrays.size() != 3 * params.size()) {
      throw ConfigError("checkpoint: array count does not match the model built from its config");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const ArrayRecord& a = ck.arrays[i];
      const ArrayRecord& m = ck.arrays[params.size() + i];
      const ArrayRecord& v = ck.arrays[2 * params.size() + i];
      if (a.name != params[i].name || a.shape != params[i].value.shape() || m.shape != a.shape || v.shape != a.shape) {
        throw ConfigError("checkpoint: array '" + a.name + "' does not match model parameter '" + params[i].name + "'");
      }
      auto dst = params[i].value.mutable_data();
      std::copy(a.values.begin(), a.values.end(), dst.begin());
      s.adam.m[i] = m.values;
      s.adam.v[i] = v.values;
    }
    return s;
  }
};

struct StepRecord {
  std::uint64_t step = 0;  // 1-based index of the completed update
  double lr = 0;
  double bce = 0;
  double dice = 0;
  double total = 0;
  double wall_ms = 0;
};

struct TrainOptions {
  std::string log_path;            // CSV log; empty disables
  std::string checkpoint_dir;      // periodic/final/divergence checkpoints; empty disables
  std::uint64_t stop_at_step = 0;  // halt early (not part of the config); 0 = run to the end
  std::function<void(const StepRecord&)> on_step;
};

struct TrainSummary {
  std::uint64_t steps_run = 0;
  std::uint64_t final_step = 0;
  StepRecord last;
  std::vector<StepRecord> history;
};

inline std::uint64_t steps_per_epoch(std::size_t samples, std::size_t batch) { return (samples + batch - 1) / batch; }

inline std::vector<std::size_t> epoch_order(Rng& rng, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

/// Runs the optimization from session.step to the configured end.
inline TrainSummary train(TrainSession& session, const std::vector<Sample>& samples, const TrainOptions& opt = {}) {
  const TrainConfig& tc = session.config.train;
  if (samples.empty()) throw ConfigError("train: the training split is empty");
  for (const auto& s : samples) {
    if (s.image.size(1) != tc.input_size || s.image.size(2) != tc.input_size) {
      throw DimensionError("train: sample " + s.name + " is not " + std::to_string(tc.input_size) + " square");
    }
  }
  const std::uint64_t spe = steps_per_epoch(samples.size(), tc.batch_size);
  std::uint64_t total_steps = spe * tc.epochs;
  if (tc.max_steps > 0) total_steps = std::min<std::uint64_t>(total_steps, tc.max_steps);
  const std::uint64_t end = opt.stop_at_step > 0 ? std::min(total_steps, opt.stop_at_step) : total_steps;
  const std::uint64_t warmup = spe * tc.warmup_epochs;
  const AdamHyper hyper{tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay};
  DualGazeNet& net = *session.net;
  ParameterStore& store = net.parameters();

  std::ofstream log;
  if (!opt.log_path.empty()) {
    const bool append = session.step > 0 && std::filesystem::exists(opt.log_path);
    log.open(opt.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + opt.log_path);
    if (!append) log << "step,lr,bce,dice,total,wall_ms\n";
  }
  auto save = [&](const std::string& file) {
    if (!opt.checkpoint_dir.empty()) {
      save_checkpoint((std::filesystem::path(opt.checkpoint_dir) / file).string(), session.to_checkpoint());
    }
  };

  TrainSummary summary;
  Rng data_rng;
  data_rng.set_state(session.data_rng);
  std::vector<std::size_t> order;
  std::vector<bool> flips;
  std::uint64_t order_epoch = ~std::uint64_t{0};
  while (session.step < end) {
    const std::uint64_t epoch = session.step / spe;
    const std::uint64_t offset = session.step % spe;
    if (epoch != order_epoch) {
      session.data_rng = data_rng.state();
      order = epoch_order(data_rng, samples.size());
      flips.assign(samples.size(), false);
      if (tc.hflip) {
        for (std::size_t i = 0; i < samples.size(); ++i) flips[i] = data_rng.uniform() < 0.5;
      }
      order_epoch = epoch;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t b0 = offset * tc.batch_size;
    const std::size_t b1 = std::min(samples.size(), b0 + tc.batch_size);
    const Real inv = Real(1) / static_cast<Real>(b1 - b0);
    store.zero_grad();
    StepRecord rec;
    try {
      for (std::size_t k = b0; k < b1; ++k) {
        const Sample& base = samples[order[k]];
        const Sample s = flips[k] ? hflip(base) : base;
        Tape tape;
        TapeScope scope(tape);
        const Tensor logits = net.logits(s.image);
        const LossBreakdown lb = total_loss(logits, s.mask);
        tape.backward(lb.objective, inv);
        rec.bce += lb.bce * inv;
        rec.dice += lb.dice * inv;
        rec.total += lb.total * inv;
      }
      for (const auto& p : store.all()) {
        if (!p.value.requires_grad()) continue;
        for (Real g : p.value.grad()) {
          if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
        }
      }
    } catch (const NumericError& e) {
      save("last_finite.ckpt");
      throw TrainingDiverged(std::string("training diverged at step ") + std::to_string(session.step + 1) + ": " +
                             e.what());
    }
    rec.lr = scheduled_lr(tc.lr, session.step, warmup);
    if (!adamw_step(store, session.adam, rec.lr, hyper, session.step + 1)) {
      save("last_finite.ckpt");
      throw TrainingDiverged("training diverged at step " + std::to_string(session.step + 1) +
                             ": update produced a non-finite parameter");
    }
    ++session.step;
    // At an epoch boundary the next epoch's shuffle starts from the current state.
    if (session.step % spe == 0) session.data_rng = data_rng.state();
    rec.step = session.step;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (log) {
      char line[256];
      std::snprintf(line, sizeof line, "%llu,%.9g,%.9g,%.9g,%.9g,%.3f\n", static_cast<unsigned long long>(rec.step),
                    rec.lr, rec.bce, rec.dice, rec.total, rec.wall_ms);
      log << line;
    }
    if (opt.on_step) opt.on_step(rec);
    summary.history.push_back(rec);
    summary.last = rec;
    ++summary.steps_run;
    if (tc.checkpoint_every > 0 && session.step % tc.checkpoint_every == 0 && session.step < end) {
      save("step_" + std::to_string(session.step) + ".ckpt");
    }
  }
  save("checkpoint.ckpt");
  summary.final_step = session.step;
  return summary;
}

/// sigma(S) of one image without recording.
inline std::vector<double> predict_probability(const DualGazeNet& net, const Tensor& image) {
  const Tensor logits = net.logits(image);
  std::vector<double> p(logits.numel());
  const auto& v = logits.values();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(sigmoid_scalar(v[i]));
  return p;
}

/// 8-bit quantized prediction, as it would be written to disk.
inline std::vector<std::uint8_t> quantize(const std::vector<double>& p) {
  std::vector<std::uint8_t> q(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) q[i] = to_byte(p[i]);
  return q;
}

inline std::vector<std::uint8_t> mask_bytes(const Tensor& mask) {
  std::vector<std::uint8_t> m(mask.numel());
  const auto& v = mask.values();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v[i] >= Real(0.5) ? 255 : 0;
  return m;
}

/// Metrics of the model's quantized predictions on a set of samples.
inline SaliencyReport evaluate_samples(const DualGazeNet& net, const std::vector<Sample>& samples,
                                       std::size_t thresholds = kDefaultThresholds) {
  SaliencyReport r;
  r.thresholds = thresholds;
  for (const auto& s : samples) {
    const std::size_t H = s.mask.size(0), W = s.mask.size(1);
    const auto pred = quantize(predict_probability(net, s.image));
    r.images.push_back(evaluate_pair(make_eval_pair(H, W, pred, mask_bytes(s.mask)), s.name, thresholds));
  }
  finalize_report(r);
  return r;
}

}  // namespace dgn
