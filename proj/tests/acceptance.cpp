// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if
// all pass. Criterion 4 and 5 train real models and dominate the runtime.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "dgn/dgn.hpp"
#include "grad_check.hpp"
#include "metric_oracle.hpp"

using namespace dgn;
using namespace dgn::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Overfit recipe shared by criteria 4 and 5.
constexpr std::size_t kEpochs = 60;
constexpr std::size_t kBatch = 1;
constexpr double kLr = 1e-3;
constexpr std::uint64_t kSeed = 7;

Config overfit_config() {
  Config c;
  c.seed = kSeed;
  c.model.query_tokens = 1;
  c.train.epochs = kEpochs;
  c.train.batch_size = kBatch;
  c.train.lr = kLr;
  c.train.input_size = 64;
  return c;
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({3, h, w}, rng, 1.0);
}

Tensor random_mask(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(h * w);
  for (auto& x : v) x = rng.uniform() < 0.35 ? 1 : 0;
  return Tensor::from({h, w}, std::move(v));
}

// -- 1 ----------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(1);
  double worst_op = 0;
  std::string worst_name;
  auto op = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> in) {
    const double e = check_gradients(f, std::move(in));
    if (e > worst_op || !(e == e)) {
      worst_op = e;
      worst_name = name;
    }
  };
  {
    Tensor a = tracked(random_tensor({3, 4}, rng)), b = tracked(random_tensor({4}, rng));
    op("add", [&] { return project(add(a, b)); }, {a, b});
    op("sub", [&] { return project(sub(b, a)); }, {a, b});
    op("mul", [&] { return project(mul(a, b)); }, {a, b});
    op("scale", [&] { return project(scale(a, -1.7)); }, {a});
    op("sum", [&] { return sum(mul(a, a)); }, {a});
    op("mean", [&] { return mean(mul(a, a)); }, {a});
    op("mean_axis", [&] { return project(mean(mul(a, a), 0)); }, {a});
    op("transpose", [&] { return project(transpose(a)); }, {a});
    op("reshape", [&] { return project(reshape(mul(a, a), {2, 6})); }, {a});
  }
  {
    Tensor a = tracked(random_tensor({2, 3, 4}, rng)), b = tracked(random_tensor({4, 5}, rng));
    Tensor w = tracked(random_tensor({4, 6}, rng)), bias = tracked(random_tensor({6}, rng));
    op("matmul", [&] { return project(matmul(a, b)); }, {a, b});
    op("linear", [&] { return project(linear(a, w, bias)); }, {a, w, bias});
    op("permute", [&] { return project(permute(mul(a, a), {2, 0, 1})); }, {a});
    op("softmax", [&] { return project(softmax(a, -1)); }, {a});
    op("softmax_axis0", [&] { return project(softmax(a, 0)); }, {a});
    op("gelu", [&] { return project(gelu(a)); }, {a});
    op("sigmoid", [&] { return project(sigmoid(a)); }, {a});
  }
  {
    Tensor x = tracked(random_tensor({5, 8}, rng)), g = tracked(random_tensor({8}, rng)),
           b = tracked(random_tensor({8}, rng));
    op("layer_norm", [&] { return project(layer_norm(x, g, b)); }, {x, g, b});
  }
  {
    Tensor x = tracked(random_tensor({3, 4, 5}, rng)), k = tracked(random_tensor({3, 2, 2, 2}, rng));
    op("conv_transpose2d", [&] { return project(conv_transpose2d(x, k, 2)); }, {x, k});
    op("upsample2x", [&] { return project(upsample2x(x)); }, {x});
  }
  for (bool det : {true, false}) {
    set_deterministic(det);
    Tensor q = tracked(random_tensor({2, 3, 4}, rng)), k = tracked(random_tensor({2, 5, 4}, rng)),
           v = tracked(random_tensor({2, 5, 6}, rng));
    op(det ? "attention_det" : "attention", [&] { return project(attention(q, k, v, 0.5)); }, {q, k, v});
  }
  set_deterministic(true);
  {
    Tensor s = tracked(random_tensor({4, 4}, rng, 3.0));
    const Tensor gt = random_mask(4, 4, 2);
    op("bce", [&] { return bce_with_logits(s, gt); }, {s});
    op("dice", [&] { return dice_with_logits(s, gt); }, {s});
    op("total_loss", [&] { return total_loss(s, gt).objective; }, {s});
  }

  // Full DGN-tiny loss over 20 sampled parameter entries.
  ModelConfig cfg;
  cfg.query_tokens = 3;
  DualGazeNet net(cfg, 11);
  const Tensor img = random_image(32, 32, 12);
  const Tensor gt = random_mask(32, 32, 13);
  std::vector<Tensor> trainable;
  for (const auto& p : net.parameters().all()) {
    if (p.value.requires_grad()) trainable.push_back(p.value);
  }
  auto loss = [&] { return total_loss(net.logits(img), gt).objective; };
  const auto analytic = analytic_grads(loss, trainable);
  Rng pick(14);
  std::vector<Real> a, n;
  for (int s = 0; s < 20; ++s) {
    const std::size_t t = pick.below(trainable.size());
    const std::size_t i = pick.below(trainable[t].numel());
    a.push_back(analytic[t][i]);
    n.push_back(numeric_partial(loss, trainable[t], i, 1e-5));
  }
  const double e2e = relative_error(a, n);
  const double secs = seconds_since(t0);
  verdict(1, worst_op < 1e-4 && e2e < 1e-3 && secs < 60,
          "worst op rel err " + fmt("%.2e", worst_op) + " (" + worst_name + "), end-to-end " + fmt("%.2e", e2e) +
              ", " + fmt("%.1f", secs) + " s");
}

// -- 2 ----------------------------------------------------------------------

void architecture_invariants() {
  set_deterministic(true);
  std::vector<std::string> broken;
  ModelConfig cfg;
  DualGazeNet net(cfg, 21);
  const StageConfig s = cfg.effective_stages();
  Rng rng(22);

  // (a) MHCA key permutation, every stage.
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t D = s.dims[i], N = 16;
    const Tensor q = random_tensor({3, D}, rng);
    const Tensor f = random_tensor({N, D}, rng);
    std::vector<Real> perm_rows;
    for (std::size_t r = 0; r < N; ++r) {
      const std::size_t src = (r * 5 + 3) % N;
      perm_rows.insert(perm_rows.end(), f.values().begin() + src * D, f.values().begin() + (src + 1) * D);
    }
    const auto x = mhca(q, f, net.query_module().attend[i]);
    const auto y = mhca(q, Tensor::from({N, D}, perm_rows), net.query_module().attend[i]);
    if (!std::equal(x.output.values().begin(), x.output.values().end(), y.output.values().begin())) {
      broken.push_back("(a) stage " + std::to_string(i + 1));
    }
  }

  // (b) k=1: unit MRCA weights and identical update rows in every stage.
  const ForwardResult fr = net.forward(random_image(64, 64, 23));
  for (std::size_t i = 0; i < 4; ++i) {
    bool ok = true;
    for (Real w : fr.reconstruction.traces[i].weights) ok = ok && w == 1.0;
    const Tensor& u = fr.reconstruction.updates[i];
    const std::size_t D = u.size(1);
    for (std::size_t r = 1; r < u.size(0) && ok; ++r) {
      for (std::size_t c = 0; c < D; ++c) ok = ok && std::abs(u.values()[r * D + c] - u.values()[c]) <= 1e-6;
    }
    if (!ok) broken.push_back("(b) stage " + std::to_string(i + 1));
  }

  // (c) shape contracts.
  for (std::size_t H : {64, 96, 128}) {
    for (std::size_t W : {64, 96, 128}) {
      const ForwardResult r = net.forward(random_image(H, W, H * 3 + W));
      bool ok = r.logits.shape() == Shape{H, W} && r.pixel_features.tokens.shape() == Shape{H * W, cfg.mask_dim} &&
                r.mask_query.shape() == Shape{1, cfg.mask_dim};
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t st = s.stride(i);
        ok = ok && r.features.levels[i].tokens.shape() == Shape{(H / st) * (W / st), s.dims[i]} &&
             r.reconstruction.refined[i].tokens.shape() == r.features.levels[i].tokens.shape() &&
             r.queries.queries[i].shape() == Shape{1, s.dims[i]};
      }
      if (!ok) broken.push_back("(c) " + std::to_string(H) + "x" + std::to_string(W));
    }
  }

  // (d) zero output projections give LN of the input, zero adapters give the backbone.
  {
    ParameterStore store;
    Rng r(24);
    auto w = CrossAttentionWeights::create(store, "probe", 64, 4, r);
    for (Tensor* t : {&w.out.weight, &w.out.bias}) {
      auto d = t->mutable_data();
      std::fill(d.begin(), d.end(), Real(0));
    }
    const Tensor src = random_tensor({7, 64}, r);
    const Tensor a = cross_attention(src, random_tensor({9, 64}, r), w).output;
    const Tensor b = w.norm(src);
    if (!std::equal(a.values().begin(), a.values().end(), b.values().begin())) broken.push_back("(d) attention");
    ParameterStore es;
    const EncoderWeights enc = EncoderWeights::create(es, s, r);
    const Tensor img = random_image(64, 64, 25);
    const PyramidFeatures with = encode(img, enc, s);
    const PyramidFeatures without = encode(img, enc, s, EncodeOptions{false});
    for (std::size_t i = 0; i < 4; ++i) {
      if (!std::equal(with.levels[i].tokens.values().begin(), with.levels[i].tokens.values().end(),
                      without.levels[i].tokens.values().begin())) {
        broken.push_back("(d) adapter stage " + std::to_string(i + 1));
      }
    }
  }
  std::string detail = "(a) permutation, (b) k=1 MRCA, (c) 9 resolutions, (d) residual identities";
  if (!broken.empty()) {
    detail = "broken:";
    for (const auto& b : broken) detail += " " + b;
  }
  verdict(2, broken.empty(), detail);
}

// -- 3 ----------------------------------------------------------------------

/// Scene masks with noisy predictions plus the degenerate branches.
std::vector<EvalPair> oracle_pairs() {
  std::vector<EvalPair> out;
  Rng rng(31);
  for (std::size_t k = 0; k < 25; ++k) {
    const std::size_t h = 8 + rng.below(25), w = 8 + rng.below(25);
    const Scene sc = render_scene(sample_scene(31, k, h, w, 0.2));
    std::vector<std::uint8_t> g = sc.mask.pixels, p(h * w);
    if (k == 0) std::fill(g.begin(), g.end(), 0);    // empty mask
    if (k == 1) std::fill(g.begin(), g.end(), 255);  // full mask
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double base = g[i] ? 0.75 : 0.2;
      p[i] = static_cast<std::uint8_t>(std::clamp(base + rng.uniform(-0.3, 0.3), 0.0, 1.0) * 255);
    }
    if (k == 2) std::fill(p.begin(), p.end(), 0);  // constant all-zero prediction
    if (k == 3) std::fill(p.begin(), p.end(), 90);  // constant non-zero prediction
    out.push_back(make_eval_pair(h, w, p, g));
  }
  return out;
}

void metric_oracle() {
  const auto t0 = Clock::now();
  bool sweep_ok = true;
  double mae_err = 0, s_err = 0, e_err = 0;
  for (const auto& p : oracle_pairs()) {
    const SweepCurves c = pr_and_fbeta_sweep(p, 256);
    const NaiveSweep n = naive_sweep(p, 256);
    sweep_ok = sweep_ok && c.precision == n.precision && c.recall == n.recall && c.fbeta == n.fbeta;
    mae_err = std::max(mae_err, std::abs(mae(p) - naive_mae(p)));
    s_err = std::max(s_err, std::abs(s_measure(p) - naive_s_measure(p)));
    e_err = std::max(e_err, std::abs(e_measure(p, 256) - naive_e_measure(p, 256)));
  }
  const double secs = seconds_since(t0);
  verdict(3, sweep_ok && mae_err <= 1e-12 && s_err <= 1e-6 && e_err <= 1e-6 && secs < 30,
          std::string("sweep ") + (sweep_ok ? "exact" : "MISMATCH") + ", |dMAE| " + fmt("%.1e", mae_err) + ", |dS| " +
              fmt("%.1e", s_err) + ", |dE| " + fmt("%.1e", e_err) + ", " + fmt("%.2f", secs) + " s");
}

// -- 4, 5 -------------------------------------------------------------------

struct OverfitRun {
  ImageMetrics metrics;
  double seconds = 0;
  double final_loss = 0;
};

OverfitRun overfit(Config cfg, const std::vector<Sample>& samples) {
  const auto t0 = Clock::now();
  TrainSession s = TrainSession::fresh(cfg);
  const TrainSummary sum = train(s, samples);
  OverfitRun r;
  r.seconds = seconds_since(t0);
  r.metrics = evaluate_samples(*s.net, samples).aggregate;
  r.final_loss = sum.last.total;
  return r;
}

std::string describe(const char* tag, const OverfitRun& r) {
  return std::string(tag) + " MAE " + fmt("%.4f", r.metrics.mae) + " Fbmax " + fmt("%.4f", r.metrics.fbeta_max) +
         " (" + fmt("%.0f", r.seconds) + " s)";
}

void overfit_and_ablation() {
  set_deterministic(true);
  set_num_threads(1);
  const fs::path dir = fs::temp_directory_path() / ("dgn_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  CorpusOptions co;
  co.train_count = 32;
  co.seed = kSeed;
  const DatasetManifest m = generate_corpus(co, dir);
  const auto samples = load_split(m, "train", 64);
  fs::remove_all(dir);

  const OverfitRun dgn = overfit(overfit_config(), samples);
  Config none_cfg = overfit_config();
  none_cfg.model.decoder = DecoderKind::None;
  const OverfitRun none = overfit(none_cfg, samples);
  const double lift = dgn.metrics.fbeta_max - none.metrics.fbeta_max;
  verdict(4,
          dgn.metrics.mae < 0.05 && dgn.metrics.fbeta_max > 0.95 && dgn.seconds < 600 && lift >= 0.15,
          describe("DGN-tiny", dgn) + "; " + describe("no-decoder", none) + "; lift " + fmt("%.4f", lift));

  ModelConfig full;
  ModelConfig pruned;
  pruned.prune_f4 = true;
  const ComplexityReport a = count_params_flops(full, 64, 64);
  const ComplexityReport b = count_params_flops(pruned, 64, 64);
  Config f3 = overfit_config();
  f3.model.single_level = 3;
  Config f4 = overfit_config();
  f4.model.single_level = 4;
  const OverfitRun r3 = overfit(f3, samples);
  const OverfitRun r4 = overfit(f4, samples);
  verdict(5,
          b.total_params < a.total_params && b.forward_macs < a.forward_macs &&
              r4.metrics.fbeta_max < r3.metrics.fbeta_max,
          "params " + std::to_string(a.total_params) + " -> " + std::to_string(b.total_params) + ", MACs " +
              std::to_string(a.forward_macs) + " -> " + std::to_string(b.forward_macs) + "; " + describe("F3", r3) +
              "; " + describe("F4", r4));
}

// -- 6 ----------------------------------------------------------------------

void determinism() {
  set_deterministic(true);
  set_num_threads(1);
  Config cfg;
  cfg.seed = 61;
  cfg.train.epochs = 4;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 2;
  cfg.train.input_size = 64;
  cfg.train.hflip = true;
  std::vector<Sample> samples;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Scene sc = render_scene(sample_scene(61, i, 64, 64, 0.2));
    std::vector<Real> img(3 * 64 * 64), msk(64 * 64);
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img[(c * 64 + y) * 64 + x] = sc.image.at(y, x, c) / Real(255);
        msk[y * 64 + x] = sc.mask.at(y, x) ? 1 : 0;
      }
    samples.push_back({"s" + std::to_string(i), Tensor::from({3, 64, 64}, img), Tensor::from({64, 64}, msk)});
  }
  TrainSession a = TrainSession::fresh(cfg);
  TrainSession b = TrainSession::fresh(cfg);
  train(a, samples);
  train(b, samples);
  const auto ca = serialize_checkpoint(a.to_checkpoint());
  const bool identical = ca == serialize_checkpoint(b.to_checkpoint());

  TrainSession half = TrainSession::fresh(cfg);
  TrainOptions opt;
  opt.stop_at_step = a.step / 2;
  train(half, samples, opt);
  TrainSession resumed = TrainSession::from_checkpoint(deserialize_checkpoint(serialize_checkpoint(half.to_checkpoint())));
  train(resumed, samples);
  const bool resume_ok = serialize_checkpoint(resumed.to_checkpoint()) == ca;
  verdict(6, identical && resume_ok,
          std::string("repeat ") + (identical ? "bit-identical" : "DIFFERS") + ", resume at step " +
              std::to_string(opt.stop_at_step) + "/" + std::to_string(a.step) + " " +
              (resume_ok ? "bit-identical" : "DIFFERS") + " (" + std::to_string(ca.size()) + " bytes)");
}

// -- 7 ----------------------------------------------------------------------

void loss_sanity() {
  const Tensor g = Tensor::from({2, 3}, {1, 0, 1, 0, 0, 1});
  const Tensor perfect = Tensor::from({2, 3}, {40, -40, 40, -40, -40, 40});
  const double total = total_loss(perfect, g).total;
  const double empty = dice_with_logits(Tensor::full({2, 3}, -40), Tensor::zeros({2, 3})).item();
  const Tensor big = tracked(Tensor::from({2, 3}, {800, 800, -800, -800, 800, -800}));
  bool stable = true;
  double bce = 0;
  {
    Tape tape;
    TapeScope scope(tape);
    const LossBreakdown lb = total_loss(big, g);
    bce = lb.bce;
    tape.backward(lb.objective);
    for (Real v : big.grad()) stable = stable && std::isfinite(v);
  }
  stable = stable && std::isfinite(bce);
  verdict(7, total < 1e-6 && empty >= 0 && empty < 1e-12 && stable,
          "perfect total " + fmt("%.1e", total) + ", empty-mask dice " + fmt("%.1e", empty) + ", BCE at |S|=800 " +
              fmt("%.3f", bce) + (stable ? " finite" : " NON-FINITE"));
}

}  // namespace

int main() {
  set_deterministic(true);
  set_num_threads(1);
  gradient_suite();
  architecture_invariants();
  metric_oracle();
  overfit_and_ablation();
  determinism();
  loss_sanity();
  return failures == 0 ? 0 : 1;
}
