#pragma once

// Command-line front end: gen-data, train, eval, infer, viz-attn, ablate,
// count-params. Exit codes: 0 ok, 1 validation error, 2 I/O error,
// 3 training diverged.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "dgn/report.hpp"
#include "dgn/trainer.hpp"
#include "dgn/viz.hpp"

namespace dgn {

namespace cli {

struct Common {
  std::string config_path;
  std::string out = "out";
  std::vector<std::string> overrides;
  long long seed = -1;
  bool deterministic = true;
  unsigned threads = 0;
};

inline Config resolve(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed >= 0) ov.push_back("seed=" + std::to_string(c.seed));
  return load_config(c.config_path, ov);
}

inline void apply_runtime(const Common& c) {
  unsigned threads = c.threads;
  if (threads == 0) {
    if (const char* env = std::getenv("DGN_THREADS")) {
      try {
        threads = static_cast<unsigned>(std::stoul(env));
      } catch (const std::exception&) {
        throw ConfigError("DGN_THREADS must be a positive integer");
      }
    }
  }
  set_num_threads(threads == 0 ? 1 : threads);
  set_deterministic(c.deterministic);
}

inline std::filesystem::path prepare_out(const Common& c, const Config& cfg) {
  const std::filesystem::path out(c.out);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_text(out / "resolved_config.yaml", to_yaml(cfg));
  return out;
}

inline DatasetManifest manifest_for(const Config& cfg) {
  if (cfg.data.manifest.empty()) throw ConfigError("data.manifest is not set (use --data or --set data.manifest=...)");
  return DatasetManifest::load(cfg.data.manifest);
}

inline std::vector<Sample> split_or_fallback(const DatasetManifest& m, const std::string& split, std::size_t size) {
  auto s = load_split(m, split, size);
  if (s.empty()) throw ConfigError("manifest split '" + split + "' is empty");
  return s;
}

inline void print_report_line(std::ostream& os, const std::string& label, const ImageMetrics& a) {
  os << label << ": " << table_row(a) << "\n";
}

// -- subcommands ------------------------------------------------------------

inline int gen_data(const Common& c) {
  const Config cfg = resolve(c);
  const auto out = prepare_out(c, cfg);
  CorpusOptions o;
  o.train_count = cfg.data.train_count;
  o.eval_count = cfg.data.eval_count;
  o.height = cfg.data.height;
  o.width = cfg.data.width;
  o.boundary_rate = cfg.data.boundary_rate;
  o.seed = cfg.seed;
  o.threads = num_threads();
  const auto m = generate_corpus(o, out);
  std::cout << "wrote " << m.entries.size() << " samples to " << (out / "manifest.yaml").string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string resume;
  unsigned long long stop_at = 0;
};

inline int train_cmd(const Common& c, const TrainArgs& a) {
  TrainSession session;
  Config cfg;
  if (!a.resume.empty()) {
    session = TrainSession::from_checkpoint(load_checkpoint(a.resume));
    cfg = session.config;
    if (!a.data.empty()) cfg.data.manifest = a.data;
    if (!c.overrides.empty() || !c.config_path.empty()) {
      throw ConfigError("--resume takes its configuration from the checkpoint; drop --config/--set");
    }
  } else {
    Common cc = c;
    if (!a.data.empty()) cc.overrides.push_back("data.manifest=" + a.data);
    cfg = resolve(cc);
    session = TrainSession::fresh(cfg);
  }
  const auto out = prepare_out(c, cfg);
  const auto manifest = manifest_for(cfg);
  const auto samples = split_or_fallback(manifest, "train", cfg.train.input_size);
  TrainOptions opt;
  opt.log_path = (out / "train_log.csv").string();
  opt.checkpoint_dir = out.string();
  opt.stop_at_step = a.stop_at;
  const auto summary = train(session, samples, opt);
  const auto report = evaluate_samples(*session.net, samples, cfg.eval.thresholds);
  write_text(out / "train_eval.csv", metrics_table_csv(report_rows(report)));
  std::cout << "steps " << summary.final_step << " final_loss " << summary.last.total << "\n";
  print_report_line(std::cout, "train", report.aggregate);
  return 0;
}

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string checkpoint;
  std::string data;
};

inline int eval_cmd(const Common& c, const EvalArgs& a) {
  SaliencyReport report;
  Config cfg;
  if (!a.checkpoint.empty()) {
    TrainSession s = TrainSession::from_checkpoint(load_checkpoint(a.checkpoint));
    Common cc = c;
    cfg = s.config;
    if (!a.data.empty()) cfg.data.manifest = a.data;
    for (const auto& o : c.overrides) {
      if (o.rfind("eval.", 0) != 0 && o.rfind("data.", 0) != 0) {
        throw ConfigError("eval with --checkpoint accepts only eval.* and data.* overrides");
      }
    }
    YAML::Node root = YAML::Load(to_yaml(cfg));
    for (const auto& o : c.overrides) apply_override(root, o);
    cfg = from_yaml_node(root);
    cfg.validate();
    const auto out = prepare_out(c, cfg);
    const auto samples = split_or_fallback(manifest_for(cfg), cfg.eval.split, cfg.train.input_size);
    report = evaluate_samples(*s.net, samples, cfg.eval.thresholds);
    write_report(out, report);
  } else {
    if (a.pred.empty() || a.gt.empty()) throw ConfigError("eval needs --pred and --gt, or --checkpoint");
    cfg = resolve(c);
    const auto out = prepare_out(c, cfg);
    report = evaluate_dataset(a.pred, a.gt, cfg.eval.thresholds);
    write_report(out, report);
  }
  print_report_line(std::cout, "aggregate", report.aggregate);
  if (!report.missing.empty()) {
    for (const auto& m : report.missing) std::cerr << "missing: " << m << "\n";
    std::cerr << "error[io]: " << report.missing.size() << " file(s) without a counterpart\n";
    return 2;
  }
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string input;
};

inline int infer_cmd(const Common& c, const InferArgs& a) {
  if (a.checkpoint.empty() || a.input.empty()) throw ConfigError("infer needs --checkpoint and --input");
  TrainSession s = TrainSession::from_checkpoint(load_checkpoint(a.checkpoint));
  const auto out = prepare_out(c, s.config);
  std::vector<std::filesystem::path> inputs;
  if (std::filesystem::is_directory(a.input)) {
    for (const auto& stem : list_png_stems(a.input)) inputs.push_back(std::filesystem::path(a.input) / (stem + ".png"));
  } else {
    inputs.emplace_back(a.input);
  }
  const std::size_t S = s.config.train.input_size;
  for (const auto& p : inputs) {
    const Image8 src = read_png(p.string());
    const auto pair = load_pair(p.string(), p.string(), S, S);
    const auto prob = predict_probability(*s.net, pair.image);
    Image8 small(S, S, 1);
    for (std::size_t i = 0; i < prob.size(); ++i) small.pixels[i] = to_byte(prob[i]);
    write_png((out / p.filename()).string(), resize_bilinear(small, src.width, src.height));
  }
  std::cout << "wrote " << inputs.size() << " prediction(s) to " << out.string() << "\n";
  return 0;
}

struct VizArgs {
  std::string checkpoint;
  std::string image;
};

inline int viz_cmd(const Common& c, const VizArgs& a) {
  if (a.checkpoint.empty()) throw ConfigError("viz-attn needs --checkpoint");
  TrainSession s = TrainSession::from_checkpoint(load_checkpoint(a.checkpoint));
  const auto out = prepare_out(c, s.config);
  std::string image = a.image;
  if (image.empty()) {
    Config cfg = s.config;
    const auto m = manifest_for(cfg);
    const auto train = m.split("train");
    if (train.empty()) throw ConfigError("viz-attn: no --image and the manifest has no train split");
    image = m.resolve(train.front().image).string();
  }
  const std::size_t S = s.config.train.input_size;
  const auto pair = load_pair(image, image, S, S);
  const ForwardResult fr = s.net->forward(pair.image);
  const auto summary = dump_attention(fr, out);
  double worst = 0;
  for (double e : summary.max_row_sum_error) worst = std::max(worst, e);
  std::cout << "wrote " << summary.files.size() << " files; max |row sum - 1| = " << worst << "\n";
  return 0;
}

/// Ablation variants as config overrides on top of the resolved config.
inline std::vector<std::pair<std::string, std::vector<std::string>>> ablation_variants() {
  return {{"baseline", {}},
          {"k10", {"model.query_tokens=10"}},
          {"k100", {"model.query_tokens=100"}},
          {"prune_f4", {"model.prune_f4=true"}},
          {"single_F3", {"model.single_level=F3"}},
          {"single_F4", {"model.single_level=F4"}},
          {"full_finetune", {"model.full_finetune=true"}}};
}

inline int ablate_cmd(const Common& c, const std::string& data) {
  Common base = c;
  if (!data.empty()) base.overrides.push_back("data.manifest=" + data);
  const Config cfg = resolve(base);
  const auto out = prepare_out(c, cfg);
  const auto manifest = manifest_for(cfg);
  const auto train_set = split_or_fallback(manifest, "train", cfg.train.input_size);
  const auto eval_set = manifest.split("eval").empty() ? train_set : load_split(manifest, "eval", cfg.train.input_size);
  std::vector<ImageMetrics> rows;
  std::string complexity = "name,total_params,trainable_params,forward_macs\n";
  for (const auto& [name, ov] : ablation_variants()) {
    Common vc = base;
    for (const auto& o : ov) vc.overrides.push_back(o);
    const Config vcfg = resolve(vc);
    TrainSession s = TrainSession::fresh(vcfg);
    train(s, train_set);
    SaliencyReport r = evaluate_samples(*s.net, eval_set, vcfg.eval.thresholds);
    r.aggregate.name = name;
    rows.push_back(r.aggregate);
    const auto cx = count_params_flops(vcfg.model, vcfg.train.input_size, vcfg.train.input_size);
    complexity += name + "," + std::to_string(cx.total_params) + "," +
                  std::to_string(s.net->parameters().scalar_count(true)) + "," + std::to_string(cx.forward_macs) + "\n";
    print_report_line(std::cout, name, r.aggregate);
  }
  write_text(out / "ablation.csv", metrics_table_csv(rows));
  write_text(out / "ablation.md", metrics_table_markdown(rows));
  write_text(out / "ablation_complexity.csv", complexity);
  return 0;
}

inline int count_cmd(const Common& c) {
  const Config cfg = resolve(c);
  const auto out = prepare_out(c, cfg);
  const std::size_t S = cfg.train.input_size;
  const auto r = count_params_flops(cfg.model, S, S);
  std::string csv = "metric,value\n";
  csv += "total_params," + std::to_string(r.total_params) + "\n";
  csv += "trainable_params," + std::to_string(r.trainable_params) + "\n";
  csv += "backbone_params," + std::to_string(r.backbone_params) + "\n";
  csv += "adapter_params," + std::to_string(r.adapter_params) + "\n";
  csv += "decoder_params," + std::to_string(r.decoder_params) + "\n";
  csv += "attention_projection_params," + std::to_string(r.attention_projection_params) + "\n";
  csv += "forward_macs," + std::to_string(r.forward_macs) + "\n";
  csv += "input_size," + std::to_string(S) + "\n";
  write_text(out / "complexity.csv", csv);
  std::cout << "params total " << r.total_params << " trainable " << r.trainable_params << " (backbone "
            << r.backbone_params << ", adapter " << r.adapter_params << ", decoder " << r.decoder_params << ")\n"
            << "forward multiply-adds at " << S << "x" << S << ": " << r.forward_macs << "\n";
  return 0;
}

}  // namespace cli

/// Entry point; returns the process exit status.
inline int run_cli(int argc, char** argv) {
  CLI::App app{"dgn: dual-gaze saliency network toolkit"};
  app.require_subcommand(1);
  cli::Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "YAML config file");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", common.seed, "master seed (overrides config)");
    sub->add_option("--set", common.overrides, "override key=value (repeatable)");
    sub->add_option("--deterministic", common.deterministic, "deterministic kernels (default true)");
    sub->add_option("--threads", common.threads, "intra-op threads (fallback: DGN_THREADS)");
  };
  cli::TrainArgs train_args;
  cli::EvalArgs eval_args;
  cli::InferArgs infer_args;
  cli::VizArgs viz_args;
  std::string ablate_data;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen);
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr);
  tr->add_option("--data", train_args.data, "dataset manifest");
  tr->add_option("--resume", train_args.resume, "checkpoint to resume from");
  tr->add_option("--stop-at", train_args.stop_at, "stop after this global step");
  auto* ev = app.add_subcommand("eval", "evaluate predictions or a checkpoint");
  add_common(ev);
  ev->add_option("--pred", eval_args.pred, "prediction directory");
  ev->add_option("--gt", eval_args.gt, "ground-truth directory");
  ev->add_option("--checkpoint", eval_args.checkpoint, "checkpoint to evaluate on a manifest split");
  ev->add_option("--data", eval_args.data, "dataset manifest");
  auto* inf = app.add_subcommand("infer", "write sigmoid(S) maps");
  add_common(inf);
  inf->add_option("--checkpoint", infer_args.checkpoint, "checkpoint");
  inf->add_option("--input", infer_args.input, "image file or directory");
  auto* viz = app.add_subcommand("viz-attn", "dump attention and feature heatmaps");
  add_common(viz);
  viz->add_option("--checkpoint", viz_args.checkpoint, "checkpoint");
  viz->add_option("--image", viz_args.image, "input image (default: first train sample)");
  auto* abl = app.add_subcommand("ablate", "train and compare the ablation variants");
  add_common(abl);
  abl->add_option("--data", ablate_data, "dataset manifest");
  auto* cnt = app.add_subcommand("count-params", "parameter and multiply-add summary");
  add_common(cnt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[validation]: " << e.what() << "\n";
    return 1;
  }

  try {
    cli::apply_runtime(common);
    if (*gen) return cli::gen_data(common);
    if (*tr) return cli::train_cmd(common, train_args);
    if (*ev) return cli::eval_cmd(common, eval_args);
    if (*inf) return cli::infer_cmd(common, infer_args);
    if (*viz) return cli::viz_cmd(common, viz_args);
    if (*abl) return cli::ablate_cmd(common, ablate_data);
    if (*cnt) return cli::count_cmd(common);
  } catch (const IoError& e) {
    std::cerr << "error[io]: " << e.what() << "\n";
    return 2;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error[diverged]: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error[validation]: " << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "error[validation]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[runtime]: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dgn
