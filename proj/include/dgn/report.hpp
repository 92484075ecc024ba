#pragma once

// Directory-level evaluation and the CSV/markdown/curve writers.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dgn/image.hpp"
#include "dgn/metrics.hpp"

namespace dgn {

inline std::vector<std::string> list_png_stems(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().stem().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Pairs same-named PNGs of the two directories; the prediction is turned
/// gray and resized (bilinear) to the mask size. Unpaired names are listed
/// in `missing` and skipped.
inline SaliencyReport evaluate_dataset(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                                       std::size_t T = kDefaultThresholds) {
  const auto gts = list_png_stems(gt_dir);
  const auto preds = list_png_stems(pred_dir);
  const std::set<std::string> pred_set(preds.begin(), preds.end());
  const std::set<std::string> gt_set(gts.begin(), gts.end());
  SaliencyReport r;
  r.thresholds = T;
  for (const auto& name : gts) {
    if (!pred_set.count(name)) {
      r.missing.push_back((pred_dir / (name + ".png")).string());
      continue;
    }
    const Image8 gt = to_gray(read_png((gt_dir / (name + ".png")).string()));
    Image8 pred = to_gray(read_png((pred_dir / (name + ".png")).string()));
    pred = resize_bilinear(pred, gt.width, gt.height);
    r.images.push_back(evaluate_pair(make_eval_pair(gt.height, gt.width, pred.pixels, gt.pixels), name, T));
  }
  for (const auto& name : preds) {
    if (!gt_set.count(name)) r.missing.push_back((gt_dir / (name + ".png")).string());
  }
  finalize_report(r);
  return r;
}

inline constexpr const char* kTableHeader = "name,mae,fbeta_max,s_measure,e_measure";

inline std::string table_row(const ImageMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f", m.name.c_str(), m.mae, m.fbeta_max, m.s_measure,
                m.e_measure);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

/// CSV with one row per entry (header shared by eval and ablate tables).
inline std::string metrics_table_csv(const std::vector<ImageMetrics>& rows) {
  std::string s = std::string(kTableHeader) + "\n";
  for (const auto& m : rows) s += table_row(m) + "\n";
  return s;
}

inline std::string metrics_table_markdown(const std::vector<ImageMetrics>& rows) {
  std::string s = "| name | MAE | Fβmax | S_m | E_m |\n|---|---|---|---|---|\n";
  for (const auto& m : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "| %s | %.3f | %.3f | %.3f | %.3f |\n", m.name.c_str(), m.mae, m.fbeta_max,
                  m.s_measure, m.e_measure);
    s += buf;
  }
  return s;
}

inline std::vector<ImageMetrics> report_rows(const SaliencyReport& r) {
  std::vector<ImageMetrics> rows = r.images;
  rows.push_back(r.aggregate);
  return rows;
}

/// Aggregate PR and F-beta curves, one row per threshold.
inline std::string curves_csv(const SaliencyReport& r) {
  const auto thr = sweep_thresholds(r.thresholds);
  std::string s = "threshold,precision,recall,fbeta\n";
  for (std::size_t t = 0; t < r.thresholds; ++t) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f\n", thr[t], r.aggregate.precision_curve[t],
                  r.aggregate.recall_curve[t], r.aggregate.fbeta_curve[t]);
    s += buf;
  }
  return s;
}

/// eval.csv, eval.md and curves.csv under out_dir.
inline void write_report(const std::filesystem::path& out_dir, const SaliencyReport& r) {
  const auto rows = report_rows(r);
  write_text(out_dir / "eval.csv", metrics_table_csv(rows));
  write_text(out_dir / "eval.md", metrics_table_markdown(rows));
  write_text(out_dir / "curves.csv", curves_csv(r));
}

}  // namespace dgn
