#pragma once

// Heatmap rendering with a fixed colour lookup table, and dumps of the
// attention maps and feature maps of one forward pass.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dgn/model.hpp"
#include "dgn/report.hpp"

namespace dgn {

/// 256-entry RGB table interpolated linearly (integer arithmetic) between
/// five anchors: black, indigo, crimson, orange, pale yellow.
inline const std::array<std::array<std::uint8_t, 3>, 256>& colormap() {
  static const auto lut = [] {
    constexpr int anchors[5][3] = {{0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164}};
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const int seg = std::min(3, i * 4 / 255);
      const int lo = seg * 255 / 4, hi = (seg + 1) * 255 / 4;
      for (int c = 0; c < 3; ++c) {
        const int a = anchors[seg][c], b = anchors[seg + 1][c];
        t[i][c] = static_cast<std::uint8_t>(a + ((b - a) * (i - lo) + (hi - lo) / 2) / (hi - lo));
      }
    }
    return t;
  }();
  return lut;
}

/// values [h x w] mapped through the colormap after scaling [lo, hi] -> [0, 255],
/// each cell drawn as a block of `cell` x `cell` pixels.
inline Image8 heatmap(const std::vector<double>& values, std::size_t h, std::size_t w, double lo, double hi,
                      std::size_t cell = 1) {
  Image8 img(w * cell, h * cell, 3);
  const auto& lut = colormap();
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double t = std::clamp((values[y * w + x] - lo) / span, 0.0, 1.0);
      const auto& c = lut[static_cast<std::size_t>(std::lround(t * 255))];
      for (std::size_t dy = 0; dy < cell; ++dy) {
        for (std::size_t dx = 0; dx < cell; ++dx) {
          for (std::size_t k = 0; k < 3; ++k) img.at(y * cell + dy, x * cell + dx, k) = c[k];
        }
      }
    }
  }
  return img;
}

/// Heatmap scaled by the map's own range.
inline Image8 auto_heatmap(const std::vector<double>& values, std::size_t h, std::size_t w, std::size_t cell = 1) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return heatmap(values, h, w, *lo, *hi, cell);
}

/// Per-token L2 norm of a token matrix [N x D].
inline std::vector<double> token_norms(const Tensor& tokens) {
  const std::size_t N = tokens.size(0), D = tokens.size(1);
  std::vector<double> out(N);
  const auto& v = tokens.values();
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(v[i * D + d]) * v[i * D + d];
    out[i] = std::sqrt(s);
  }
  return out;
}

struct VizSummary {
  std::vector<std::string> files;
  std::vector<double> max_row_sum_error;  // per dumped attention stage
};

/// Writes, for every stage the query cascade ran:
///   mgqm_stage<i>_attention.csv  rows "head,query,w_0..w_{N-1}" (the raw weights)
///   mgqm_stage<i>_head<h>_query<r>.png heatmaps over the stage grid
/// and for every reconstructed stage:
///   features_stage<i>_{input,refined,difference}.png and .csv (per-token norms).
inline VizSummary dump_attention(const ForwardResult& fr, const std::filesystem::path& out_dir,
                                 std::size_t display = 128) {
  VizSummary summary;
  auto put = [&](const std::filesystem::path& p) { summary.files.push_back(p.string()); };
  const std::size_t L = fr.features.levels.size();
  for (std::size_t i = 0; i < L; ++i) {
    const AttentionTrace& tr = fr.queries.traces.size() > i ? fr.queries.traces[i] : AttentionTrace{};
    if (tr.weights.empty()) continue;
    const FeatureMap& f = fr.features.levels[i];
    const std::size_t cell = std::max<std::size_t>(1, display / std::max(f.height, f.width));
    const std::string stem = "mgqm_stage" + std::to_string(i + 1);
    std::string csv = "head,query";
    for (std::size_t k = 0; k < tr.keys; ++k) csv += ",w" + std::to_string(k);
    csv += "\n";
    double worst = 0;
    for (std::size_t h = 0; h < tr.heads; ++h) {
      for (std::size_t r = 0; r < tr.rows; ++r) {
        std::vector<double> row(tr.keys);
        double sum = 0;
        csv += std::to_string(h) + "," + std::to_string(r);
        for (std::size_t k = 0; k < tr.keys; ++k) {
          row[k] = tr.at(h, r, k);
          sum += row[k];
          char buf[40];
          std::snprintf(buf, sizeof buf, ",%.17g", row[k]);
          csv += buf;
        }
        csv += "\n";
        worst = std::max(worst, std::abs(sum - 1.0));
        const auto png = out_dir / (stem + "_head" + std::to_string(h) + "_query" + std::to_string(r) + ".png");
        write_png(png.string(), auto_heatmap(row, f.height, f.width, cell));
        put(png);
      }
    }
    const auto csv_path = out_dir / (stem + "_attention.csv");
    write_text(csv_path, csv);
    put(csv_path);
    summary.max_row_sum_error.push_back(worst);
  }
  for (std::size_t i = 0; i < L; ++i) {
    if (fr.reconstruction.refined.size() <= i || !fr.reconstruction.refined[i].tokens.handle()) continue;
    const FeatureMap& f = fr.features.levels[i];
    const FeatureMap& g = fr.reconstruction.refined[i];
    const std::size_t cell = std::max<std::size_t>(1, display / std::max(f.height, f.width));
    const auto a = token_norms(f.tokens);
    const auto b = token_norms(g.tokens);
    const auto d = token_norms(sub(g.tokens, f.tokens).detach());
    const std::string stem = "features_stage" + std::to_string(i + 1);
    const std::pair<const char*, const std::vector<double>*> maps[] = {
        {"input", &a}, {"refined", &b}, {"difference", &d}};
    for (const auto& [tag, vals] : maps) {
      const auto png = out_dir / (stem + "_" + tag + ".png");
      write_png(png.string(), auto_heatmap(*vals, f.height, f.width, cell));
      put(png);
      std::string csv;
      for (std::size_t y = 0; y < f.height; ++y) {
        for (std::size_t x = 0; x < f.width; ++x) {
          char buf[40];
          std::snprintf(buf, sizeof buf, x ? ",%.17g" : "%.17g", (*vals)[y * f.width + x]);
          csv += buf;
        }
        csv += "\n";
      }
      const auto csv_path = out_dir / (stem + "_" + tag + ".csv");
      write_text(csv_path, csv);
      put(csv_path);
    }
  }
  return summary;
}

}  // namespace dgn
