#pragma once

// Synthetic saliency corpus (procedural scenes with exact masks), the YAML
// dataset manifest, and image/mask loading.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "dgn/image.hpp"
#include "dgn/random.hpp"
#include "dgn/tensor.hpp"

namespace dgn {

enum class ShapeFamily { Ellipse, Polygon, Bar };
enum class Texture { Flat, Gradient, Noise };

inline const char* to_string(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::Ellipse: return "ellipse";
    case ShapeFamily::Polygon: return "polygon";
    case ShapeFamily::Bar: return "bar";
  }
  return "?";
}

inline const char* to_string(Texture t) {
  switch (t) {
    case Texture::Flat: return "flat";
    case Texture::Gradient: return "gradient";
    case Texture::Noise: return "noise";
  }
  return "?";
}

inline constexpr double kMinObjectArea = 0.02;
inline constexpr double kMaxObjectArea = 0.60;

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t objects = 1;  // 1..3
  ShapeFamily shape = ShapeFamily::Ellipse;
  Texture texture = Texture::Flat;
  double clutter = 0;         // background clutter level in [0,1]
  bool boundary = false;      // some object touches the canvas border
  bool low_contrast = false;  // object/background colours close together
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("scene: canvas must be at least 8x8");
    if (objects < 1 || objects > 3) throw ConfigError("scene: object count must be 1..3");
    if (!(clutter >= 0 && clutter <= 1)) throw ConfigError("scene: clutter must lie in [0,1]");
  }
};

/// Draws the scene recipe of sample `index` from the master seed.
inline SceneSpec sample_scene(std::uint64_t master_seed, std::uint64_t index, std::size_t height, std::size_t width,
                              double boundary_rate) {
  Rng r(derive_seed(master_seed, index));
  SceneSpec s;
  s.height = height;
  s.width = width;
  const double u = r.uniform();
  s.objects = u < 0.6 ? 1 : (u < 0.85 ? 2 : 3);
  s.shape = static_cast<ShapeFamily>(r.below(3));
  s.texture = static_cast<Texture>(r.below(3));
  s.clutter = r.uniform();
  s.boundary = r.uniform() < boundary_rate;
  s.low_contrast = r.uniform() < 0.15;
  s.seed = r.next();
  return s;
}

struct Scene {
  Image8 image;  // RGB
  Image8 mask;   // gray, 0 or 255
};

namespace detail {

struct Point {
  double x, y;
};

/// One object outline; `inside` is evaluated at pixel centres.
struct Shape2D {
  ShapeFamily family = ShapeFamily::Ellipse;
  double cx = 0, cy = 0, a = 1, b = 1, theta = 0;  // ellipse / bar half-extents
  std::vector<Point> poly;

  bool inside(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    switch (family) {
      case ShapeFamily::Ellipse: return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      case ShapeFamily::Bar: return std::abs(u) <= a && std::abs(v) <= b;
      case ShapeFamily::Polygon: {
        bool in = false;
        for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
          const Point& p = poly[i];
          const Point& q = poly[j];
          if ((p.y > y) != (q.y > y) && x < (q.x - p.x) * (y - p.y) / (q.y - p.y) + p.x) in = !in;
        }
        return in;
      }
    }
    return false;
  }
};

inline Shape2D random_shape(Rng& r, ShapeFamily family, double scale, double cx, double cy) {
  Shape2D s;
  s.family = family;
  s.cx = cx;
  s.cy = cy;
  s.theta = r.uniform(0.0, std::numbers::pi);
  switch (family) {
    case ShapeFamily::Ellipse:
      s.a = r.uniform(0.10, 0.36) * scale;
      s.b = s.a * r.uniform(0.45, 1.0);
      break;
    case ShapeFamily::Bar:
      s.a = r.uniform(0.28, 0.46) * scale;
      s.b = s.a * r.uniform(0.12, 0.25);
      break;
    case ShapeFamily::Polygon: {
      const std::size_t n = 5 + r.below(4);
      const double R = r.uniform(0.14, 0.40) * scale;
      for (std::size_t k = 0; k < n; ++k) {
        const double ang = 2 * std::numbers::pi * (static_cast<double>(k) + r.uniform(-0.3, 0.3)) /
                           static_cast<double>(n);
        const double rad = R * r.uniform(0.6, 1.0);
        s.poly.push_back({cx + rad * std::cos(ang), cy + rad * std::sin(ang)});
      }
      break;
    }
  }
  return s;
}

inline std::array<double, 3> random_colour(Rng& r) {
  return {r.uniform(0.0, 255.0), r.uniform(0.0, 255.0), r.uniform(0.0, 255.0)};
}

inline double colour_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

inline std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// Border contact of a mask: which of top/bottom/left/right it touches.
inline std::array<bool, 4> border_contact(const Image8& mask) {
  std::array<bool, 4> t{false, false, false, false};
  for (std::size_t x = 0; x < mask.width; ++x) {
    t[0] = t[0] || mask.at(0, x) != 0;
    t[1] = t[1] || mask.at(mask.height - 1, x) != 0;
  }
  for (std::size_t y = 0; y < mask.height; ++y) {
    t[2] = t[2] || mask.at(y, 0) != 0;
    t[3] = t[3] || mask.at(y, mask.width - 1) != 0;
  }
  return t;
}

inline double mask_area_fraction(const Image8& mask) {
  std::size_t on = 0;
  for (auto v : mask.pixels) on += v != 0 ? 1 : 0;
  return static_cast<double>(on) / static_cast<double>(mask.pixels.size());
}

/// Renders a scene by rejection sampling until the mask satisfies the
/// area range and the requested border-contact regime (never all four
/// borders; none unless `boundary`).
inline Scene render_scene(const SceneSpec& spec) {
  spec.validate();
  Rng r(spec.seed);
  const std::size_t H = spec.height, W = spec.width;
  const double scale = static_cast<double>(std::min(H, W));
  const double shrink = 1.0 / std::sqrt(static_cast<double>(spec.objects));
  Image8 mask(W, H, 1);
  std::vector<detail::Shape2D> shapes;
  bool ok = false;
  for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
    shapes.clear();
    for (std::size_t o = 0; o < spec.objects; ++o) {
      double cx = r.uniform(0.2, 0.8) * static_cast<double>(W);
      double cy = r.uniform(0.2, 0.8) * static_cast<double>(H);
      if (spec.boundary && o == 0) {
        const double edge = r.uniform(0.0, 0.12) * scale;
        switch (r.below(4)) {
          case 0: cy = edge; break;
          case 1: cy = static_cast<double>(H) - edge; break;
          case 2: cx = edge; break;
          default: cx = static_cast<double>(W) - edge; break;
        }
      }
      shapes.push_back(detail::random_shape(r, spec.shape, scale * shrink, cx, cy));
    }
    std::fill(mask.pixels.begin(), mask.pixels.end(), 0);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        for (const auto& s : shapes) {
          if (s.inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
            mask.at(y, x) = 255;
            break;
          }
        }
      }
    }
    const double area = mask_area_fraction(mask);
    const auto touch = border_contact(mask);
    const int touched = touch[0] + touch[1] + touch[2] + touch[3];
    ok = area >= kMinObjectArea && area <= kMaxObjectArea && touched < 4 &&
         (spec.boundary ? touched >= 1 : touched == 0);
  }
  if (!ok) throw std::runtime_error("scene: no admissible layout found for seed " + std::to_string(spec.seed));

  // Colours.
  const auto bg = detail::random_colour(r);
  std::array<double, 3> fg;
  for (;;) {
    fg = detail::random_colour(r);
    const double d = detail::colour_distance(fg, bg);
    if (spec.low_contrast ? (d >= 40 && d <= 70) : d >= 120) break;
  }

  // Background: tilted ramp, clutter blobs, pixel noise.
  Image8 img(W, H, 3);
  const double gdir = r.uniform(0.0, 2 * std::numbers::pi);
  const double gamp = r.uniform(0.0, 30.0);
  std::vector<double> base(H * W * 3);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double t = (std::cos(gdir) * (static_cast<double>(x) / W - 0.5) +
                        std::sin(gdir) * (static_cast<double>(y) / H - 0.5));
      for (std::size_t c = 0; c < 3; ++c) base[(y * W + x) * 3 + c] = bg[c] + gamp * t;
    }
  }
  const std::size_t blobs = static_cast<std::size_t>(std::lround(spec.clutter * 6));
  for (std::size_t k = 0; k < blobs; ++k) {
    detail::Shape2D blob;
    blob.cx = r.uniform(0.0, static_cast<double>(W));
    blob.cy = r.uniform(0.0, static_cast<double>(H));
    blob.a = r.uniform(0.03, 0.08) * scale;
    blob.b = blob.a * r.uniform(0.5, 1.0);
    blob.theta = r.uniform(0.0, std::numbers::pi);
    const auto col = detail::random_colour(r);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (blob.inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
          for (std::size_t c = 0; c < 3; ++c) base[(y * W + x) * 3 + c] = 0.5 * base[(y * W + x) * 3 + c] + 0.5 * col[c];
        }
      }
    }
  }
  const double bg_noise = spec.clutter * 20;

  // Object fill.
  const double tdir = r.uniform(0.0, 2 * std::numbers::pi);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const bool on = mask.at(y, x) != 0;
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (on) {
          v = fg[c];
          if (spec.texture == Texture::Gradient) {
            v += 60 * (std::cos(tdir) * (static_cast<double>(x) / W - 0.5) +
                       std::sin(tdir) * (static_cast<double>(y) / H - 0.5));
          } else if (spec.texture == Texture::Noise) {
            v += r.uniform(-25.0, 25.0);
          }
        } else {
          v = base[(y * W + x) * 3 + c] + (bg_noise > 0 ? r.uniform(-bg_noise, bg_noise) : 0.0);
        }
        img.at(y, x, c) = detail::clamp_byte(v);
      }
    }
  }
  return {std::move(img), std::move(mask)};
}

struct ManifestEntry {
  std::string name;
  std::string image;  // relative to the manifest root
  std::string mask;
  std::string split;
};

struct DatasetManifest {
  std::string root = ".";  // relative paths resolve against the manifest directory
  std::uint64_t seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::map<std::string, std::size_t> splits;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base;  // directory the manifest was loaded from (not serialized)

  std::filesystem::path resolve(const std::string& rel) const { return base / root / rel; }

  std::vector<ManifestEntry> split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == name) out.push_back(e);
    }
    return out;
  }

  std::string to_yaml() const {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "root" << YAML::Value << root;
    out << YAML::Key << "seed" << YAML::Value << seed;
    out << YAML::Key << "height" << YAML::Value << height;
    out << YAML::Key << "width" << YAML::Value << width;
    out << YAML::Key << "splits" << YAML::Value << YAML::BeginMap;
    for (const auto& [k, v] : splits) out << YAML::Key << k << YAML::Value << v;
    out << YAML::EndMap;
    out << YAML::Key << "samples" << YAML::Value << YAML::BeginSeq;
    for (const auto& e : entries) {
      out << YAML::BeginMap << YAML::Key << "name" << YAML::Value << e.name << YAML::Key << "split" << YAML::Value
          << e.split << YAML::Key << "image" << YAML::Value << e.image << YAML::Key << "mask" << YAML::Value << e.mask
          << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << to_yaml();
    if (!f) throw IoError("write failed: " + path.string());
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    YAML::Node doc;
    try {
      doc = YAML::LoadFile(path.string());
    } catch (const YAML::BadFile&) {
      throw IoError("cannot read manifest " + path.string());
    } catch (const YAML::Exception& e) {
      throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.base = path.parent_path();
    try {
      m.root = doc["root"].as<std::string>(".");
      m.seed = doc["seed"].as<std::uint64_t>(0);
      m.height = doc["height"].as<std::size_t>(0);
      m.width = doc["width"].as<std::size_t>(0);
      if (doc["splits"]) {
        for (const auto& kv : doc["splits"]) m.splits[kv.first.as<std::string>()] = kv.second.as<std::size_t>();
      }
      for (const auto& s : doc["samples"]) {
        m.entries.push_back({s["name"].as<std::string>(), s["image"].as<std::string>(), s["mask"].as<std::string>(),
                             s["split"].as<std::string>("train")});
      }
    } catch (const YAML::Exception& e) {
      throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    return m;
  }
};

struct CorpusOptions {
  std::size_t train_count = 32;
  std::size_t eval_count = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  double boundary_rate = 0.2;
  std::uint64_t seed = 7;
  unsigned threads = 1;
};

/// Writes image/<name>.png, mask/<name>.png and manifest.yaml under out_dir.
/// Sample i uses a seed derived from (seed, i), so the result does not
/// depend on the thread count.
inline DatasetManifest generate_corpus(const CorpusOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.train_count + opt.eval_count == 0) throw ConfigError("gen-data: sample count must be positive");
  if (!(opt.boundary_rate >= 0 && opt.boundary_rate <= 1)) throw ConfigError("gen-data: boundary_rate must lie in [0,1]");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "image", ec);
  std::filesystem::create_directories(out_dir / "mask", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.seed = opt.seed;
  m.height = opt.height;
  m.width = opt.width;
  m.base = out_dir;
  if (opt.train_count) m.splits["train"] = opt.train_count;
  if (opt.eval_count) m.splits["eval"] = opt.eval_count;
  const std::size_t total = opt.train_count + opt.eval_count;
  for (std::size_t i = 0; i < total; ++i) {
    const bool train = i < opt.train_count;
    const std::size_t local = train ? i : i - opt.train_count;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04zu", train ? "train" : "eval", local);
    const std::string name = buf;
    m.entries.push_back({name, "image/" + name + ".png", "mask/" + name + ".png", train ? "train" : "eval"});
  }

  auto work = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const SceneSpec spec = sample_scene(opt.seed, i, opt.height, opt.width, opt.boundary_rate);
      const Scene scene = render_scene(spec);
      write_png(m.resolve(m.entries[i].image).string(), scene.image);
      write_png(m.resolve(m.entries[i].mask).string(), scene.mask);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min<std::size_t>(opt.threads, total));
  const std::size_t step = (total + threads - 1) / threads;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * step, e = std::min(total, b + step);
    if (b >= e) continue;
    pool.emplace_back([&, t, b, e] {
      try {
        work(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  m.save(out_dir / "manifest.yaml");
  return m;
}

struct LoadedPair {
  Tensor image;  // [3 x H x W] in [0,1]
  Tensor mask;   // [H x W] in {0,1}
};

/// Bilinear resize for the image, nearest for the mask, mask re-binarized at 128.
inline LoadedPair load_pair(const std::string& image_path, const std::string& mask_path, std::size_t height,
                            std::size_t width) {
  if (height == 0 || width == 0) throw ConfigError("load_pair: target size must be positive");
  Image8 img = read_png(image_path);
  Image8 msk = to_gray(read_png(mask_path));
  const std::vector<double> v = resample_bilinear(img, width, height);
  std::vector<Real> chw(3 * height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = img.channels == 1 ? 0 : c;
        chw[(c * height + y) * width + x] = static_cast<Real>(v[(y * width + x) * img.channels + src_c] / 255.0);
      }
    }
  }
  const Image8 m = resize_nearest(msk, width, height);
  std::vector<Real> mv(height * width);
  for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = m.pixels[i] >= 128 ? Real(1) : Real(0);
  return {Tensor::from({3, height, width}, std::move(chw)), Tensor::from({height, width}, std::move(mv))};
}

}  // namespace dgn
