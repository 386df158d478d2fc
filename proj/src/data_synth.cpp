#include "boxgen/data_synth.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "boxgen/core/rng.hpp"
#include "boxgen/image.hpp"
#include "boxgen/vocab.hpp"

namespace fs = std::filesystem;

namespace boxgen {

namespace {

// palette in 8-bit sRGB, one entry per vocab color
constexpr std::array<std::array<uint8_t, 3>, 6> kPalette = {{
    {230, 40, 40},    // red
    {40, 180, 70},    // green
    {45, 90, 220},    // blue
    {235, 220, 50},   // yellow
    {150, 60, 200},   // purple
    {240, 150, 40},   // orange
}};

float chan(uint8_t v) { return byte_to_float(v); }

void fill_background(Buffer<float>& img, int background_id, int H, int W) {
  switch (background_id) {
    case 0: {  // plain gray
      const float g = chan(128);
      img.fill(g);
      break;
    }
    case 1: {  // vertical gradient
      for (int y = 0; y < H; ++y) {
        const uint8_t v = static_cast<uint8_t>(90 + (170 - 90) * y / std::max(1, H - 1));
        const float g = chan(v);
        for (int c = 0; c < 3; ++c)
          for (int x = 0; x < W; ++x) img[(static_cast<int64_t>(c) * H + y) * W + x] = g;
      }
      break;
    }
    case 2: {  // checkerboard
      const int cell = std::max(1, W / 8);
      const float a = chan(110), b = chan(150);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const float g = (((x / cell) + (y / cell)) % 2 == 0) ? a : b;
          for (int c = 0; c < 3; ++c) img[(static_cast<int64_t>(c) * H + y) * W + x] = g;
        }
      break;
    }
    default:
      throw ValidationError("unknown background id " + std::to_string(background_id));
  }
}

// pixel-center hit tests; all coordinates normalized to [0,1]
bool hit_square(double px, double py, const Box& b) {
  return px >= b.x0 && px < b.x1 && py >= b.y0 && py < b.y1;
}

bool hit_circle(double px, double py, const Box& b) {
  const double rx = 0.5 * b.w(), ry = 0.5 * b.h();
  const double dx = (px - b.cx()) / rx, dy = (py - b.cy()) / ry;
  return dx * dx + dy * dy <= 1.0;
}

bool hit_triangle(double px, double py, const Box& b) {
  // isoceles: apex at top-center, base along the bottom edge
  if (py < b.y0 || py > b.y1) return false;
  const double frac = (py - b.y0) / b.h();  // 0 at apex row, 1 at base
  const double half = 0.5 * b.w() * frac;
  return px >= b.cx() - half && px <= b.cx() + half;
}

}  // namespace

SceneSpec generate_scene(uint64_t seed, const Config& c) {
  Rng r(seed);
  SceneSpec spec;
  spec.seed = seed;
  const int count = r.uniform_int(1, c.n_obj_max);
  spec.background_id = r.uniform_int(0, vocab::kNumBackgrounds - 1);
  for (int i = 0; i < count; ++i) {
    ObjectSpec obj;
    obj.category = r.uniform_int(0, vocab::kNumCategories - 1);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const double side = r.uniform(c.obj_min_frac, c.obj_max_frac);
      obj.box.x0 = r.uniform(0.0, 1.0 - side);
      obj.box.y0 = r.uniform(0.0, 1.0 - side);
      obj.box.x1 = obj.box.x0 + side;
      obj.box.y1 = obj.box.y0 + side;
      placed = true;
      for (const auto& prev : spec.objects)
        if (compute_iou(obj.box, prev.box) > c.overlap_max) {
          placed = false;
          break;
        }
    }
    if (!placed)
      throw GenerationError("rejection sampling exhausted (1000 attempts) for seed " +
                            std::to_string(seed));
    spec.objects.push_back(obj);
  }
  spec.caption = make_caption(spec);
  return spec;
}

Buffer<float> render_scene(const SceneSpec& spec, int resolution) {
  const int H = resolution, W = resolution;
  Buffer<float> img({3, H, W});
  fill_background(img, spec.background_id, H, W);
  for (const auto& obj : spec.objects) {
    const int shape = vocab::shape_of(obj.category);
    const auto& rgb = kPalette[vocab::color_of(obj.category)];
    const float cv[3] = {chan(rgb[0]), chan(rgb[1]), chan(rgb[2])};
    // limit the scan to the box's pixel neighborhood
    const int px0 = std::max(0, static_cast<int>(std::floor(obj.box.x0 * W)));
    const int px1 = std::min(W, static_cast<int>(std::ceil(obj.box.x1 * W)));
    const int py0 = std::max(0, static_cast<int>(std::floor(obj.box.y0 * H)));
    const int py1 = std::min(H, static_cast<int>(std::ceil(obj.box.y1 * H)));
    for (int y = py0; y < py1; ++y)
      for (int x = px0; x < px1; ++x) {
        const double px = (x + 0.5) / W, py = (y + 0.5) / H;
        bool hit = false;
        switch (shape) {
          case 0: hit = hit_circle(px, py, obj.box); break;
          case 1: hit = hit_square(px, py, obj.box); break;
          case 2: hit = hit_triangle(px, py, obj.box); break;
        }
        if (hit)
          for (int c = 0; c < 3; ++c) img[(static_cast<int64_t>(c) * H + y) * W + x] = cv[c];
      }
  }
  return img;
}

std::string make_caption(const SceneSpec& spec) {
  if (spec.objects.empty()) throw ValidationError("make_caption: scene has no objects");
  const auto name = [](const ObjectSpec& o) {
    return "a " + vocab::color_names()[vocab::color_of(o.category)] + " " +
           vocab::shape_names()[vocab::shape_of(o.category)];
  };
  if (spec.objects.size() == 1)
    return name(spec.objects[0]) + " on a " + vocab::background_names()[spec.background_id] +
           " background";
  const Box& a = spec.objects[0].box;
  const Box& b = spec.objects[1].box;
  const double dx = a.cx() - b.cx(), dy = a.cy() - b.cy();
  std::string rel;
  if (std::abs(dx) >= std::abs(dy))
    rel = dx < 0 ? "left of" : "right of";
  else
    rel = dy < 0 ? "above" : "below";
  return name(spec.objects[0]) + " " + rel + " " + name(spec.objects[1]);
}

void write_manifest(const std::string& dir, const DatasetManifest& m) {
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / "manifest.jsonl").string();
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write manifest: " + path);
  // line 0 carries split + config provenance; records follow one per line
  nlohmann::json head;
  head["split"] = m.split;
  head["config"] = m.config_snapshot;
  f << head.dump() << "\n";
  for (const auto& rec : m.records) {
    nlohmann::json j;
    j["image"] = rec.image_path;
    j["caption"] = rec.scene.caption;
    j["seed"] = rec.scene.seed;
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : rec.scene.objects)
      objs.push_back({{"category", o.category},
                      {"box", {o.box.x0, o.box.y0, o.box.x1, o.box.y1}},
                      {"shape", vocab::shape_names()[vocab::shape_of(o.category)]},
                      {"color", vocab::color_names()[vocab::color_of(o.category)]}});
    j["objects"] = objs;
    j["background"] = rec.scene.background_id;
    f << j.dump() << "\n";
  }
  if (!f) throw RuntimeFailure("short write for manifest: " + path);
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open manifest: " + path);
  DatasetManifest m;
  m.dir = fs::path(path).parent_path().string();
  std::string line;
  if (!std::getline(f, line)) throw ValidationError("empty manifest: " + path);
  try {
    nlohmann::json head = nlohmann::json::parse(line);
    m.split = head.at("split").get<std::string>();
    m.config_snapshot = head.value("config", nlohmann::json::object());
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      ManifestRecord rec;
      rec.image_path = j.at("image").get<std::string>();
      rec.scene.caption = j.at("caption").get<std::string>();
      rec.scene.seed = j.at("seed").get<uint64_t>();
      rec.scene.background_id = j.value("background", 0);
      for (const auto& o : j.at("objects")) {
        ObjectSpec obj;
        obj.category = o.at("category").get<int>();
        const auto& b = o.at("box");
        obj.box = Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                      b.at(3).get<double>()};
        validate_box(obj.box, "manifest object");
        rec.scene.objects.push_back(obj);
      }
      m.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest parse error in " + path + ": " + e.what());
  }
  return m;
}

DatasetManifest generate_dataset(const Config& c, const std::string& dir, const std::string& split,
                                 uint64_t seed0, int n) {
  if (n < 1) throw ValidationError("generate_dataset: need n >= 1");
  const fs::path split_dir = fs::path(dir) / split;
  fs::create_directories(split_dir);
  DatasetManifest m;
  m.split = split;
  m.config_snapshot = c.to_json();
  m.dir = split_dir.string();
  for (int i = 0; i < n; ++i) {
    const uint64_t seed = seed0 + static_cast<uint64_t>(i);
    ManifestRecord rec;
    rec.scene = generate_scene(seed, c);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06d.ppm", i);
    rec.image_path = name;
    write_ppm((split_dir / name).string(), render_scene(rec.scene, c.resolution));
    m.records.push_back(std::move(rec));
  }
  write_manifest(split_dir.string(), m);
  return m;
}

Buffer<float> load_image(const DatasetManifest& m, size_t index) {
  if (index >= m.records.size()) throw ValidationError("load_image: index out of range");
  return read_ppm((fs::path(m.dir) / m.records[index].image_path).string());
}

}  // namespace boxgen
