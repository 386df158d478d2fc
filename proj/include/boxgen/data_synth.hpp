#pragma once

#include <string>
#include <vector>

#include "boxgen/config.hpp"
#include "boxgen/core/tensor.hpp"
#include "boxgen/geometry.hpp"

namespace boxgen {

struct ObjectSpec {
  int category = 0;  // shape/color derivable via vocab
  Box box;
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  int background_id = 0;
  std::string caption;
  uint64_t seed = 0;
};

// Deterministic given seed: object count uniform in [1, n_obj_max], boxes
// rejection-sampled until pairwise IoU <= overlap_max (1000 attempts each).
SceneSpec generate_scene(uint64_t seed, const Config& c);

// Crisp rasterization, no anti-aliasing; later objects occlude earlier ones.
// Returns [3,H,W] in [-1,1].
Buffer<float> render_scene(const SceneSpec& spec, int resolution);

// "a <color> <shape> <relation> a <color> <shape>" from the first two
// objects' centers, or "a <color> <shape> on a <background> background".
std::string make_caption(const SceneSpec& spec);

struct ManifestRecord {
  std::string image_path;  // relative to the manifest's directory
  SceneSpec scene;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::string split;  // "train" or "val"
  nlohmann::json config_snapshot;
  std::string dir;    // directory the manifest was loaded from / written to
};

void write_manifest(const std::string& dir, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// Generates scenes for seeds [seed0, seed0+n), renders and writes images and
// the manifest into dir/split/.
DatasetManifest generate_dataset(const Config& c, const std::string& dir, const std::string& split,
                                 uint64_t seed0, int n);

Buffer<float> load_image(const DatasetManifest& m, size_t index);

}  // namespace boxgen
