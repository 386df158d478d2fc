#include "boxgen/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace boxgen {

uint8_t float_to_byte(float v) {
  const float s = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
  return static_cast<uint8_t>(std::lround(s));
}

float byte_to_float(uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

void write_ppm(const std::string& path, const Buffer<float>& img) {
  if (img.shape.size() != 3 || img.shape[0] != 3)
    throw ValidationError("write_ppm: expected [3,H,W] image, got " + shape_str(img.shape));
  const int H = img.shape[1], W = img.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write image: " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        row[x * 3 + c] = float_to_byte(img[(static_cast<int64_t>(c) * H + y) * W + x]);
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!f) throw RuntimeFailure("short write for image: " + path);
}

Buffer<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open image: " + path);
  std::string magic;
  int W = 0, H = 0, maxval = 0;
  f >> magic >> W >> H >> maxval;
  if (magic != "P6" || maxval != 255 || W <= 0 || H <= 0)
    throw ValidationError("unsupported image format in " + path);
  f.get();  // single whitespace after header
  Buffer<float> img({3, H, W});
  std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
  for (int y = 0; y < H; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), row.size());
    if (!f) throw ValidationError("truncated image: " + path);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<int64_t>(c) * H + y) * W + x] = byte_to_float(row[x * 3 + c]);
  }
  return img;
}

}  // namespace boxgen
