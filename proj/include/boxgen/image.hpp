#pragma once

#include <string>

#include "boxgen/core/tensor.hpp"

namespace boxgen {

// Images move through the pipeline as float [3,H,W] in [-1,1]; on disk they
// are binary PPM (P6), lossless 8-bit RGB. The float<->byte mapping is fixed
// so a write/read round trip is exact on byte-representable values.

uint8_t float_to_byte(float v);
float byte_to_float(uint8_t b);

void write_ppm(const std::string& path, const Buffer<float>& img);
Buffer<float> read_ppm(const std::string& path);

}  // namespace boxgen
