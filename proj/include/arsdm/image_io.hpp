#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "arsdm/tensor.hpp"

namespace arsdm {

// Binary PPM (P6) / PGM (P5), maxval 255. Images map [-1,1] <-> [0,255]
// through u8 = round((x+1)/2*255); masks map {0,1} <-> {0,255}.

void write_ppm(const std::filesystem::path& path, const Tensor& image_item); // [1,3,H,W]
Tensor read_ppm(const std::filesystem::path& path);

void write_pgm(const std::filesystem::path& path, const Tensor& mask_item); // [1,1,H,W]
Tensor read_pgm(const std::filesystem::path& path);

// Quantizes [-1,1] data to the 8-bit grid used on disk.
Tensor quantize_u8(const Tensor& image);

// Writes to <path>.tmp then renames; partial files never appear at path.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

} // namespace arsdm
