#pragma once

#include <string>

#include "disfacerep/image.hpp"

namespace disfacerep {

// Reads a color image as RGB floats in [0, 1]. Throws DataError.
Image read_image(const std::string& path);
// Writes 8-bit RGB PNG; values are rounded to k/255.
void write_png(const std::string& path, const Image& image);
std::string encode_png(const Image& image);
Image decode_image(const std::string& bytes);

// Single-channel 8-bit label images.
SegMask read_mask(const std::string& path);
void write_mask(const std::string& path, const SegMask& mask);

// Bilinear for images, nearest neighbour for label maps.
Image resize_image(const Image& image, int height, int width);
SegMask resize_mask(const SegMask& mask, int height, int width);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace disfacerep
