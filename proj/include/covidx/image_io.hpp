#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "covidx/error.hpp"

namespace covidx {

/// 8-bit interleaved samples, row major, `channels` of 1 (gray) or 3 (RGB).
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> samples;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * channels + c];
  }
  bool operator==(const Raster&) const = default;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
}

namespace detail {

inline const std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

// Netpbm header token reader: skips whitespace and '#' comments.
class PnmHeader {
 public:
  PnmHeader(const std::vector<std::uint8_t>& bytes, std::string name)
      : bytes_(bytes), name_(std::move(name)) {}

  std::size_t number() {
    skip_space();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) fail(ErrorKind::data, name_ + ": header value too large");
    }
    if (digits == 0) fail(ErrorKind::data, name_ + ": malformed or truncated header");
    return value;
  }

  // Exactly one whitespace byte separates the header from the samples.
  std::size_t data_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      fail(ErrorKind::data, name_ + ": truncated header");
    }
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string name_;
  std::size_t pos_ = 2;
};

inline Raster decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  PnmHeader h(bytes, name);
  Raster r;
  r.width = h.number();
  r.height = h.number();
  const std::size_t maxval = h.number();
  if (r.width == 0 || r.height == 0) fail(ErrorKind::data, name + ": zero image extent");
  if (maxval != 255) {
    fail(ErrorKind::data, name + ": only maxval 255 is supported, got " + std::to_string(maxval));
  }
  r.channels = channels;
  const std::size_t offset = h.data_offset();
  const std::size_t need = r.width * r.height * channels;
  if (bytes.size() < offset + need) {
    fail(ErrorKind::data, name + ": truncated pixel data (" + std::to_string(bytes.size() - offset) +
                              " of " + std::to_string(need) + " bytes)");
  }
  r.samples.assign(bytes.begin() + static_cast<long>(offset),
                   bytes.begin() + static_cast<long>(offset + need));
  return r;
}

inline Raster decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    fail(ErrorKind::data, name + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Raster r;
  r.width = image.width;
  r.height = image.height;
  r.channels = color ? 3 : 1;
  r.samples.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.samples.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    fail(ErrorKind::data, name + ": " + msg);
  }
  return r;
}

inline void require_valid(const Raster& r) {
  if (r.width == 0 || r.height == 0) fail(ErrorKind::data, "raster has zero extent");
  if (r.channels != 1 && r.channels != 3) fail(ErrorKind::data, "raster must have 1 or 3 channels");
  if (r.samples.size() != r.width * r.height * r.channels) {
    fail(ErrorKind::data, "raster sample count does not match its extent");
  }
}

}  // namespace detail

inline Raster decode_image(const std::vector<std::uint8_t>& bytes, const std::string& name = "image") {
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), detail::kPngSignature, 8) == 0) {
    return detail::decode_png(bytes, name);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return detail::decode_pnm(bytes, name);
  }
  fail(ErrorKind::data, name + ": unsupported image format (expected PNG, P5 or P6)");
}

inline Raster decode_image(const std::filesystem::path& path) {
  return decode_image(read_file(path), path.string());
}

/// Binary PGM (1 channel) or PPM (3 channels).
inline std::vector<std::uint8_t> encode_pnm(const Raster& r) {
  detail::require_valid(r);
  const std::string header = std::string(r.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), r.samples.begin(), r.samples.end());
  return out;
}

inline std::vector<std::uint8_t> encode_png(const Raster& r) {
  detail::require_valid(r);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, r.samples.data(), 0, nullptr)) {
    fail(ErrorKind::data, std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, r.samples.data(), 0, nullptr)) {
    fail(ErrorKind::data, std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

}  // namespace covidx
