#include <png.h>

#include <cctype>
#include <cstdio>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

#include "lfyolo/errors.hpp"
#include "lfyolo/io.hpp"

namespace lfyolo::io {
namespace {

// 3x5 glyphs, one row per entry, bit 2 = leftmost column.
constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigits{{
    {7, 5, 5, 5, 7},  // 0
    {2, 6, 2, 2, 7},  // 1
    {7, 1, 7, 4, 7},  // 2
    {7, 1, 7, 1, 7},  // 3
    {5, 5, 7, 1, 1},  // 4
    {7, 4, 7, 1, 7},  // 5
    {7, 4, 7, 5, 7},  // 6
    {7, 1, 1, 1, 1},  // 7
    {7, 5, 7, 5, 7},  // 8
    {7, 5, 7, 1, 7},  // 9
}};
constexpr std::array<std::uint8_t, 5> kDot{0, 0, 0, 0, 2};
constexpr int kGlyphW = 3;
constexpr int kGlyphH = 5;
constexpr int kGlyphAdvance = kGlyphW + 1;

const std::array<std::uint8_t, 5>* glyph(char c) {
  if (c >= '0' && c <= '9') return &kDigits[c - '0'];
  if (c == '.') return &kDot;
  return nullptr;
}

int text_width(const std::string& text) {
  return text.empty() ? 0 : static_cast<int>(text.size()) * kGlyphAdvance - 1;
}

void put(Image& img, int x, int y, const std::array<std::uint8_t, 3>& rgb) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int c = 0; c < img.channels; ++c) img.at(x, y, c) = rgb[img.channels == 1 ? 0 : c];
}

void draw_text(Image& img, int x, int y, const std::string& text,
               const std::array<std::uint8_t, 3>& rgb) {
  for (char ch : text) {
    if (const auto* g = glyph(ch)) {
      for (int r = 0; r < kGlyphH; ++r) {
        for (int col = 0; col < kGlyphW; ++col) {
          if ((*g)[r] & (4 >> col)) put(img, x + col, y + r, rgb);
        }
      }
    }
    x += kGlyphAdvance;
  }
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1,
               const std::array<std::uint8_t, 3>& rgb) {
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) put(img, x, y, rgb);
  }
}

std::array<std::uint8_t, 3> class_color(int class_id) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette{{
      {255, 64, 64}, {64, 200, 64}, {64, 128, 255},
      {255, 200, 0}, {200, 64, 255}, {0, 220, 220}}};
  return kPalette[static_cast<std::size_t>(class_id) % kPalette.size()];
}

bool has_prefix(std::span<const std::uint8_t> bytes, std::string_view magic) {
  return bytes.size() >= magic.size() &&
         std::memcmp(bytes.data(), magic.data(), magic.size()) == 0;
}

}  // namespace

Image decode_png(std::span<const std::uint8_t> bytes, const std::string& source) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw IoError(source + ": unreadable PNG: " + png.message);
  }
  if (png.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&png);
    throw FormatError(source + ": 16-bit PNG is not supported (8-bit gray or RGB only)");
  }
  Image img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  const bool color = png.format & PNG_FORMAT_FLAG_COLOR;
  img.channels = color ? 3 : 1;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(source + ": corrupt PNG: " + msg);
  }
  return img;
}

Image decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source) {
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    long v = 0;
    const std::size_t begin = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1 << 20) throw FormatError(source + ": PGM " + what + " too large");
      ++pos;
    }
    if (pos == begin) throw IoError(source + ": corrupt PGM header (" + what + ")");
    return static_cast<int>(v);
  };
  const bool binary = bytes[1] == '5';
  Image img;
  img.channels = 1;
  img.width = read_int("width");
  img.height = read_int("height");
  const int maxval = read_int("maxval");
  if (img.width <= 0 || img.height <= 0 || maxval <= 0) {
    throw IoError(source + ": corrupt PGM header");
  }
  if (maxval > 255) {
    throw FormatError(source + ": PGM maxval " + std::to_string(maxval) +
                      " (16-bit) is not supported");
  }
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height;
  img.pixels.resize(count);
  auto scale = [maxval](int v) {
    return static_cast<std::uint8_t>(std::lround(v * 255.0 / maxval));
  };
  if (binary) {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + count) throw IoError(source + ": truncated PGM data");
    for (std::size_t i = 0; i < count; ++i) img.pixels[i] = scale(bytes[pos + i]);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const int v = read_int("pixel");
      if (v > maxval) throw IoError(source + ": PGM pixel exceeds maxval");
      img.pixels[i] = scale(v);
    }
  }
  return img;
}

Image read_image(const fs::path& path) {
  const std::string data = read_file(path);
  const std::span<const std::uint8_t> bytes(
      reinterpret_cast<const std::uint8_t*>(data.data()), data.size());
  if (has_prefix(bytes, "\x89PNG")) return decode_png(bytes, path.string());
  if (has_prefix(bytes, "P5") || has_prefix(bytes, "P2")) return decode_pgm(bytes, path.string());
  throw FormatError(path.string() + ": not a PNG or PGM image");
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width <= 0 || image.height <= 0 ||
      (image.channels != 1 && image.channels != 3) ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ContractError("encode_png: inconsistent image buffer");
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

void write_png(const fs::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                           bytes.size()));
}

Tensor image_to_tensor(const Image& image) {
  Tensor t(Shape{1, 3, image.height, image.width});
  for (int c = 0; c < 3; ++c) {
    const int src_c = image.channels == 1 ? 0 : c;
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        t.at(0, c, y, x) = image.at(x, y, src_c) / 255.0;
      }
    }
  }
  return t;
}

Tensor resize_bilinear(const Tensor& input, int out_h, int out_w) {
  const Shape s = input.shape();
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize target must be positive");
  if (s.h == out_h && s.w == out_w) return input;
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, in - 1.0);
      const int i0 = static_cast<int>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return t;
  };
  const auto ty = taps(s.h, out_h);
  const auto tx = taps(s.w, out_w);
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
          const Tap& a = ty[y];
          const Tap& b = tx[x];
          const double top = input.at(n, c, a.i0, b.i0) * (1 - b.f) + input.at(n, c, a.i0, b.i1) * b.f;
          const double bot = input.at(n, c, a.i1, b.i0) * (1 - b.f) + input.at(n, c, a.i1, b.i1) * b.f;
          out.at(n, c, y, x) = top * (1 - a.f) + bot * a.f;
        }
      }
    }
  }
  return out;
}

Tensor load_image(const fs::path& path, int target_h, int target_w) {
  return resize_bilinear(image_to_tensor(read_image(path)), target_h, target_w);
}

Image render_feature_grid(const Tensor& features) {
  const Shape s = features.shape();
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("feature grid needs at least one channel, got " + s.str());
  }
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(s.c))));
  const int rows = (s.c + cols - 1) / cols;
  const int label_h = kGlyphH + 2;
  const int cell_w = std::max(s.w, text_width(std::to_string(s.c - 1))) + 2;
  const int cell_h = s.h + label_h + 2;

  Image img;
  img.channels = 1;
  img.width = cols * cell_w;
  img.height = rows * cell_h;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);

  for (int c = 0; c < s.c; ++c) {
    const int ox = (c % cols) * cell_w + 1;
    const int oy = (c / cols) * cell_h + 1;
    draw_text(img, ox, oy, std::to_string(c), {255, 255, 255});
    const std::span<const double> plane(features.plane(0, c), s.plane());
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    const double range = *hi - *lo;
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const double v = plane[static_cast<std::size_t>(y) * s.w + x];
        const std::uint8_t g = range > 0.0
            ? static_cast<std::uint8_t>(std::lround((v - *lo) / range * 255.0))
            : 128;
        img.at(ox + x, oy + label_h + y, 0) = g;
      }
    }
  }
  return img;
}

void save_feature_grid(const Tensor& features, const fs::path& path) {
  write_png(path, render_feature_grid(features));
}

Image annotate(const Image& image, std::span<const Detection> detections) {
  if (detections.empty()) return image;
  Image out;
  out.width = image.width;
  out.height = image.height;
  out.channels = 3;
  out.pixels.resize(static_cast<std::size_t>(image.width) * image.height * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = image.at(x, y, image.channels == 1 ? 0 : c);
      }
    }
  }
  for (const Detection& d : detections) {
    const auto color = class_color(d.class_id);
    const int x0 = static_cast<int>(std::floor(d.box.x_min));
    const int y0 = static_cast<int>(std::floor(d.box.y_min));
    const int x1 = static_cast<int>(std::ceil(d.box.x_max)) - 1;
    const int y1 = static_cast<int>(std::ceil(d.box.y_max)) - 1;
    fill_rect(out, x0, y0, x1 + 1, y0 + 1, color);
    fill_rect(out, x0, y1, x1 + 1, y1 + 1, color);
    fill_rect(out, x0, y0, x0 + 1, y1 + 1, color);
    fill_rect(out, x1, y0, x1 + 1, y1 + 1, color);

    char score[16];
    std::snprintf(score, sizeof score, "%.2f", d.score);
    const std::string label = std::to_string(d.class_id) + " " + score;
    const int ly = y0 - kGlyphH - 2 >= 0 ? y0 - kGlyphH - 2 : y0 + 1;
    fill_rect(out, x0, ly, x0 + text_width(label) + 2, ly + kGlyphH + 2, color);
    draw_text(out, x0 + 1, ly + 1, label, {0, 0, 0});
  }
  return out;
}

void save_annotated_image(const Image& image, std::span<const Detection> detections,
                          const fs::path& path) {
  write_png(path, annotate(image, detections));
}

}  // namespace lfyolo::io
