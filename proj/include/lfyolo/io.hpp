#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lfyolo/model.hpp"
#include "lfyolo/params.hpp"
#include "lfyolo/tensor.hpp"

namespace lfyolo::io {

namespace fs = std::filesystem;

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write leaves no partial output.
void write_file_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

// ------------------------------------------------------------------ config

/// `key = value` lines; '#' starts a comment. Absent keys keep defaults.
ModelConfig parse_config(std::string_view text, const std::string& source = "config");
ModelConfig load_config(const fs::path& path);

// ------------------------------------------------------------------ images

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

/// PNG (8-bit gray/RGB, alpha dropped) or PGM (P2/P5, maxval <= 255),
/// chosen by file signature.
Image read_image(const fs::path& path);
Image decode_png(std::span<const std::uint8_t> bytes, const std::string& source);
Image decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source);
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const fs::path& path, const Image& image);

/// (1, 3, H, W) tensor with values in [0, 1]; grayscale is replicated.
Tensor image_to_tensor(const Image& image);
/// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& input, int out_h, int out_w);
Tensor load_image(const fs::path& path, int target_h, int target_w);

/// Channels of batch item 0 tiled row-major, ceil(sqrt(C)) columns, each
/// min-max normalized on its own (constant channels become mid-gray) and
/// labeled with its index.
Image render_feature_grid(const Tensor& features);
void save_feature_grid(const Tensor& features, const fs::path& path);

/// Box outlines with "class score" labels; no detections leaves the image
/// untouched.
Image annotate(const Image& image, std::span<const Detection> detections);
void save_annotated_image(const Image& image, std::span<const Detection> detections,
                          const fs::path& path);

// ------------------------------------------------------------- annotations

struct AnnotatedBox {
  int class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const AnnotatedBox&) const = default;
  /// Pixel box in an image of the given size.
  Box to_box(double image_w, double image_h) const;
};

struct AnnotatedSample {
  fs::path image_path;
  std::vector<AnnotatedBox> boxes;
};

/// One `class cx cy w h` line per box. `num_classes` <= 0 skips the class
/// bound check.
std::vector<AnnotatedBox> parse_annotations(std::string_view text, int num_classes,
                                            const std::string& source = "annotations");
std::vector<AnnotatedBox> load_annotations(const fs::path& path, int num_classes);
std::string format_annotations(std::span<const AnnotatedBox> boxes);
void save_annotations(const fs::path& path, std::span<const AnnotatedBox> boxes);

/// Image paths, one per line, relative entries resolved against the
/// manifest's directory. Blank lines and '#' comments are skipped.
std::vector<fs::path> load_manifest(const fs::path& path);
fs::path annotation_path_for(const fs::path& image_path);

// ----------------------------------------------------------------- weights

inline constexpr char kWeightsMagic[4] = {'L', 'F', 'Y', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct WeightEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

std::string serialize_weights(const ParamStore& params);
void save_weights(const ParamStore& params, const fs::path& path);
std::vector<WeightEntry> parse_weights(std::string_view bytes, const std::string& source);
/// Verifies the file against `params` and copies values in; every missing,
/// unexpected, or mis-shaped entry is listed in the WeightsError.
void load_weights(const fs::path& path, ParamStore& params);
void load_weights_bytes(std::string_view bytes, ParamStore& params,
                        const std::string& source);

}  // namespace lfyolo::io
