#include <charconv>
#include <cmath>
#include <sstream>

#include "lfyolo/errors.hpp"
#include "lfyolo/io.hpp"

namespace lfyolo::io {
namespace {

constexpr double kSlack = 1e-6;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

void append_number(std::string& out, double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, r.ptr);
}

}  // namespace

Box AnnotatedBox::to_box(double image_w, double image_h) const {
  return Box::from_center(cx * image_w, cy * image_h, w * image_w, h * image_h);
}

std::vector<AnnotatedBox> parse_annotations(std::string_view text, int num_classes,
                                            const std::string& source) {
  std::vector<AnnotatedBox> out;
  int line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    const std::string_view line = trim(text.substr(start, end - start));
    start = end == std::string_view::npos ? text.size() : end + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);

    const auto f = fields(line);
    if (f.size() != 5) {
      throw ParseError(where + ": expected 'class cx cy w h', got " +
                       std::to_string(f.size()) + " fields");
    }
    AnnotatedBox b;
    if (!parse_number(f[0], b.class_id)) {
      throw ParseError(where + ": class '" + std::string(f[0]) + "' is not an integer");
    }
    double* values[] = {&b.cx, &b.cy, &b.w, &b.h};
    for (int i = 0; i < 4; ++i) {
      if (!parse_number(f[i + 1], *values[i]) || !std::isfinite(*values[i])) {
        throw ParseError(where + ": '" + std::string(f[i + 1]) + "' is not a number");
      }
    }
    if (b.class_id < 0 || (num_classes > 0 && b.class_id >= num_classes)) {
      throw ValidationError(where + ": class " + std::to_string(b.class_id) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (!(b.w > 0.0 && b.h > 0.0)) {
      throw ValidationError(where + ": box width and height must be positive");
    }
    if (b.cx - b.w / 2 < -kSlack || b.cx + b.w / 2 > 1.0 + kSlack ||
        b.cy - b.h / 2 < -kSlack || b.cy + b.h / 2 > 1.0 + kSlack) {
      throw ValidationError(where + ": box extends outside the normalized image [0, 1]");
    }
    out.push_back(b);
  }
  return out;
}

std::vector<AnnotatedBox> load_annotations(const fs::path& path, int num_classes) {
  return parse_annotations(read_file(path), num_classes, path.string());
}

std::string format_annotations(std::span<const AnnotatedBox> boxes) {
  std::string out;
  for (const AnnotatedBox& b : boxes) {
    out += std::to_string(b.class_id);
    for (double v : {b.cx, b.cy, b.w, b.h}) {
      out += ' ';
      append_number(out, v);
    }
    out += '\n';
  }
  return out;
}

void save_annotations(const fs::path& path, std::span<const AnnotatedBox> boxes) {
  write_file_atomic(path, format_annotations(boxes));
}

std::vector<fs::path> load_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  const fs::path base = path.parent_path();
  std::vector<fs::path> out;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const fs::path p(line);
    out.push_back(p.is_absolute() ? p : base / p);
  }
  return out;
}

fs::path annotation_path_for(const fs::path& image_path) {
  fs::path p = image_path;
  p.replace_extension(".txt");
  return p;
}

}  // namespace lfyolo::io
