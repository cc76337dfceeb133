#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "lfyolo/errors.hpp"
#include "lfyolo/io.hpp"

namespace lfyolo::io {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

class LineParser {
 public:
  LineParser(const std::string& source, int line) : source_(source), line_(line) {}

  std::string where() const { return source_ + ":" + std::to_string(line_); }

  double number(std::string_view text, std::string_view key) const {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() ||
        !std::isfinite(v)) {
      throw ParseError(where() + ": " + std::string(key) + ": '" +
                       std::string(text) + "' is not a number");
    }
    return v;
  }

  int integer(std::string_view text, std::string_view key) const {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
      throw ParseError(where() + ": " + std::string(key) + ": '" +
                       std::string(text) + "' is not an integer");
    }
    return v;
  }

  std::pair<int, int> size(std::string_view text, std::string_view key) const {
    const auto x = text.find('x');
    if (x == std::string_view::npos) {
      const int s = integer(text, key);
      return {s, s};
    }
    return {integer(trim(text.substr(0, x)), key), integer(trim(text.substr(x + 1)), key)};
  }

 private:
  const std::string& source_;
  int line_;
};

}  // namespace

ModelConfig parse_config(std::string_view text, const std::string& source) {
  std::optional<double> multiplier;
  std::optional<int> num_classes;
  std::optional<std::pair<int, int>> input_wh;
  std::optional<std::array<Anchor, 9>> anchors;
  std::optional<std::array<int, kNumHeads>> strides;
  std::optional<double> conf;
  std::optional<double> nms;
  std::set<std::string, std::less<>> seen;

  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    std::string_view line = text.substr(start, end - start);
    start = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;

    const LineParser p(source, line_no);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError(p.where() + ": expected 'key = value'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError(p.where() + ": duplicate key '" + std::string(key) + "'");
    }

    if (key == "width_multiplier") {
      multiplier = p.number(value, key);
      if (!(*multiplier > 0.0)) {
        throw ConfigError(p.where() + ": width_multiplier must be positive");
      }
    } else if (key == "num_classes") {
      num_classes = p.integer(value, key);
    } else if (key == "input_size") {
      input_wh = p.size(value, key);
    } else if (key == "anchors") {
      const auto pairs = split(value, ',');
      if (pairs.size() != 9) {
        throw ConfigError(p.where() + ": anchors needs 9 WxH pairs, got " +
                          std::to_string(pairs.size()));
      }
      std::array<Anchor, 9> a;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto x = pairs[i].find('x');
        if (x == std::string_view::npos) {
          throw ParseError(p.where() + ": anchor '" + std::string(pairs[i]) +
                           "' is not WxH");
        }
        a[i].w = p.number(trim(pairs[i].substr(0, x)), key);
        a[i].h = p.number(trim(pairs[i].substr(x + 1)), key);
      }
      anchors = a;
    } else if (key == "strides") {
      const auto parts = split(value, ',');
      if (parts.size() != kNumHeads) {
        throw ConfigError(p.where() + ": strides needs 3 values");
      }
      std::array<int, kNumHeads> s{};
      for (int i = 0; i < kNumHeads; ++i) s[i] = p.integer(parts[i], key);
      strides = s;
    } else if (key == "conf_threshold") {
      conf = p.number(value, key);
    } else if (key == "nms_iou") {
      nms = p.number(value, key);
    } else {
      throw ConfigError(p.where() + ": unknown key '" + std::string(key) + "'");
    }
  }

  const auto [w, h] = input_wh.value_or(std::pair{320, 320});
  ModelConfig cfg = ModelConfig::with_multiplier(multiplier.value_or(1.0),
                                                 num_classes.value_or(3), w);
  cfg.input_w = w;
  cfg.input_h = h;
  cfg.anchors = anchors.value_or(default_anchors(h, w));
  if (strides) cfg.strides = *strides;
  if (conf) cfg.conf_threshold = *conf;
  if (nms) cfg.nms_iou = *nms;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

ModelConfig load_config(const fs::path& path) {
  return parse_config(read_file(path), path.string());
}

}  // namespace lfyolo::io
