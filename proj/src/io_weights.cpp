#include <bit>
#include <cstring>
#include <map>

#include "lfyolo/errors.hpp"
#include "lfyolo/io.hpp"

namespace lfyolo::io {
namespace {

constexpr std::uint8_t kDtypeF32 = 0;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw WeightsError(source_ + ": truncated file while reading " + what +
                         " at offset " + std::to_string(pos_));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

std::string dims_str(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

std::vector<std::uint32_t> param_dims(const Parameter& p) {
  return {p.dims.begin(), p.dims.end()};
}

}  // namespace

std::string serialize_weights(const ParamStore& params) {
  std::string out(kWeightsMagic, 4);
  put_u32(out, kWeightsVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(kDtypeF32));
    out.push_back(static_cast<char>(p.dims.size()));
    for (int d : p.dims) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.value().data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

void save_weights(const ParamStore& params, const fs::path& path) {
  write_file_atomic(path, serialize_weights(params));
}

std::vector<WeightEntry> parse_weights(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kWeightsMagic, 4) != 0) {
    throw WeightsError(source + ": bad magic, not an LFYW weights file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion) {
    throw WeightsError(source + ": unsupported version " + std::to_string(version) +
                       " (expected " + std::to_string(kWeightsVersion) + ")");
  }
  const std::uint32_t count = r.u32("entry count");
  std::vector<WeightEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightEntry e;
    const std::uint32_t name_len = r.u32("name length");
    e.name = std::string(r.take(name_len, "name"));
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) {
      throw WeightsError(source + ": entry '" + e.name + "' has unsupported dtype " +
                         std::to_string(dtype));
    }
    const std::uint8_t rank = r.u8("rank");
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      e.dims.push_back(r.u32("dims"));
      numel *= e.dims.back();
    }
    if (numel > (bytes.size() - r.pos()) / 4) {
      throw WeightsError(source + ": truncated file in data of '" + e.name + "'");
    }
    e.data.resize(numel);
    for (auto& v : e.data) v = std::bit_cast<float>(r.u32("data"));
    if (!out.empty() && !(out.back().name < e.name)) {
      throw WeightsError(source + ": entries not in strictly ascending name order at '" +
                         e.name + "'");
    }
    out.push_back(std::move(e));
  }
  if (!r.done()) {
    throw WeightsError(source + ": " + std::to_string(bytes.size() - r.pos()) +
                       " trailing bytes after last entry");
  }
  return out;
}

void load_weights_bytes(std::string_view bytes, ParamStore& params,
                        const std::string& source) {
  const auto entries = parse_weights(bytes, source);
  std::map<std::string_view, const WeightEntry*> by_name;
  for (const auto& e : entries) by_name.emplace(e.name, &e);

  std::vector<std::string> problems;
  for (const auto& [name, p] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      problems.push_back(name + ": missing, expected " + dims_str(param_dims(p)));
    } else if (it->second->dims != param_dims(p)) {
      problems.push_back(name + ": expected " + dims_str(param_dims(p)) + ", found " +
                         dims_str(it->second->dims));
    }
  }
  for (const auto& e : entries) {
    if (!params.contains(e.name)) {
      problems.push_back(e.name + ": unexpected entry " + dims_str(e.dims));
    }
  }
  if (!problems.empty()) {
    std::string msg = source + ": weights do not match the model (" +
                      std::to_string(problems.size()) + " mismatches)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw WeightsError(msg);
  }
  for (auto& [name, p] : params) {
    const WeightEntry& e = *by_name.at(name);
    auto dst = p.value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = e.data[i];
  }
}

void load_weights(const fs::path& path, ParamStore& params) {
  load_weights_bytes(read_file(path), params, path.string());
}

}  // namespace lfyolo::io
