#include "lfyolo/params.hpp"

#include "lfyolo/errors.hpp"

namespace lfyolo {

const char* to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::kConvWeight: return "conv_weight";
    case ParamKind::kConvBias: return "conv_bias";
    case ParamKind::kBnGamma: return "bn_gamma";
    case ParamKind::kBnBeta: return "bn_beta";
    case ParamKind::kBnRunningMean: return "bn_running_mean";
    case ParamKind::kBnRunningVar: return "bn_running_var";
  }
  return "unknown";
}

std::string join_path(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  if (name.empty()) return std::string(prefix);
  std::string out(prefix);
  out += '.';
  out += name;
  return out;
}

Parameter& ParamStore::add(std::string name, ParamKind kind,
                           std::vector<int> dims) {
  if (params_.contains(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  Shape shape{1, 1, 1, 1};
  if (dims.size() == 1) {
    shape.c = dims[0];
  } else if (dims.size() == 4) {
    shape = Shape{dims[0], dims[1], dims[2], dims[3]};
  } else {
    throw ConfigError("parameter '" + name + "' must have rank 1 or 4");
  }
  Parameter p{name, kind, std::move(dims),
              ad::Var(Tensor(shape), kind != ParamKind::kBnRunningMean &&
                                         kind != ParamKind::kBnRunningVar)};
  if (kind == ParamKind::kBnGamma || kind == ParamKind::kBnRunningVar) {
    p.value().fill(1.0);
  }
  auto [it, inserted] = params_.emplace(std::move(name), std::move(p));
  return it->second;
}

Parameter& ParamStore::at(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
  }
  return it->second;
}

const Parameter& ParamStore::at(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
  }
  return it->second;
}

bool ParamStore::contains(std::string_view name) const {
  return params_.find(name) != params_.end();
}

std::size_t ParamStore::total_elements() const {
  std::size_t total = 0;
  for (const auto& [name, p] : params_) total += p.value().numel();
  return total;
}

std::size_t ParamStore::elements_under(std::string_view prefix) const {
  std::size_t total = 0;
  for (const auto& [name, p] : params_) {
    if (name.size() > prefix.size() && name.starts_with(prefix) &&
        name[prefix.size()] == '.') {
      total += p.value().numel();
    }
  }
  return total;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.var.zero_grad();
}

LayerParams LayerParams::sub(std::string_view name) const {
  return LayerParams(*store_, join_path(prefix_, name));
}

Parameter& LayerParams::at(std::string_view name) const {
  return store_->at(join_path(prefix_, name));
}

}  // namespace lfyolo
