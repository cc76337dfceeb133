#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lfyolo/autodiff.hpp"

namespace lfyolo {

enum class ParamKind {
  kConvWeight,
  kConvBias,
  kBnGamma,
  kBnBeta,
  kBnRunningMean,
  kBnRunningVar,
};

const char* to_string(ParamKind kind);

struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::kConvWeight;
  std::vector<int> dims;  // logical dims as serialized (rank 1 or 4)
  ad::Var var;

  bool trainable() const {
    return kind != ParamKind::kBnRunningMean && kind != ParamKind::kBnRunningVar;
  }
  const Tensor& value() const { return var.value(); }
  Tensor& value() { return var.mutable_value(); }
};

/// Named parameters addressed by hierarchical dotted path, ordered by name.
class ParamStore {
 public:
  Parameter& add(std::string name, ParamKind kind, std::vector<int> dims);

  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  /// Elements of all parameters whose name starts with `prefix`.
  std::size_t elements_under(std::string_view prefix) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

 private:
  std::map<std::string, Parameter, std::less<>> params_;
};

/// A view of a ParamStore rooted at a path prefix.
class LayerParams {
 public:
  LayerParams(ParamStore& store, std::string prefix)
      : store_(&store), prefix_(std::move(prefix)) {}

  LayerParams sub(std::string_view name) const;
  Parameter& at(std::string_view name) const;
  const std::string& prefix() const { return prefix_; }
  ParamStore& store() const { return *store_; }

 private:
  ParamStore* store_;
  std::string prefix_;
};

std::string join_path(std::string_view prefix, std::string_view name);

}  // namespace lfyolo
