#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfyolo/blocks.hpp"
#include "lfyolo/model.hpp"

namespace lfyolo {

enum class FlopsConvention { kMac, kMultiplyAdd };

struct ComplexityRow {
  std::string layer;
  std::string type;  // conv, dwconv, bn, maxpool, upsample
  int c_in = 0;
  int c_out = 0;
  int kernel = 0;
  int stride = 1;
  int dilation = 1;
  int out_h = 0;
  int out_w = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct ParamBreakdown {
  std::int64_t conv_weights = 0;
  std::int64_t conv_biases = 0;
  std::int64_t bn_affine = 0;
  std::int64_t bn_stats = 0;

  std::int64_t total() const {
    return conv_weights + conv_biases + bn_affine + bn_stats;
  }
};

/// A named run of consecutive rows (a backbone stage, a head, a route).
struct ComplexityGroup {
  std::string name;
  std::string description;
  std::size_t first_row = 0;
  std::size_t row_count = 0;
  int out_c = 0;
  int out_h = 0;
  int out_w = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct ComplexityReport {
  int input_h = 0;
  int input_w = 0;
  std::vector<ComplexityRow> rows;
  std::vector<ComplexityGroup> groups;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  ParamBreakdown breakdown;
};

/// Rows and totals for a flat layer list (a single group named `name`).
ComplexityReport analyze_layers(const LayerList& layers, int input_h,
                                int input_w, const std::string& name = "");

ComplexityReport analyze_model(const Model& model, int input_h, int input_w);
ComplexityReport analyze_model(const ModelConfig& config, int input_h,
                               int input_w);

/// Blocks described at c_in channels and h x w input.
ComplexityReport analyze_efe(const EfeSpec& spec, int input_h, int input_w);
ComplexityReport analyze_residual_ref(const ResidualRefSpec& spec, int input_h,
                                      int input_w);

/// Reported FLOPs for a MAC count under the convention.
std::int64_t flops(std::int64_t macs, FlopsConvention convention);

/// Aligned table: one line per group, one-decimal Params(M) / FLOPs(G)
/// totals and the itemized parameter breakdown.
std::string render_table(const ComplexityReport& report,
                         FlopsConvention convention, const std::string& title);

/// `layer,type,c_in,c_out,kernel,stride,dilation,params,macs`
std::string render_csv(const ComplexityReport& report);

FlopsConvention parse_flops_convention(const std::string& text);

}  // namespace lfyolo
