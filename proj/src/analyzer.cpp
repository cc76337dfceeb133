#include "lfyolo/analyzer.hpp"

#include <cstdio>
#include <sstream>

#include "lfyolo/errors.hpp"

namespace lfyolo {
namespace {

ComplexityRow to_row(const LayerDesc& d) {
  ComplexityRow r;
  r.layer = d.path;
  switch (d.kind) {
    case LayerKind::kConv:
      r.type = (d.groups > 1 && d.groups == d.c_in) ? "dwconv" : "conv";
      break;
    case LayerKind::kBatchNorm:
      r.type = "bn";
      break;
    case LayerKind::kMaxPool:
      r.type = "maxpool";
      break;
    case LayerKind::kUpsample:
      r.type = "upsample";
      break;
  }
  r.c_in = d.c_in;
  r.c_out = d.c_out;
  r.kernel = d.kind == LayerKind::kConv || d.kind == LayerKind::kMaxPool ? d.kernel : 0;
  r.stride = d.stride;
  r.dilation = d.dilation;
  r.out_h = d.out_h;
  r.out_w = d.out_w;
  r.params = d.params();
  r.macs = d.macs();
  return r;
}

void accumulate(ComplexityReport& report, const LayerDesc& d) {
  report.rows.push_back(to_row(d));
  report.total_params += d.params();
  report.total_macs += d.macs();
  if (d.kind == LayerKind::kConv) {
    report.breakdown.conv_weights += d.conv_weights();
    if (d.bias) report.breakdown.conv_biases += d.c_out;
  } else if (d.kind == LayerKind::kBatchNorm) {
    report.breakdown.bn_affine += 2 * d.c_out;
    report.breakdown.bn_stats += 2 * d.c_out;
  }
}

void close_group(ComplexityReport& report, ComplexityGroup g) {
  g.row_count = report.rows.size() - g.first_row;
  for (std::size_t i = g.first_row; i < report.rows.size(); ++i) {
    g.params += report.rows[i].params;
    g.macs += report.rows[i].macs;
  }
  if (g.row_count > 0) {
    const ComplexityRow& last = report.rows.back();
    g.out_c = last.c_out;
    g.out_h = last.out_h;
    g.out_w = last.out_w;
  }
  report.groups.push_back(std::move(g));
}

bool under(const std::string& path, const std::string& prefix) {
  return path == prefix ||
         (path.size() > prefix.size() && path.compare(0, prefix.size(), prefix) == 0 &&
          path[prefix.size()] == '.');
}

std::string stage_description(const Stage& st) {
  switch (st.type) {
    case Stage::Type::kCbl: {
      const auto& s = std::get<CblSpec>(st.spec);
      return "CBL " + std::to_string(s.kernel) + "x" + std::to_string(s.kernel);
    }
    case Stage::Type::kMaxPool:
      return "MaxPool " + std::to_string(std::get<int>(st.spec));
    case Stage::Type::kEfe:
      return "EFE";
    case Stage::Type::kRmf:
      return "RMF";
  }
  return "";
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return left ? s + fill : fill + s;
}

}  // namespace

ComplexityReport analyze_layers(const LayerList& layers, int input_h,
                                int input_w, const std::string& name) {
  ComplexityReport report;
  report.input_h = input_h;
  report.input_w = input_w;
  for (const LayerDesc& d : layers) accumulate(report, d);
  ComplexityGroup g;
  g.name = name;
  close_group(report, g);
  return report;
}

ComplexityReport analyze_model(const Model& model, int input_h, int input_w) {
  const LayerList layers = model.describe(input_h, input_w);
  ComplexityReport report;
  report.input_h = input_h;
  report.input_w = input_w;

  std::size_t i = 0;
  auto take_group = [&](const std::string& prefix, std::string name,
                        std::string description, int out_c = 0) {
    ComplexityGroup g;
    g.name = std::move(name);
    g.description = std::move(description);
    g.first_row = report.rows.size();
    while (i < layers.size() && under(layers[i].path, prefix)) {
      accumulate(report, layers[i]);
      ++i;
    }
    close_group(report, std::move(g));
    if (out_c > 0) report.groups.back().out_c = out_c;
  };

  for (const Stage& st : model.stages()) {
    std::string label = st.name;
    label[0] = 'S';
    take_group("backbone." + st.name, label, stage_description(st), st.c_out);
  }
  while (i < layers.size()) {
    const std::string& path = layers[i].path;
    const std::size_t dot1 = path.find('.');
    const std::size_t dot2 = path.find('.', dot1 + 1);
    const std::string kind = path.substr(0, dot1);
    const std::string scale = path.substr(dot1 + 1, dot2 - dot1 - 1);
    if (kind == "head") {
      const std::size_t dot3 = path.find('.', dot2 + 1);
      const std::string part = path.substr(dot2 + 1, dot3 - dot2 - 1);
      take_group(path.substr(0, dot3), "head " + scale + " " + part,
                 part == "reduce" ? "CBL 1x1" : part == "ghost" ? "Ghost 3x3" : "Conv 1x1");
    } else {
      take_group(kind + "." + scale, "route " + scale, "CBL 1x1 + up 2x");
    }
  }
  return report;
}

ComplexityReport analyze_model(const ModelConfig& config, int input_h,
                               int input_w) {
  return analyze_model(Model::build(config), input_h, input_w);
}

ComplexityReport analyze_efe(const EfeSpec& spec, int input_h, int input_w) {
  LayerList layers;
  describe(spec, "efe", Shape{1, spec.c_in, input_h, input_w}, layers);
  return analyze_layers(layers, input_h, input_w, "EFE");
}

ComplexityReport analyze_residual_ref(const ResidualRefSpec& spec, int input_h,
                                      int input_w) {
  LayerList layers;
  describe(spec, "residual", Shape{1, spec.c_in, input_h, input_w}, layers);
  return analyze_layers(layers, input_h, input_w, "Residual");
}

std::int64_t flops(std::int64_t macs, FlopsConvention convention) {
  return convention == FlopsConvention::kMac ? macs : 2 * macs;
}

FlopsConvention parse_flops_convention(const std::string& text) {
  if (text == "mac") return FlopsConvention::kMac;
  if (text == "madd") return FlopsConvention::kMultiplyAdd;
  throw ValidationError("flops convention must be 'mac' or 'madd', got '" +
                        text + "'");
}

std::string render_table(const ComplexityReport& report,
                         FlopsConvention convention, const std::string& title) {
  std::ostringstream out;
  out << title << " @ " << report.input_w << "x" << report.input_h << "\n";
  out << pad("Layer", 16, true) << pad("Type", 18, true) << pad("Output", 18, true)
      << pad("Params(M)", 11) << pad("FLOPs(G)", 11) << "\n";
  for (const ComplexityGroup& g : report.groups) {
    const std::string shape = std::to_string(g.out_c) + "x" +
                              std::to_string(g.out_h) + "x" +
                              std::to_string(g.out_w);
    out << pad(g.name, 16, true) << pad(g.description, 18, true)
        << pad(shape, 18, true) << pad(fixed(g.params / 1e6, 3), 11)
        << pad(fixed(flops(g.macs, convention) / 1e9, 3), 11) << "\n";
  }
  out << pad("Total", 52, true) << pad(fixed(report.total_params / 1e6, 1), 11)
      << pad(fixed(flops(report.total_macs, convention) / 1e9, 1), 11) << "\n";
  out << "params " << report.total_params << " (conv weights "
      << report.breakdown.conv_weights << ", conv biases "
      << report.breakdown.conv_biases << ", bn affine "
      << report.breakdown.bn_affine << ", bn stats "
      << report.breakdown.bn_stats << ")\n";
  out << "flops " << flops(report.total_macs, convention) << " ("
      << (convention == FlopsConvention::kMac ? "1 per multiply-accumulate"
                                              : "2 per multiply-accumulate")
      << ")\n";
  return out.str();
}

std::string render_csv(const ComplexityReport& report) {
  std::ostringstream out;
  out << "layer,type,c_in,c_out,kernel,stride,dilation,params,macs\n";
  for (const ComplexityRow& r : report.rows) {
    out << r.layer << ',' << r.type << ',' << r.c_in << ',' << r.c_out << ','
        << r.kernel << ',' << r.stride << ',' << r.dilation << ',' << r.params
        << ',' << r.macs << '\n';
  }
  return out.str();
}

}  // namespace lfyolo
