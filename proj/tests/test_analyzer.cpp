#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lfyolo/analyzer.hpp"
#include "lfyolo/errors.hpp"
#include "lfyolo/io.hpp"

using namespace lfyolo;

namespace {

std::string one_decimal(double v) {
  std::ostringstream s;
  s.precision(1);
  s << std::fixed << v;
  return s.str();
}

// Parameter path prefix of an analyzer group name.
std::string group_prefix(const std::string& name) {
  if (name[0] == 'S') return "backbone.s" + name.substr(1) + ".";
  std::istringstream in(name);
  std::string kind, scale, part;
  in >> kind >> scale >> part;
  return kind + "." + scale + "." + (part.empty() ? "" : part + ".");
}

}  // namespace

TEST_CASE("residual reference block complexity") {
  const auto r = analyze_residual_ref(ResidualRefSpec{}, 208, 208);
  CHECK(r.breakdown.conv_weights == 622592);
  CHECK(r.breakdown.conv_biases == 0);
  CHECK(r.breakdown.bn_affine == 2 * (256 + 128 + 256));
  CHECK(r.total_macs == 622592LL * 208 * 208);
  CHECK(one_decimal(r.breakdown.conv_weights / 1e6) == "0.6");
  CHECK(one_decimal(r.total_macs / 1e9) == "26.9");
  CHECK(std::abs(r.total_macs / 1e9 - 27.0) / 27.0 < 0.03);
}

TEST_CASE("EFE block complexity") {
  const auto r = analyze_efe(EfeSpec{128, 256}, 208, 208);
  CHECK(r.breakdown.conv_weights == 197760);
  CHECK(r.total_macs == 197760LL * 208 * 208);
  CHECK(one_decimal(r.total_params / 1e6) == "0.2");
  CHECK(std::abs(r.total_macs / 1e9 - 9.1) / 9.1 < 0.10);
}

TEST_CASE("totals are column sums and stride-1 conv rows obey the MAC law") {
  const auto r = analyze_model(ModelConfig{}, 320, 320);
  std::int64_t params = 0, macs = 0;
  for (const auto& row : r.rows) {
    params += row.params;
    macs += row.macs;
    if ((row.type == "conv" || row.type == "dwconv") && row.stride == 1) {
      const std::int64_t weights = static_cast<std::int64_t>(row.kernel) * row.kernel *
                                   row.c_out * (row.type == "dwconv" ? 1 : row.c_in);
      CHECK(row.macs == weights * row.out_h * row.out_w);
    }
    if (row.type == "bn" || row.type == "maxpool" || row.type == "upsample") CHECK(row.macs == 0);
  }
  CHECK(params == r.total_params);
  CHECK(macs == r.total_macs);
  CHECK(r.total_params == r.breakdown.total());
  std::int64_t group_params = 0, group_macs = 0;
  for (const auto& g : r.groups) {
    group_params += g.params;
    group_macs += g.macs;
  }
  CHECK(group_params == r.total_params);
  CHECK(group_macs == r.total_macs);
}

TEST_CASE("doubling the resolution quadruples every conv row") {
  const auto a = analyze_model(ModelConfig{}, 320, 320);
  const auto b = analyze_model(ModelConfig{}, 640, 640);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(b.rows[i].macs == 4 * a.rows[i].macs);
    CHECK(b.rows[i].params == a.rows[i].params);
  }
  CHECK(b.total_macs == 4 * a.total_macs);
  CHECK(b.breakdown.conv_weights == a.breakdown.conv_weights);
}

TEST_CASE("complexity grows with the width multiplier") {
  const auto half = analyze_model(ModelConfig::with_multiplier(0.5), 320, 320);
  const auto one = analyze_model(ModelConfig::with_multiplier(1.0), 320, 320);
  const auto more = analyze_model(ModelConfig::with_multiplier(1.25), 320, 320);
  CHECK(half.total_params < one.total_params);
  CHECK(one.total_params < more.total_params);
  CHECK(half.total_macs < one.total_macs);
  CHECK(one.total_macs < more.total_macs);
}

TEST_CASE("single 1x1 conv with bias counts two parameters") {
  LayerDesc d;
  d.path = "p";
  d.c_in = 1;
  d.c_out = 1;
  d.bias = true;
  d.out_h = 3;
  d.out_w = 3;
  const auto r = analyze_layers({d}, 3, 3);
  CHECK(r.total_params == 2);
  CHECK(r.breakdown.conv_weights == 1);
  CHECK(r.breakdown.conv_biases == 1);
  CHECK(r.total_macs == 9);
}

TEST_CASE("analyzer parameters equal the serialized parameters of every block") {
  Model m = Model::build(ModelConfig::with_multiplier(0.5));
  const auto entries = io::parse_weights(io::serialize_weights(m.params()), "model");
  const auto r = analyze_model(m, 320, 320);
  REQUIRE(r.groups.size() == 20 + 9 + 2);
  std::size_t covered = 0;
  for (const auto& g : r.groups) {
    const std::string prefix = group_prefix(g.name);
    std::int64_t serialized = 0;
    for (const auto& e : entries)
      if (e.name.starts_with(prefix)) serialized += static_cast<std::int64_t>(e.data.size());
    INFO(g.name << " -> " << prefix);
    CHECK(serialized == g.params);
    covered += static_cast<std::size_t>(serialized);
  }
  CHECK(covered == m.params().total_elements());
  CHECK(r.total_params == static_cast<std::int64_t>(m.params().total_elements()));
}

TEST_CASE("group output dims follow the stages") {
  const auto r = analyze_model(ModelConfig{}, 320, 320);
  CHECK(r.groups[0].name == "S1");
  CHECK(r.groups[19].name == "S20");
  CHECK(r.groups[19].out_c == 6144);
  CHECK(r.groups[19].out_h == 10);
  CHECK(r.groups[1].out_c == 16);
  CHECK(r.groups[1].out_h == 160);
}

TEST_CASE("rendering") {
  const auto r = analyze_residual_ref(ResidualRefSpec{}, 208, 208);
  const std::string csv = render_csv(r);
  CHECK(csv.starts_with("layer,type,c_in,c_out,kernel,stride,dilation,params,macs\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(r.rows.size() + 1));
  const std::string mac = render_table(r, FlopsConvention::kMac, "Residual");
  CHECK(mac.find("0.6") != std::string::npos);
  CHECK(mac.find("26.9") != std::string::npos);
  const std::string madd = render_table(r, FlopsConvention::kMultiplyAdd, "Residual");
  CHECK(madd.find("53.9") != std::string::npos);
  CHECK(flops(10, FlopsConvention::kMultiplyAdd) == 20);
  CHECK(parse_flops_convention("madd") == FlopsConvention::kMultiplyAdd);
  CHECK_THROWS_AS(parse_flops_convention("gmac"), ValidationError);
}
