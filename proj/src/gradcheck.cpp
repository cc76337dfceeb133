#include "lfyolo/gradcheck.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "lfyolo/blocks.hpp"
#include "lfyolo/errors.hpp"
#include "lfyolo/loss.hpp"

namespace lfyolo {
namespace {

constexpr double kOpTolerance = 1e-6;
constexpr double kBlockTolerance = 1e-5;
constexpr std::size_t kCoordsPerLeaf = 24;

class Fixture {
 public:
  explicit Fixture(std::uint64_t seed) : rng_(seed) {}

  Tensor random(Shape s, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    Tensor t(s);
    for (double& v : t.data()) v = d(rng_);
    return t;
  }

  ad::Var leaf(Shape s, double scale = 1.0) {
    ad::Var v(random(s, scale), true);
    leaves_.push_back(v);
    return v;
  }

  /// Allocates the layers' parameters with random values (BN affine
  /// included) and registers the trainable ones as leaves.
  void params_for(const LayerList& layers) {
    allocate_params(layers, store_);
    init_conv_weights(store_, rng_());
    std::normal_distribution<double> d(0.0, 0.3);
    for (auto& [name, p] : store_) {
      if (p.kind == ParamKind::kBnGamma) {
        for (double& v : p.value().data()) v = 1.0 + d(rng_);
      } else if (p.kind == ParamKind::kBnBeta || p.kind == ParamKind::kConvBias) {
        for (double& v : p.value().data()) v = d(rng_);
      }
      if (p.trainable()) leaves_.push_back(p.var);
    }
  }

  LayerParams root(const std::string& prefix) { return LayerParams(store_, prefix); }

  /// Scalar objective: a fixed random projection of the output with
  /// weights of magnitude in [0.5, 1.5].
  ad::Var project(const ad::Var& out) {
    if (projection_.empty()) {
      std::uniform_real_distribution<double> mag(0.5, 1.5);
      std::bernoulli_distribution sign(0.5);
      projection_ = Tensor(out.shape());
      for (double& v : projection_.data()) v = sign(rng_) ? mag(rng_) : -mag(rng_);
    }
    return ad::weighted_sum(out, projection_);
  }

  double check(const std::function<ad::Var()>& fn, bool corrupt, std::uint64_t seed) {
    ad::FiniteDiffOptions opt;
    opt.max_coords_per_leaf = kCoordsPerLeaf;
    opt.seed = seed;
    opt.corrupt_analytic = corrupt;
    return ad::finite_diff_check(fn, leaves_, opt);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  ParamStore store_;
  std::vector<ad::Var> leaves_;
  Tensor projection_;
};

template <typename Spec>
double check_block(const Spec& spec, Shape in, std::uint64_t seed, bool corrupt,
                   ad::Var (*forward)(const ad::Var&, const Spec&, const LayerParams&,
                                      const ForwardContext&)) {
  Fixture f(seed);
  LayerList layers;
  describe(spec, "b", in, layers);
  ad::Var x = f.leaf(in);
  f.params_for(layers);
  const LayerParams lp = f.root("b");
  return f.check([&] { return f.project(forward(x, spec, lp, ForwardContext{true})); },
                 corrupt, seed);
}

double check_loss(std::uint64_t seed, bool corrupt) {
  Fixture f(seed);
  ModelConfig cfg = ModelConfig::with_multiplier(0.25, 2, 64);
  std::vector<std::vector<io::AnnotatedBox>> boxes = {
      {{0, 0.31, 0.42, 0.22, 0.35}, {1, 0.71, 0.64, 0.5, 0.4}},
      {{1, 0.52, 0.47, 0.12, 0.18}}};
  const TargetMap targets = assign_targets(boxes, cfg);
  std::vector<ad::Var> heads;
  for (int h = 0; h < kNumHeads; ++h) {
    const int g = cfg.input_h / cfg.strides[h];
    heads.push_back(f.leaf(Shape{2, cfg.head_channels(), g, g}, 0.5));
  }
  return f.check([&] { return total_loss(heads, targets, cfg).total; }, corrupt, seed);
}

double check_op(const std::string& block, std::uint64_t seed, bool corrupt) {
  Fixture f(seed);
  if (block == "conv") {
    ad::Var x = f.leaf({2, 4, 7, 7});
    ad::Var w = f.leaf({6, 2, 3, 3});
    ad::Var b = f.leaf({1, 6, 1, 1});
    return f.check([&] { return f.project(ad::conv2d(x, w, b, {2, 2, 2, 2})); }, corrupt, seed);
  }
  if (block == "maxpool") {
    ad::Var x = f.leaf({2, 3, 7, 7});
    return f.check([&] { return f.project(ad::maxpool2d(x, 3, 2, 1)); }, corrupt, seed);
  }
  if (block == "batchnorm") {
    ad::Var x = f.leaf({3, 3, 4, 4});
    Tensor mean(Shape{1, 3, 1, 1}, 0.0);
    Tensor var(Shape{1, 3, 1, 1}, 1.0);
    ad::BatchNormState st;
    st.gamma = f.leaf({1, 3, 1, 1});
    st.beta = f.leaf({1, 3, 1, 1});
    st.running_mean = &mean;
    st.running_var = &var;
    return f.check([&] { return f.project(ad::batchnorm(x, st, true)); }, corrupt, seed);
  }
  if (block == "leaky_relu") {
    ad::Var x = f.leaf({2, 3, 5, 5});
    return f.check([&] { return f.project(ad::leaky_relu(x, kLeakySlope)); }, corrupt, seed);
  }
  if (block == "sigmoid") {
    ad::Var x = f.leaf({2, 3, 5, 5});
    return f.check([&] { return f.project(ad::sigmoid(x)); }, corrupt, seed);
  }
  if (block == "concat") {
    ad::Var a = f.leaf({2, 2, 4, 4});
    ad::Var b = f.leaf({2, 3, 4, 4});
    return f.check([&] {
      const ad::Var parts[] = {a, b, a};
      return f.project(ad::concat_channels(parts));
    }, corrupt, seed);
  }
  if (block == "add") {
    ad::Var a = f.leaf({2, 3, 4, 4});
    ad::Var b = f.leaf({2, 3, 4, 4});
    return f.check([&] { return f.project(ad::add(a, b)); }, corrupt, seed);
  }
  if (block == "upsample") {
    ad::Var x = f.leaf({2, 3, 3, 4});
    return f.check([&] { return f.project(ad::upsample_nearest_2x(x)); }, corrupt, seed);
  }
  throw ValidationError("unknown gradcheck block '" + block + "'");
}

bool is_composite(const std::string& block) {
  return block == "ghost" || block == "gdconv" || block == "efe" || block == "rmf" ||
         block == "loss";
}

}  // namespace

const std::vector<std::string>& gradcheck_blocks() {
  static const std::vector<std::string> kBlocks = {
      "conv", "maxpool", "batchnorm", "leaky_relu", "sigmoid", "concat", "add",
      "upsample", "ghost", "gdconv", "efe", "rmf", "loss"};
  return kBlocks;
}

GradcheckResult run_gradcheck(const std::string& block, std::uint64_t seed,
                              bool corrupt_analytic) {
  const auto& names = gradcheck_blocks();
  if (std::find(names.begin(), names.end(), block) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ValidationError("unknown gradcheck block '" + block + "' (valid: " + valid + ")");
  }
  GradcheckResult r;
  r.block = block;
  r.tolerance = is_composite(block) ? kBlockTolerance : kOpTolerance;
  if (block == "ghost") {
    r.max_rel_error = check_block(GhostSpec{4, 8, 2, 1, 3, 1}, Shape{2, 4, 6, 6}, seed,
                                  corrupt_analytic, &ghost_conv);
  } else if (block == "gdconv") {
    r.max_rel_error = check_block(GhostSpec{4, 8, 2, 1, 3, 2}, Shape{2, 4, 7, 7}, seed,
                                  corrupt_analytic, &gd_conv);
  } else if (block == "efe") {
    r.max_rel_error = check_block(EfeSpec{4, 8}, Shape{2, 4, 6, 6}, seed,
                                  corrupt_analytic, &efe);
  } else if (block == "rmf") {
    RmfSpec spec;
    spec.c_in = 4;
    r.max_rel_error = check_block(spec, Shape{2, 4, 10, 10}, seed, corrupt_analytic, &rmf);
  } else if (block == "loss") {
    r.max_rel_error = check_loss(seed, corrupt_analytic);
  } else {
    r.max_rel_error = check_op(block, seed, corrupt_analytic);
  }
  r.passed = r.max_rel_error < r.tolerance;
  return r;
}

}  // namespace lfyolo
