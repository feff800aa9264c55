#include "submerge/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "submerge/numeric.hpp"
#include "submerge/rng.hpp"

namespace submerge {

namespace {

// Weights land on a power-of-two grid fine enough to be irrelevant for the
// dynamics but coarse enough that sums with planted updates stay exactly
// representable in f32.
constexpr double kWeightGrid = 0x1.0p-12;

void validate(const BackboneSpec& spec) {
  if (spec.layers < 1) throw std::invalid_argument("backbone needs at least one layer");
  if (spec.width < 4) throw std::invalid_argument("backbone width must be >= 4");
  if (spec.kinds.empty()) throw std::invalid_argument("backbone needs at least one module kind");
  for (const auto& kind : spec.kinds) {
    const bool known = std::any_of(kModuleKinds.begin(), kModuleKinds.end(),
                                   [&kind](const char* k) { return kind == k; });
    if (!known) throw std::invalid_argument("unknown module kind '" + kind + "'");
  }
  std::vector<std::string> sorted = spec.kinds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("duplicate module kind");
}

}  // namespace

TensorArchive init_backbone(const BackboneSpec& spec) {
  validate(spec);
  TensorArchive archive;
  Rng rng(spec.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.width));

  std::vector<std::string> names;
  for (int layer = 0; layer < spec.layers; ++layer)
    for (const auto& kind : spec.kinds) names.push_back(module_name(layer, kind));
  names = sort_modules(std::move(names));

  for (const auto& name : names) {
    Eigen::MatrixXd w(spec.width, spec.width);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        w(i, j) = quantize_grid(rng.uniform(-1.0, 1.0) * scale, kWeightGrid);
    archive.add(name, Tensor::from_matrix(w));
  }
  return archive;
}

ForwardResult forward_capture(const TensorArchive& backbone, const Eigen::VectorXd& x) {
  ForwardResult result;
  result.trace.order = backbone.module_names();
  Eigen::VectorXd h = x;
  for (const auto& name : result.trace.order) {
    const Eigen::MatrixXd w = backbone.at(name).matrix();
    if (w.cols() != h.size())
      throw std::invalid_argument("input dimension does not match module '" + name + "'");
    result.trace.inputs.emplace(name, h);
    h = (w * h).array().tanh().matrix();
  }
  result.output = std::move(h);
  return result;
}

Eigen::VectorXd forward(const TensorArchive& weights, const Eigen::VectorXd& x) {
  Eigen::VectorXd h = x;
  for (const auto& name : weights.module_names()) {
    const Eigen::MatrixXd w = weights.at(name).matrix();
    if (w.cols() != h.size())
      throw std::invalid_argument("input dimension does not match module '" + name + "'");
    h = (w * h).array().tanh().matrix();
  }
  return h;
}

Eigen::VectorXd integrate_and_forward(const TensorArchive& backbone,
                                      const ActivationPath& path,
                                      const ExpertStore& store,
                                      const Eigen::VectorXd& x) {
  for (const auto& [name, reg] : store.modules) {
    auto it = path.selections.find(name);
    if (it == path.selections.end())
      throw std::invalid_argument("path does not cover store module '" + name + "'");
    if (it->second < 0 || it->second >= static_cast<int>(reg.experts.size()))
      throw std::invalid_argument("path selects a nonexistent expert in '" + name + "'");
  }

  Eigen::VectorXd h = x;
  for (const auto& name : backbone.module_names()) {
    Eigen::MatrixXd w = backbone.at(name).matrix();
    if (w.cols() != h.size())
      throw std::invalid_argument("input dimension does not match module '" + name + "'");
    auto it = store.modules.find(name);
    if (it != store.modules.end()) {
      const int id = path.selections.at(name);
      w += reconstruct(it->second.experts[static_cast<std::size_t>(id)]);
    }
    h = (w * h).array().tanh().matrix();
  }
  return h;
}

}  // namespace submerge
