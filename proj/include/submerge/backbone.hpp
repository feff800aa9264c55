#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "submerge/expert_store.hpp"
#include "submerge/routing.hpp"
#include "submerge/tensor_archive.hpp"

namespace submerge {

// Synthetic multi-layer network: square d x d modules, tanh between them,
// no biases.
struct BackboneSpec {
  int layers = 3;
  Eigen::Index width = 32;
  std::vector<std::string> kinds = {"mlp.fc1"};  // subset of kModuleKinds, in order
  uint64_t seed = 0;
};

// Deterministic weights from the seed, scaled by 1/sqrt(d) and quantized so
// the f32 archive stores them exactly.
TensorArchive init_backbone(const BackboneSpec& spec);

// Per-module inputs h_c captured during a forward pass, in module order.
struct ActivationTrace {
  std::vector<std::string> order;
  std::map<std::string, Eigen::VectorXd> inputs;
};

struct ForwardResult {
  Eigen::VectorXd output;
  ActivationTrace trace;
};

ForwardResult forward_capture(const TensorArchive& backbone, const Eigen::VectorXd& x);

// Plain forward pass of any checkpoint archive.
Eigen::VectorXd forward(const TensorArchive& weights, const Eigen::VectorXd& x);

// Forward pass with each store module's weight additively patched by its
// selected expert; modules absent from the store run unpatched.
Eigen::VectorXd integrate_and_forward(const TensorArchive& backbone,
                                      const ActivationPath& path,
                                      const ExpertStore& store,
                                      const Eigen::VectorXd& x);

}  // namespace submerge
