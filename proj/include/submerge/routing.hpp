#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "submerge/expert_store.hpp"
#include "submerge/subspace.hpp"

namespace submerge {

// Experts as nodes, edges between adjacent modules' experts that share a
// task origin.
struct DependencyGraph {
  std::vector<std::string> modules;  // canonical order
  std::vector<int> counts;           // experts per module
  // edges[c] holds (k, j): expert k of modules[c] -> expert j of modules[c+1].
  std::vector<std::vector<std::pair<int, int>>> edges;

  bool has_edge(int module_idx, int from_expert, int to_expert) const;
};

DependencyGraph build_graph(const ExpertStore& store);

// Module with the most experts; ties break toward the deepest module.
std::string select_anchor(const ExpertStore& store);

// Feature projection alignment: cosine between h and its projection onto the
// expert's input subspace. Equals ||V V^T h|| / ||h||; inputs orthogonal to
// the subspace score 0 by convention.
double fpa_score(const Eigen::VectorXd& h, const ExpertXd& expert);

struct ScoredCandidate {
  int expert = -1;
  double score = 0.0;
};

// Smallest-id winner on exact score ties.
ScoredCandidate fpa_argmax(const std::vector<ScoredCandidate>& scored);

struct ActivationPath {
  std::map<std::string, int> selections;  // module -> expert id
  std::set<int> active_tasks;
  std::string anchor;
  bool consistent = true;
  std::map<std::string, std::vector<ScoredCandidate>> fpa_scores;
};

// Anchor-first traversal: pick the anchor expert by FPA, then walk outward
// along the module chain keeping only experts whose task sets intersect the
// running constraint; FPA resolves bifurcations. An empty candidate set
// falls back to unconstrained FPA and marks the path inconsistent.
ActivationPath route(const ExpertStore& store, const DependencyGraph& graph,
                     const std::map<std::string, Eigen::VectorXd>& features);

}  // namespace submerge
