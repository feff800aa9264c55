#include "submerge/routing.hpp"

#include <algorithm>

#include "submerge/numeric.hpp"

namespace submerge {

bool DependencyGraph::has_edge(int module_idx, int from_expert, int to_expert) const {
  if (module_idx < 0 || module_idx + 1 >= static_cast<int>(modules.size())) return false;
  const auto& e = edges[static_cast<std::size_t>(module_idx)];
  return std::find(e.begin(), e.end(), std::make_pair(from_expert, to_expert)) != e.end();
}

DependencyGraph build_graph(const ExpertStore& store) {
  if (store.modules.empty()) throw ValidationError("store holds no modules");
  DependencyGraph g;
  g.modules = store.module_order();
  for (const auto& name : g.modules)
    g.counts.push_back(static_cast<int>(store.modules.at(name).experts.size()));

  g.edges.resize(g.modules.size() > 0 ? g.modules.size() - 1 : 0);
  for (std::size_t c = 0; c + 1 < g.modules.size(); ++c) {
    const auto& lower = store.modules.at(g.modules[c]).experts;
    const auto& upper = store.modules.at(g.modules[c + 1]).experts;
    for (int k = 0; k < static_cast<int>(lower.size()); ++k) {
      bool connected = false;
      for (int j = 0; j < static_cast<int>(upper.size()); ++j) {
        const auto& a = lower[static_cast<std::size_t>(k)].tasks;
        const auto& b = upper[static_cast<std::size_t>(j)].tasks;
        const bool share = std::any_of(a.begin(), a.end(),
                                       [&b](int t) { return b.count(t) != 0; });
        if (share) {
          g.edges[c].emplace_back(k, j);
          connected = true;
        }
      }
      if (!connected)
        throw ValidationError("module '" + g.modules[c] + "': expert " + std::to_string(k) +
                              " has no outgoing dependency edge (task coverage violated)");
    }
  }
  return g;
}

std::string select_anchor(const ExpertStore& store) {
  if (store.modules.empty()) throw ValidationError("store holds no modules");
  const auto order = store.module_order();
  std::string best = order.front();
  std::size_t best_count = store.modules.at(best).experts.size();
  for (const auto& name : order) {
    const std::size_t count = store.modules.at(name).experts.size();
    if (count >= best_count) {  // ties go to the deepest module
      best = name;
      best_count = count;
    }
  }
  return best;
}

double fpa_score(const Eigen::VectorXd& h, const ExpertXd& expert) {
  if (h.size() != expert.in_dim())
    throw std::invalid_argument("feature dimension does not match the expert input subspace");
  const double hn = h.norm();
  if (hn == 0.0) throw std::invalid_argument("zero feature vector");
  const double pn = (expert.right.columns().transpose() * h).norm();
  if (pn <= 1e-12 * hn) return 0.0;  // orthogonal input
  return clamp_unit(pn / hn);
}

ScoredCandidate fpa_argmax(const std::vector<ScoredCandidate>& scored) {
  if (scored.empty()) throw std::invalid_argument("no candidates to select from");
  ScoredCandidate best = scored.front();
  for (const auto& c : scored)
    if (c.score > best.score) best = c;
  return best;
}

namespace {

std::vector<ScoredCandidate> score_candidates(const StoredRegistry& reg,
                                              const Eigen::VectorXd& h,
                                              const std::vector<int>& ids) {
  std::vector<ScoredCandidate> scored;
  scored.reserve(ids.size());
  for (int id : ids)
    scored.push_back({id, fpa_score(h, reg.experts[static_cast<std::size_t>(id)])});
  return scored;
}

std::vector<int> all_ids(const StoredRegistry& reg) {
  std::vector<int> ids(reg.experts.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  return ids;
}

}  // namespace

ActivationPath route(const ExpertStore& store, const DependencyGraph& graph,
                     const std::map<std::string, Eigen::VectorXd>& features) {
  const auto order = store.module_order();
  if (order != graph.modules)
    throw ValidationError("dependency graph does not match the store");
  for (const auto& name : order)
    if (!features.count(name))
      throw std::invalid_argument("missing feature vector for module '" + name + "'");

  ActivationPath path;
  path.anchor = select_anchor(store);
  const int anchor_idx = static_cast<int>(
      std::find(order.begin(), order.end(), path.anchor) - order.begin());

  // Anchor: unconstrained FPA argmax.
  {
    const StoredRegistry& reg = store.modules.at(path.anchor);
    auto scored = score_candidates(reg, features.at(path.anchor), all_ids(reg));
    const ScoredCandidate winner = fpa_argmax(scored);
    path.selections[path.anchor] = winner.expert;
    path.fpa_scores[path.anchor] = std::move(scored);
    path.active_tasks = reg.experts[static_cast<std::size_t>(winner.expert)].tasks;
  }

  // Outward along the chain: anchor-1, anchor+1, anchor-2, ... so every
  // visited module is adjacent to a decided one.
  std::vector<int> visit;
  for (int d = 1; d < static_cast<int>(order.size()); ++d) {
    if (anchor_idx - d >= 0) visit.push_back(anchor_idx - d);
    if (anchor_idx + d < static_cast<int>(order.size())) visit.push_back(anchor_idx + d);
  }

  for (int idx : visit) {
    const std::string& name = order[static_cast<std::size_t>(idx)];
    const StoredRegistry& reg = store.modules.at(name);
    std::vector<int> candidates;
    for (int id = 0; id < static_cast<int>(reg.experts.size()); ++id) {
      const auto& tasks = reg.experts[static_cast<std::size_t>(id)].tasks;
      const bool hit = std::any_of(path.active_tasks.begin(), path.active_tasks.end(),
                                   [&tasks](int t) { return tasks.count(t) != 0; });
      if (hit) candidates.push_back(id);
    }

    if (candidates.empty()) {
      // No expert satisfies the constraint; select by raw FPA and flag the
      // path. Stores produced by the engine cannot reach this.
      auto scored = score_candidates(reg, features.at(name), all_ids(reg));
      const ScoredCandidate winner = fpa_argmax(scored);
      path.selections[name] = winner.expert;
      path.fpa_scores[name] = std::move(scored);
      path.consistent = false;
      continue;
    }

    auto scored = score_candidates(reg, features.at(name), candidates);
    const ScoredCandidate winner =
        candidates.size() == 1 ? scored.front() : fpa_argmax(scored);
    path.selections[name] = winner.expert;
    path.fpa_scores[name] = std::move(scored);

    const auto& chosen = reg.experts[static_cast<std::size_t>(winner.expert)].tasks;
    std::set<int> refined;
    for (int t : path.active_tasks)
      if (chosen.count(t)) refined.insert(t);
    path.active_tasks = std::move(refined);
  }

  // A consistent path must ride the dependency edges.
  if (path.consistent) {
    for (std::size_t c = 0; c + 1 < order.size(); ++c) {
      if (!graph.has_edge(static_cast<int>(c), path.selections.at(order[c]),
                          path.selections.at(order[c + 1])))
        throw std::logic_error("consistent path left the dependency graph");
    }
  }
  return path;
}

}  // namespace submerge
