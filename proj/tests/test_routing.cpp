#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "submerge/routing.hpp"
#include "test_support.hpp"

using namespace submerge;
using namespace test_support;

namespace {

ExpertStore make_store(const std::vector<std::pair<std::string, std::vector<ExpertXd>>>& modules) {
  ExpertStore store;
  store.backbone_ref = "test";
  for (const auto& [name, experts] : modules) {
    StoredRegistry reg;
    reg.rank = experts.front().rank();
    reg.experts = experts;
    store.modules.emplace(name, reg);
  }
  return store;
}

Eigen::VectorXd unit(Eigen::Index d, Eigen::Index axis) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
  v(axis) = 1.0;
  return v;
}

// Expert whose input subspace is the coordinate block starting at `base`.
ExpertXd block_expert(Eigen::Index d, Eigen::Index base, Eigen::Index r, std::set<int> tasks) {
  Eigen::VectorXd sv = Eigen::VectorXd::LinSpaced(r, 2.0, 1.0);
  std::vector<Eigen::Index> rows, cols;
  for (Eigen::Index k = 0; k < r; ++k) {
    rows.push_back(base + k);
    cols.push_back(base + k);
  }
  return coordinate_expert(d, rows, cols, sv, std::move(tasks));
}

}  // namespace

TEST_CASE("fpa score endpoints and hand value") {
  const Eigen::Index d = 8;
  const ExpertXd e = block_expert(d, 0, 2, {1});

  Eigen::VectorXd inside = 3.0 * unit(d, 0) + 1.0 * unit(d, 1);
  CHECK(fpa_score(inside, e) == doctest::Approx(1.0).epsilon(1e-12));

  Eigen::VectorXd outside = unit(d, 5);
  CHECK(fpa_score(outside, e) == 0.0);

  // d = 2, V = first axis, h = (1,1)/sqrt(2).
  Eigen::VectorXd one(1);
  one << 1.0;
  const ExpertXd axis = coordinate_expert(2, {0}, {0}, one);
  Eigen::VectorXd diag(2);
  diag << 1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0);
  CHECK(fpa_score(diag, axis) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(fpa_score(Eigen::VectorXd::Zero(d), e), std::invalid_argument);
  CHECK_THROWS_AS(fpa_score(Eigen::VectorXd::Ones(d + 1), e), std::invalid_argument);
}

TEST_CASE("fpa score equals the dense cosine and is scale invariant") {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index d = 16, r = 3;
    const ExpertXd e = random_expert(rng, d, d, r);
    Eigen::VectorXd h(d);
    for (Eigen::Index i = 0; i < d; ++i) h(i) = rng.gaussian();

    const double score = fpa_score(h, e);
    // Dense route: cosine between h and its projection.
    const Eigen::MatrixXd v = e.right.columns();
    const Eigen::VectorXd proj = v * (v.transpose() * h);
    const double dense = h.dot(proj) / (h.norm() * proj.norm());
    CHECK(std::abs(score - dense) <= 1e-12);
    CHECK(std::abs(score - proj.norm() / h.norm()) <= 1e-12);

    for (double alpha : {1e-3, 0.5, 2.0, 1e3})
      CHECK(std::abs(fpa_score((alpha * h).eval(), e) - score) <= 1e-12);
  }
}

TEST_CASE("fpa_argmax tie-breaks toward the smallest id") {
  CHECK_THROWS_AS(fpa_argmax({}), std::invalid_argument);
  CHECK(fpa_argmax({{4, 0.3}}).expert == 4);
  const auto winner = fpa_argmax({{0, 0.2}, {1, 0.9}, {2, 0.9}});
  CHECK(winner.expert == 1);
  CHECK(winner.score == 0.9);
}

TEST_CASE("build_graph: chain, fan-out, and brute-force oracle") {
  const Eigen::Index d = 16;
  SUBCASE("single expert per module gives one edge per adjacent pair") {
    const ExpertStore store = make_store({
        {"layer.0.other", {block_expert(d, 0, 2, {1, 2})}},
        {"layer.1.other", {block_expert(d, 2, 2, {1, 2})}},
        {"layer.2.other", {block_expert(d, 4, 2, {1, 2})}},
    });
    const DependencyGraph g = build_graph(store);
    REQUIRE(g.edges.size() == 2);
    CHECK(g.edges[0] == std::vector<std::pair<int, int>>{{0, 0}});
    CHECK(g.edges[1] == std::vector<std::pair<int, int>>{{0, 0}});
    CHECK(g.has_edge(0, 0, 0));
    CHECK_FALSE(g.has_edge(0, 0, 1));
  }
  SUBCASE("one expert fans out to both successors") {
    const ExpertStore store = make_store({
        {"layer.0.other", {block_expert(d, 0, 2, {1, 2})}},
        {"layer.1.other", {block_expert(d, 2, 2, {1}), block_expert(d, 4, 2, {2})}},
    });
    const DependencyGraph g = build_graph(store);
    REQUIRE(g.edges.size() == 1);
    CHECK(g.edges[0] == std::vector<std::pair<int, int>>{{0, 0}, {0, 1}});
  }
  SUBCASE("random stores match the brute-force intersection rule") {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
      // Partition six tasks into experts per module; coverage holds by
      // construction.
      std::vector<std::pair<std::string, std::vector<ExpertXd>>> modules;
      for (int m = 0; m < 4; ++m) {
        const int expert_count = 1 + static_cast<int>(rng.below(3));
        std::vector<std::set<int>> groups(static_cast<std::size_t>(expert_count));
        for (int t = 1; t <= 6; ++t)
          groups[rng.below(static_cast<uint64_t>(expert_count))].insert(t);
        std::vector<ExpertXd> experts;
        Eigen::Index base = 0;
        for (auto& tasks : groups) {
          if (tasks.empty()) tasks.insert(1 + static_cast<int>(rng.below(6)));
          experts.push_back(block_expert(d, base, 2, tasks));
          base += 2;
        }
        modules.emplace_back("layer." + std::to_string(m) + ".other", experts);
      }
      const ExpertStore store = make_store(modules);
      const DependencyGraph g = build_graph(store);
      for (std::size_t c = 0; c + 1 < modules.size(); ++c) {
        const auto& lower = store.modules.at(g.modules[c]).experts;
        const auto& upper = store.modules.at(g.modules[c + 1]).experts;
        for (int k = 0; k < static_cast<int>(lower.size()); ++k) {
          for (int j = 0; j < static_cast<int>(upper.size()); ++j) {
            bool share = false;
            for (int t : lower[static_cast<std::size_t>(k)].tasks)
              share = share || upper[static_cast<std::size_t>(j)].tasks.count(t) != 0;
            CHECK(g.has_edge(static_cast<int>(c), k, j) == share);
          }
        }
      }
    }
  }
  SUBCASE("coverage violation names the module") {
    const ExpertStore store = make_store({
        {"layer.0.other", {block_expert(d, 0, 2, {1})}},
        {"layer.1.other", {block_expert(d, 2, 2, {2})}},
    });
    CHECK_THROWS_WITH_AS(build_graph(store), doctest::Contains("layer.0.other"),
                         ValidationError);
  }
}

TEST_CASE("select_anchor prefers diversity, then depth") {
  const Eigen::Index d = 16;
  auto experts = [d](int count, int offset) {
    std::vector<ExpertXd> v;
    for (int i = 0; i < count; ++i)
      v.push_back(block_expert(d, 2 * ((offset + i) % 8), 1, {offset + i + 1}));
    return v;
  };
  SUBCASE("counts 1,3,2 pick the middle module") {
    const ExpertStore store = make_store({{"layer.0.other", experts(1, 0)},
                                          {"layer.1.other", experts(3, 0)},
                                          {"layer.2.other", experts(2, 0)}});
    CHECK(select_anchor(store) == "layer.1.other");
  }
  SUBCASE("all equal picks the deepest") {
    const ExpertStore store = make_store({{"layer.0.other", experts(2, 0)},
                                          {"layer.1.other", experts(2, 0)},
                                          {"layer.2.other", experts(2, 0)}});
    CHECK(select_anchor(store) == "layer.2.other");
  }
  SUBCASE("counts 1,4,4,2 pick the deeper four") {
    const ExpertStore store = make_store({{"layer.0.other", experts(1, 0)},
                                          {"layer.1.other", experts(4, 0)},
                                          {"layer.2.other", experts(4, 0)},
                                          {"layer.3.other", experts(2, 0)}});
    CHECK(select_anchor(store) == "layer.2.other");
  }
}

TEST_CASE("route: single expert per module intersects all task sets") {
  const Eigen::Index d = 16;
  const ExpertStore store = make_store({
      {"layer.0.other", {block_expert(d, 0, 2, {1, 2, 3})}},
      {"layer.1.other", {block_expert(d, 2, 2, {2, 3})}},
      {"layer.2.other", {block_expert(d, 4, 2, {2, 4})}},
  });
  const DependencyGraph g = build_graph(store);
  std::map<std::string, Eigen::VectorXd> features;
  for (const auto& name : store.module_order()) features[name] = unit(d, 0);

  const ActivationPath path = route(store, g, features);
  CHECK(path.consistent);
  CHECK(path.anchor == "layer.2.other");  // all counts tie at 1
  CHECK(path.selections.size() == 3);
  for (const auto& [m, id] : path.selections) CHECK(id == 0);
  CHECK(path.active_tasks == std::set<int>{2});
}

TEST_CASE("route: disjoint two-task store follows the queried task") {
  const Eigen::Index d = 16;
  std::vector<std::pair<std::string, std::vector<ExpertXd>>> modules;
  for (int m = 0; m < 3; ++m)
    modules.emplace_back("layer." + std::to_string(m) + ".other",
                         std::vector<ExpertXd>{block_expert(d, 0, 2, {1}),
                                               block_expert(d, 4, 2, {2})});
  const ExpertStore store = make_store(modules);
  const DependencyGraph g = build_graph(store);

  std::map<std::string, Eigen::VectorXd> features;
  for (const auto& name : store.module_order()) features[name] = unit(d, 4);  // task 2 span

  const ActivationPath path = route(store, g, features);
  CHECK(path.consistent);
  for (const auto& [m, id] : path.selections) CHECK(id == 1);
  CHECK(path.active_tasks == std::set<int>{2});

  // Identical query, identical path.
  const ActivationPath again = route(store, g, features);
  CHECK(again.selections == path.selections);
  CHECK(again.active_tasks == path.active_tasks);
  CHECK(again.consistent == path.consistent);
}

TEST_CASE("route: bifurcation resolved by FPA and constraint refinement") {
  const Eigen::Index d = 16;
  const ExpertStore store = make_store({
      // Anchor (three experts): the {1,2} expert listens on block 0.
      {"layer.0.other",
       {block_expert(d, 0, 2, {1, 2}), block_expert(d, 4, 2, {3}), block_expert(d, 8, 2, {4})}},
      // Bifurcation: both experts intersect {1,2}.
      {"layer.1.other", {block_expert(d, 0, 2, {1, 3}), block_expert(d, 4, 2, {2, 4})}},
      {"layer.2.other", {block_expert(d, 0, 2, {1, 2, 3, 4})}},
  });
  const DependencyGraph g = build_graph(store);

  std::map<std::string, Eigen::VectorXd> features;
  features["layer.0.other"] = unit(d, 0);  // anchor picks the {1,2} expert
  features["layer.1.other"] = unit(d, 4);  // lies in the {2,4} expert's subspace
  features["layer.2.other"] = unit(d, 0);

  const ActivationPath path = route(store, g, features);
  CHECK(path.anchor == "layer.0.other");
  CHECK(path.consistent);
  CHECK(path.selections.at("layer.0.other") == 0);
  CHECK(path.selections.at("layer.1.other") == 1);
  CHECK(path.selections.at("layer.2.other") == 0);
  CHECK(path.active_tasks == std::set<int>{2});
  // The bifurcation module scored both surviving candidates.
  CHECK(path.fpa_scores.at("layer.1.other").size() == 2);
}

TEST_CASE("route: empty candidate set falls back to raw FPA") {
  const Eigen::Index d = 16;
  // Hand-edited store: task sets that cannot stay consistent. layer.1 has
  // two experts so it anchors; its winner carries {9}, which no layer.0
  // expert intersects.
  ExpertStore store = make_store({
      {"layer.0.other", {block_expert(d, 0, 2, {1})}},
      {"layer.1.other", {block_expert(d, 0, 2, {9}), block_expert(d, 4, 2, {1})}},
  });
  // build_graph would reject this store; route alone still works.
  DependencyGraph g;
  g.modules = store.module_order();
  g.counts = {1, 2};
  g.edges.resize(1);

  std::map<std::string, Eigen::VectorXd> features;
  features["layer.0.other"] = unit(d, 0);
  features["layer.1.other"] = unit(d, 0);  // picks the {9} expert at the anchor

  const ActivationPath path = route(store, g, features);
  CHECK_FALSE(path.consistent);
  CHECK(path.selections.at("layer.1.other") == 0);
  CHECK(path.selections.at("layer.0.other") == 0);
  CHECK(path.active_tasks == std::set<int>{9});  // fallback does not intersect
}

TEST_CASE("route validates inputs") {
  const Eigen::Index d = 16;
  const ExpertStore store = make_store({{"layer.0.other", {block_expert(d, 0, 2, {1})}}});
  const DependencyGraph g = build_graph(store);
  std::map<std::string, Eigen::VectorXd> features;  // missing module
  CHECK_THROWS_AS(route(store, g, features), std::invalid_argument);
}

TEST_CASE("routing recovery on orthogonal plants with noisy queries") {
  const Eigen::Index d = 32, r = 2;
  const int tasks = 4;
  std::vector<std::pair<std::string, std::vector<ExpertXd>>> modules;
  for (int m = 0; m < 3; ++m) {
    std::vector<ExpertXd> experts;
    for (int t = 1; t <= tasks; ++t)
      experts.push_back(block_expert(d, static_cast<Eigen::Index>(r * (t - 1)), r, {t}));
    modules.emplace_back("layer." + std::to_string(m) + ".other", experts);
  }
  const ExpertStore store = make_store(modules);
  const DependencyGraph g = build_graph(store);

  Rng rng(2718);
  int correct = 0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    const int task = 1 + static_cast<int>(rng.below(tasks));
    std::map<std::string, Eigen::VectorXd> features;
    for (const auto& [name, reg] : store.modules) {
      const Eigen::MatrixXd v = reg.experts[static_cast<std::size_t>(task - 1)].right.columns();
      Eigen::VectorXd coeff(r);
      for (Eigen::Index k = 0; k < r; ++k) coeff(k) = rng.gaussian();
      Eigen::VectorXd h = v * coeff;
      h.normalize();
      Eigen::VectorXd noise(d);
      for (Eigen::Index k = 0; k < d; ++k) noise(k) = rng.gaussian();
      noise.normalize();
      features[name] = h + 0.1 * noise;
    }
    const ActivationPath path = route(store, g, features);
    bool ok = path.consistent;
    for (const auto& [m, id] : path.selections) ok = ok && id == task - 1;
    if (ok) ++correct;
  }
  CHECK(correct == trials);
}
