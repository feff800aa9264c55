#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "submerge/backbone.hpp"
#include "submerge/bench.hpp"
#include "test_support.hpp"

using namespace submerge;
using namespace test_support;

namespace {

BackboneSpec small_spec() {
  BackboneSpec spec;
  spec.layers = 2;
  spec.width = 8;
  spec.kinds = {"attn.q", "mlp.fc1"};
  spec.seed = 11;
  return spec;
}

Eigen::VectorXd random_input(Rng& rng, Eigen::Index d) {
  Eigen::VectorXd x(d);
  for (Eigen::Index i = 0; i < d; ++i) x(i) = rng.uniform(-1.0, 1.0);
  return x;
}

}  // namespace

TEST_CASE("init_backbone is deterministic and names modules canonically") {
  const TensorArchive a = init_backbone(small_spec());
  const TensorArchive b = init_backbone(small_spec());
  CHECK(content_hash(a) == content_hash(b));

  BackboneSpec other = small_spec();
  other.seed = 12;
  CHECK(content_hash(a) != content_hash(init_backbone(other)));

  CHECK(a.module_names() == std::vector<std::string>{"layer.0.attn.q", "layer.0.mlp.fc1",
                                                     "layer.1.attn.q", "layer.1.mlp.fc1"});
  for (const auto& name : a.module_names()) {
    CHECK(a.at(name).rows() == 8);
    CHECK(a.at(name).cols() == 8);
  }
}

TEST_CASE("init_backbone validates its spec") {
  BackboneSpec bad = small_spec();
  bad.layers = 0;
  CHECK_THROWS_AS(init_backbone(bad), std::invalid_argument);
  bad = small_spec();
  bad.width = 2;
  CHECK_THROWS_AS(init_backbone(bad), std::invalid_argument);
  bad = small_spec();
  bad.kinds = {"mystery"};
  CHECK_THROWS_AS(init_backbone(bad), std::invalid_argument);
  bad = small_spec();
  bad.kinds = {"mlp.fc1", "mlp.fc1"};
  CHECK_THROWS_AS(init_backbone(bad), std::invalid_argument);
}

TEST_CASE("forward pass: zero input, single module, and capture fidelity") {
  const TensorArchive backbone = init_backbone(small_spec());

  SUBCASE("zero input gives a zero trace and zero output") {
    const auto [output, trace] = forward_capture(backbone, Eigen::VectorXd::Zero(8));
    CHECK(output.isZero(0.0));
    for (const auto& [name, h] : trace.inputs) CHECK(h.isZero(0.0));
  }

  SUBCASE("one module: h_0 is the input, output is tanh(Wx)") {
    BackboneSpec one;
    one.layers = 1;
    one.width = 8;
    one.kinds = {"other"};
    one.seed = 3;
    const TensorArchive single = init_backbone(one);
    Rng rng(5);
    const Eigen::VectorXd x = random_input(rng, 8);
    const auto [output, trace] = forward_capture(single, x);
    CHECK(trace.order == std::vector<std::string>{"layer.0.other"});
    CHECK(trace.inputs.at("layer.0.other") == x);
    const Eigen::MatrixXd w = single.at("layer.0.other").matrix();
    CHECK((output - (w * x).array().tanh().matrix()).norm() <= 1e-15);
    // h_0 is the raw input, so it scales linearly.
    const auto scaled = forward_capture(single, (2.5 * x).eval());
    CHECK((scaled.trace.inputs.at("layer.0.other") - 2.5 * x).norm() == 0.0);
  }

  SUBCASE("trace entries chain through the recurrence") {
    Rng rng(6);
    const Eigen::VectorXd x = random_input(rng, 8);
    const auto [output, trace] = forward_capture(backbone, x);
    Eigen::VectorXd h = x;
    for (const auto& name : trace.order) {
      CHECK((trace.inputs.at(name) - h).norm() == 0.0);
      h = (backbone.at(name).matrix() * h).array().tanh().matrix();
    }
    CHECK((output - h).norm() == 0.0);
    CHECK((forward(backbone, x) - output).norm() == 0.0);
  }

  SUBCASE("dimension mismatch throws") {
    CHECK_THROWS_AS(forward_capture(backbone, Eigen::VectorXd::Zero(9)), std::invalid_argument);
  }
}

TEST_CASE("forward matches a straight-line reimplementation") {
  const TensorArchive backbone = init_backbone(small_spec());
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd x = random_input(rng, 8);

    // Independent oracle: raw loops over the stored f32 payload.
    std::vector<double> h(8);
    for (int i = 0; i < 8; ++i) h[static_cast<std::size_t>(i)] = x(i);
    for (const auto& name : backbone.module_names()) {
      const Tensor& w = backbone.at(name);
      std::vector<double> y(8, 0.0);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
          y[static_cast<std::size_t>(i)] +=
              static_cast<double>(w.data[static_cast<std::size_t>(i * 8 + j)]) *
              h[static_cast<std::size_t>(j)];
      for (int i = 0; i < 8; ++i) h[static_cast<std::size_t>(i)] = std::tanh(y[static_cast<std::size_t>(i)]);
    }

    const Eigen::VectorXd out = forward(backbone, x);
    for (int i = 0; i < 8; ++i)
      CHECK(out(i) == doctest::Approx(h[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("integrate_and_forward: empty store equals the plain forward") {
  const TensorArchive backbone = init_backbone(small_spec());
  Rng rng(23);
  const Eigen::VectorXd x = random_input(rng, 8);
  const ExpertStore empty;
  const ActivationPath path;  // nothing to select
  CHECK((integrate_and_forward(backbone, path, empty, x) - forward(backbone, x)).norm() == 0.0);
}

TEST_CASE("integrate_and_forward equals a dense weight patch") {
  const TensorArchive backbone = init_backbone(small_spec());
  Rng rng(29);

  // One expert on one module.
  ExpertStore store;
  store.backbone_ref = content_hash(backbone);
  StoredRegistry reg;
  reg.rank = 2;
  reg.experts.push_back(random_expert(rng, 8, 8, 2, {1}));
  store.modules.emplace("layer.0.mlp.fc1", std::move(reg));
  ActivationPath path;
  path.selections["layer.0.mlp.fc1"] = 0;

  // Dense oracle: archive with the patched weight substituted.
  TensorArchive patched;
  for (const auto& [name, tensor] : backbone.tensors()) patched.add(name, tensor);
  const Eigen::MatrixXd dense =
      backbone.at("layer.0.mlp.fc1").matrix() + reconstruct(store.modules.at("layer.0.mlp.fc1").experts[0]);

  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::VectorXd x = random_input(rng, 8);
    Eigen::VectorXd h = x;
    for (const auto& name : backbone.module_names()) {
      const Eigen::MatrixXd w =
          name == "layer.0.mlp.fc1" ? dense : backbone.at(name).matrix();
      h = (w * h).array().tanh().matrix();
    }
    CHECK((integrate_and_forward(backbone, path, store, x) - h).norm() <= 1e-14);
  }

  SUBCASE("path must cover every store module") {
    const ActivationPath none;
    CHECK_THROWS_AS(integrate_and_forward(backbone, none, store, random_input(rng, 8)),
                    std::invalid_argument);
  }
}

TEST_CASE("exact recovery: a sole low-rank expert reproduces its teacher") {
  BackboneSpec spec;
  spec.layers = 3;
  spec.width = 32;
  spec.kinds = {"mlp.fc1"};
  spec.seed = 99;
  const TensorArchive backbone = init_backbone(spec);

  TaskPlan plan;
  plan.num_tasks = 1;
  plan.planted_rank = 3;
  plan.seed = 5;
  for (const auto& name : backbone.module_names()) plan.specific_modules.insert(name);
  const TaskStream stream = generate_stream(plan, backbone);

  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> dims;
  for (const auto& name : backbone.module_names()) dims[name] = {32, 32};
  EvolutionConfig config;
  config.rho = 0.1;
  EvolutionEngine engine(dims, config);
  engine.evolve_step(1, diff_modules(backbone, stream.tasks[0]));
  const ExpertStore store = engine.freeze(content_hash(backbone));

  ActivationPath path;
  for (const auto& name : store.module_order()) path.selections[name] = 0;

  Rng rng(1234);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::VectorXd x = random_input(rng, 32);
    const Eigen::VectorXd merged = integrate_and_forward(backbone, path, store, x);
    const Eigen::VectorXd teacher = forward(stream.tasks[0], x);
    worst = std::max(worst, (merged - teacher).norm());
  }
  CHECK(worst <= 1e-8);
}
