// Command-line driver: evolve expert stores from checkpoint archives, route
// queries through them, and run the synthetic continual-merging benchmark.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "submerge/backbone.hpp"
#include "submerge/bench.hpp"
#include "submerge/evolution.hpp"
#include "submerge/expert_store.hpp"
#include "submerge/routing.hpp"
#include "submerge/tensor_archive.hpp"

namespace {

using namespace submerge;
using nlohmann::json;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// "42..51" or "42,43,44".
std::vector<uint64_t> parse_seeds(const std::string& s) {
  const auto dots = s.find("..");
  std::vector<uint64_t> seeds;
  if (dots != std::string::npos) {
    const uint64_t lo = std::stoull(s.substr(0, dots));
    const uint64_t hi = std::stoull(s.substr(dots + 2));
    if (hi < lo) throw CLI::ValidationError("--seeds", "range is empty");
    for (uint64_t v = lo; v <= hi; ++v) seeds.push_back(v);
  } else {
    for (const auto& part : split_csv(s)) seeds.push_back(std::stoull(part));
  }
  if (seeds.empty()) throw CLI::ValidationError("--seeds", "no seeds given");
  return seeds;
}

std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> weight_dims(
    const TensorArchive& archive, const std::vector<std::string>& filter) {
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> dims;
  std::set<std::string> keep(filter.begin(), filter.end());
  for (const auto& name : archive.module_names()) {
    if (!keep.empty() && !keep.count(name)) continue;
    const Tensor& w = archive.at(name);
    dims[name] = {w.rows(), w.cols()};
  }
  if (!keep.empty())
    for (const auto& name : keep)
      if (!dims.count(name)) throw std::runtime_error("module '" + name + "' not in the backbone");
  if (dims.empty()) throw std::runtime_error("no weight matrices selected");
  return dims;
}

json path_to_json(const ActivationPath& path) {
  json out;
  out["anchor"] = path.anchor;
  out["consistent"] = path.consistent;
  out["active_tasks"] = std::vector<int>(path.active_tasks.begin(), path.active_tasks.end());
  out["selections"] = path.selections;
  json scores = json::object();
  for (const auto& [module, cands] : path.fpa_scores) {
    json list = json::array();
    for (const auto& c : cands) list.push_back({{"expert", c.expert}, {"score", c.score}});
    scores[module] = std::move(list);
  }
  out["scores"] = std::move(scores);
  return out;
}

BackboneSpec spec_from(int layers, Eigen::Index dim, const std::string& kinds, uint64_t seed) {
  BackboneSpec spec;
  spec.layers = layers;
  spec.width = dim;
  spec.kinds = split_csv(kinds);
  spec.seed = seed;
  return spec;
}

int cmd_synth(const std::string& out_dir, const BackboneSpec& spec, int tasks,
              const std::string& shared, const std::string& specific,
              Eigen::Index planted_rank, double noise, uint64_t seed) {
  const TensorArchive backbone = init_backbone(spec);
  TaskPlan plan;
  plan.num_tasks = tasks;
  plan.planted_rank = planted_rank;
  plan.noise_scale = noise;
  plan.seed = seed;
  const auto modules = backbone.module_names();
  if (shared == "all") plan.shared_modules.insert(modules.begin(), modules.end());
  else for (const auto& m : split_csv(shared)) plan.shared_modules.insert(m);
  if (specific == "all") plan.specific_modules.insert(modules.begin(), modules.end());
  else for (const auto& m : split_csv(specific)) plan.specific_modules.insert(m);

  const TaskStream stream = generate_stream(plan, backbone);
  const std::filesystem::path root(out_dir);
  write_archive(backbone, root / "backbone");
  for (int t = 1; t <= tasks; ++t)
    write_archive(stream.tasks[static_cast<std::size_t>(t - 1)],
                  root / ("task" + std::to_string(t)));
  std::printf("wrote backbone and %d task checkpoints under %s\n", tasks, out_dir.c_str());
  return 0;
}

int cmd_evolve(const std::string& backbone_path, const std::vector<std::string>& task_paths,
               const std::vector<std::string>& modules, const EvolutionConfig& config,
               const std::string& out_dir) {
  const TensorArchive backbone = read_archive(backbone_path);
  EvolutionEngine engine(weight_dims(backbone, modules), config);

  int task_id = 0;
  for (const auto& path : task_paths) {
    const TensorArchive task = read_archive(path);
    auto deltas = diff_modules(backbone, task);
    if (!modules.empty()) {
      std::set<std::string> keep(modules.begin(), modules.end());
      for (auto it = deltas.begin(); it != deltas.end();)
        it = keep.count(it->first) ? std::next(it) : deltas.erase(it);
    }
    const EvolutionReport report = engine.evolve_step(++task_id, deltas);
    for (const auto& d : report.decisions) {
      std::printf("task %d  %-20s %s", report.task, d.module.c_str(),
                  decision_name(d.record.decision));
      if (d.record.decision == Decision::kConsolidated)
        std::printf(" into %d", d.record.expert);
      if (d.record.affinity) std::printf("  affinity=%.6f", *d.record.affinity);
      std::printf("  gamma=%.6f\n", d.record.gamma);
    }
  }

  const ExpertStore store = engine.freeze(content_hash(backbone));
  for (const auto& name : engine.empty_modules())
    std::printf("module %s: no experts recorded (all updates zero); omitted from store\n",
                name.c_str());
  save_store(store, out_dir);
  std::printf("store written to %s (%zu modules, hash %s)\n", out_dir.c_str(),
              store.modules.size(), store_hash(store).c_str());
  return 0;
}

int cmd_route(const std::string& store_dir, const std::string& features_path,
              const std::string& input_csv, const std::string& backbone_path,
              const std::string& out_path) {
  const ExpertStore store = load_store(store_dir);
  const DependencyGraph graph = build_graph(store);

  std::map<std::string, Eigen::VectorXd> features;
  if (!features_path.empty()) {
    std::ifstream in(features_path);
    if (!in) throw std::runtime_error("cannot open '" + features_path + "'");
    const json root = json::parse(in);
    for (const auto& [module, values] : root.at("features").items()) {
      const auto v = values.get<std::vector<double>>();
      features[module] =
          Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  } else {
    if (backbone_path.empty())
      throw std::runtime_error("--input needs --backbone for the forward pass");
    const TensorArchive backbone = read_archive(backbone_path);
    if (store.backbone_ref != content_hash(backbone))
      std::fprintf(stderr, "warning: backbone hash does not match the store's backbone_ref\n");
    const auto parts = split_csv(input_csv);
    Eigen::VectorXd x(static_cast<Eigen::Index>(parts.size()));
    for (std::size_t i = 0; i < parts.size(); ++i) x(static_cast<Eigen::Index>(i)) = std::stod(parts[i]);
    if (x.norm() == 0.0) throw std::runtime_error("zero feature vector");
    features = forward_capture(backbone, x).trace.inputs;
  }

  const ActivationPath path = route(store, graph, features);
  const std::string text = path_to_json(path).dump(2) + "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    out << text;
  }
  std::fputs(text.c_str(), stdout);
  return 0;
}

int cmd_bench(const BackboneSpec& spec, int tasks, const std::string& shared,
              const std::string& specific, Eigen::Index planted_rank, double noise,
              uint64_t plan_seed, const EvolutionConfig& config, const std::string& seeds_arg,
              int probes, int classes, double query_noise, const std::string& out_dir) {
  const TensorArchive backbone = init_backbone(spec);
  TaskPlan plan;
  plan.num_tasks = tasks;
  plan.planted_rank = planted_rank;
  plan.noise_scale = noise;
  plan.seed = plan_seed;
  const auto modules = backbone.module_names();
  if (shared == "all") plan.shared_modules.insert(modules.begin(), modules.end());
  else for (const auto& m : split_csv(shared)) plan.shared_modules.insert(m);
  if (specific == "all") plan.specific_modules.insert(modules.begin(), modules.end());
  else for (const auto& m : split_csv(specific)) plan.specific_modules.insert(m);

  BenchOptions options;
  options.probes = probes;
  options.readout_classes = classes;
  options.query_noise = query_noise;

  const BenchReport report =
      run_experiment(plan, spec, config, parse_seeds(seeds_arg), options);
  if (!out_dir.empty()) write_report(report, out_dir);

  std::printf("ACC=%.3f ± %.3f\n", report.acc_mean + 0.0, report.acc_std + 0.0);
  if (!std::isnan(report.bwt_mean))
    std::printf("BWT=%.3f ± %.3f\n", report.bwt_mean + 0.0, report.bwt_std + 0.0);
  return 0;
}

int cmd_affinity(const std::string& a_path, const std::string& b_path,
                 const std::string& backbone_path, double rho, const std::string& out_path) {
  const TensorArchive backbone = read_archive(backbone_path);
  const TensorArchive a = read_archive(a_path);
  const TensorArchive b = read_archive(b_path);
  auto da = diff_modules(backbone, a);
  auto db = diff_modules(backbone, b);

  std::string csv = "module,affinity\n";
  char buf[128];
  for (const auto& name : sort_modules(backbone.module_names())) {
    auto ea = truncated_svd(da.at(name), rho);
    auto eb = truncated_svd(db.at(name), rho);
    if (!ea || !eb) {
      std::fprintf(stderr, "module %s: zero update, skipped\n", name.c_str());
      continue;
    }
    std::snprintf(buf, sizeof(buf), "%s,%.12g\n", name.c_str(), subspace_affinity(*ea, *eb));
    csv += buf;
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + out_path + "'");
    out << csv;
  }
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_stats(const std::string& store_dir, const std::string& out_dir) {
  const ExpertStore store = load_store(store_dir);
  if (store.modules.empty()) throw std::runtime_error("store holds no modules");
  const AllocationStats stats = allocation_stats(store);

  char buf[160];
  std::string mod_csv = "module,layer,kind,experts,reduction\n";
  for (const auto& m : stats.modules) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%.12g,%.12g\n", m.module.c_str(), m.layer,
                  m.kind.c_str(), m.experts, m.reduction);
    mod_csv += buf;
  }
  std::string kind_csv = "kind,mean_experts,mean_reduction\n";
  for (const auto& [kind, s] : stats.by_kind) {
    std::snprintf(buf, sizeof(buf), "%s,%.12g,%.12g\n", kind.c_str(), s.first, s.second);
    kind_csv += buf;
  }
  std::string layer_csv = "layer,mean_experts,mean_reduction\n";
  for (const auto& [layer, s] : stats.by_layer) {
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g\n", layer, s.first, s.second);
    layer_csv += buf;
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path root(out_dir);
    std::ofstream(root / "allocation_modules.csv", std::ios::trunc) << mod_csv;
    std::ofstream(root / "allocation_kinds.csv", std::ios::trunc) << kind_csv;
    std::ofstream(root / "allocation_layers.csv", std::ios::trunc) << layer_csv;
  }
  std::printf("%d tasks, %zu modules\n", stats.tasks, stats.modules.size());
  std::fputs(mod_csv.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual merging of task checkpoints into low-rank modular experts"};
  app.require_subcommand(1);

  // Shared knobs.
  EvolutionConfig config;
  int layers = 3;
  Eigen::Index dim = 32;
  std::string kinds = "mlp.fc1";
  uint64_t seed = 0;

  auto add_config = [&config](CLI::App* cmd) {
    cmd->add_option("--rho", config.rho, "truncation rank ratio")
        ->check(CLI::Range(1e-9, 1.0))
        ->capture_default_str();
    cmd->add_option("--beta", config.beta, "threshold margin coefficient")
        ->capture_default_str();
    cmd->add_option("--gamma0", config.gamma0, "bootstrap threshold")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--pool-min", config.pool_min, "scores required before adapting")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_flag("--per-module-pool", config.per_module_pool,
                  "pool affinity history per module instead of globally");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic backbone and task checkpoints");
  std::string out_dir, shared_arg = "", specific_arg = "all";
  int tasks = 4;
  Eigen::Index planted_rank = 3;
  double noise = 0.0;
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--layers", layers)->capture_default_str();
  synth->add_option("--dim", dim)->capture_default_str();
  synth->add_option("--kinds", kinds, "comma-separated module kinds")->capture_default_str();
  synth->add_option("--tasks", tasks)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--shared", shared_arg, "shared-plant modules (csv or 'all')");
  synth->add_option("--specific", specific_arg, "specific-plant modules (csv or 'all')")
      ->capture_default_str();
  synth->add_option("--planted-rank", planted_rank)->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth->add_option("--noise", noise, "relative update noise")->check(CLI::Range(0.0, 0.5));
  synth->add_option("--seed", seed)->capture_default_str();

  // evolve
  auto* evolve = app.add_subcommand("evolve", "absorb task checkpoints into an expert store");
  std::string backbone_path;
  std::vector<std::string> task_paths, module_filter;
  evolve->add_option("--backbone", backbone_path, "backbone archive directory")->required();
  evolve->add_option("--task", task_paths, "task archive directories, in arrival order")
      ->required()
      ->expected(-1);
  evolve->add_option("--modules", module_filter, "restrict to these modules")->delimiter(',');
  add_config(evolve);
  evolve->add_option("--out", out_dir, "store output directory")->required();

  // route
  auto* route_cmd = app.add_subcommand("route", "select an activation path through a store");
  std::string store_dir, features_path, input_csv, route_out;
  route_cmd->add_option("--store", store_dir, "expert store directory")->required();
  auto* feat_opt = route_cmd->add_option("--features", features_path,
                                         "JSON file {\"features\": {module: [floats]}}");
  auto* input_opt = route_cmd->add_option("--input", input_csv,
                                          "raw input vector (comma-separated floats)");
  route_cmd->add_option("--backbone", backbone_path, "backbone archive (for --input)");
  route_cmd->add_option("--out", route_out, "also write the path JSON here");
  feat_opt->excludes(input_opt);

  // bench
  auto* bench = app.add_subcommand("bench", "run the synthetic continual-merging benchmark");
  std::string seeds_arg = "42..51";
  int probes = 64, classes = 8;
  double query_noise = 0.0;
  uint64_t plan_seed = 0;
  bench->add_option("--tasks", tasks)->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--layers", layers)->capture_default_str();
  bench->add_option("--dim", dim)->capture_default_str();
  bench->add_option("--kinds", kinds)->capture_default_str();
  bench->add_option("--shared", shared_arg, "shared-plant modules (csv or 'all')");
  bench->add_option("--specific", specific_arg, "specific-plant modules (csv or 'all')")
      ->capture_default_str();
  bench->add_option("--planted-rank", planted_rank)->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench->add_option("--noise", noise, "relative update noise")->check(CLI::Range(0.0, 0.5));
  bench->add_option("--plan-seed", plan_seed, "seed for plant placement")->capture_default_str();
  bench->add_option("--seeds", seeds_arg, "task-order seeds, e.g. 42..51 or 1,2,3")
      ->capture_default_str();
  bench->add_option("--probes", probes)->check(CLI::PositiveNumber)->capture_default_str();
  bench->add_option("--classes", classes, "readout classes")->check(CLI::Range(2, 1024))
      ->capture_default_str();
  bench->add_option("--query-noise", query_noise, "relative routing feature noise");
  add_config(bench);
  bench->add_option("--out", out_dir, "report output directory");

  // affinity
  auto* affinity = app.add_subcommand("affinity", "per-module affinity between two checkpoints");
  std::string a_path, b_path, csv_out;
  affinity->add_option("--a", a_path, "first task archive")->required();
  affinity->add_option("--b", b_path, "second task archive")->required();
  affinity->add_option("--backbone", backbone_path, "backbone archive")->required();
  affinity->add_option("--rho", config.rho, "truncation rank ratio")
      ->check(CLI::Range(1e-9, 1.0))
      ->capture_default_str();
  affinity->add_option("--out", csv_out, "CSV output path");

  // stats
  auto* stats = app.add_subcommand("stats", "allocation statistics of a store");
  stats->add_option("--store", store_dir, "expert store directory")->required();
  stats->add_option("--out", out_dir, "CSV output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(out_dir, spec_from(layers, dim, kinds, seed), tasks, shared_arg,
                       specific_arg, planted_rank, noise, seed);
    if (evolve->parsed())
      return cmd_evolve(backbone_path, task_paths, module_filter, config, out_dir);
    if (route_cmd->parsed()) {
      if (features_path.empty() && input_csv.empty())
        throw std::runtime_error("route needs --features or --input");
      return cmd_route(store_dir, features_path, input_csv, backbone_path, route_out);
    }
    if (bench->parsed())
      return cmd_bench(spec_from(layers, dim, kinds, plan_seed), tasks, shared_arg, specific_arg,
                       planted_rank, noise, plan_seed, config, seeds_arg, probes, classes,
                       query_noise, out_dir);
    if (affinity->parsed()) return cmd_affinity(a_path, b_path, backbone_path, config.rho, csv_out);
    if (stats->parsed()) return cmd_stats(store_dir, out_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
