#include "submerge/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "submerge/numeric.hpp"
#include "submerge/rng.hpp"
#include "submerge/routing.hpp"

namespace submerge {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Planted magnitudes are dyadic and the planted bases are coordinate
// vectors, so W0 + delta is exactly representable in f32 and the archives
// carry the stream without rounding.
double planted_sigma(int task, Eigen::Index k, Eigen::Index planted_rank) {
  return 1.0 + 0.25 * static_cast<double>(task) +
         0.5 * static_cast<double>(planted_rank - 1 - k);
}

Eigen::MatrixXd coordinate_columns(Eigen::Index dim, const std::vector<Eigen::Index>& support) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(dim, static_cast<Eigen::Index>(support.size()));
  for (std::size_t k = 0; k < support.size(); ++k) m(support[k], static_cast<Eigen::Index>(k)) = 1.0;
  return m;
}

std::vector<Eigen::Index> permutation(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> p(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  rng.shuffle(p);
  return p;
}

int argmax_index(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

double mean_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  return m / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

TaskStream generate_stream(const TaskPlan& plan, const TensorArchive& backbone) {
  if (plan.num_tasks < 1) throw std::invalid_argument("plan needs at least one task");
  if (plan.planted_rank < 1) throw std::invalid_argument("planted rank must be >= 1");
  if (plan.noise_scale < 0.0 || plan.noise_scale > 0.5)
    throw std::invalid_argument("noise scale must lie in [0, 0.5]");

  const auto modules = backbone.module_names();
  const std::set<std::string> known(modules.begin(), modules.end());
  for (const auto& name : plan.shared_modules) {
    if (!known.count(name)) throw std::invalid_argument("unknown shared module '" + name + "'");
    if (plan.specific_modules.count(name))
      throw std::invalid_argument("module '" + name + "' is both shared and specific");
  }
  for (const auto& name : plan.specific_modules)
    if (!known.count(name)) throw std::invalid_argument("unknown specific module '" + name + "'");

  // Capacity: specific modules host num_tasks mutually orthogonal plants.
  for (const auto& name : plan.specific_modules) {
    const Tensor& w = backbone.at(name);
    const Eigen::Index dmin = std::min(w.rows(), w.cols());
    const Eigen::Index needed = static_cast<Eigen::Index>(plan.num_tasks) * plan.planted_rank;
    if (needed > dmin)
      throw std::invalid_argument("module '" + name + "' cannot host " +
                                  std::to_string(plan.num_tasks) + " orthogonal rank-" +
                                  std::to_string(plan.planted_rank) + " plants (" +
                                  std::to_string(needed) + " > " + std::to_string(dmin) + ")");
  }
  for (const auto& name : plan.shared_modules) {
    const Tensor& w = backbone.at(name);
    if (plan.planted_rank > std::min(w.rows(), w.cols()))
      throw std::invalid_argument("module '" + name + "' is too small for the planted rank");
  }

  TaskStream stream;
  std::map<std::string, std::vector<Eigen::MatrixXd>> deltas;  // module -> per task

  for (const auto& name : modules) {
    const bool shared = plan.shared_modules.count(name) != 0;
    const bool specific = plan.specific_modules.count(name) != 0;
    if (!shared && !specific) continue;

    const Tensor& w = backbone.at(name);
    Rng rng(splitmix64(plan.seed ^ fnv1a(name.data(), name.size())));
    const auto perm_left = permutation(w.rows(), rng);
    const auto perm_right = permutation(w.cols(), rng);

    std::vector<ModulePlant>& plants = stream.plants[name];
    std::vector<Eigen::MatrixXd>& module_deltas = deltas[name];
    for (int t = 1; t <= plan.num_tasks; ++t) {
      const Eigen::Index base =
          shared ? 0 : static_cast<Eigen::Index>(t - 1) * plan.planted_rank;
      std::vector<Eigen::Index> rows_support, cols_support;
      for (Eigen::Index k = 0; k < plan.planted_rank; ++k) {
        rows_support.push_back(perm_left[static_cast<std::size_t>(base + k)]);
        cols_support.push_back(perm_right[static_cast<std::size_t>(base + k)]);
      }
      ModulePlant plant;
      plant.left = coordinate_columns(w.rows(), rows_support);
      plant.right = coordinate_columns(w.cols(), cols_support);
      plant.singular_values.resize(plan.planted_rank);
      for (Eigen::Index k = 0; k < plan.planted_rank; ++k)
        plant.singular_values(k) = planted_sigma(t, k, plan.planted_rank);

      Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(w.rows(), w.cols());
      for (Eigen::Index k = 0; k < plan.planted_rank; ++k)
        delta(rows_support[static_cast<std::size_t>(k)],
              cols_support[static_cast<std::size_t>(k)]) = plant.singular_values(k);

      if (plan.noise_scale > 0.0) {
        Eigen::MatrixXd noise(w.rows(), w.cols());
        for (Eigen::Index i = 0; i < noise.size(); ++i) noise(i) = rng.gaussian();
        delta += noise * (plan.noise_scale * delta.norm() / noise.norm());
      }

      plants.push_back(std::move(plant));
      module_deltas.push_back(std::move(delta));
    }

    // Noise must not blur specific plants into each other.
    if (specific && plan.noise_scale > 0.0 && plan.num_tasks > 1) {
      std::vector<ExpertXd> extracted;
      for (const auto& d : module_deltas)
        extracted.push_back(truncated_svd_rank(d, plan.planted_rank));
      for (std::size_t a = 0; a < extracted.size(); ++a)
        for (std::size_t b = a + 1; b < extracted.size(); ++b)
          if (subspace_affinity(extracted[a], extracted[b]) > 0.1)
            throw std::runtime_error("module '" + name +
                                     "': noise pushed cross-task plant affinity above 0.1");
    }
  }

  for (int t = 1; t <= plan.num_tasks; ++t) {
    TensorArchive task;
    for (const auto& [name, tensor] : backbone.tensors()) {
      auto it = deltas.find(name);
      if (it == deltas.end()) {
        task.add(name, tensor);
      } else {
        task.add(name, Tensor::from_matrix(tensor.matrix() + it->second[static_cast<std::size_t>(t - 1)]));
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

double task_accuracy(const ForwardFn& merged, const ForwardFn& teacher,
                     const std::vector<Eigen::VectorXd>& probes,
                     const Eigen::MatrixXd& readout) {
  if (probes.empty()) throw std::invalid_argument("probe set is empty");
  int agree = 0;
  for (const auto& x : probes) {
    const int a = argmax_index(readout * merged(x));
    const int b = argmax_index(readout * teacher(x));
    if (a == b) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(probes.size());
}

EvalMatrix::EvalMatrix(int tasks) : a_(Eigen::MatrixXd::Constant(tasks, tasks, kNaN)) {
  if (tasks < 1) throw std::invalid_argument("eval matrix needs at least one task");
}

void EvalMatrix::set(int task_pos, int step, double value) {
  if (task_pos < 1 || step < task_pos || step > tasks())
    throw std::invalid_argument("eval matrix entry outside the lower triangle");
  if (value < 0.0 || value > 1.0) throw std::invalid_argument("accuracy outside [0,1]");
  a_(task_pos - 1, step - 1) = value;
}

double EvalMatrix::at(int task_pos, int step) const {
  if (task_pos < 1 || step < task_pos || step > tasks())
    throw std::invalid_argument("eval matrix entry outside the lower triangle");
  const double v = a_(task_pos - 1, step - 1);
  if (std::isnan(v)) throw std::invalid_argument("eval matrix entry is missing");
  return v;
}

double compute_acc(const EvalMatrix& e) {
  const int t = e.tasks();
  double sum = 0.0;
  for (int i = 1; i <= t; ++i) sum += e.at(i, t);
  return sum / static_cast<double>(t);
}

double compute_bwt(const EvalMatrix& e) {
  const int t = e.tasks();
  if (t < 2) throw std::invalid_argument("backward transfer needs at least two tasks");
  double sum = 0.0;
  for (int i = 1; i < t; ++i) sum += e.at(i, t) - e.at(i, i);
  return sum / static_cast<double>(t - 1);
}

namespace {

AllocationStats allocation_from_counts(const std::map<std::string, double>& counts, int tasks) {
  AllocationStats stats;
  stats.tasks = tasks;
  std::map<std::string, std::vector<double>> kind_counts;
  std::map<int, std::vector<double>> layer_counts;
  std::vector<std::string> names;
  for (const auto& [name, count] : counts) names.push_back(name);
  names = sort_modules(std::move(names));

  for (const auto& name : names) {
    const double count = counts.at(name);
    const ModuleId id = parse_module_name(name);
    ModuleAllocation m;
    m.module = name;
    m.layer = id.layer == std::numeric_limits<int>::max() ? -1 : id.layer;
    m.kind = id.recognized ? kModuleKinds[static_cast<std::size_t>(id.kind_rank)] : "unknown";
    m.experts = count;
    m.reduction = tasks > 0 ? 1.0 - count / static_cast<double>(tasks) : 0.0;
    stats.modules.push_back(m);
    kind_counts[m.kind].push_back(count);
    layer_counts[m.layer].push_back(count);
  }
  for (const auto& [kind, cs] : kind_counts) {
    const double mean = mean_of(cs);
    stats.by_kind[kind] = {mean, tasks > 0 ? 1.0 - mean / static_cast<double>(tasks) : 0.0};
  }
  for (const auto& [layer, cs] : layer_counts) {
    const double mean = mean_of(cs);
    stats.by_layer[layer] = {mean, tasks > 0 ? 1.0 - mean / static_cast<double>(tasks) : 0.0};
  }
  return stats;
}

}  // namespace

AllocationStats allocation_stats(const ExpertStore& store) {
  std::map<std::string, double> counts;
  for (const auto& [name, reg] : store.modules)
    counts[name] = static_cast<double>(reg.experts.size());
  return allocation_from_counts(counts, store.task_count());
}

std::map<std::string, Eigen::MatrixXd> affinity_heatmaps(const TensorArchive& backbone,
                                                         const std::vector<TensorArchive>& tasks,
                                                         double rho) {
  std::map<std::string, Eigen::MatrixXd> maps;
  const int t_count = static_cast<int>(tasks.size());
  std::map<std::string, std::vector<std::optional<ExpertXd>>> experts;
  for (int t = 0; t < t_count; ++t) {
    auto deltas = diff_modules(backbone, tasks[static_cast<std::size_t>(t)]);
    for (auto& [name, delta] : deltas) experts[name].push_back(truncated_svd(delta, rho));
  }
  for (const auto& [name, per_task] : experts) {
    Eigen::MatrixXd heat = Eigen::MatrixXd::Constant(t_count, t_count, kNaN);
    bool any = false;
    for (int a = 0; a < t_count; ++a) {
      if (!per_task[static_cast<std::size_t>(a)]) continue;
      heat(a, a) = 1.0;
      any = true;
      for (int b = a + 1; b < t_count; ++b) {
        if (!per_task[static_cast<std::size_t>(b)]) continue;
        const double v = subspace_affinity(*per_task[static_cast<std::size_t>(a)],
                                           *per_task[static_cast<std::size_t>(b)]);
        heat(a, b) = v;
        heat(b, a) = v;
      }
    }
    if (any) maps.emplace(name, std::move(heat));
  }
  return maps;
}

namespace {

// Routing features for one evaluation: a seeded unit vector inside the
// task's planted input subspace per module, optionally with relative noise.
std::map<std::string, Eigen::VectorXd> routing_features(const ExpertStore& store,
                                                        const TaskStream& stream,
                                                        int task_id, uint64_t key,
                                                        double query_noise) {
  std::map<std::string, Eigen::VectorXd> features;
  Rng rng(key);
  for (const auto& [name, reg] : store.modules) {
    auto it = stream.plants.find(name);
    if (it == stream.plants.end())
      throw std::logic_error("store module '" + name + "' was never planted");
    const ModulePlant& plant = it->second[static_cast<std::size_t>(task_id - 1)];
    Eigen::VectorXd coeff(plant.right.cols());
    for (Eigen::Index k = 0; k < coeff.size(); ++k) coeff(k) = rng.gaussian();
    Eigen::VectorXd f = plant.right * coeff;
    f.normalize();
    if (query_noise > 0.0) {
      Eigen::VectorXd noise(f.size());
      for (Eigen::Index k = 0; k < noise.size(); ++k) noise(k) = rng.gaussian();
      noise.normalize();
      f += query_noise * noise;
    }
    features.emplace(name, std::move(f));
  }
  return features;
}

}  // namespace

BenchReport run_experiment(const TaskPlan& plan, const BackboneSpec& spec,
                           const EvolutionConfig& config,
                           const std::vector<uint64_t>& seeds,
                           const BenchOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
  if (options.probes < 1) throw std::invalid_argument("probe count must be >= 1");
  if (options.readout_classes < 2) throw std::invalid_argument("readout needs >= 2 classes");

  const TensorArchive backbone = init_backbone(spec);
  const std::string backbone_ref = content_hash(backbone);

  // The planted rank must survive truncation at the configured rho.
  for (const auto& name : backbone.module_names()) {
    const Tensor& w = backbone.at(name);
    const Eigen::Index r = truncation_rank(w.rows(), w.cols(), config.rho);
    if ((plan.shared_modules.count(name) || plan.specific_modules.count(name)) &&
        plan.planted_rank > r)
      throw std::invalid_argument("module '" + name + "': planted rank " +
                                  std::to_string(plan.planted_rank) +
                                  " exceeds the truncation rank " + std::to_string(r));
  }

  const TaskStream stream = generate_stream(plan, backbone);
  const int t_count = plan.num_tasks;

  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> dims;
  for (const auto& name : backbone.module_names()) {
    const Tensor& w = backbone.at(name);
    dims[name] = {w.rows(), w.cols()};
  }

  BenchReport report;
  report.plan = plan;
  report.backbone = spec;
  report.config = config;
  report.options = options;

  // One fixed readout for the whole experiment.
  Rng readout_rng(splitmix64(plan.seed + 0x5eedu));
  Eigen::MatrixXd readout(options.readout_classes, spec.width);
  for (Eigen::Index i = 0; i < readout.size(); ++i) readout(i) = readout_rng.gaussian();

  std::map<std::string, std::vector<double>> counts_acc;
  std::map<int, std::vector<double>> final_acc_by_task;
  std::vector<double> accs, bwts;
  Eigen::MatrixXd eval_sum = Eigen::MatrixXd::Zero(t_count, t_count);

  for (uint64_t seed : seeds) {
    std::vector<int> order(static_cast<std::size_t>(t_count));
    for (int i = 0; i < t_count; ++i) order[static_cast<std::size_t>(i)] = i + 1;
    Rng shuffle_rng(seed);
    shuffle_rng.shuffle(order);

    EvolutionEngine engine(dims, config);
    EvalMatrix eval(t_count);

    for (int step = 1; step <= t_count; ++step) {
      const int task_id = order[static_cast<std::size_t>(step - 1)];
      auto deltas = diff_modules(backbone, stream.tasks[static_cast<std::size_t>(task_id - 1)]);
      engine.evolve_step(task_id, deltas);

      const ExpertStore store = engine.freeze(backbone_ref);
      const DependencyGraph graph = build_graph(store);

      for (int pos = 1; pos <= step; ++pos) {
        const int eval_task = order[static_cast<std::size_t>(pos - 1)];
        const uint64_t key = splitmix64(seed ^ (static_cast<uint64_t>(step) << 32) ^
                                        static_cast<uint64_t>(eval_task) ^ 0xfeedULL);
        const auto features =
            routing_features(store, stream, eval_task, key, options.query_noise);
        const ActivationPath path = route(store, graph, features);

        Rng probe_rng(splitmix64(seed ^ (static_cast<uint64_t>(eval_task) << 16) ^ 0xbeefULL));
        std::vector<Eigen::VectorXd> probes;
        probes.reserve(static_cast<std::size_t>(options.probes));
        for (int p = 0; p < options.probes; ++p) {
          Eigen::VectorXd x(spec.width);
          for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = probe_rng.uniform(-1.0, 1.0);
          probes.push_back(std::move(x));
        }

        const TensorArchive& teacher_weights = stream.tasks[static_cast<std::size_t>(eval_task - 1)];
        const double acc = task_accuracy(
            [&](const Eigen::VectorXd& x) { return integrate_and_forward(backbone, path, store, x); },
            [&](const Eigen::VectorXd& x) { return forward(teacher_weights, x); },
            probes, readout);
        eval.set(pos, step, acc);
      }
    }

    SeedRun run;
    run.seed = seed;
    run.order = order;
    run.eval = eval.raw();
    run.acc = compute_acc(eval);
    run.bwt = t_count >= 2 ? compute_bwt(eval) : kNaN;
    const ExpertStore final_store = engine.freeze(backbone_ref);
    for (const auto& [name, reg] : final_store.modules) {
      run.final_counts[name] = static_cast<int>(reg.experts.size());
      counts_acc[name].push_back(static_cast<double>(reg.experts.size()));
    }
    for (int pos = 1; pos <= t_count; ++pos)
      final_acc_by_task[order[static_cast<std::size_t>(pos - 1)]].push_back(eval.at(pos, t_count));

    accs.push_back(run.acc);
    if (t_count >= 2) bwts.push_back(run.bwt);
    for (int i = 0; i < t_count; ++i)
      for (int t = i; t < t_count; ++t) eval_sum(i, t) += run.eval(i, t);
    report.runs.push_back(std::move(run));
  }

  report.acc_mean = mean_of(accs);
  report.acc_std = pop_std(accs);
  if (!bwts.empty()) {
    report.bwt_mean = mean_of(bwts);
    report.bwt_std = pop_std(bwts);
  } else {
    report.bwt_mean = kNaN;
    report.bwt_std = kNaN;
  }

  report.eval_mean = Eigen::MatrixXd::Constant(t_count, t_count, kNaN);
  for (int i = 0; i < t_count; ++i)
    for (int t = i; t < t_count; ++t)
      report.eval_mean(i, t) = eval_sum(i, t) / static_cast<double>(seeds.size());

  std::map<std::string, double> mean_counts;
  for (const auto& [name, cs] : counts_acc) mean_counts[name] = mean_of(cs);
  report.allocation = allocation_from_counts(mean_counts, t_count);
  for (const auto& [task, vals] : final_acc_by_task) report.per_task_acc[task] = mean_of(vals);
  report.affinity_heatmaps = affinity_heatmaps(backbone, stream.tasks, config.rho);
  return report;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

std::string csv_matrix(const Eigen::MatrixXd& m, const std::string& row_label,
                       const std::string& col_prefix) {
  std::string text = row_label;
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    text += "," + col_prefix + std::to_string(j + 1);
  text += "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    text += std::to_string(i + 1);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (std::isnan(m(i, j))) {
        text += ",";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.12g", m(i, j));
        text += buf;
      }
    }
    text += "\n";
  }
  return text;
}

}  // namespace

void write_report(const BenchReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char buf[128];

  json root;
  root["plan"] = {{"num_tasks", report.plan.num_tasks},
                  {"shared_modules", report.plan.shared_modules},
                  {"specific_modules", report.plan.specific_modules},
                  {"planted_rank", report.plan.planted_rank},
                  {"noise_scale", report.plan.noise_scale},
                  {"seed", report.plan.seed}};
  root["backbone"] = {{"layers", report.backbone.layers},
                      {"width", report.backbone.width},
                      {"kinds", report.backbone.kinds},
                      {"seed", report.backbone.seed}};
  root["config"] = {{"rho", report.config.rho},
                    {"beta", report.config.beta},
                    {"gamma0", report.config.gamma0},
                    {"pool_min", report.config.pool_min},
                    {"per_module_pool", report.config.per_module_pool}};
  root["options"] = {{"probes", report.options.probes},
                     {"readout_classes", report.options.readout_classes},
                     {"query_noise", report.options.query_noise}};
  root["acc"] = {{"mean", report.acc_mean}, {"std", report.acc_std}};
  if (!std::isnan(report.bwt_mean))
    root["bwt"] = {{"mean", report.bwt_mean}, {"std", report.bwt_std}};
  json runs = json::array();
  for (const auto& run : report.runs) {
    json jr;
    jr["seed"] = run.seed;
    jr["order"] = run.order;
    jr["acc"] = run.acc;
    if (!std::isnan(run.bwt)) jr["bwt"] = run.bwt;
    jr["final_counts"] = run.final_counts;
    runs.push_back(std::move(jr));
  }
  root["runs"] = std::move(runs);
  json per_task = json::object();
  for (const auto& [task, acc] : report.per_task_acc)
    per_task[std::to_string(task)] = acc;
  root["per_task_accuracy"] = std::move(per_task);
  write_text(dir / "report.json", root.dump(2) + "\n");

  write_text(dir / "eval_matrix.csv", csv_matrix(report.eval_mean, "task_pos", "step_"));

  std::string mod_csv = "module,layer,kind,experts,reduction\n";
  for (const auto& m : report.allocation.modules) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%.12g,%.12g\n", m.module.c_str(), m.layer,
                  m.kind.c_str(), m.experts, m.reduction);
    mod_csv += buf;
  }
  write_text(dir / "allocation_modules.csv", mod_csv);

  std::string kind_csv = "kind,mean_experts,mean_reduction\n";
  for (const auto& [kind, stats] : report.allocation.by_kind) {
    std::snprintf(buf, sizeof(buf), "%s,%.12g,%.12g\n", kind.c_str(), stats.first, stats.second);
    kind_csv += buf;
  }
  write_text(dir / "allocation_kinds.csv", kind_csv);

  std::string layer_csv = "layer,mean_experts,mean_reduction\n";
  for (const auto& [layer, stats] : report.allocation.by_layer) {
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g\n", layer, stats.first, stats.second);
    layer_csv += buf;
  }
  write_text(dir / "allocation_layers.csv", layer_csv);

  for (const auto& [name, heat] : report.affinity_heatmaps)
    write_text(dir / ("heatmap_" + name + ".csv"), csv_matrix(heat, "task", "task_"));
}

}  // namespace submerge
