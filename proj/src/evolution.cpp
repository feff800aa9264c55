#include "submerge/evolution.hpp"

#include <cmath>

#include "submerge/expert_store.hpp"
#include "submerge/numeric.hpp"
#include "submerge/tensor_archive.hpp"

namespace submerge {

void AffinityPool::add(double score) {
  if (score < 0.0 || score > 1.0)
    throw std::invalid_argument("affinity score outside [0,1]");
  scores_.push_back(score);
}

double adaptive_threshold(const AffinityPool& pool) {
  const auto& s = pool.scores();
  if (static_cast<int>(s.size()) < pool.pool_min()) return pool.gamma0();
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(s.size());
  double var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  var /= static_cast<double>(s.size());  // population variance
  const double gamma = mean + pool.beta() * std::sqrt(var);
  return std::min(1.0, std::max(0.0, gamma));
}

const char* decision_name(Decision d) {
  switch (d) {
    case Decision::kCreated: return "created";
    case Decision::kConsolidated: return "consolidated";
    case Decision::kSkippedZero: return "skipped-zero";
  }
  return "unknown";
}

std::pair<int, double> argmax_affinity(const ExpertRegistry& registry,
                                       const ExpertXd& candidate) {
  if (registry.experts.empty())
    throw std::invalid_argument("argmax over empty registry '" + registry.module + "'");
  int best = 0;
  double best_value = subspace_affinity(registry.experts[0], candidate);
  for (int k = 1; k < static_cast<int>(registry.experts.size()); ++k) {
    const double a = subspace_affinity(registry.experts[k], candidate);
    if (a > best_value) {
      best = k;
      best_value = a;
    }
  }
  return {best, best_value};
}

EvolutionEngine::EvolutionEngine(
    const std::map<std::string, std::pair<Eigen::Index, Eigen::Index>>& module_dims,
    const EvolutionConfig& config)
    : config_(config), global_pool_(config.beta, config.gamma0, config.pool_min) {
  if (!(config.rho > 0.0 && config.rho <= 1.0))
    throw std::invalid_argument("rho must lie in (0,1]");
  if (config.pool_min < 1) throw std::invalid_argument("pool_min must be >= 1");
  if (module_dims.empty()) throw std::invalid_argument("no modules configured");

  std::vector<std::string> names;
  for (const auto& [name, dims] : module_dims) {
    const auto [rows, cols] = dims;
    const Eigen::Index r = truncation_rank(rows, cols, config.rho);
    if (r < 1)
      throw std::invalid_argument("module '" + name + "': truncation rank underflow");
    ExpertRegistry reg;
    reg.module = name;
    reg.rows = rows;
    reg.cols = cols;
    reg.rank = r;
    registries_.emplace(name, std::move(reg));
    module_pools_.emplace(name, AffinityPool(config.beta, config.gamma0, config.pool_min));
    names.push_back(name);
  }
  ordered_modules_ = sort_modules(std::move(names));
}

AffinityPool& EvolutionEngine::pool_for(const std::string& module) {
  return config_.per_module_pool ? module_pools_.at(module) : global_pool_;
}

const ExpertRegistry& EvolutionEngine::registry(const std::string& module) const {
  auto it = registries_.find(module);
  if (it == registries_.end())
    throw std::invalid_argument("unknown module '" + module + "'");
  return it->second;
}

EvolutionReport EvolutionEngine::evolve_step(
    int task_id, const std::map<std::string, Eigen::MatrixXd>& task_deltas) {
  if (task_id < 1) throw std::invalid_argument("task ids are positive");
  if (seen_tasks_.count(task_id))
    throw std::invalid_argument("task " + std::to_string(task_id) + " already processed");
  for (const auto& [name, reg] : registries_)
    if (!task_deltas.count(name))
      throw std::invalid_argument("missing update for module '" + name + "'");
  for (const auto& [name, delta] : task_deltas)
    if (!registries_.count(name))
      throw std::invalid_argument("unexpected module '" + name + "'");

  // Thresholds are frozen before any registry changes; scores produced by
  // this step enter the pools only after every module is decided.
  std::map<std::string, double> frozen_gamma;
  for (const auto& name : ordered_modules_)
    frozen_gamma[name] = adaptive_threshold(pool_for(name));

  EvolutionReport report;
  report.task = task_id;
  report.gamma = config_.per_module_pool ? 0.0 : adaptive_threshold(global_pool_);
  std::vector<std::pair<std::string, double>> step_scores;

  for (const auto& name : ordered_modules_) {
    ExpertRegistry& reg = registries_.at(name);
    const Eigen::MatrixXd& delta = task_deltas.at(name);
    if (delta.rows() != reg.rows || delta.cols() != reg.cols)
      throw std::invalid_argument("shape mismatch for module '" + name + "'");

    const double gamma = frozen_gamma.at(name);
    DecisionRecord rec;
    rec.task = task_id;
    rec.gamma = gamma;

    auto candidate = truncated_svd(delta, config_.rho);
    if (!candidate) {
      rec.decision = Decision::kSkippedZero;
    } else {
      candidate->tasks = {task_id};
      if (reg.experts.empty()) {
        reg.experts.push_back(std::move(*candidate));
        rec.decision = Decision::kCreated;
        rec.expert = static_cast<int>(reg.experts.size()) - 1;
      } else {
        const auto [k_star, max_affinity] = argmax_affinity(reg, *candidate);
        rec.affinity = max_affinity;
        step_scores.emplace_back(name, max_affinity);
        if (max_affinity >= gamma) {
          reg.experts[k_star] = subspace_merge(reg.experts[k_star], *candidate);
          rec.decision = Decision::kConsolidated;
          rec.expert = k_star;
        } else {
          reg.experts.push_back(std::move(*candidate));
          rec.decision = Decision::kCreated;
          rec.expert = static_cast<int>(reg.experts.size()) - 1;
        }
      }
    }
    reg.log.push_back(rec);
    report.decisions.push_back({name, rec});
  }

  for (const auto& [name, score] : step_scores) pool_for(name).add(score);
  seen_tasks_.insert(task_id);
  ++step_;
  return report;
}

std::vector<std::string> EvolutionEngine::empty_modules() const {
  std::vector<std::string> names;
  for (const auto& name : ordered_modules_)
    if (registries_.at(name).experts.empty()) names.push_back(name);
  return names;
}

namespace {

ExpertXd quantize_expert(const ExpertXd& e) {
  Eigen::MatrixXd left = e.left.columns();
  Eigen::MatrixXd right = e.right.columns();
  Eigen::VectorXd sv = e.singular_values;
  for (Eigen::Index i = 0; i < left.size(); ++i) left(i) = round_f32(left(i));
  for (Eigen::Index i = 0; i < right.size(); ++i) right(i) = round_f32(right(i));
  for (Eigen::Index i = 0; i < sv.size(); ++i) sv(i) = round_f32(sv(i));
  // Storage precision; see OrthonormalBasis::from_columns.
  return make_expert(std::move(left), std::move(right), std::move(sv), e.tasks, 1e-5);
}

}  // namespace

ExpertStore EvolutionEngine::freeze(const std::string& backbone_ref) const {
  if (step_ < 1) throw std::logic_error("freeze before any step was processed");
  ExpertStore store;
  store.backbone_ref = backbone_ref;
  store.config = config_;
  for (const auto& name : ordered_modules_) {
    const ExpertRegistry& reg = registries_.at(name);
    if (reg.experts.empty()) continue;
    StoredRegistry sr;
    sr.rank = reg.rank;
    sr.log = reg.log;
    for (const auto& e : reg.experts) sr.experts.push_back(quantize_expert(e));
    store.modules.emplace(name, std::move(sr));
  }
  return store;
}

}  // namespace submerge
