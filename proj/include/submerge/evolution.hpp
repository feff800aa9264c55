#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "submerge/subspace.hpp"

namespace submerge {

struct ExpertStore;

struct EvolutionConfig {
  double rho = 0.1;      // truncation rank ratio
  double beta = 1.0;     // threshold margin coefficient
  double gamma0 = 0.6;   // bootstrap threshold while the pool is small
  int pool_min = 8;      // scores required before the adaptive formula kicks in
  bool per_module_pool = false;  // pool affinity history per module instead of globally

  bool operator==(const EvolutionConfig&) const = default;
};

// Running history of max-affinity scores driving the adaptive threshold.
class AffinityPool {
 public:
  AffinityPool(double beta, double gamma0, int pool_min)
      : beta_(beta), gamma0_(gamma0), pool_min_(pool_min) {}

  void add(double score);
  const std::vector<double>& scores() const { return scores_; }
  double beta() const { return beta_; }
  double gamma0() const { return gamma0_; }
  int pool_min() const { return pool_min_; }

 private:
  std::vector<double> scores_;
  double beta_;
  double gamma0_;
  int pool_min_;
};

// gamma = mean + beta * population std of the pooled scores, clamped to
// [0,1]; gamma0 until the pool holds pool_min scores.
double adaptive_threshold(const AffinityPool& pool);

enum class Decision { kCreated, kConsolidated, kSkippedZero };

const char* decision_name(Decision d);

struct DecisionRecord {
  int task = 0;
  Decision decision = Decision::kCreated;
  int expert = -1;                 // created index or consolidation target
  std::optional<double> affinity;  // max affinity used, absent for first/skipped
  double gamma = 0.0;              // threshold in force for the step

  bool operator==(const DecisionRecord&) const = default;
};

// One module's evolving expert population.
struct ExpertRegistry {
  std::string module;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index rank = 0;
  std::vector<ExpertXd> experts;
  std::vector<DecisionRecord> log;
};

// Smallest index attaining the maximum affinity against the candidate.
std::pair<int, double> argmax_affinity(const ExpertRegistry& registry,
                                       const ExpertXd& candidate);

struct ModuleDecision {
  std::string module;
  DecisionRecord record;
};

struct EvolutionReport {
  int task = 0;
  double gamma = 0.0;  // meaningful when pooling globally
  std::vector<ModuleDecision> decisions;
};

// Sequential absorption of task updates into per-module expert registries.
// The threshold for a step is frozen from scores of strictly earlier steps,
// so module processing order cannot change outcomes.
class EvolutionEngine {
 public:
  EvolutionEngine(const std::map<std::string, std::pair<Eigen::Index, Eigen::Index>>& module_dims,
                  const EvolutionConfig& config);

  EvolutionReport evolve_step(int task_id,
                              const std::map<std::string, Eigen::MatrixXd>& task_deltas);

  // Immutable snapshot with all numerics rounded to storage precision, so a
  // save/load round trip reproduces it exactly. Requires at least one step.
  ExpertStore freeze(const std::string& backbone_ref) const;

  int step() const { return step_; }
  const EvolutionConfig& config() const { return config_; }
  const std::vector<std::string>& module_order() const { return ordered_modules_; }
  const ExpertRegistry& registry(const std::string& module) const;
  const AffinityPool& pool() const { return global_pool_; }

  // Modules that never received a non-zero update; absent from freeze().
  std::vector<std::string> empty_modules() const;

 private:
  AffinityPool& pool_for(const std::string& module);

  EvolutionConfig config_;
  std::vector<std::string> ordered_modules_;
  std::map<std::string, ExpertRegistry> registries_;
  AffinityPool global_pool_;
  std::map<std::string, AffinityPool> module_pools_;
  std::set<int> seen_tasks_;
  int step_ = 0;
};

}  // namespace submerge
