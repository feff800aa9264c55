#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "submerge/backbone.hpp"
#include "submerge/evolution.hpp"
#include "submerge/expert_store.hpp"
#include "submerge/tensor_archive.hpp"

namespace submerge {

// Synthetic task stream: shared modules reuse one planted subspace pair with
// per-task singular values, specific modules get mutually orthogonal plants.
struct TaskPlan {
  int num_tasks = 4;
  std::set<std::string> shared_modules;
  std::set<std::string> specific_modules;
  Eigen::Index planted_rank = 3;
  double noise_scale = 0.0;  // relative Frobenius noise on each planted update
  uint64_t seed = 0;
};

struct ModulePlant {
  Eigen::MatrixXd left;   // d_o x planted_rank
  Eigen::MatrixXd right;  // d_i x planted_rank
  Eigen::VectorXd singular_values;
};

struct TaskStream {
  std::vector<TensorArchive> tasks;                        // index t-1
  std::map<std::string, std::vector<ModulePlant>> plants;  // module -> per task
};

TaskStream generate_stream(const TaskPlan& plan, const TensorArchive& backbone);

using ForwardFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Fraction of probes on which merged and teacher agree under argmax of a
// fixed random linear readout.
double task_accuracy(const ForwardFn& merged, const ForwardFn& teacher,
                     const std::vector<Eigen::VectorXd>& probes,
                     const Eigen::MatrixXd& readout);

// Lower-triangular accuracy matrix A[i][t]: accuracy on the i-th arrived
// task after merge step t. 1-based indices.
class EvalMatrix {
 public:
  explicit EvalMatrix(int tasks);
  int tasks() const { return static_cast<int>(a_.rows()); }
  void set(int task_pos, int step, double value);
  double at(int task_pos, int step) const;
  const Eigen::MatrixXd& raw() const { return a_; }

 private:
  Eigen::MatrixXd a_;
};

// ACC = mean of the last column.
double compute_acc(const EvalMatrix& e);
// BWT = mean over i < T of A[i][T] - A[i][i]; requires T >= 2.
double compute_bwt(const EvalMatrix& e);

struct ModuleAllocation {
  std::string module;
  int layer = -1;
  std::string kind;
  double experts = 0.0;  // mean over runs
  double reduction = 0.0;
};

struct AllocationStats {
  int tasks = 0;
  std::vector<ModuleAllocation> modules;
  std::map<std::string, std::pair<double, double>> by_kind;  // mean experts, mean reduction
  std::map<int, std::pair<double, double>> by_layer;
};

AllocationStats allocation_stats(const ExpertStore& store);

struct BenchOptions {
  int probes = 64;
  int readout_classes = 8;
  double query_noise = 0.0;  // relative noise on routing features
};

struct SeedRun {
  uint64_t seed = 0;
  std::vector<int> order;  // arrival order of task ids
  Eigen::MatrixXd eval;    // lower-triangular, NaN elsewhere
  double acc = 0.0;
  double bwt = 0.0;  // NaN for T < 2
  std::map<std::string, int> final_counts;
};

struct BenchReport {
  TaskPlan plan;
  BackboneSpec backbone;
  EvolutionConfig config;
  BenchOptions options;
  std::vector<SeedRun> runs;
  double acc_mean = 0.0, acc_std = 0.0;
  double bwt_mean = 0.0, bwt_std = 0.0;
  AllocationStats allocation;
  Eigen::MatrixXd eval_mean;
  std::map<int, double> per_task_acc;  // task id -> mean final accuracy
  std::map<std::string, Eigen::MatrixXd> affinity_heatmaps;  // module -> T x T
};

// Full protocol: per seed, shuffle the arrival order, evolve, freeze and
// route at every prefix to fill the eval matrix, then aggregate ACC/BWT
// across seeds.
BenchReport run_experiment(const TaskPlan& plan, const BackboneSpec& spec,
                           const EvolutionConfig& config,
                           const std::vector<uint64_t>& seeds,
                           const BenchOptions& options = {});

// Pairwise per-module affinity between the T extracted task candidates.
std::map<std::string, Eigen::MatrixXd> affinity_heatmaps(const TensorArchive& backbone,
                                                         const std::vector<TensorArchive>& tasks,
                                                         double rho);

// report.json plus CSV tables (eval matrix, allocation, heatmaps).
void write_report(const BenchReport& report, const std::filesystem::path& dir);

}  // namespace submerge
