#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "submerge/evolution.hpp"
#include "submerge/subspace.hpp"

namespace submerge {

// Frozen registry snapshot: rank, experts in id order, decision log.
struct StoredRegistry {
  Eigen::Index rank = 0;
  std::vector<ExpertXd> experts;
  std::vector<DecisionRecord> log;

  bool operator==(const StoredRegistry&) const = default;
};

// On disk: a directory holding registry.json plus one tensor archive with
// all basis matrices under "expert.<module>.<id>.{left,right}".
struct ExpertStore {
  std::map<std::string, StoredRegistry> modules;
  std::string backbone_ref;
  EvolutionConfig config;

  std::vector<std::string> module_order() const;
  // Union of all task identity sets.
  std::set<int> all_tasks() const;
  int task_count() const { return static_cast<int>(all_tasks().size()); }

  bool operator==(const ExpertStore&) const = default;
};

void save_store(const ExpertStore& store, const std::filesystem::path& dir);
ExpertStore load_store(const std::filesystem::path& dir);

// Hash over the serialized store files; identical content, identical hash.
std::string store_hash(const ExpertStore& store);

}  // namespace submerge
