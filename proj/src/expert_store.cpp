#include "submerge/expert_store.hpp"

#include <fstream>

#include <json.hpp>

#include "submerge/tensor_archive.hpp"

namespace submerge {

using nlohmann::json;

std::vector<std::string> ExpertStore::module_order() const {
  std::vector<std::string> names;
  for (const auto& [name, reg] : modules) names.push_back(name);
  return sort_modules(std::move(names));
}

std::set<int> ExpertStore::all_tasks() const {
  std::set<int> tasks;
  for (const auto& [name, reg] : modules)
    for (const auto& e : reg.experts) tasks.insert(e.tasks.begin(), e.tasks.end());
  return tasks;
}

namespace {

std::string expert_tensor_name(const std::string& module, int id, const char* side) {
  return "expert." + module + "." + std::to_string(id) + "." + side;
}

json decision_to_json(const DecisionRecord& rec) {
  json j;
  j["task"] = rec.task;
  j["decision"] = decision_name(rec.decision);
  j["gamma"] = rec.gamma;
  if (rec.expert >= 0) j["expert"] = rec.expert;
  if (rec.affinity) j["affinity"] = *rec.affinity;
  return j;
}

DecisionRecord decision_from_json(const json& j) {
  DecisionRecord rec;
  rec.task = j.at("task").get<int>();
  const std::string name = j.at("decision").get<std::string>();
  if (name == "created") rec.decision = Decision::kCreated;
  else if (name == "consolidated") rec.decision = Decision::kConsolidated;
  else if (name == "skipped-zero") rec.decision = Decision::kSkippedZero;
  else throw ValidationError("unknown decision '" + name + "'");
  rec.gamma = j.at("gamma").get<double>();
  if (j.contains("expert")) rec.expert = j.at("expert").get<int>();
  if (j.contains("affinity")) rec.affinity = j.at("affinity").get<double>();
  return rec;
}

std::string registry_json(const ExpertStore& store) {
  json root;
  root["format"] = "submerge-expert-store/1";
  root["backbone_ref"] = store.backbone_ref;
  root["config"] = {{"rho", store.config.rho},
                    {"beta", store.config.beta},
                    {"gamma0", store.config.gamma0},
                    {"pool_min", store.config.pool_min},
                    {"per_module_pool", store.config.per_module_pool}};
  json modules = json::object();
  for (const auto& [name, reg] : store.modules) {
    json m;
    m["rank"] = reg.rank;
    json experts = json::array();
    for (int id = 0; id < static_cast<int>(reg.experts.size()); ++id) {
      const ExpertXd& e = reg.experts[id];
      json je;
      je["id"] = id;
      je["tasks"] = std::vector<int>(e.tasks.begin(), e.tasks.end());
      std::vector<double> sv(e.singular_values.data(),
                             e.singular_values.data() + e.singular_values.size());
      je["singular_values"] = sv;
      experts.push_back(std::move(je));
    }
    m["experts"] = std::move(experts);
    json log = json::array();
    for (const auto& rec : reg.log) log.push_back(decision_to_json(rec));
    m["decisions"] = std::move(log);
    modules[name] = std::move(m);
  }
  root["modules"] = std::move(modules);
  return root.dump(2) + "\n";
}

TensorArchive basis_archive(const ExpertStore& store) {
  TensorArchive archive;
  for (const auto& [name, reg] : store.modules) {
    for (int id = 0; id < static_cast<int>(reg.experts.size()); ++id) {
      const ExpertXd& e = reg.experts[id];
      archive.add(expert_tensor_name(name, id, "left"), Tensor::from_matrix(e.left.columns()));
      archive.add(expert_tensor_name(name, id, "right"), Tensor::from_matrix(e.right.columns()));
    }
  }
  return archive;
}

}  // namespace

void save_store(const ExpertStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string registry = registry_json(store);
  std::ofstream out(dir / "registry.json", std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError("cannot write '" + (dir / "registry.json").string() + "'");
  out.write(registry.data(), static_cast<std::streamsize>(registry.size()));
  write_archive(basis_archive(store), dir);
}

ExpertStore load_store(const std::filesystem::path& dir) {
  std::ifstream in(dir / "registry.json", std::ios::binary);
  if (!in) throw ArchiveError("cannot open '" + (dir / "registry.json").string() + "'");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("malformed registry.json: ") + e.what());
  }
  const TensorArchive archive = read_archive(dir);

  ExpertStore store;
  try {
    store.backbone_ref = root.at("backbone_ref").get<std::string>();
    const json& cfg = root.at("config");
    store.config.rho = cfg.at("rho").get<double>();
    store.config.beta = cfg.at("beta").get<double>();
    store.config.gamma0 = cfg.at("gamma0").get<double>();
    store.config.pool_min = cfg.at("pool_min").get<int>();
    store.config.per_module_pool = cfg.at("per_module_pool").get<bool>();

    for (const auto& [name, m] : root.at("modules").items()) {
      StoredRegistry reg;
      reg.rank = m.at("rank").get<Eigen::Index>();
      std::set<int> module_tasks;
      for (const auto& je : m.at("experts")) {
        const int id = je.at("id").get<int>();
        if (id != static_cast<int>(reg.experts.size()))
          throw ValidationError("module '" + name + "': expert ids are not contiguous");
        const auto tasks_vec = je.at("tasks").get<std::vector<int>>();
        if (tasks_vec.empty())
          throw ValidationError("module '" + name + "': expert " + std::to_string(id) +
                                " has an empty task set");
        std::set<int> tasks(tasks_vec.begin(), tasks_vec.end());
        for (int t : tasks) {
          if (t < 1) throw ValidationError("module '" + name + "': non-positive task id");
          if (!module_tasks.insert(t).second)
            throw ValidationError("module '" + name + "': task " + std::to_string(t) +
                                  " appears in two experts");
        }
        const auto sv_vec = je.at("singular_values").get<std::vector<double>>();
        Eigen::VectorXd sv =
            Eigen::Map<const Eigen::VectorXd>(sv_vec.data(), static_cast<Eigen::Index>(sv_vec.size()));
        Eigen::MatrixXd left = archive.at(expert_tensor_name(name, id, "left")).matrix();
        Eigen::MatrixXd right = archive.at(expert_tensor_name(name, id, "right")).matrix();
        if (sv.size() != reg.rank || left.cols() != reg.rank || right.cols() != reg.rank)
          throw ValidationError("module '" + name + "': expert " + std::to_string(id) +
                                " rank differs from the registry rank");
        reg.experts.push_back(
            make_expert(std::move(left), std::move(right), std::move(sv), tasks, 1e-5));
      }
      for (const auto& jd : m.at("decisions")) reg.log.push_back(decision_from_json(jd));
      store.modules.emplace(name, std::move(reg));
    }
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("malformed registry.json: ") + e.what());
  }
  return store;
}

std::string store_hash(const ExpertStore& store) {
  const std::string registry = registry_json(store);
  const TensorArchive archive = basis_archive(store);
  uint64_t h = fnv1a(registry.data(), registry.size());
  const std::string manifest = serialize_manifest(archive);
  const auto blob = serialize_blob(archive);
  h = fnv1a(manifest.data(), manifest.size(), h);
  h = fnv1a(blob.data(), blob.size(), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace submerge
