#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "submerge/errors.hpp"

namespace submerge {

// ---------------------------------------------------------------------------
// Module naming
//
// Weight tensors are named "layer.<i>.<kind>". Adjacency between modules is
// lexicographic on (layer index, kind rank); names outside the convention
// sort after all recognized ones, by name.
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 7> kModuleKinds = {
    "attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "other"};

struct ModuleId {
  int layer = -1;
  int kind_rank = static_cast<int>(kModuleKinds.size());
  std::string name;
  bool recognized = false;
};

ModuleId parse_module_name(const std::string& name);
std::string module_name(int layer, const std::string& kind);
bool module_order_less(const std::string& a, const std::string& b);

// Canonical ordering used for "adjacent modules" everywhere.
std::vector<std::string> sort_modules(std::vector<std::string> names);

// ---------------------------------------------------------------------------
// Archives
//
// An archive is a directory holding manifest.json (records) and blob.bin
// (raw little-endian row-major f32 payload).
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<Eigen::Index> shape;
  std::vector<float> data;  // row-major

  Eigen::Index element_count() const;
  bool is_matrix() const { return shape.size() == 2; }
  Eigen::Index rows() const { return shape.at(0); }
  Eigen::Index cols() const { return shape.at(1); }

  // Payload promoted to f64 for all computation.
  Eigen::MatrixXd matrix() const;

  // Rounds entries to f32.
  static Tensor from_matrix(const Eigen::MatrixXd& m);
};

class TensorArchive {
 public:
  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  // Names of 2-D weight tensors in canonical module order.
  std::vector<std::string> module_names() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

// Serialized forms; write_archive emits exactly these bytes, so hashing and
// writing can never disagree.
std::string serialize_manifest(const TensorArchive& archive);
std::vector<std::uint8_t> serialize_blob(const TensorArchive& archive);

void write_archive(const TensorArchive& archive, const std::filesystem::path& dir);
TensorArchive read_archive(const std::filesystem::path& dir);

// Per-module weight difference task - backbone, in f64.
std::map<std::string, Eigen::MatrixXd> diff_modules(const TensorArchive& backbone,
                                                    const TensorArchive& task);

// FNV-1a over manifest bytes then blob bytes, as a hex string.
std::string content_hash(const TensorArchive& archive);

uint64_t fnv1a(const void* data, std::size_t len, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace submerge
