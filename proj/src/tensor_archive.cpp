#include "submerge/tensor_archive.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace submerge {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Module naming
// ---------------------------------------------------------------------------

ModuleId parse_module_name(const std::string& name) {
  ModuleId id;
  id.name = name;
  id.layer = std::numeric_limits<int>::max();
  constexpr std::string_view prefix = "layer.";
  if (name.rfind(prefix, 0) != 0) return id;
  const auto dot = name.find('.', prefix.size());
  if (dot == std::string::npos) return id;
  int layer = 0;
  const char* first = name.data() + prefix.size();
  const char* last = name.data() + dot;
  auto [ptr, ec] = std::from_chars(first, last, layer);
  if (ec != std::errc() || ptr != last || layer < 0) return id;
  id.layer = layer;
  const std::string kind = name.substr(dot + 1);
  for (std::size_t k = 0; k < kModuleKinds.size(); ++k) {
    if (kind == kModuleKinds[k]) {
      id.kind_rank = static_cast<int>(k);
      id.recognized = true;
      break;
    }
  }
  return id;
}

std::string module_name(int layer, const std::string& kind) {
  return "layer." + std::to_string(layer) + "." + kind;
}

bool module_order_less(const std::string& a, const std::string& b) {
  const ModuleId ia = parse_module_name(a);
  const ModuleId ib = parse_module_name(b);
  if (ia.layer != ib.layer) return ia.layer < ib.layer;
  if (ia.kind_rank != ib.kind_rank) return ia.kind_rank < ib.kind_rank;
  return a < b;
}

std::vector<std::string> sort_modules(std::vector<std::string> names) {
  std::sort(names.begin(), names.end(), module_order_less);
  return names;
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

Eigen::Index Tensor::element_count() const {
  Eigen::Index n = 1;
  for (Eigen::Index s : shape) n *= s;
  return n;
}

Eigen::MatrixXd Tensor::matrix() const {
  if (!is_matrix()) throw ArchiveError("tensor is not 2-D");
  Eigen::MatrixXd m(rows(), cols());
  for (Eigen::Index i = 0; i < rows(); ++i)
    for (Eigen::Index j = 0; j < cols(); ++j)
      m(i, j) = static_cast<double>(data[static_cast<std::size_t>(i * cols() + j)]);
  return m;
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
  return t;
}

void TensorArchive::add(const std::string& name, Tensor t) {
  if (name.empty()) throw ArchiveError("empty tensor name");
  if (t.shape.empty()) throw ArchiveError("tensor '" + name + "' has no shape");
  for (Eigen::Index s : t.shape)
    if (s < 1) throw ArchiveError("tensor '" + name + "' has a non-positive extent");
  if (t.element_count() != static_cast<Eigen::Index>(t.data.size()))
    throw ArchiveError("tensor '" + name + "' data does not match its shape");
  if (!tensors_.emplace(name, std::move(t)).second)
    throw ArchiveError("duplicate tensor name '" + name + "'");
}

const Tensor& TensorArchive::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ArchiveError("tensor '" + name + "' not found");
  return it->second;
}

std::vector<std::string> TensorArchive::module_names() const {
  std::vector<std::string> names;
  for (const auto& [name, tensor] : tensors_)
    if (tensor.is_matrix()) names.push_back(name);
  return sort_modules(std::move(names));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string serialize_manifest(const TensorArchive& archive) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors()) {
    const std::uint64_t byte_len = 4ull * static_cast<std::uint64_t>(tensor.element_count());
    json rec;
    rec["name"] = name;
    rec["shape"] = tensor.shape;
    rec["dtype"] = "f32";
    rec["offset"] = offset;
    rec["byte_len"] = byte_len;
    manifest.push_back(std::move(rec));
    offset += byte_len;
  }
  return manifest.dump(2) + "\n";
}

std::vector<std::uint8_t> serialize_blob(const TensorArchive& archive) {
  std::vector<std::uint8_t> blob;
  for (const auto& [name, tensor] : archive.tensors()) {
    for (float f : tensor.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      blob.push_back(static_cast<std::uint8_t>(bits & 0xff));
      blob.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xff));
      blob.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xff));
      blob.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xff));
    }
  }
  return blob;
}

namespace {

void write_file(const std::filesystem::path& path, const void* data, std::size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError("cannot open '" + path.string() + "' for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw ArchiveError("write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

void write_archive(const TensorArchive& archive, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string manifest = serialize_manifest(archive);
  const std::vector<std::uint8_t> blob = serialize_blob(archive);
  write_file(dir / "manifest.json", manifest.data(), manifest.size());
  write_file(dir / "blob.bin", blob.data(), blob.size());
}

TensorArchive read_archive(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_file(dir / "manifest.json");
  const auto blob = read_file(dir / "blob.bin");

  json manifest;
  try {
    manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const json::exception& e) {
    throw ArchiveError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
  if (!manifest.is_array()) throw ArchiveError("manifest must be a JSON array");

  struct Range {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;
  TensorArchive archive;
  std::uint64_t max_end = 0;

  for (const auto& rec : manifest) {
    std::string name;
    try {
      name = rec.at("name").get<std::string>();
      const auto shape = rec.at("shape").get<std::vector<Eigen::Index>>();
      const auto dtype = rec.at("dtype").get<std::string>();
      const auto offset = rec.at("offset").get<std::uint64_t>();
      const auto byte_len = rec.at("byte_len").get<std::uint64_t>();

      if (dtype != "f32") throw ArchiveError("record '" + name + "': unsupported dtype '" + dtype + "'");
      if (offset % 4 != 0) throw ArchiveError("record '" + name + "': offset not 4-byte aligned");
      Tensor t;
      t.shape = shape;
      std::uint64_t count = 1;
      for (Eigen::Index s : shape) {
        if (s < 1) throw ArchiveError("record '" + name + "': non-positive extent");
        count *= static_cast<std::uint64_t>(s);
      }
      if (byte_len != 4 * count)
        throw ArchiveError("record '" + name + "': byte_len does not match shape");
      if (offset + byte_len > blob.size())
        throw ArchiveError("record '" + name + "': truncated blob (range ends at " +
                           std::to_string(offset + byte_len) + ", blob has " +
                           std::to_string(blob.size()) + " bytes)");

      t.data.resize(count);
      for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint8_t* p = blob.data() + offset + 4 * i;
        const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                   (static_cast<std::uint32_t>(p[1]) << 8) |
                                   (static_cast<std::uint32_t>(p[2]) << 16) |
                                   (static_cast<std::uint32_t>(p[3]) << 24);
        t.data[i] = std::bit_cast<float>(bits);
      }
      archive.add(name, std::move(t));
      ranges.push_back({offset, offset + byte_len, name});
      max_end = std::max(max_end, offset + byte_len);
    } catch (const json::exception& e) {
      throw ArchiveError("malformed manifest record" +
                         (name.empty() ? std::string() : " '" + name + "'") + ": " + e.what());
    }
  }

  if (max_end != blob.size())
    throw ArchiveError("blob length " + std::to_string(blob.size()) +
                       " does not match manifest extent " + std::to_string(max_end));

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& a, const Range& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].begin < ranges[i - 1].end)
      throw ArchiveError("record '" + ranges[i].name + "' overlaps record '" +
                         ranges[i - 1].name + "'");
  }
  return archive;
}

std::map<std::string, Eigen::MatrixXd> diff_modules(const TensorArchive& backbone,
                                                    const TensorArchive& task) {
  for (const auto& [name, tensor] : backbone.tensors())
    if (!task.contains(name)) throw ArchiveError("task archive is missing module '" + name + "'");
  for (const auto& [name, tensor] : task.tensors())
    if (!backbone.contains(name))
      throw ArchiveError("task archive has unexpected module '" + name + "'");

  std::map<std::string, Eigen::MatrixXd> deltas;
  for (const auto& [name, base] : backbone.tensors()) {
    const Tensor& upd = task.at(name);
    if (base.shape != upd.shape)
      throw ArchiveError("shape mismatch for module '" + name + "'");
    if (!base.is_matrix()) continue;
    deltas.emplace(name, upd.matrix() - base.matrix());
  }
  return deltas;
}

uint64_t fnv1a(const void* data, std::size_t len, uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string content_hash(const TensorArchive& archive) {
  const std::string manifest = serialize_manifest(archive);
  const std::vector<std::uint8_t> blob = serialize_blob(archive);
  uint64_t h = fnv1a(manifest.data(), manifest.size());
  h = fnv1a(blob.data(), blob.size(), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace submerge
