#pragma once

// Embedding tables and the named-tensor checkpoint format.
//
// A checkpoint is a pair of files:
//   <name>.index.json   {"format":"amen-weights","version":1,
//                        "tensors":[{"name","dims":[r,c],"offset"}]}
//   <name>.weights.bin  little-endian float64 values, tensors back to back,
//                       offsets in bytes.

#include <bit>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "amen/autodiff.hpp"
#include "amen/moveline.hpp"
#include "amen/nn.hpp"
#include "amen/rng.hpp"

namespace amen {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

inline constexpr double kEmbeddingInitStddev = 0.01;

struct EmbeddingTable {
  ParamId id;

  static EmbeddingTable create(ParameterSet& params, const std::string& name, std::size_t vocab, std::size_t dim,
                               Rng& rng) {
    return EmbeddingTable{params.add(name, normal_matrix(vocab, dim, kEmbeddingInitStddev, rng))};
  }

  std::size_t vocab_size(const ParameterSet& params) const { return params[id].value.rows(); }
  std::size_t dim(const ParameterSet& params) const { return params[id].value.cols(); }

  Vector lookup(const ParameterSet& params, std::size_t row) const {
    const Parameter& p = params[id];
    if (row >= p.value.rows()) {
      throw DimensionError("lookup: id " + std::to_string(row) + " out of range for " + p.name + " (vocab " +
                           std::to_string(p.value.rows()) + ")");
    }
    return p.value.row_copy(row);
  }

  template <typename Params>
  Var gather(Tape& tape, Params& params, std::vector<std::size_t> rows) const {
    return tape.gather(params[id], std::move(rows));
  }
};

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct WeightArchive {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  // FNV-1a over names, dims and raw value bytes, as 16 hex digits.
  std::string digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors) {
      h = fnv1a64(t.name, h);
      const std::uint64_t dims[2] = {t.value.rows(), t.value.cols()};
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(dims), sizeof(dims)), h);
      const auto v = t.value.values();
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    return out;
  }

  friend bool operator==(const WeightArchive& a, const WeightArchive& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) return false;
    }
    return true;
  }
};

inline WeightArchive export_weights(const ParameterSet& params) {
  WeightArchive a;
  for (const Parameter& p : params.all()) a.tensors.push_back(NamedTensor{p.name, p.value});
  return a;
}

struct LoadReport {
  std::vector<std::string> loaded;   // copied from the archive
  std::vector<std::string> kept;     // model tensors left at their current values
  std::vector<std::string> ignored;  // archive tensors the model does not take
};

// Copies every archive tensor whose name exists in the model (and, when
// `only` is non-empty, is listed there). A name match with different dims
// is an error; nothing is modified in that case.
inline LoadReport import_weights(ParameterSet& params, const WeightArchive& archive,
                                 const std::set<std::string>& only = {}) {
  auto wanted = [&](const std::string& name) { return only.empty() || only.count(name) > 0; };
  for (const auto& t : archive.tensors) {
    const Parameter* p = params.find(t.name);
    if (p != nullptr && wanted(t.name) && !p->value.same_shape(t.value)) {
      throw DimensionError("dim mismatch: " + t.name + " (archive " + t.value.shape_string() + ", model " +
                           p->value.shape_string() + ")");
    }
  }
  LoadReport report;
  for (Parameter& p : params.all()) {
    const NamedTensor* t = archive.find(p.name);
    if (t != nullptr && wanted(p.name)) {
      p.value = t->value;
      report.loaded.push_back(p.name);
    } else {
      report.kept.push_back(p.name);
    }
  }
  for (const auto& t : archive.tensors) {
    if (params.find(t.name) == nullptr || !wanted(t.name)) report.ignored.push_back(t.name);
  }
  return report;
}

inline void save_archive(const WeightArchive& archive, const std::string& stem) {
  nlohmann::ordered_json index;
  index["format"] = "amen-weights";
  index["version"] = 1;
  index["tensors"] = nlohmann::ordered_json::array();
  std::string blob;
  for (const auto& t : archive.tensors) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["dims"] = {t.value.rows(), t.value.cols()};
    e["offset"] = blob.size();
    index["tensors"].push_back(std::move(e));
    const auto v = t.value.values();
    blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  write_text_file(stem + ".index.json", index.dump(2) + "\n");
  write_text_file(stem + ".weights.bin", blob);
}

inline WeightArchive load_archive(const std::string& stem) {
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(read_text_file(stem + ".index.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("io", stem + ".index.json: " + e.what());
  }
  if (index.value("format", "") != "amen-weights") throw Error("io", stem + ".index.json: not a weight index");
  const std::string blob = read_text_file(stem + ".weights.bin");
  WeightArchive a;
  for (const auto& e : index.at("tensors")) {
    const auto rows = e.at("dims").at(0).get<std::size_t>();
    const auto cols = e.at("dims").at(1).get<std::size_t>();
    const auto offset = e.at("offset").get<std::size_t>();
    const std::size_t bytes = rows * cols * sizeof(double);
    if (offset + bytes > blob.size()) throw Error("io", stem + ".weights.bin: truncated at " + e.at("name").get<std::string>());
    std::vector<double> values(rows * cols);
    std::memcpy(values.data(), blob.data() + offset, bytes);
    a.tensors.push_back(NamedTensor{e.at("name").get<std::string>(), Matrix(rows, cols, std::move(values))});
  }
  return a;
}

}  // namespace amen
