#pragma once

#include "driftadapt/types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace driftadapt {

/// Self-describing binary container: an 8-byte magic, a JSON header (metadata plus
/// a tensor table) and the raw little-endian float64 payload.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;

  const Matrix& tensor(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
};

/// FNV-1a over a JSON document's compact dump; used for config provenance.
std::string json_hash(const nlohmann::json& doc);

}  // namespace driftadapt
