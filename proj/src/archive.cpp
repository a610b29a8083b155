#include "driftadapt/archive.hpp"

#include "driftadapt/error.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

namespace driftadapt {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'A', 'R', 'C', 'H', 'V', '1'};

static_assert(std::endian::native == std::endian::little, "archive payload assumes little endian");

}  // namespace

const Matrix& Archive::tensor(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("archive has no tensor '" + name + "'");
  return it->second;
}

void Archive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write archive " + path.string());
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing archive " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot finalize archive " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw IoError("not an archive: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ULL << 31)) throw IoError("corrupt archive header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Archive archive;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    archive.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt archive header: ") + e.what());
  }
  for (const auto& t : header.at("tensors")) {
    Matrix m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw IoError("truncated archive: " + path.string());
    archive.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return archive;
}

std::string json_hash(const nlohmann::json& doc) {
  const std::string text = doc.dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace driftadapt
