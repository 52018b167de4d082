#include "dcm/net/manifest.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcm/common/error.hpp"

namespace dcm::net {

namespace {

constexpr const char* kMagic = "dcm-manifest";
constexpr int kVersion = 1;

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

}  // namespace

std::size_t Manifest::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) {
    if (e.trainable) n += e.values.size();
  }
  return n;
}

const ManifestEntry* Manifest::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("{}: cannot open for writing", path.string()));
  out << kMagic << ' ' << kVersion << '\n';
  for (const auto& [key, value] : m.meta) out << "meta " << key << ' ' << value << '\n';
  out << "entries " << m.entries.size() << '\n';
  for (const auto& e : m.entries) {
    out << (e.trainable ? "param " : "buffer ") << e.name << ' ' << e.shape.rank();
    for (auto d : e.shape.dims()) out << ' ' << d;
    out << '\n';
  }
  out << "end\n";
  for (const auto& e : m.entries) {
    for (double v : e.values) {
      const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!out) throw DataError(fmt::format("{}: write failed", path.string()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("{}: cannot open", path.string()));
  auto fail = [&](const std::string& what) -> DataError {
    return DataError(fmt::format("{}: {} (offset {})", path.string(), what,
                                 static_cast<long long>(in.tellg())));
  };

  std::string line;
  std::getline(in, line);
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != kMagic) throw fail("bad magic");
    if (version != kVersion) throw fail(fmt::format("unsupported version {}", version));
  }
  Manifest m;
  std::size_t count = 0;
  while (std::getline(in, line) && line.rfind("meta ", 0) == 0) {
    const auto space = line.find(' ', 5);
    if (space == std::string::npos) throw fail(fmt::format("malformed meta line '{}'", line));
    m.meta.emplace_back(line.substr(5, space - 5), line.substr(space + 1));
  }
  {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key >> count) || key != "entries") throw fail("missing entry count");
  }

  m.entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw fail("truncated header");
    std::istringstream ls(line);
    std::string kind;
    ManifestEntry e;
    std::size_t rank = 0;
    if (!(ls >> kind >> e.name >> rank) || (kind != "param" && kind != "buffer") || rank == 0) {
      throw fail(fmt::format("malformed entry line '{}'", line));
    }
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) {
      if (!(ls >> d) || d == 0) throw fail(fmt::format("malformed dims in '{}'", line));
    }
    e.trainable = kind == "param";
    e.shape = ag::Shape(dims);
    m.entries.push_back(std::move(e));
  }
  if (!std::getline(in, line) || line != "end") throw fail("missing end marker");

  for (auto& e : m.entries) {
    e.values.resize(e.shape.numel());
    for (auto& v : e.values) {
      std::uint32_t bits = 0;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        throw fail(fmt::format("truncated payload in '{}'", e.name));
      }
      v = static_cast<double>(std::bit_cast<float>(to_little(bits)));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after payload");
  return m;
}

}  // namespace dcm::net
