#include "archive.hpp"

#include "causalproto/error.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace causalproto::detail {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint: " + path.string());
  return v;
}

std::string read_bytes(std::istream& is, std::uint64_t n, const std::filesystem::path& path) {
  if (n > (1ull << 32)) throw IoError("corrupt checkpoint (entry too large): " + path.string());
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("truncated checkpoint: " + path.string());
  return s;
}

}  // namespace

const Matrix& Archive::matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
  auto it = matrices_.find(name);
  if (it == matrices_.end()) {
    throw IoError("checkpoint " + source_.string() + " has no entry '" + name + "'");
  }
  if ((rows >= 0 && it->second.rows() != rows) || (cols >= 0 && it->second.cols() != cols)) {
    throw IoError("checkpoint " + source_.string() + ": entry '" + name + "' is " +
                  std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                  ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  return it->second;
}

const std::string& Archive::string(const std::string& name) const {
  auto it = strings_.find(name);
  if (it == strings_.end()) {
    throw IoError("checkpoint " + source_.string() + " has no entry '" + name + "'");
  }
  return it->second;
}

std::vector<std::string> Archive::matrix_names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (auto it = matrices_.lower_bound(prefix); it != matrices_.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.push_back(it->first);
  }
  return out;
}

void Archive::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint64_t>(matrices_.size() + strings_.size()));
  for (const auto& [name, m] : matrices_) {
    write_pod(os, std::uint8_t{0});
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::int64_t>(m.rows()));
    write_pod(os, static_cast<std::int64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  for (const auto& [name, s] : strings_) {
    write_pod(os, std::uint8_t{1});
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint64_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("not a causalproto checkpoint: " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  Archive a;
  a.source_ = path;
  const auto count = read_pod<std::uint64_t>(is, path);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto kind = read_pod<std::uint8_t>(is, path);
    const auto name_len = read_pod<std::uint32_t>(is, path);
    std::string name = read_bytes(is, name_len, path);
    if (kind == 0) {
      const auto rows = read_pod<std::int64_t>(is, path);
      const auto cols = read_pod<std::int64_t>(is, path);
      if (rows < 0 || cols < 0 || rows * cols > (1ll << 31)) {
        throw IoError("corrupt checkpoint (bad shape for '" + name + "'): " + path.string());
      }
      Matrix m(rows, cols);
      is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (!is) throw IoError("truncated checkpoint: " + path.string());
      a.matrices_[name] = std::move(m);
    } else if (kind == 1) {
      const auto len = read_pod<std::uint64_t>(is, path);
      a.strings_[name] = read_bytes(is, len, path);
    } else {
      throw IoError("corrupt checkpoint (unknown entry kind): " + path.string());
    }
  }
  return a;
}

}  // namespace causalproto::detail
