#pragma once

// Checkpoint container: named matrices and strings in one binary file.
//
//   "CPCK" u32 version u64 count { u8 kind, u32 name_len, name, payload }*
//   matrix payload: i64 rows, i64 cols, rows*cols f64 (row-major)
//   string payload: u64 len, bytes

#include "causalproto/autograd.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace causalproto::detail {

class Archive {
 public:
  void put(const std::string& name, const Matrix& m) { matrices_[name] = m; }
  void put(const std::string& name, const std::string& s) { strings_[name] = s; }

  bool has_matrix(const std::string& name) const { return matrices_.count(name) != 0; }
  bool has_string(const std::string& name) const { return strings_.count(name) != 0; }
  /// Throws IoError when the entry is missing or (if given) has another shape.
  const Matrix& matrix(const std::string& name, Eigen::Index rows = -1, Eigen::Index cols = -1) const;
  const std::string& string(const std::string& name) const;
  std::vector<std::string> matrix_names_with_prefix(const std::string& prefix) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::filesystem::path source_;
  std::map<std::string, Matrix> matrices_;
  std::map<std::string, std::string> strings_;
};

}  // namespace causalproto::detail
