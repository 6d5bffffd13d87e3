#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

namespace maskkd::csv {

// Shortest text that round-trips the double (locale independent).
std::string num(double v);

// Line-oriented CSV writer; throws IoError naming the path on failure.
class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& cells);
  void close();
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

// Reads a whole CSV file (no quoting support) into rows of cells, header first.
std::vector<std::vector<std::string>> read(const std::filesystem::path& path);

}  // namespace maskkd::csv
