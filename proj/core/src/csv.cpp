#include "maskkd/csv.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "maskkd/error.hpp"

namespace maskkd::csv {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Writer::Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
    : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  os_.open(path, std::ios::trunc);
  if (!os_) throw IoError("cannot open for writing: " + path.string());
  row(header);
}

void Writer::row(const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os_ << ',';
    os_ << cells[i];
  }
  os_ << '\n';
  if (!os_) throw IoError("write failed: " + path_.string());
}

void Writer::close() {
  os_.close();
  if (os_.fail()) throw IoError("close failed: " + path_.string());
}

std::vector<std::vector<std::string>> read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace maskkd::csv
