#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "maskkd/corpus.hpp"
#include "maskkd/distill.hpp"
#include "maskkd/model.hpp"

namespace maskkd {

inline constexpr const char* kOutRootEnv = "MASKKD_OUT_ROOT";

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

// Every key a run understands, in snapshot order.
const std::vector<ConfigKey>& config_keys();

// Resolved run settings. Precedence: explicit flags > config file > defaults.
// Values stay text until read; typed getters throw ConfigError on bad text.
class RunConfig {
 public:
  RunConfig();  // registry defaults; out_dir honors MASKKD_OUT_ROOT

  // Line-oriented `key = value`; '#' starts a comment. Unknown keys throw
  // ConfigError naming the file and line.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value, const std::string& origin = "flag");

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  const std::string& origin(const std::string& key) const;
  std::string get_string(const std::string& key) const { return get(key); }
  long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // `key = value` lines in registry order, each annotated with its origin.
  std::string snapshot() const;

  DistillConfig distill() const;
  CorpusParams corpus() const;
  TeacherTrainConfig teacher_training() const;
  ModelConfig teacher_model() const;
  ModelConfig student_model() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origins_;
};

// Parses "a,b,c" into trimmed nonempty items.
std::vector<std::string> split_list(const std::string& s, char sep = ',');

}  // namespace maskkd
