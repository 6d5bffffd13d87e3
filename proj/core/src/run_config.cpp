#include "maskkd/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "maskkd/csv.hpp"
#include "maskkd/error.hpp"

namespace maskkd {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"run_name", "", "run directory name under out_dir (default per command)"},
      {"out_dir", "runs", "output root; MASKKD_OUT_ROOT overrides the default"},
      {"seed", "1", "seed for model init, shuffling and selection"},
      // corpus
      {"corpus", "", "corpus JSONL path"},
      {"n_facts", "6", "facts per sample"},
      {"hops", "2", "lookup hops (1 or 2)"},
      {"restatements", "7", "first-hop restatements in the think segment"},
      {"eval_fraction", "0.1", "fraction of samples in the eval split"},
      // models
      {"teacher_layers", "4", "teacher depth"},
      {"teacher_d_model", "64", "teacher width"},
      {"teacher_heads", "4", "teacher attention heads"},
      {"student_layers", "2", "student depth"},
      {"student_d_model", "32", "student width"},
      {"student_heads", "2", "student attention heads"},
      {"max_seq_len", "128", "positional capacity of both models"},
      // teacher training
      {"teacher_epochs", "12", "teacher training epochs"},
      {"teacher_lr", "0.001", "teacher peak learning rate"},
      {"teacher_batch_size", "8", "teacher sequences per step"},
      {"max_new", "64", "greedy decoding budget"},
      // distillation
      {"teacher_ckpt", "", "teacher checkpoint for distill/ablate/analyze"},
      {"student_ckpt", "", "student checkpoint for analyze"},
      {"init_ckpt", "", "initial student weights (required for self-distill)"},
      {"distill_set", "", "teacher-trace JSONL written by train-teacher"},
      {"tau", "2", "distillation temperature"},
      {"rho_min", "0.3", "lower masking budget"},
      {"rho_max", "0.5", "upper masking budget"},
      {"epsilon", "1e-8", "log floor of the budget score"},
      {"loss", "reverse", "reverse | forward | mixed"},
      {"mask", "salient", "salient | causal_only | region_visual | region_question"},
      {"strategy", "high_attention",
       "high_attention | low_attention | middle_attention | random | non_adaptive"},
      {"threshold_mode", "cumulative", "cumulative | attention_threshold | masking_ratio"},
      {"threshold_param", "0", "parameter of the non-cumulative threshold modes"},
      {"budget", "self_paced", "self_paced | fixed"},
      {"fixed_rho", "0.4", "budget when budget = fixed"},
      {"aux_weight_shared", "true", "auxiliary pass uses the live student"},
      {"exclude_immediate_prev", "true", "never mask the directly preceding token"},
      {"tau_scaled_divergence", "true", "token-wise divergence at temperature tau"},
      {"lr", "0.001", "student learning rate"},
      {"epochs", "2", "distillation epochs"},
      {"batch_size", "8", "sequences per optimizer step"},
      {"diag_interval", "50", "optimizer steps per metrics row"},
      {"kl_intervals", "8", "intervals of the KL decay profile"},
      {"analysis_tau", "1", "temperature of the KL decay analysis"},
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool known(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.name == key) return true;
  return false;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) {
    values_[k.name] = k.default_value;
    origins_[k.name] = "default";
  }
  if (const char* env = std::getenv(kOutRootEnv); env && *env) {
    values_["out_dir"] = env;
    origins_["out_dir"] = std::string("env ") + kOutRootEnv;
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key +
                        "'");
    }
    set(key, trim(line.substr(eq + 1)), "file");
  }
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& origin) {
  if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
  origins_[key] = origin;
}

bool RunConfig::has(const std::string& key) const {
  auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

const std::string& RunConfig::origin(const std::string& key) const {
  auto it = origins_.find(key);
  if (it == origins_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

long RunConfig::get_int(const std::string& key) const {
  const auto& s = get(key);
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("'" + key + "' expects an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const auto& s = get(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + s + "'");
  }
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const auto& s = get(key);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
  }
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  const auto& s = get(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + s + "'");
}

std::string RunConfig::snapshot() const {
  std::ostringstream os;
  for (const auto& k : config_keys())
    os << k.name << " = " << values_.at(k.name) << "  # " << origins_.at(k.name) << '\n';
  return os.str();
}

DistillConfig RunConfig::distill() const {
  DistillConfig c;
  c.tau = get_double("tau");
  c.rho_min = get_double("rho_min");
  c.rho_max = get_double("rho_max");
  c.epsilon = get_double("epsilon");
  c.loss_kind = parse_kl_kind(get("loss"));
  c.mask_kind = parse_distill_mask(get("mask"));
  c.selection_strategy = parse_selection_strategy(get("strategy"));
  c.threshold_mode = parse_threshold_mode(get("threshold_mode"));
  c.threshold_param = get_double("threshold_param");
  c.budget = parse_budget_kind(get("budget"));
  c.fixed_rho = get_double("fixed_rho");
  c.aux_weight_shared = get_bool("aux_weight_shared");
  c.exclude_immediate_prev = get_bool("exclude_immediate_prev");
  c.tau_scaled_divergence = get_bool("tau_scaled_divergence");
  c.lr = get_double("lr");
  c.epochs = static_cast<int>(get_int("epochs"));
  c.batch_size = static_cast<int>(get_int("batch_size"));
  c.seed = get_u64("seed");
  c.diag_interval = static_cast<int>(get_int("diag_interval"));
  c.validate();
  return c;
}

CorpusParams RunConfig::corpus() const {
  CorpusParams p;
  p.n_facts = static_cast<int>(get_int("n_facts"));
  p.hops = static_cast<int>(get_int("hops"));
  p.restatements = static_cast<int>(get_int("restatements"));
  p.eval_fraction = get_double("eval_fraction");
  p.validate();
  return p;
}

TeacherTrainConfig RunConfig::teacher_training() const {
  TeacherTrainConfig t;
  t.epochs = static_cast<int>(get_int("teacher_epochs"));
  t.lr = get_double("teacher_lr");
  t.batch_size = static_cast<int>(get_int("teacher_batch_size"));
  t.seed = get_u64("seed");
  t.log_interval = static_cast<int>(get_int("diag_interval"));
  if (t.epochs < 0) throw ConfigError("teacher_epochs must be >= 0");
  if (!(t.lr > 0.0)) throw ConfigError("teacher_lr must be positive");
  if (t.batch_size < 1) throw ConfigError("teacher_batch_size must be >= 1");
  if (t.log_interval < 1) throw ConfigError("diag_interval must be >= 1");
  return t;
}

ModelConfig RunConfig::teacher_model() const {
  ModelConfig m;
  m.n_layers = static_cast<int>(get_int("teacher_layers"));
  m.d_model = static_cast<int>(get_int("teacher_d_model"));
  m.n_heads = static_cast<int>(get_int("teacher_heads"));
  m.max_seq_len = static_cast<int>(get_int("max_seq_len"));
  m.seed = get_u64("seed");
  m.validate();
  return m;
}

ModelConfig RunConfig::student_model() const {
  ModelConfig m;
  m.n_layers = static_cast<int>(get_int("student_layers"));
  m.d_model = static_cast<int>(get_int("student_d_model"));
  m.n_heads = static_cast<int>(get_int("student_heads"));
  m.max_seq_len = static_cast<int>(get_int("max_seq_len"));
  m.seed = get_u64("seed");
  m.validate();
  return m;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace maskkd
