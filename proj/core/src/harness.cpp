#include "maskkd/harness.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskkd/analysis.hpp"
#include "maskkd/corpus.hpp"
#include "maskkd/csv.hpp"
#include "maskkd/distill.hpp"
#include "maskkd/error.hpp"
#include "maskkd/run_config.hpp"

namespace fs = std::filesystem;

namespace maskkd {
namespace {

// Failure while resolving flags or config; maps to the usage exit code.
struct UsageError : Error {
  using Error::Error;
};

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

// Registers every config key as a string flag on a subcommand.
struct KeyFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;
  bool force = false;

  void attach(CLI::App* app, const std::vector<std::string>& skip = {}) {
    app->add_option("--config", config_path, "key = value config file (flags take precedence)");
    app->add_flag("--force", force, "replace an existing run directory");
    for (const auto& k : config_keys()) {
      if (std::find(skip.begin(), skip.end(), k.name) != skip.end()) continue;
      options[k.name] = app->add_option(flag_name(k.name), values[k.name], k.help);
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) cfg.set(key, values.at(key), "flag");
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  write_text(path, j.dump(2) + "\n");
}

fs::path prepare_run_dir(const RunConfig& cfg, const std::string& default_name, bool force) {
  const std::string name = cfg.has("run_name") ? cfg.get("run_name") : default_name;
  const fs::path dir = fs::path(cfg.get("out_dir")) / name;
  if (fs::exists(dir)) {
    if (!force) throw IoError("run directory " + dir.string() + " exists (pass --force to replace)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

void write_provenance(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                      std::uint64_t data_hash) {
  write_text(dir / "config.txt", "# maskkd " + command + "\n" + cfg.snapshot());
  write_text(dir / "corpus_hash.txt", hex64(data_hash) + "\n");
}

fs::path require_path(const RunConfig& cfg, const std::string& key) {
  if (!cfg.has(key)) throw UsageError("missing required setting " + flag_name(key));
  fs::path p = cfg.get(key);
  if (!fs::exists(p)) throw IoError("missing artifact for " + flag_name(key) + ": " + p.string());
  return p;
}

std::vector<Sequence> to_sequences(std::span<const TaskSample> samples, std::size_t cap) {
  std::vector<Sequence> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(layout_of(s, cap));
  return out;
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
  csv::Writer w(path, metrics_header());
  for (const auto& r : rows) w.row(metrics_cells(r));
  w.close();
}

// ---------------------------------------------------------------- gen-corpus

int cmd_gen_corpus(const KeyFlags& flags, std::size_t n, const std::string& out_path,
                   std::ostream& out) {
  RunConfig cfg;
  CorpusParams params;
  try {
    cfg = flags.resolve();
    params = cfg.corpus();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const std::uint64_t seed = cfg.get_u64("seed");
  const auto samples = gen_corpus(n, seed, params);
  std::ostringstream header;
  header << "maskkd corpus n=" << n << " seed=" << seed << " hops=" << params.hops
         << " n_facts=" << params.n_facts << " restatements=" << params.restatements
         << " eval_fraction=" << csv::num(params.eval_fraction);
  const auto hash = write_corpus(out_path, samples, header.str(), Vocab{params.vocab_size});
  const auto n_eval = static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](auto& s) { return s.split == Split::eval; }));
  out << "wrote " << samples.size() << " samples (train " << samples.size() - n_eval << ", eval "
      << n_eval << ") to " << out_path << " hash " << hex64(hash) << "\n";
  return kExitOk;
}

// ------------------------------------------------------------- train-teacher

int cmd_train_teacher(const RunConfig& cfg, bool force, std::ostream& out) {
  const fs::path corpus_path = require_path(cfg, "corpus");
  const auto model_cfg = cfg.teacher_model();
  const auto train_cfg = cfg.teacher_training();
  const auto max_new = static_cast<std::size_t>(cfg.get_int("max_new"));
  const auto corpus = read_corpus(corpus_path);
  const auto train = filter_split(corpus, Split::train);
  const auto eval = filter_split(corpus, Split::eval);
  if (train.empty()) throw DataError("corpus " + corpus_path.string() + " has no train samples");

  const fs::path dir = prepare_run_dir(cfg, "teacher", force);
  write_provenance(dir, "train-teacher", cfg, file_hash(corpus_path));

  Model teacher(model_cfg);
  const auto seqs = to_sequences(train, static_cast<std::size_t>(model_cfg.max_seq_len));
  const auto log = train_teacher(teacher, seqs, train_cfg);
  save_checkpoint(teacher, dir / "model.ckpt");
  {
    csv::Writer w(dir / "metrics.csv", {"step", "loss"});
    for (const auto& r : log) w.row({std::to_string(r.step), csv::num(r.loss)});
    w.close();
  }

  const auto eval_acc = answer_accuracy(teacher, eval, max_new);
  const auto set = build_distill_set(teacher, train, max_new);
  std::vector<TaskSample> lines = set.samples;
  lines.insert(lines.end(), eval.begin(), eval.end());
  const auto set_hash = write_corpus(dir / "distill_set.jsonl", lines,
                                     "teacher traces (train) and gold eval samples",
                                     Vocab{model_cfg.vocab_size});
  nlohmann::ordered_json summary;
  summary["seed"] = cfg.get_u64("seed");
  summary["steps"] = log.empty() ? 0 : log.back().step;
  summary["final_loss"] = log.empty() ? 0.0 : log.back().loss;
  summary["eval_n"] = eval_acc.n;
  summary["eval_accuracy"] = eval_acc.fraction();
  summary["distill_kept"] = set.kept;
  summary["distill_total"] = set.total;
  summary["distill_kept_ratio"] = set.kept_ratio();
  summary["distill_set_hash"] = hex64(set_hash);
  write_json(dir / "summary.json", summary);
  out << "teacher eval accuracy " << csv::num(eval_acc.fraction()) << ", kept " << set.kept << "/"
      << set.total << " traces\n"
      << (dir / "model.ckpt").string() << "\n"
      << (dir / "distill_set.jsonl").string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------- distill / ablate core

struct DistillData {
  std::vector<TaskSample> train;
  std::vector<TaskSample> eval;
  std::vector<Sequence> train_seqs;
  std::vector<Sequence> eval_seqs;
  std::uint64_t hash = 0;
};

DistillData load_distill_data(const RunConfig& cfg, std::size_t cap) {
  const fs::path path = require_path(cfg, "distill_set");
  DistillData d;
  const auto all = read_corpus(path);
  d.train = filter_split(all, Split::train);
  d.eval = filter_split(all, Split::eval);
  if (d.train.empty()) throw DataError("distill set " + path.string() + " has no train traces");
  d.train_seqs = to_sequences(d.train, cap);
  d.eval_seqs = to_sequences(d.eval, cap);
  d.hash = file_hash(path);
  return d;
}

struct Evaluation {
  double accuracy = 0.0;
  double visual_ratio = 0.0;
  double kl_first = 0.0;
  double kl_last = 0.0;
};

Evaluation evaluate_student(const Model* teacher, const Model& student, const DistillData& data,
                            const RunConfig& cfg) {
  Evaluation ev;
  if (data.eval.empty()) return ev;
  const auto max_new = static_cast<std::size_t>(cfg.get_int("max_new"));
  ev.accuracy = answer_accuracy(student, data.eval, max_new).fraction();
  ev.visual_ratio = visual_attention_curve(student, data.eval_seqs).mean_ratio();
  if (teacher) {
    const auto prof =
        interval_kl_decay(*teacher, student, data.eval_seqs,
                          static_cast<std::size_t>(cfg.get_int("kl_intervals")),
                          cfg.get_double("analysis_tau"));
    ev.kl_first = prof.first_quartile_mean();
    ev.kl_last = prof.last_quartile_mean();
  }
  return ev;
}

Model initial_student(const RunConfig& cfg, bool required) {
  if (cfg.has("init_ckpt")) return load_checkpoint(require_path(cfg, "init_ckpt"));
  if (required) throw UsageError("missing required setting --init-ckpt");
  return Model(cfg.student_model());
}

int cmd_distill(const RunConfig& cfg, bool force, bool self, bool dump, std::ostream& out,
                std::ostream& err) {
  const DistillConfig dcfg = cfg.distill();
  std::optional<Model> teacher;
  if (!self) teacher.emplace(load_checkpoint(require_path(cfg, "teacher_ckpt")));
  Model student = initial_student(cfg, self);
  const auto data = load_distill_data(cfg, static_cast<std::size_t>(student.config().max_seq_len));

  const fs::path dir = prepare_run_dir(cfg, self ? "self-distill" : "distill", force);
  write_provenance(dir, self ? "self-distill" : "distill", cfg, data.hash);

  std::vector<Tensor> cache;
  if (teacher) {
    cache.reserve(data.train_seqs.size());
    for (const auto& s : data.train_seqs) cache.push_back(teacher_logits(*teacher, s));
  }
  std::unique_ptr<std::ofstream> sched_os, mask_os;
  TrainingHooks hooks;
  if (dump) {
    sched_os = std::make_unique<std::ofstream>(dir / "schedule.csv");
    mask_os = std::make_unique<std::ofstream>(dir / "masks.csv");
    if (!*sched_os || !*mask_os) throw IoError("cannot write diagnostics under " + dir.string());
    write_schedule_dump_header(*sched_os);
    write_mask_dump_header(*mask_os);
    hooks.on_diagnostics = [&](long step, const StepDiagnostics& d) {
      write_schedule_dump(*sched_os, d, static_cast<std::size_t>(step));
      for (std::size_t s = 0; s < d.selections.size(); ++s)
        write_mask_dump(*mask_os, d.selections[s], d.layouts[s], static_cast<std::size_t>(step) + s);
    };
  }
  const auto result = run_training(dcfg, teacher ? &*teacher : nullptr, student, data.train_seqs,
                                   cache, hooks);
  save_checkpoint(student, dir / "model.ckpt");
  write_metrics(dir / "metrics.csv", result.metrics);
  const Evaluation ev = evaluate_student(teacher ? &*teacher : nullptr, student, data, cfg);

  nlohmann::ordered_json summary;
  summary["seed"] = dcfg.seed;
  summary["steps"] = result.steps;
  summary["aborted"] = result.aborted;
  summary["abort_message"] = result.abort_message;
  summary["eval_accuracy"] = ev.accuracy;
  summary["visual_attention_ratio"] = ev.visual_ratio;
  if (teacher) {
    summary["kl_first_quartile"] = ev.kl_first;
    summary["kl_last_quartile"] = ev.kl_last;
  }
  write_json(dir / "summary.json", summary);
  if (result.aborted) {
    err << "training aborted: " << result.abort_message << "\nlast good checkpoint: "
        << (dir / "model.ckpt").string() << "\n";
    return kExitRuntime;
  }
  out << "eval accuracy " << csv::num(ev.accuracy) << ", visual attention ratio "
      << csv::num(ev.visual_ratio) << "\n"
      << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- ablate

struct ThresholdSpec {
  ThresholdMode mode = ThresholdMode::cumulative;
  double param = 0.0;
  std::string text;
};

ThresholdSpec parse_threshold_spec(const std::string& s) {
  ThresholdSpec t;
  t.text = s;
  const auto colon = s.find(':');
  t.mode = parse_threshold_mode(s.substr(0, colon));
  if (t.mode != ThresholdMode::cumulative) {
    if (colon == std::string::npos) throw ConfigError("threshold '" + s + "' needs mode:param");
    RunConfig tmp;
    tmp.set("threshold_param", s.substr(colon + 1));
    t.param = tmp.get_double("threshold_param");
    make_threshold_rule(t.mode, t.param);
  }
  return t;
}

std::pair<std::string, std::string> parse_rho_range(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("rho range '" + s + "' must be min:max");
  return {s.substr(0, colon), s.substr(colon + 1)};
}

struct AblateAxes {
  std::string masks = "salient";
  std::string strategies = "high_attention";
  std::string thresholds = "cumulative";
  std::string rho_ranges = "0.3:0.5";
  std::string seeds = "1";
};

int cmd_ablate(const RunConfig& base, bool force, const AblateAxes& axes, std::ostream& out) {
  struct Cell {
    RunConfig cfg;
    std::string mask, strategy, threshold, rho_range, seed;
  };
  std::vector<Cell> cells;
  try {
    const auto masks = split_list(axes.masks);
    const auto strategies = split_list(axes.strategies);
    const auto thresholds = split_list(axes.thresholds);
    const auto ranges = split_list(axes.rho_ranges);
    const auto seeds = split_list(axes.seeds);
    if (masks.empty() || strategies.empty() || thresholds.empty() || ranges.empty() ||
        seeds.empty()) {
      throw ConfigError("every ablation axis needs at least one value");
    }
    for (const auto& m : masks)
      for (const auto& st : strategies)
        for (const auto& th : thresholds)
          for (const auto& rr : ranges)
            for (const auto& sd : seeds) {
              Cell c{base, m, st, th, rr, sd};
              c.cfg.set("mask", m, "ablate");
              c.cfg.set("strategy", st, "ablate");
              const auto spec = parse_threshold_spec(th);
              c.cfg.set("threshold_mode", to_string(spec.mode), "ablate");
              c.cfg.set("threshold_param", csv::num(spec.param), "ablate");
              const auto [lo, hi] = parse_rho_range(rr);
              c.cfg.set("rho_min", lo, "ablate");
              c.cfg.set("rho_max", hi, "ablate");
              c.cfg.set("seed", sd, "ablate");
              c.cfg.distill();
              c.cfg.student_model();
              cells.push_back(std::move(c));
            }
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  const Model teacher = load_checkpoint(require_path(base, "teacher_ckpt"));
  const auto data = load_distill_data(base, static_cast<std::size_t>(teacher.config().max_seq_len));
  const fs::path dir = prepare_run_dir(base, "ablate", force);
  write_provenance(dir, "ablate", base, data.hash);

  std::vector<Tensor> cache;
  cache.reserve(data.train_seqs.size());
  for (const auto& s : data.train_seqs) cache.push_back(teacher_logits(teacher, s));

  csv::Writer table(dir / "table.csv",
                    {"cell", "mask", "strategy", "threshold", "rho_range", "seed", "status",
                     "eval_accuracy", "visual_attention_ratio", "kl_first_quartile",
                     "kl_last_quartile", "corpus_hash", "error"});
  const std::string hash = hex64(data.hash);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    std::vector<std::string> row = {std::to_string(i), c.mask, c.strategy, c.threshold,
                                    c.rho_range, c.seed};
    try {
      const fs::path cell_dir = dir / "cells" / std::to_string(i);
      fs::create_directories(cell_dir);
      write_text(cell_dir / "config.txt", "# maskkd ablate cell\n" + c.cfg.snapshot());
      Model student = initial_student(c.cfg, false);
      const auto result = run_training(c.cfg.distill(), &teacher, student, data.train_seqs, cache);
      save_checkpoint(student, cell_dir / "model.ckpt");
      write_metrics(cell_dir / "metrics.csv", result.metrics);
      if (result.aborted) throw TrainingAbort(result.abort_message);
      const Evaluation ev = evaluate_student(&teacher, student, data, c.cfg);
      row.insert(row.end(), {"ok", csv::num(ev.accuracy), csv::num(ev.visual_ratio),
                             csv::num(ev.kl_first), csv::num(ev.kl_last), hash, ""});
    } catch (const std::exception& e) {
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      row.insert(row.end(), {"failed", "", "", "", "", hash, msg});
    }
    table.row(row);
    out << "cell " << i << " " << c.mask << " " << c.strategy << " " << c.threshold << " "
        << c.rho_range << " seed " << c.seed << ": " << row[6] << "\n";
  }
  table.close();
  out << (dir / "table.csv").string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------- analyze

int cmd_analyze(const RunConfig& cfg, bool force, const std::string& what, std::size_t sample,
                std::ostream& out) {
  static const std::vector<std::string> kinds = {"curve", "kl-decay", "histogram", "map",
                                                 "accuracy", "all"};
  if (std::find(kinds.begin(), kinds.end(), what) == kinds.end()) {
    throw UsageError("unknown analysis '" + what +
                     "' (expected curve, kl-decay, histogram, map, accuracy, all)");
  }
  DistillConfig dcfg;
  try {
    dcfg = cfg.distill();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  auto wants = [&](const std::string& k) {
    return what == k || (what == "all" && k != "histogram");
  };
  const Model student = load_checkpoint(require_path(cfg, "student_ckpt"));
  std::optional<Model> teacher;
  if (wants("kl-decay") || wants("histogram")) {
    teacher.emplace(load_checkpoint(require_path(cfg, "teacher_ckpt")));
  }
  const fs::path data_path =
      cfg.has("distill_set") ? require_path(cfg, "distill_set") : require_path(cfg, "corpus");
  const auto all = read_corpus(data_path);
  auto samples = filter_split(all, Split::eval);
  if (samples.empty()) samples = all;
  if (samples.empty()) throw DataError("no samples in " + data_path.string());
  const auto seqs = to_sequences(samples, static_cast<std::size_t>(student.config().max_seq_len));

  const fs::path dir = prepare_run_dir(cfg, "analysis", force);
  write_provenance(dir, "analyze", cfg, file_hash(data_path));
  std::vector<fs::path> written;
  if (wants("curve")) {
    written.push_back(dir / "curve.csv");
    write_curve_csv(written.back(), visual_attention_curve(student, seqs));
  }
  if (wants("kl-decay")) {
    written.push_back(dir / "kl_profile.csv");
    write_profile_csv(written.back(),
                      interval_kl_decay(*teacher, student, seqs,
                                        static_cast<std::size_t>(cfg.get_int("kl_intervals")),
                                        cfg.get_double("analysis_tau")));
  }
  if (wants("histogram")) {
    const auto diag = collect_selections(*teacher, student, seqs, dcfg);
    written.push_back(dir / "histogram.csv");
    write_histogram_csv(written.back(), masked_distance_histogram(diag.distances));
  }
  if (wants("map")) {
    if (sample >= seqs.size()) {
      throw UsageError("--sample " + std::to_string(sample) + " out of range (" +
                       std::to_string(seqs.size()) + " samples)");
    }
    written.push_back(dir / "map.csv");
    write_map_csv(written.back(), mean_visual_attention_map(student, seqs[sample]));
  }
  if (wants("accuracy")) {
    const auto acc =
        answer_accuracy(student, samples, static_cast<std::size_t>(cfg.get_int("max_new")));
    written.push_back(dir / "accuracy.csv");
    write_accuracy_csv(written.back(), {{samples.front().split == Split::eval ? "eval" : "all", acc}});
  }
  for (const auto& p : written) out << p.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Salient reasoning-prefix masking for think-answer distillation", "maskkd"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic lookup corpus");
  KeyFlags gen_flags;
  std::size_t gen_n = 0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of samples")->required();
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--config", gen_flags.config_path, "key = value config file");
  for (const char* key : {"seed", "hops", "n_facts", "restatements", "eval_fraction"})
    gen_flags.options[key] = gen->add_option(flag_name(key), gen_flags.values[key],
                                             "see config keys");

  auto* teach = app.add_subcommand("train-teacher", "train the teacher and build the distill set");
  KeyFlags teach_flags;
  teach_flags.attach(teach);

  std::string teacher_run;
  auto* dist = app.add_subcommand("distill", "distill the student from the teacher");
  KeyFlags dist_flags;
  dist_flags.attach(dist);
  bool dump = false;
  dist->add_option("--teacher-run", teacher_run,
                   "teacher run directory (sets --teacher-ckpt and --distill-set)");
  dist->add_flag("--dump-diagnostics", dump, "write schedule.csv and masks.csv");

  auto* self = app.add_subcommand("self-distill", "distill a model from its own full-context pass");
  KeyFlags self_flags;
  self_flags.attach(self);
  bool self_dump = false;
  self->add_flag("--dump-diagnostics", self_dump, "write schedule.csv and masks.csv");

  auto* abl = app.add_subcommand("ablate", "run a grid of distillation variants");
  KeyFlags abl_flags;
  abl_flags.attach(abl);
  AblateAxes axes;
  abl->add_option("--teacher-run", teacher_run,
                  "teacher run directory (sets --teacher-ckpt and --distill-set)");
  abl->add_option("--masks", axes.masks, "comma list of mask kinds");
  abl->add_option("--strategies", axes.strategies, "comma list of selection strategies");
  abl->add_option("--thresholds", axes.thresholds,
                  "comma list: cumulative | attention_threshold:P | masking_ratio:P");
  abl->add_option("--rho-ranges", axes.rho_ranges, "comma list of min:max budgets");
  abl->add_option("--seeds", axes.seeds, "comma list of seeds");

  auto* ana = app.add_subcommand("analyze", "write analysis CSVs for trained checkpoints");
  KeyFlags ana_flags;
  ana_flags.attach(ana);
  std::string what = "all";
  std::size_t sample = 0;
  ana->add_option("--what", what, "curve | kl-decay | histogram | map | accuracy | all");
  ana->add_option("--sample", sample, "sample index for the attention map");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  auto resolve = [&](const KeyFlags& flags) {
    try {
      RunConfig cfg = flags.resolve();
      if (!teacher_run.empty()) {
        if (!(flags.options.at("teacher_ckpt")->count() > 0))
          cfg.set("teacher_ckpt", (fs::path(teacher_run) / "model.ckpt").string(), "teacher-run");
        if (!(flags.options.at("distill_set")->count() > 0))
          cfg.set("distill_set", (fs::path(teacher_run) / "distill_set.jsonl").string(),
                  "teacher-run");
      }
      // Surface malformed values before any work starts.
      cfg.corpus();
      cfg.teacher_model();
      cfg.student_model();
      cfg.teacher_training();
      cfg.get_int("max_new");
      cfg.get_int("kl_intervals");
      cfg.get_double("analysis_tau");
      return cfg;
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  };

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_flags, gen_n, gen_out, out);
    if (teach->parsed()) return cmd_train_teacher(resolve(teach_flags), teach_flags.force, out);
    if (dist->parsed()) {
      const RunConfig cfg = resolve(dist_flags);
      try {
        cfg.distill();
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      return cmd_distill(cfg, dist_flags.force, false, dump, out, err);
    }
    if (self->parsed()) {
      const RunConfig cfg = resolve(self_flags);
      try {
        cfg.distill();
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      return cmd_distill(cfg, self_flags.force, true, self_dump, out, err);
    }
    if (abl->parsed()) return cmd_ablate(resolve(abl_flags), abl_flags.force, axes, out);
    if (ana->parsed()) return cmd_analyze(resolve(ana_flags), ana_flags.force, what, sample, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace maskkd
