#include "maskkd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "maskkd/error.hpp"

namespace maskkd {

std::string Vocab::name(int tok) const {
  switch (tok) {
    case kPad: return "<pad>";
    case kThinkBegin: return "<think>";
    case kThinkEnd: return "</think>";
    case kAnswerBegin: return "<answer>";
    case kEnd: return "<end>";
    case kSep: return ";";
    case kQueryOneHop: return "Q1";
    case kQueryTwoHop: return "Q2";
    default: break;
  }
  if (is_key(tok)) return "K" + std::to_string(tok - key(0));
  if (is_value(tok)) return "V" + std::to_string(tok - value(0));
  return "<unk" + std::to_string(tok) + ">";
}

void Vocab::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write vocabulary: " + path.string());
  for (int i = 0; i < size; ++i) os << i << '\t' << name(i) << '\n';
  if (!os) throw IoError("failed writing vocabulary: " + path.string());
}

void CorpusParams::validate() const {
  if (hops != 1 && hops != 2) throw ConfigError("hops must be 1 or 2");
  if (n_facts < hops) throw ConfigError("n_facts must be >= hops");
  if (restatements < 1) throw ConfigError("restatements must be >= 1");
  if (!(eval_fraction >= 0.0 && eval_fraction <= 1.0)) {
    throw ConfigError("eval_fraction must lie in [0, 1]");
  }
  Vocab v{vocab_size};
  if (vocab_size < Vocab::kFirstContent + 2 || n_facts > v.n_keys()) {
    throw ConfigError("vocabulary of " + std::to_string(vocab_size) + " cannot hold " +
                      std::to_string(n_facts) + " distinct keys");
  }
}

std::vector<int> TaskSample::prompt() const {
  std::vector<int> p = visual;
  p.insert(p.end(), question.begin(), question.end());
  return p;
}

TaskSample gen_sample(Rng& rng, const CorpusParams& params) {
  params.validate();
  const Vocab vocab{params.vocab_size};
  const int nf = params.n_facts;

  // Distinct keys: the first one is queried; for two hops the second one is
  // the first fact's value.
  std::vector<int> keys(static_cast<std::size_t>(vocab.n_keys()));
  for (int i = 0; i < vocab.n_keys(); ++i) keys[static_cast<std::size_t>(i)] = vocab.key(i);
  for (int i = 0; i < nf; ++i) {
    const auto j = static_cast<std::size_t>(i) +
                   static_cast<std::size_t>(rng.below(keys.size() - static_cast<std::size_t>(i)));
    std::swap(keys[static_cast<std::size_t>(i)], keys[j]);
  }
  auto random_value = [&] { return vocab.value(static_cast<int>(rng.below(vocab.n_values()))); };

  std::vector<std::pair<int, int>> facts;
  facts.reserve(static_cast<std::size_t>(nf));
  const int k1 = keys[0];
  int first_value = 0;
  int answer = 0;
  if (params.hops == 1) {
    first_value = random_value();
    answer = first_value;
    facts.emplace_back(k1, first_value);
  } else {
    first_value = keys[1];
    answer = random_value();
    facts.emplace_back(k1, first_value);
    facts.emplace_back(first_value, answer);
  }
  for (int i = static_cast<int>(facts.size()); i < nf; ++i)
    facts.emplace_back(keys[static_cast<std::size_t>(i)], random_value());
  rng.shuffle(facts);

  TaskSample s;
  for (auto [k, v] : facts) {
    s.visual.push_back(k);
    s.visual.push_back(v);
  }
  s.question = {params.hops == 1 ? Vocab::kQueryOneHop : Vocab::kQueryTwoHop, k1};
  s.response.push_back(Vocab::kThinkBegin);
  for (int r = 0; r < params.restatements; ++r) {
    s.response.push_back(k1);
    s.response.push_back(first_value);
    s.response.push_back(Vocab::kSep);
  }
  s.response.insert(s.response.end(), {Vocab::kThinkEnd, Vocab::kAnswerBegin, answer, Vocab::kEnd});
  s.answer = answer;
  return s;
}

std::vector<TaskSample> gen_corpus(std::size_t n, std::uint64_t seed, const CorpusParams& params) {
  params.validate();
  std::vector<TaskSample> out;
  out.reserve(n);
  const auto n_eval = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * params.eval_fraction));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, i);
    TaskSample s = gen_sample(rng, params);
    s.split = (i >= n - n_eval) ? Split::eval : Split::train;
    out.push_back(std::move(s));
  }
  return out;
}

std::string serialize_sample(const TaskSample& s) {
  nlohmann::ordered_json j;
  j["visual"] = s.visual;
  j["question"] = s.question;
  j["response"] = s.response;
  j["answer"] = s.answer;
  j["split"] = s.split == Split::train ? "train" : "eval";
  return j.dump();
}

TaskSample parse_sample(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    TaskSample s;
    s.visual = j.at("visual").get<std::vector<int>>();
    s.question = j.at("question").get<std::vector<int>>();
    s.response = j.at("response").get<std::vector<int>>();
    s.answer = j.at("answer").get<int>();
    const auto split = j.at("split").get<std::string>();
    if (split == "train") {
      s.split = Split::train;
    } else if (split == "eval") {
      s.split = Split::eval;
    } else {
      throw DataError("unknown split '" + split + "'");
    }
    if (s.question.empty()) throw DataError("sample has an empty question");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed corpus line: ") + e.what());
  }
}

std::uint64_t write_corpus(const std::filesystem::path& path, std::span<const TaskSample> samples,
                           const std::string& header, const Vocab& vocab) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open corpus for writing: " + path.string());
    os << "# " << header << '\n';
    for (const auto& s : samples) os << serialize_sample(s) << '\n';
    if (!os) throw IoError("failed writing corpus: " + path.string());
  }
  auto vocab_path = path;
  vocab_path += ".vocab";
  vocab.write(vocab_path);
  return file_hash(path);
}

std::vector<TaskSample> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus: " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    try {
      out.push_back(parse_sample(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for hashing: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<unsigned char> buf(1 << 16);
  while (is) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(is.gcount());
    h = fnv1a64({buf.data(), got}, h);
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

Sequence layout_of(const TaskSample& sample, std::size_t max_seq_len) {
  if (sample.question.empty()) throw DataError("sample has an empty question");
  Sequence seq;
  seq.tokens = sample.visual;
  seq.tokens.insert(seq.tokens.end(), sample.question.begin(), sample.question.end());
  seq.tokens.insert(seq.tokens.end(), sample.response.begin(), sample.response.end());
  if (seq.tokens.size() > max_seq_len) {
    throw CapacityError("sample of " + std::to_string(seq.tokens.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(max_seq_len));
  }
  seq.layout = SegmentLayout::from_lengths(sample.visual.size(), sample.question.size(),
                                           sample.response.size());
  return seq;
}

std::vector<TaskSample> filter_split(std::span<const TaskSample> samples, Split split) {
  std::vector<TaskSample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

}  // namespace maskkd
