#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "maskkd/error.hpp"
#include "maskkd/model.hpp"

namespace maskkd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as little-endian float64");

namespace {

constexpr char kMagic[8] = {'M', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError("truncated checkpoint: " + path.string());
  }
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto& c = model.config();
  nlohmann::ordered_json header = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                                   {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
                                   {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling temp file first so a failed write never clobbers a
  // previous good checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    const auto& params = model.parameters();
    const auto& names = model.parameter_names();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(names[i].size()));
      os.write(names[i].data(), static_cast<std::streamsize>(names[i].size()));
      const auto& shape = params[i].shape();
      put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
      for (auto d : shape) put<std::uint64_t>(os, d);
      const auto& v = params[i].value();
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!os) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a maskkd checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " +
                  path.string());
  }
  const auto hlen = get<std::uint32_t>(is, path);
  std::string h(hlen, '\0');
  if (!is.read(h.data(), hlen)) throw IoError("truncated checkpoint: " + path.string());
  const auto header = nlohmann::json::parse(h);
  ModelConfig cfg;
  cfg.vocab_size = header.at("vocab_size").get<int>();
  cfg.d_model = header.at("d_model").get<int>();
  cfg.n_heads = header.at("n_heads").get<int>();
  cfg.n_layers = header.at("n_layers").get<int>();
  cfg.max_seq_len = header.at("max_seq_len").get<int>();
  cfg.seed = header.at("seed").get<std::uint64_t>();
  Model model(cfg);
  const auto count = get<std::uint32_t>(is, path);
  if (count != model.parameters().size()) {
    throw IoError("checkpoint parameter count mismatch in " + path.string());
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = get<std::uint32_t>(is, path);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw IoError("truncated checkpoint: " + path.string());
    Var& p = model.param(name);
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, path));
    if (shape != p.shape()) {
      throw IoError("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                    shape_str(p.shape()) + " in " + path.string());
    }
    auto& v = p.mutable_value();
    if (!is.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double)))) {
      throw IoError("truncated checkpoint: " + path.string());
    }
  }
  return model;
}

}  // namespace maskkd
