#include "camrank/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace camrank::checkpoint {

namespace {
constexpr char kMagic[8] = {'C', 'A', 'M', 'R', 'K', 'C', 'P', '1'};
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string parameter_digest(const nn::ParameterStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, v] : store.entries()) {
    h = fnv1a(name, h);
    const Matrix& m = v->value();
    h = fnv1a({reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double)}, h);
  }
  return hex(h);
}

void save(const std::filesystem::path& file, const model::RankNet& net, std::uint64_t seed, long iteration) {
  nlohmann::ordered_json header;
  header["schema"] = kSchema;
  header["config"] = net.config().to_json();
  header["seed"] = seed;
  header["iteration"] = iteration;
  header["id"] = parameter_digest(net.parameters());
  auto index = nlohmann::ordered_json::array();
  for (const auto& [name, v] : net.parameters().entries()) {
    index.push_back({{"name", name}, {"rows", v->value().rows()}, {"cols", v->value().cols()}});
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, v] : net.parameters().entries()) {
      out.write(reinterpret_cast<const char*>(v->value().data()),
                static_cast<std::streamsize>(v->value().size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + file.string());
  }
  std::filesystem::rename(tmp, file);
}

Loaded load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + file.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0 || len > (1u << 30)) {
    throw ValidationError(file.string() + " is not a checkpoint");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint header: " + std::string(e.what()));
  }
  if (header.value("schema", "") != kSchema) {
    throw ValidationError("unsupported checkpoint schema '" + header.value("schema", "") + "'");
  }
  Loaded result;
  result.meta.seed = header.value("seed", std::uint64_t{0});
  result.meta.iteration = header.value("iteration", 0L);
  result.net = std::make_unique<model::RankNet>(model::ModelConfig::from_json(header.at("config")), 0);
  const auto& entries = result.net->parameters().entries();
  const auto& index = header.at("tensors");
  if (index.size() != entries.size()) throw ValidationError("checkpoint does not match the architecture");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Matrix& m = entries[i].second->mutable_value();
    if (index[i].at("name") != entries[i].first || index[i].at("rows") != m.rows() || index[i].at("cols") != m.cols()) {
      throw ValidationError("checkpoint tensor " + index[i].at("name").get<std::string>() +
                            " does not match the architecture");
    }
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!in) throw ValidationError("truncated checkpoint " + file.string());
  result.meta.id = parameter_digest(result.net->parameters());
  if (header.contains("id") && header["id"] != result.meta.id) {
    throw ValidationError("checkpoint " + file.string() + " failed its integrity check");
  }
  return result;
}

}  // namespace camrank::checkpoint
