#pragma once

// Single-file model archive: magic, a JSON header (schema, architecture, parameter index)
// and the parameter values as raw little-endian doubles.

#include "camrank/model.hpp"

#include <filesystem>
#include <memory>
#include <string>

namespace camrank::checkpoint {

inline constexpr const char* kSchema = "camrank-checkpoint/1";

struct Metadata {
  std::uint64_t seed = 0;
  long iteration = 0;
  std::string id;  // content hash of the parameter values, hex
};

// FNV-1a over bytes; also used for config hashes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex(std::uint64_t v);

std::string parameter_digest(const nn::ParameterStore& store);

void save(const std::filesystem::path& file, const model::RankNet& net, std::uint64_t seed, long iteration);

struct Loaded {
  std::unique_ptr<model::RankNet> net;
  Metadata meta;
};
Loaded load(const std::filesystem::path& file);

}  // namespace camrank::checkpoint
