#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "verifierq/approximator.hpp"

namespace verifierq {

inline constexpr const char* kCheckpointMagic = "#verifierq-ckpt";
inline constexpr int kCheckpointVersion = 1;

/// Text checkpoint: a header line, free-form JSON metadata, an optional
/// tabular index shared by every tabular head, then named heads and bare
/// parameter sets. Every value is written with 17 significant digits.
struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::shared_ptr<const TabularIndex> index;
  std::vector<std::pair<std::string, Approximator>> heads;
  std::vector<std::pair<std::string, ParamSet>> params;

  const Approximator& head(const std::string& name) const;
  const ParamSet& param(const std::string& name) const;
  bool has_head(const std::string& name) const;
  bool has_param(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string format_double(double x);
double parse_double(const std::string& text);

}  // namespace verifierq
