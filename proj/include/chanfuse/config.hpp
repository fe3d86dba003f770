#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "chanfuse/data.hpp"
#include "chanfuse/model.hpp"
#include "chanfuse/train.hpp"

namespace chanfuse {

/// Every tunable setting, addressable by a dotted key such as
/// `train.lambda_eff`. Unknown keys and unparsable values throw ConfigError.
struct RunConfig {
  SynthMotionSpec data;
  ToyNetConfig model;
  TrainConfig train;
  EvalOptions eval;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// `key=value` lines, `#` comments and blank lines ignored.
  void apply_text(const std::string& text, const std::string& origin = "<config>");
  void apply_file(const std::filesystem::path& path);
  /// Fully resolved settings, one `key=value` per line in key order.
  std::string echo() const;
  /// Cross-field checks, then each section's own validation.
  void validate() const;
  /// Net config with class count and clip length taken from the data section.
  ToyNetConfig resolved_model() const;

  static const std::vector<std::string>& keys();
};

/// Parses `keep,reuse,skip` probabilities.
std::array<double, 3> parse_distribution(const std::string& s);
BaselinePolicy::Kind parse_policy_kind(const std::string& s);
std::string to_string(BaselinePolicy::Kind k);

}  // namespace chanfuse
