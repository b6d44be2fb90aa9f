#pragma once

// Flat dotted-key run configuration ("model.stem=2"), resolved as
// profile defaults <- config file <- command-line overrides.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "irstd/data.hpp"
#include "irstd/distill.hpp"
#include "irstd/metrics.hpp"
#include "irstd/model.hpp"
#include "irstd/train.hpp"

namespace irstd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  // "desk" (CPU scale) or "full".
  static RunConfig defaults(const std::string& profile = "desk");
  static std::vector<std::string> known_keys();

  // Unknown keys and values that do not parse as the key's type throw.
  void set(const std::string& key, const std::string& value);
  // key=value lines, '#' comments, blank lines ignored.
  void merge_text(const std::string& text, const std::string& origin = "config");
  void merge_file(const std::string& path);

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int64_t> get_list(const std::string& key) const;

  // Sorted key=value lines.
  std::string serialize() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  ModelConfig model() const;
  LossConfig loss() const;
  SynthConfig synth() const;
  DistillConfig distill() const;
  TrainConfig train() const;
  AugmentConfig augment() const;
  MatchConfig match() const;
  LoadOptions load_options() const;

 private:
  std::map<std::string, std::string> values_;
};

// Reads the "run.profile" entry of a config file without resolving it
// (empty when absent).
std::string profile_in_file(const std::string& path);

}  // namespace irstd
