#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sgm {

// Flat "key = value" text with '#' comments. Later assignments win.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

  // Keys beginning with `prefix`.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
};

long parse_int(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);
// "0-3,7,9-10" -> {0,1,2,3,7,9,10}
std::vector<int> parse_int_list(const std::string& text, const std::string& what);
std::vector<double> parse_double_list(const std::string& text, const std::string& what);
std::string trim(const std::string& text);
std::vector<std::string> split(const std::string& text, char sep);

// Run-level configuration shared by the command-line phases. Values come from
// defaults, then a config file, then command-line overrides.
struct RunConfig {
  std::string dataset_dir = "data";
  std::string backbone_checkpoint = "checkpoints/backbone.ckpt";
  std::string matcher_checkpoint = "checkpoints/matcher.ckpt";
  std::string metrics_path = "metrics.json";

  // Task
  int way = 5;
  int shot = 1;
  int queries = 15;
  int episodes = 600;

  // Pre-training
  int pretrain_epochs = 8;
  int pretrain_batch = 32;
  double pretrain_lr = 0.1;
  double pretrain_momentum = 0.9;
  double pretrain_weight_decay = 5e-4;
  double rotation_weight = 1.0;

  // Meta-training
  int meta_epochs = 8;
  int meta_episodes_per_epoch = 60;
  int meta_queries = 6;
  int val_episodes = 100;
  double meta_lr = 1e-4;
  double meta_weight_decay = 5e-4;
  int patience = 0;  // 0 disables early stopping

  bool no_propagation = false;
  bool no_interaction = false;
  std::uint64_t seed = 0;

  // Applies every recognized key; unknown keys are a ConfigError.
  void apply(const KeyValues& kv);
  // Throws ConfigError on violated invariants.
  void validate() const;
  KeyValues to_key_values() const;
};

}  // namespace sgm
