#include "sgm/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "sgm/errors.hpp"
#include "sgm/io.hpp"

namespace sgm {

std::string trim(const std::string& text) {
  const auto b = text.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = text.find_last_not_of(" \t\r\n");
  return text.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

long parse_int(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  long v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError(what + ": expected an integer, got '" + text + "'");
  return v;
}

double parse_double(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw ConfigError("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected a number, got '" + text + "'");
  }
}

bool parse_bool(const std::string& text, const std::string& what) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError(what + ": expected a boolean, got '" + text + "'");
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  for (const auto& part : split(text, ',')) {
    const auto dash = part.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(static_cast<int>(parse_int(part, what)));
    } else {
      const long lo = parse_int(part.substr(0, dash), what), hi = parse_int(part.substr(dash + 1), what);
      if (hi < lo) throw ConfigError(what + ": empty range '" + part + "'");
      for (long v = lo; v <= hi; ++v) out.push_back(static_cast<int>(v));
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  for (const auto& part : split(text, ',')) out.push_back(parse_double(part, what));
  return out;
}

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(read_text(path), path.string());
}

std::optional<std::string> KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

long KeyValues::get_int(const std::string& key, long fallback) const {
  auto v = get(key);
  return v ? parse_int(*v, source_ + ": " + key) : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  auto v = get(key);
  return v ? parse_double(*v, source_ + ": " + key) : fallback;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  auto v = get(key);
  return v ? parse_bool(*v, source_ + ": " + key) : fallback;
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  const long x = parse_int(*v, source_ + ": " + key);
  if (x < 0) throw ConfigError(source_ + ": " + key + " must be non-negative");
  return static_cast<std::uint64_t>(x);
}

std::vector<std::string> KeyValues::keys_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k);
  return out;
}

namespace {

template <typename F>
void each_field(RunConfig& c, F&& f) {
  f("dataset_dir", c.dataset_dir);
  f("backbone_checkpoint", c.backbone_checkpoint);
  f("matcher_checkpoint", c.matcher_checkpoint);
  f("metrics_path", c.metrics_path);
  f("way", c.way);
  f("shot", c.shot);
  f("queries", c.queries);
  f("episodes", c.episodes);
  f("pretrain_epochs", c.pretrain_epochs);
  f("pretrain_batch", c.pretrain_batch);
  f("pretrain_lr", c.pretrain_lr);
  f("pretrain_momentum", c.pretrain_momentum);
  f("pretrain_weight_decay", c.pretrain_weight_decay);
  f("rotation_weight", c.rotation_weight);
  f("meta_epochs", c.meta_epochs);
  f("meta_episodes_per_epoch", c.meta_episodes_per_epoch);
  f("meta_queries", c.meta_queries);
  f("val_episodes", c.val_episodes);
  f("meta_lr", c.meta_lr);
  f("meta_weight_decay", c.meta_weight_decay);
  f("patience", c.patience);
  f("no_propagation", c.no_propagation);
  f("no_interaction", c.no_interaction);
  f("seed", c.seed);
}

}  // namespace

void RunConfig::apply(const KeyValues& kv) {
  std::vector<std::string> known;
  each_field(*this, [&](const char* key, auto& field) {
    known.emplace_back(key);
    using T = std::decay_t<decltype(field)>;
    if (!kv.has(key)) return;
    if constexpr (std::is_same_v<T, std::string>)
      field = *kv.get(key);
    else if constexpr (std::is_same_v<T, bool>)
      field = kv.get_bool(key, field);
    else if constexpr (std::is_same_v<T, int>)
      field = static_cast<int>(kv.get_int(key, field));
    else if constexpr (std::is_same_v<T, std::uint64_t>)
      field = kv.get_u64(key, field);
    else
      field = kv.get_double(key, field);
  });
  for (const auto& [k, v] : kv.entries())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
}

void RunConfig::validate() const {
  if (way < 2) throw ConfigError("way must be at least 2, got " + std::to_string(way));
  if (shot < 1) throw ConfigError("shot must be at least 1, got " + std::to_string(shot));
  if (queries < 1) throw ConfigError("queries must be at least 1, got " + std::to_string(queries));
  if (meta_queries < 1) throw ConfigError("meta_queries must be at least 1");
  if (episodes < 1) throw ConfigError("episodes must be at least 1");
  if (pretrain_epochs < 1 || pretrain_batch < 1) throw ConfigError("pretrain_epochs and pretrain_batch must be positive");
  if (meta_epochs < 1 || meta_episodes_per_epoch < 1) throw ConfigError("meta episode budget must be positive");
  if (val_episodes < 1) throw ConfigError("val_episodes must be positive");
  if (!(pretrain_lr > 0) || !(meta_lr > 0)) throw ConfigError("learning rates must be positive");
  if (pretrain_momentum < 0 || pretrain_weight_decay < 0 || meta_weight_decay < 0 || rotation_weight < 0)
    throw ConfigError("momentum, weight decay and rotation weight must be non-negative");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  const std::vector<std::string> paths = {backbone_checkpoint, matcher_checkpoint, metrics_path};
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = i + 1; j < paths.size(); ++j)
      if (std::filesystem::path(paths[i]).lexically_normal() == std::filesystem::path(paths[j]).lexically_normal())
        throw ConfigError("artifact paths collide: " + paths[i]);
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  RunConfig copy = *this;
  each_field(copy, [&](const char* key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::string>) {
      kv.set(key, field);
    } else if constexpr (std::is_same_v<T, bool>) {
      kv.set(key, field ? "true" : "false");
    } else {
      std::ostringstream os;
      os << field;
      kv.set(key, os.str());
    }
  });
  return kv;
}

}  // namespace sgm
