#include "sgm/synthscene.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "sgm/errors.hpp"
#include "sgm/io.hpp"

namespace sgm {

namespace fs = std::filesystem;

namespace {

constexpr float kPi = std::numbers::pi_v<float>;

const std::pair<MotifKind, const char*> kMotifNames[] = {
    {MotifKind::Stripe, "stripe"},         {MotifKind::BlobCluster, "blob-cluster"},
    {MotifKind::SquareGrid, "squares"},    {MotifKind::WavyBand, "wavy-band"},
    {MotifKind::TextureField, "texture-field"}};

const std::pair<RuleKind, const char*> kRuleNames[] = {{RuleKind::AdjacentOn, "adjacent-on"},
                                                       {RuleKind::ParallelTo, "parallel-to"},
                                                       {RuleKind::Surrounds, "surrounds"},
                                                       {RuleKind::ScatteredNear, "scattered-near"},
                                                       {RuleKind::Independent, "independent"}};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

std::string to_string(MotifKind kind) {
  for (auto [k, n] : kMotifNames)
    if (k == kind) return n;
  return "?";
}

std::string to_string(RuleKind kind) {
  for (auto [k, n] : kRuleNames)
    if (k == kind) return n;
  return "?";
}

MotifKind parse_motif_kind(const std::string& text) {
  for (auto [k, n] : kMotifNames)
    if (text == n) return k;
  throw ManifestError("unknown motif kind '" + text + "'");
}

RuleKind parse_rule_kind(const std::string& text) {
  for (auto [k, n] : kRuleNames)
    if (text == n) return k;
  throw ManifestError("unknown arrangement rule '" + text + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Specs

void SceneClassSpec::validate() const {
  const std::string who = "class " + std::to_string(id);
  if (motifs.size() < 2) throw ManifestError(who + ": needs at least 2 motifs");
  auto in_color_range = [](const Rgb& c) {
    return std::all_of(c.begin(), c.end(), [](float v) { return v >= 0.0f && v <= 255.0f; });
  };
  if (!in_color_range(background)) throw ManifestError(who + ": background color outside [0,255]");
  for (std::size_t i = 0; i < motifs.size(); ++i) {
    const auto& m = motifs[i];
    const std::string mw = who + " motif " + std::to_string(i);
    if (!in_color_range(m.color)) throw ManifestError(mw + ": color outside [0,255]");
    if (m.size.lo <= 0.0f || m.size.hi < m.size.lo) throw ManifestError(mw + ": empty size range");
    if (m.count.lo < 1.0f || m.count.hi < m.count.lo) throw ManifestError(mw + ": empty count range");
    if (m.color_jitter < 0.0f) throw ManifestError(mw + ": negative color jitter");
  }
  std::set<std::size_t> dependents;
  for (const auto& r : rules) {
    if (r.anchor >= motifs.size() || r.dependent >= motifs.size())
      throw ManifestError(who + ": rule references a motif that is not in the list");
    if (r.anchor == r.dependent) throw ManifestError(who + ": rule binds a motif to itself");
    if (!dependents.insert(r.dependent).second) throw ManifestError(who + ": motif placed by two rules");
  }
  for (const auto& r : rules)
    if (dependents.count(r.anchor)) throw ManifestError(who + ": rule anchor is itself a dependent");
  if (noise < 0.0f || noise > 255.0f) throw ManifestError(who + ": noise level outside [0,255]");
  if (placement_jitter < 0.0f || placement_jitter > 1.0f) throw ManifestError(who + ": placement jitter outside [0,1]");
}

void DatasetManifest::validate() const {
  if (image_size < 16) throw ManifestError("image_size must be at least 16");
  if (images_per_class == 0) throw ManifestError("images_per_class must be positive");
  std::set<int> ids;
  for (const auto& c : classes) {
    c.validate();
    if (!ids.insert(c.id).second) throw ManifestError("duplicate class id " + std::to_string(c.id));
  }
  std::set<int> seen;
  for (const auto* list : {&train, &val, &test}) {
    for (int id : *list) {
      if (!ids.count(id)) throw ManifestError("split references unknown class " + std::to_string(id));
      if (!seen.insert(id).second) throw ManifestError("class " + std::to_string(id) + " assigned to two splits");
    }
  }
}

const SceneClassSpec& DatasetManifest::find(int id) const {
  for (const auto& c : classes)
    if (c.id == id) return c;
  throw ManifestError("unknown class " + std::to_string(id));
}

std::pair<SceneClassSpec, SceneClassSpec> make_arrangement_pair(const std::vector<MotifSpec>& motifs,
                                                                const Rgb& background, const ArrangementRule& rule_a,
                                                                const ArrangementRule& rule_b, int id_a, int id_b) {
  if (rule_a == rule_b) throw ArgumentError("make_arrangement_pair: rules are identical");
  SceneClassSpec a;
  a.id = id_a;
  a.background = background;
  a.motifs = motifs;
  a.rules = {rule_a};
  SceneClassSpec b = a;
  b.id = id_b;
  b.rules = {rule_b};
  a.validate();
  b.validate();
  return {a, b};
}

namespace {

MotifSpec motif(MotifKind kind, Rgb color, Range size, Range count, float color_jitter = 12.0f) {
  MotifSpec m;
  m.kind = kind;
  m.color = color;
  m.size = size;
  m.count = count;
  m.color_jitter = color_jitter;
  return m;
}

ArrangementRule rule(RuleKind kind, float offset = 0.0f, float angle = 0.0f) {
  return {kind, 0, 1, offset, angle};
}

SceneClassSpec single(int id, std::string name, Rgb bg, std::vector<MotifSpec> motifs, ArrangementRule r) {
  SceneClassSpec s;
  s.id = id;
  s.name = std::move(name);
  s.background = bg;
  s.motifs = std::move(motifs);
  s.rules = {r};
  return s;
}

void add_pair(std::vector<SceneClassSpec>& out, int id, const std::string& name_a, const std::string& name_b, Rgb bg,
              const std::vector<MotifSpec>& motifs, ArrangementRule ra, ArrangementRule rb) {
  auto [a, b] = make_arrangement_pair(motifs, bg, ra, rb, id, id + 1);
  a.name = name_a;
  b.name = name_b;
  out.push_back(a);
  out.push_back(b);
}

}  // namespace

DatasetManifest DatasetManifest::default_manifest(std::uint64_t seed) {
  using MK = MotifKind;
  using RK = RuleKind;
  DatasetManifest m;
  m.seed = seed;
  auto& c = m.classes;

  // Base classes.
  add_pair(c, 0, "highway", "roadside-lot", {95, 115, 80},
           {motif(MK::Stripe, {125, 125, 130}, {7, 9}, {1, 1}), motif(MK::SquareGrid, {205, 50, 40}, {3, 4}, {5, 7})},
           rule(RK::AdjacentOn), rule(RK::ScatteredNear, 11));
  add_pair(c, 2, "river-farm", "flooded-fields", {150, 130, 85},
           {motif(MK::WavyBand, {45, 75, 165}, {6, 8}, {1, 1}), motif(MK::TextureField, {70, 145, 60}, {12, 14}, {2, 2})},
           rule(RK::ParallelTo, 17), rule(RK::AdjacentOn));
  add_pair(c, 4, "residential", "park-houses", {110, 120, 100},
           {motif(MK::SquareGrid, {220, 215, 205}, {4, 4}, {9, 9}), motif(MK::BlobCluster, {40, 95, 45}, {3, 4}, {5, 6})},
           rule(RK::Surrounds, 16), rule(RK::AdjacentOn));
  c.push_back(single(6, "harbor", {30, 60, 130},
                     {motif(MK::Stripe, {185, 180, 170}, {4, 5}, {1, 1}), motif(MK::SquareGrid, {230, 220, 120}, {3, 3}, {4, 6})},
                     rule(RK::ParallelTo, 7)));
  c.push_back(single(7, "beach", {210, 190, 140},
                     {motif(MK::WavyBand, {40, 90, 170}, {10, 12}, {1, 1}), motif(MK::BlobCluster, {220, 80, 120}, {2, 3}, {5, 6})},
                     rule(RK::ScatteredNear, 10)));
  c.push_back(single(8, "forest-clearing", {40, 80, 40},
                     {motif(MK::TextureField, {125, 95, 55}, {16, 18}, {1, 1}), motif(MK::BlobCluster, {95, 155, 75}, {3, 4}, {6, 8})},
                     rule(RK::Surrounds, 15)));
  c.push_back(single(9, "airport", {150, 150, 140},
                     {motif(MK::Stripe, {70, 70, 75}, {8, 9}, {1, 1}), motif(MK::SquareGrid, {240, 240, 240}, {5, 5}, {3, 3})},
                     rule(RK::ParallelTo, 13)));
  c.push_back(single(10, "tennis-court", {120, 140, 90},
                     {motif(MK::TextureField, {60, 110, 170}, {16, 18}, {1, 1}), motif(MK::Stripe, {235, 235, 235}, {2, 2}, {1, 1})},
                     rule(RK::AdjacentOn, 0, 90)));
  c.push_back(single(11, "farmland", {140, 120, 70},
                     {motif(MK::TextureField, {95, 145, 50}, {18, 20}, {2, 2}), motif(MK::WavyBand, {110, 80, 50}, {3, 4}, {1, 1})},
                     rule(RK::Independent)));

  // Validation classes.
  add_pair(c, 12, "tank-farm-line", "tank-farm-row", {130, 120, 110},
           {motif(MK::Stripe, {200, 120, 40}, {3, 4}, {1, 1}), motif(MK::BlobCluster, {225, 225, 225}, {4, 4}, {4, 5})},
           rule(RK::AdjacentOn), rule(RK::ParallelTo, 12));
  c.push_back(single(14, "desert-road", {200, 170, 110},
                     {motif(MK::Stripe, {90, 80, 70}, {5, 6}, {1, 1}), motif(MK::TextureField, {165, 135, 85}, {12, 12}, {1, 2})},
                     rule(RK::ScatteredNear, 12)));
  c.push_back(single(15, "lake", {80, 120, 60},
                     {motif(MK::BlobCluster, {40, 80, 160}, {7, 8}, {3, 3}), motif(MK::SquareGrid, {200, 200, 190}, {3, 3}, {6, 7})},
                     rule(RK::Surrounds, 21)));
  c.push_back(single(16, "railway", {120, 110, 90},
                     {motif(MK::Stripe, {60, 50, 45}, {3, 3}, {1, 1}), motif(MK::SquareGrid, {150, 60, 40}, {4, 4}, {5, 6})},
                     rule(RK::ParallelTo, 6)));
  c.push_back(single(17, "golf-course", {70, 150, 60},
                     {motif(MK::BlobCluster, {220, 200, 150}, {3, 4}, {3, 3}), motif(MK::WavyBand, {50, 90, 170}, {4, 4}, {1, 1})},
                     rule(RK::Independent)));

  // Test classes.
  add_pair(c, 18, "canal-moorings", "canal-terraces", {100, 115, 90},
           {motif(MK::WavyBand, {50, 60, 150}, {6, 7}, {1, 1}), motif(MK::SquareGrid, {230, 140, 40}, {4, 4}, {6, 7})},
           rule(RK::AdjacentOn), rule(RK::ParallelTo, 14));
  add_pair(c, 20, "walled-garden", "scattered-garden", {140, 130, 120},
           {motif(MK::TextureField, {180, 60, 60}, {13, 14}, {1, 1}), motif(MK::BlobCluster, {60, 140, 70}, {3, 3}, {6, 7})},
           rule(RK::Surrounds, 14), rule(RK::Independent));
  c.push_back(single(22, "bridge", {40, 70, 140},
                     {motif(MK::Stripe, {160, 150, 130}, {5, 6}, {1, 1}), motif(MK::SquareGrid, {220, 220, 80}, {3, 3}, {4, 4})},
                     rule(RK::AdjacentOn)));
  c.push_back(single(23, "industrial", {150, 145, 140},
                     {motif(MK::SquareGrid, {90, 90, 100}, {6, 6}, {6, 6}), motif(MK::Stripe, {200, 200, 60}, {2, 2}, {1, 1})},
                     rule(RK::ScatteredNear, 10)));

  for (int i = 0; i < 12; ++i) m.train.push_back(i);
  for (int i = 12; i < 18; ++i) m.val.push_back(i);
  for (int i = 18; i < 24; ++i) m.test.push_back(i);
  return m;
}

// ---------------------------------------------------------------------------
// Manifest text form

namespace {

Rgb parse_rgb(const std::string& text, const std::string& what) {
  const auto v = parse_double_list(text, what);
  if (v.size() != 3) throw ManifestError(what + ": expected r,g,b");
  return {static_cast<float>(v[0]), static_cast<float>(v[1]), static_cast<float>(v[2])};
}

Range parse_range(const std::string& text, const std::string& what) {
  const auto parts = split(text, ':');
  if (parts.size() == 1) {
    const auto v = static_cast<float>(parse_double(parts[0], what));
    return {v, v};
  }
  if (parts.size() != 2) throw ManifestError(what + ": expected lo:hi");
  return {static_cast<float>(parse_double(parts[0], what)), static_cast<float>(parse_double(parts[1], what))};
}

std::map<std::string, std::string> parse_attrs(const std::vector<std::string>& words, std::size_t from,
                                               const std::string& what) {
  std::map<std::string, std::string> attrs;
  for (std::size_t i = from; i < words.size(); ++i) {
    if (words[i].empty()) continue;
    const auto eq = words[i].find('=');
    if (eq == std::string::npos) throw ManifestError(what + ": expected key=value, got '" + words[i] + "'");
    attrs[words[i].substr(0, eq)] = words[i].substr(eq + 1);
  }
  return attrs;
}

std::string fmt(float v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string fmt(const Rgb& c) { return fmt(c[0]) + "," + fmt(c[1]) + "," + fmt(c[2]); }
std::string fmt(const Range& r) { return fmt(r.lo) + ":" + fmt(r.hi); }

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

DatasetManifest DatasetManifest::parse(const KeyValues& kv) {
  DatasetManifest m;
  try {
    const std::string preset = kv.get_string("classes", "none");
    if (preset == "default")
      m = default_manifest();
    else if (preset != "none")
      throw ManifestError("classes must be 'default' or 'none', got '" + preset + "'");
    m.seed = kv.get_u64("seed", m.seed);
    const long per_class = kv.get_int("images_per_class", static_cast<long>(m.images_per_class));
    const long size = kv.get_int("image_size", static_cast<long>(m.image_size));
    if (per_class <= 0 || size <= 0) throw ManifestError("images_per_class and image_size must be positive");
    m.images_per_class = static_cast<std::size_t>(per_class);
    m.image_size = static_cast<std::size_t>(size);
    if (auto v = kv.get("split.train")) m.train = parse_int_list(*v, "split.train");
    if (auto v = kv.get("split.val")) m.val = parse_int_list(*v, "split.val");
    if (auto v = kv.get("split.test")) m.test = parse_int_list(*v, "split.test");

    std::set<int> defined;
    for (const auto& key : kv.keys_with_prefix("class.")) {
      const auto parts = split(key, '.');
      if (parts.size() < 3) throw ManifestError("malformed class key '" + key + "'");
      defined.insert(static_cast<int>(parse_int(parts[1], key)));
    }
    for (int id : defined) {
      const std::string p = "class." + std::to_string(id) + ".";
      auto it = std::find_if(m.classes.begin(), m.classes.end(), [&](const auto& c) { return c.id == id; });
      if (it == m.classes.end()) {
        m.classes.push_back({});
        it = std::prev(m.classes.end());
        it->id = id;
      }
      SceneClassSpec& spec = *it;
      spec.name = kv.get_string(p + "name", spec.name);
      if (auto v = kv.get(p + "background")) spec.background = parse_rgb(*v, p + "background");
      spec.noise = static_cast<float>(kv.get_double(p + "noise", spec.noise));
      spec.placement_jitter = static_cast<float>(kv.get_double(p + "jitter", spec.placement_jitter));
      if (!kv.keys_with_prefix(p + "motif.").empty()) spec.motifs.clear();
      for (std::size_t k = 0;; ++k) {
        auto v = kv.get(p + "motif." + std::to_string(k));
        if (!v) break;
        const auto words = split(*v, ' ');
        MotifSpec ms;
        ms.kind = parse_motif_kind(words.at(0));
        const auto attrs = parse_attrs(words, 1, p + "motif");
        for (const auto& [ak, av] : attrs) {
          if (ak == "color") ms.color = parse_rgb(av, p + "motif color");
          else if (ak == "jitter") ms.color_jitter = static_cast<float>(parse_double(av, p + "motif jitter"));
          else if (ak == "size") ms.size = parse_range(av, p + "motif size");
          else if (ak == "count") ms.count = parse_range(av, p + "motif count");
          else throw ManifestError(p + "motif: unknown attribute '" + ak + "'");
        }
        spec.motifs.push_back(ms);
      }
      if (!kv.keys_with_prefix(p + "rule.").empty()) spec.rules.clear();
      for (std::size_t k = 0;; ++k) {
        auto v = kv.get(p + "rule." + std::to_string(k));
        if (!v) break;
        const auto words = split(*v, ' ');
        ArrangementRule r;
        r.kind = parse_rule_kind(words.at(0));
        const auto attrs = parse_attrs(words, 1, p + "rule");
        for (const auto& [ak, av] : attrs) {
          if (ak == "anchor") r.anchor = static_cast<std::size_t>(parse_int(av, p + "rule anchor"));
          else if (ak == "dependent") r.dependent = static_cast<std::size_t>(parse_int(av, p + "rule dependent"));
          else if (ak == "offset") r.offset = static_cast<float>(parse_double(av, p + "rule offset"));
          else if (ak == "angle") r.angle = static_cast<float>(parse_double(av, p + "rule angle"));
          else throw ManifestError(p + "rule: unknown attribute '" + ak + "'");
        }
        spec.rules.push_back(r);
      }
    }
  } catch (const ConfigError& e) {
    throw ManifestError(e.what());
  }
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  if (!fs::exists(path)) throw ManifestError("manifest not found: " + path.string());
  try {
    return parse(KeyValues::load(path));
  } catch (const ConfigError& e) {
    throw ManifestError(e.what());
  }
}

std::string DatasetManifest::to_text() const {
  std::ostringstream os;
  os << "classes = none\n";
  os << "seed = " << seed << "\n";
  os << "images_per_class = " << images_per_class << "\n";
  os << "image_size = " << image_size << "\n";
  os << "split.train = " << join(train) << "\n";
  os << "split.val = " << join(val) << "\n";
  os << "split.test = " << join(test) << "\n";
  for (const auto& c : classes) {
    const std::string p = "class." + std::to_string(c.id) + ".";
    if (!c.name.empty()) os << p << "name = " << c.name << "\n";
    os << p << "background = " << fmt(c.background) << "\n";
    os << p << "noise = " << fmt(c.noise) << "\n";
    os << p << "jitter = " << fmt(c.placement_jitter) << "\n";
    for (std::size_t k = 0; k < c.motifs.size(); ++k) {
      const auto& m = c.motifs[k];
      os << p << "motif." << k << " = " << to_string(m.kind) << " color=" << fmt(m.color)
         << " jitter=" << fmt(m.color_jitter) << " size=" << fmt(m.size) << " count=" << fmt(m.count) << "\n";
    }
    for (std::size_t k = 0; k < c.rules.size(); ++k) {
      const auto& r = c.rules[k];
      os << p << "rule." << k << " = " << to_string(r.kind) << " anchor=" << r.anchor << " dependent=" << r.dependent
         << " offset=" << fmt(r.offset) << " angle=" << fmt(r.angle) << "\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct Instance {
  float x, y, theta, size;
  Rgb color;
};

// Anchor reference frame: center, axis angle, half extent along the axis.
struct Frame {
  float cx, cy, theta, half;
};

class Painter {
 public:
  Painter(std::size_t size, const Rgb& bg) : size_(size), px_(size * size, bg) {}

  template <typename Inside>
  void fill(const Rgb& color, Inside&& inside) {
    for (std::size_t y = 0; y < size_; ++y)
      for (std::size_t x = 0; x < size_; ++x)
        if (inside(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f)) px_[y * size_ + x] = color;
  }

  template <typename Shade>
  void shade(Shade&& fn) {
    for (std::size_t y = 0; y < size_; ++y)
      for (std::size_t x = 0; x < size_; ++x) {
        auto c = fn(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f);
        if (c) px_[y * size_ + x] = *c;
      }
  }

  const std::vector<Rgb>& pixels() const { return px_; }

 private:
  std::size_t size_;
  std::vector<Rgb> px_;
};

class SceneRenderer {
 public:
  SceneRenderer(const SceneClassSpec& spec, std::size_t size, std::mt19937_64& rng)
      : spec_(spec), size_(static_cast<float>(size)), rng_(rng) {}

  std::vector<std::vector<Instance>> layout() {
    const std::size_t n = spec_.motifs.size();
    std::vector<const ArrangementRule*> placed_by(n, nullptr);
    for (const auto& r : spec_.rules) placed_by[r.dependent] = &r;
    std::vector<std::vector<Instance>> out(n);
    std::vector<Frame> frames(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (placed_by[i]) continue;
      frames[i] = anchor_frame(spec_.motifs[i]);
      out[i] = anchor_instances(spec_.motifs[i], frames[i]);
    }
    for (std::size_t i = 0; i < n; ++i)
      if (placed_by[i]) out[i] = dependent_instances(spec_.motifs[i], *placed_by[i], frames[placed_by[i]->anchor]);
    return out;
  }

 private:
  float jitter() const { return spec_.placement_jitter; }
  float uni(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng_); }
  // Value drawn from a range; a degenerate range consumes no randomness.
  float draw(const Range& r) { return r.lo == r.hi ? r.lo : uni(r.lo, r.hi); }
  int draw_count(const Range& r) {
    const int lo = static_cast<int>(std::lround(r.lo)), hi = static_cast<int>(std::lround(r.hi));
    return lo == hi ? lo : std::uniform_int_distribution<int>(lo, hi)(rng_);
  }
  float jit(float amp) { return jitter() > 0.0f ? jitter() * uni(-amp, amp) : 0.0f; }

  Rgb color(const MotifSpec& m) {
    Rgb c = m.color;
    if (m.color_jitter > 0.0f) {
      const float d = uni(-m.color_jitter, m.color_jitter);
      for (auto& v : c) v = std::clamp(v + d, 0.0f, 255.0f);
    }
    return c;
  }

  Frame anchor_frame(const MotifSpec& m) {
    Frame f;
    f.cx = size_ / 2 + jit(size_ / 5);
    f.cy = size_ / 2 + jit(size_ / 5);
    f.theta = jitter() > 0.0f ? jitter() * uni(0.0f, kPi) : 0.0f;
    const float s = m.size.hi;
    switch (m.kind) {
      case MotifKind::Stripe:
      case MotifKind::WavyBand: f.half = size_ * 0.35f; break;
      case MotifKind::BlobCluster: f.half = 2.5f * s; break;
      case MotifKind::SquareGrid: f.half = 1.0f * s * std::ceil(std::sqrt(m.count.hi)); break;
      case MotifKind::TextureField: f.half = s / 2; break;
    }
    return f;
  }

  std::vector<Instance> anchor_instances(const MotifSpec& m, const Frame& f) {
    const int n = draw_count(m.count);
    std::vector<Instance> out;
    const float ux = std::cos(f.theta), uy = std::sin(f.theta);
    const float vx = -uy, vy = ux;
    const float s = draw(m.size);
    for (int i = 0; i < n; ++i) {
      Instance in{f.cx, f.cy, f.theta, s, color(m)};
      switch (m.kind) {
        case MotifKind::Stripe:
        case MotifKind::WavyBand: {
          const float off = (static_cast<float>(i) - 0.5f * static_cast<float>(n - 1)) * 3.0f * s;
          in.x += off * vx;
          in.y += off * vy;
          break;
        }
        case MotifKind::BlobCluster: {
          if (n == 1) break;
          const float a = 2 * kPi * static_cast<float>(i) / static_cast<float>(n) + f.theta + jit(0.4f);
          const float r = 2.2f * s * (1.0f + jit(0.3f));
          in.x += r * std::cos(a);
          in.y += r * std::sin(a);
          break;
        }
        case MotifKind::SquareGrid: {
          const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<float>(n))));
          const int rows = (n + cols - 1) / cols;
          const float gx = (static_cast<float>(i % cols) - 0.5f * static_cast<float>(cols - 1)) * 2.0f * s;
          const float gy = (static_cast<float>(i / cols) - 0.5f * static_cast<float>(rows - 1)) * 2.0f * s;
          in.x += gx * ux + gy * vx + jit(1.0f);
          in.y += gx * uy + gy * vy + jit(1.0f);
          break;
        }
        case MotifKind::TextureField: {
          const float off = (static_cast<float>(i) - 0.5f * static_cast<float>(n - 1)) * (s + 4.0f);
          in.x += off * ux;
          in.y += off * uy;
          break;
        }
      }
      out.push_back(in);
    }
    return out;
  }

  std::vector<Instance> dependent_instances(const MotifSpec& m, const ArrangementRule& r, const Frame& f) {
    const int n = draw_count(m.count);
    const float s = draw(m.size);
    const float ux = std::cos(f.theta), uy = std::sin(f.theta);
    const float vx = -uy, vy = ux;
    const float turn = r.angle * kPi / 180.0f;
    const float span = std::min(f.half, size_ * 0.35f);
    std::vector<Instance> out;
    for (int i = 0; i < n; ++i) {
      const float frac = n == 1 ? 0.0f : (static_cast<float>(i) / static_cast<float>(n - 1)) * 2.0f - 1.0f;
      Instance in{f.cx, f.cy, f.theta + turn, s, color(m)};
      switch (r.kind) {
        case RuleKind::AdjacentOn: {
          const float t = frac * span + jit(2.0f);
          in.x += t * ux;
          in.y += t * uy;
          break;
        }
        case RuleKind::ParallelTo: {
          const float t = frac * span + jit(2.0f);
          in.x += t * ux + r.offset * vx;
          in.y += t * uy + r.offset * vy;
          break;
        }
        case RuleKind::Surrounds: {
          const float a = 2 * kPi * static_cast<float>(i) / static_cast<float>(n) + f.theta + jit(0.3f);
          const float rad = r.offset + jit(1.5f);
          in.x += rad * std::cos(a);
          in.y += rad * std::sin(a);
          in.theta = a + turn;
          break;
        }
        case RuleKind::ScatteredNear: {
          const float t = jitter() > 0.0f ? uni(-span, span) : frac * span;
          const float side = jitter() > 0.0f ? (uni(0.0f, 1.0f) < 0.5f ? -1.0f : 1.0f) : (i % 2 ? -1.0f : 1.0f);
          const float d = side * (r.offset + (jitter() > 0.0f ? jitter() * uni(0.0f, 6.0f) : 0.0f));
          in.x += t * ux + d * vx;
          in.y += t * uy + d * vy;
          break;
        }
        case RuleKind::Independent: {
          if (jitter() > 0.0f) {
            in.x = uni(6.0f, size_ - 6.0f);
            in.y = uni(6.0f, size_ - 6.0f);
            in.theta = uni(0.0f, kPi);
          } else {
            in.x = size_ * (0.2f + 0.6f * static_cast<float>(i + 1) / static_cast<float>(n + 1));
            in.y = size_ * 0.25f;
          }
          break;
        }
      }
      out.push_back(in);
    }
    return out;
  }

  const SceneClassSpec& spec_;
  float size_;
  std::mt19937_64& rng_;
};

void draw_instance(Painter& painter, MotifKind kind, const Instance& in) {
  const float c = std::cos(in.theta), s = std::sin(in.theta);
  const float half = in.size / 2;
  auto local = [&](float x, float y, float& along, float& across) {
    const float dx = x - in.x, dy = y - in.y;
    along = dx * c + dy * s;
    across = -dx * s + dy * c;
  };
  switch (kind) {
    case MotifKind::Stripe:
      painter.fill(in.color, [&](float x, float y) {
        float a, b;
        local(x, y, a, b);
        return std::abs(b) <= half;
      });
      break;
    case MotifKind::WavyBand:
      painter.fill(in.color, [&](float x, float y) {
        float a, b;
        local(x, y, a, b);
        return std::abs(b - 4.0f * std::sin(2 * kPi * a / 24.0f)) <= half;
      });
      break;
    case MotifKind::BlobCluster:
      painter.fill(in.color, [&](float x, float y) {
        const float dx = x - in.x, dy = y - in.y;
        return dx * dx + dy * dy <= in.size * in.size;
      });
      break;
    case MotifKind::SquareGrid:
      painter.fill(in.color, [&](float x, float y) {
        float a, b;
        local(x, y, a, b);
        return std::abs(a) <= half && std::abs(b) <= half;
      });
      break;
    case MotifKind::TextureField: {
      const Rgb dark{in.color[0] * 0.6f, in.color[1] * 0.6f, in.color[2] * 0.6f};
      painter.shade([&](float x, float y) -> std::optional<Rgb> {
        float a, b;
        local(x, y, a, b);
        if (std::abs(a) > half || std::abs(b) > half) return std::nullopt;
        const int cell = static_cast<int>(std::floor((a + half) / 3.0f)) + static_cast<int>(std::floor((b + half) / 3.0f));
        return cell % 2 ? dark : in.color;
      });
      break;
    }
  }
}

}  // namespace

RgbImage render_scene(const SceneClassSpec& spec, std::size_t size, std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng(splitmix64(splitmix64(seed ^ 0x5347'4d4eull) ^ splitmix64(static_cast<std::uint64_t>(spec.id) + 1) ^
                                 splitmix64(static_cast<std::uint64_t>(index) * 0x100000001b3ull + 7)));
  Painter painter(size, spec.background);
  SceneRenderer renderer(spec, size, rng);
  const auto layout = renderer.layout();
  for (std::size_t m = 0; m < spec.motifs.size(); ++m)
    for (const auto& in : layout[m]) draw_instance(painter, spec.motifs[m].kind, in);

  RgbImage img(size, size);
  std::uniform_real_distribution<float> noise(-spec.noise, spec.noise);
  const auto& px = painter.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      float v = px[i][ch];
      if (spec.noise > 0.0f) v += noise(rng);
      img.rgb[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f)));
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset IO

namespace {

std::string image_relpath(int class_id, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/c%02d/%03zu.ppm", class_id, index);
  return buf;
}

}  // namespace

std::size_t generate_dataset(const DatasetManifest& manifest, const fs::path& out_dir, const GenerateOptions& options) {
  manifest.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !options.force)
    throw ArgumentError("refusing to write into non-empty directory " + out_dir.string() + " (use --force)");

  struct Job {
    const SceneClassSpec* spec;
    std::size_t index;
    Split split;
  };
  std::vector<Job> jobs;
  auto add = [&](const std::vector<int>& ids, Split split) {
    for (int id : ids)
      for (std::size_t i = 0; i < manifest.images_per_class; ++i) jobs.push_back({&manifest.find(id), i, split});
  };
  add(manifest.train, Split::Train);
  add(manifest.val, Split::Val);
  add(manifest.test, Split::Test);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  unsigned workers = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, jobs.size())));
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(workers);
  auto work = [&](unsigned w) {
    try {
      for (std::size_t j = next++; j < jobs.size(); j = next++) {
        const auto& job = jobs[j];
        write_ppm(out_dir / image_relpath(job.spec->id, job.index),
                  render_scene(*job.spec, manifest.image_size, manifest.seed, job.index));
      }
    } catch (const std::exception& e) {
      errors[w] = e.what();
      next = jobs.size();
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw IoError(e);

  std::ostringstream index;
  for (const auto& job : jobs)
    index << image_relpath(job.spec->id, job.index) << '\t' << job.spec->id << '\t' << to_string(job.split) << '\n';
  write_file_atomic(out_dir / "manifest.txt", manifest.to_text());
  write_file_atomic(out_dir / "index.tsv", index.str());
  return jobs.size();
}

std::size_t SplitView::size() const {
  std::size_t n = 0;
  for (const auto& m : members) n += m.size();
  return n;
}

int SplitView::local_index(int class_id) const {
  auto it = std::lower_bound(classes.begin(), classes.end(), class_id);
  return (it != classes.end() && *it == class_id) ? static_cast<int>(it - classes.begin()) : -1;
}

const SplitView& Dataset::view(Split split) const {
  switch (split) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

Dataset load_dataset(const fs::path& root) {
  const fs::path index_path = root / "index.tsv";
  if (!fs::exists(index_path)) throw DataError("dataset index not found: " + index_path.string());
  std::istringstream in(read_text(index_path));
  Dataset ds;
  std::map<int, Split> class_split;
  std::string line;
  std::size_t lineno = 0;
  std::size_t expected_size = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3) throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    Sample s;
    s.path = cols[0];
    try {
      s.class_id = static_cast<int>(parse_int(cols[1], "class id"));
    } catch (const ConfigError& e) {
      throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (cols[2] == "train") s.split = Split::Train;
    else if (cols[2] == "val") s.split = Split::Val;
    else if (cols[2] == "test") s.split = Split::Test;
    else throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": unknown split '" + cols[2] + "'");

    auto [it, inserted] = class_split.emplace(s.class_id, s.split);
    if (!inserted && it->second != s.split)
      throw DataError("class " + std::to_string(s.class_id) + " appears in both " + to_string(it->second) + " and " +
                      to_string(s.split) + " splits");

    const RgbImage img = read_ppm(root / s.path);
    if (img.width != img.height) throw DataError(s.path + ": image is not square");
    if (expected_size == 0) expected_size = img.width;
    if (img.width != expected_size)
      throw DataError(s.path + ": size " + std::to_string(img.width) + " differs from " + std::to_string(expected_size));
    s.image = image_to_tensor(img);
    ds.samples.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    SplitView& v = s.split == Split::Train ? ds.train : s.split == Split::Val ? ds.val : ds.test;
    int local = v.local_index(s.class_id);
    if (local < 0) {
      auto pos = std::lower_bound(v.classes.begin(), v.classes.end(), s.class_id) - v.classes.begin();
      v.classes.insert(v.classes.begin() + pos, s.class_id);
      v.members.insert(v.members.begin() + pos, std::vector<std::size_t>{});
      local = static_cast<int>(pos);
    }
    v.members[static_cast<std::size_t>(local)].push_back(i);
  }
  return ds;
}

std::vector<double> color_histogram(const RgbImage& image, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins * bins * bins), 0.0);
  const std::size_t n = image.width * image.height;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = image.rgb.data() + i * 3;
    const int r = p[0] * bins / 256, g = p[1] * bins / 256, b = p[2] * bins / 256;
    h[static_cast<std::size_t>((r * bins + g) * bins + b)] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(n);
  return h;
}

}  // namespace sgm
