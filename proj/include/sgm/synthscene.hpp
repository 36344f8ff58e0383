#pragma once

// Procedural scene classes built from object motifs and pairwise arrangement
// rules, plus the on-disk dataset format:
//
//   <root>/images/cNN/III.ppm      64x64 binary PPM
//   <root>/index.tsv               "relative-path<TAB>class-id<TAB>split" per line
//   <root>/manifest.txt            the manifest that produced the data

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sgm/config.hpp"
#include "sgm/image_io.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

enum class MotifKind { Stripe, BlobCluster, SquareGrid, WavyBand, TextureField };
enum class RuleKind { AdjacentOn, ParallelTo, Surrounds, ScatteredNear, Independent };

std::string to_string(MotifKind kind);
std::string to_string(RuleKind kind);
MotifKind parse_motif_kind(const std::string& text);
RuleKind parse_rule_kind(const std::string& text);

struct Range {
  float lo = 0.0f;
  float hi = 0.0f;
  bool operator==(const Range&) const = default;
};

using Rgb = std::array<float, 3>;

struct MotifSpec {
  MotifKind kind = MotifKind::Stripe;
  Rgb color{128, 128, 128};
  float color_jitter = 0.0f;  // uniform +- per instance, per channel
  Range size{4, 4};           // pixels: stripe/band width, blob radius, square side, patch side
  Range count{1, 1};          // instances

  bool operator==(const MotifSpec&) const = default;
};

// Places `dependent` relative to `anchor`. `offset` is in pixels; `angle` (degrees)
// rotates the dependent's orientation relative to the anchor axis.
struct ArrangementRule {
  RuleKind kind = RuleKind::Independent;
  std::size_t anchor = 0;
  std::size_t dependent = 1;
  float offset = 0.0f;
  float angle = 0.0f;

  bool operator==(const ArrangementRule&) const = default;
};

struct SceneClassSpec {
  int id = 0;
  std::string name;
  Rgb background{100, 100, 100};
  std::vector<MotifSpec> motifs;
  std::vector<ArrangementRule> rules;
  float noise = 8.0f;             // per-pixel uniform jitter amplitude, in 0..255 units
  float placement_jitter = 1.0f;  // 0 = fixed geometry, 1 = full positional randomness

  // Throws ManifestError.
  void validate() const;
  bool operator==(const SceneClassSpec&) const = default;
};

struct DatasetManifest {
  std::vector<SceneClassSpec> classes;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::size_t images_per_class = 60;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  const SceneClassSpec& find(int id) const;

  // 24 classes, 12 / 6 / 6 split, 60 images each, with arrangement-pair duos
  // in every split.
  static DatasetManifest default_manifest(std::uint64_t seed = 0);
  static DatasetManifest parse(const KeyValues& kv);
  static DatasetManifest load(const std::filesystem::path& path);
  std::string to_text() const;
};

// Two classes sharing `motifs` and background that differ only in the spatial
// rule binding motif 0 (anchor) and motif 1 (dependent). Throws ArgumentError
// when the rules are identical.
std::pair<SceneClassSpec, SceneClassSpec> make_arrangement_pair(const std::vector<MotifSpec>& motifs,
                                                                const Rgb& background, const ArrangementRule& rule_a,
                                                                const ArrangementRule& rule_b, int id_a, int id_b);

// Deterministic in (manifest.seed, class id, index).
RgbImage render_scene(const SceneClassSpec& spec, std::size_t size, std::uint64_t seed, std::size_t index);

struct GenerateOptions {
  bool force = false;      // allow writing into a non-empty directory
  unsigned threads = 0;    // 0 = hardware concurrency
};

// Returns the number of images written.
std::size_t generate_dataset(const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                             const GenerateOptions& options = {});

enum class Split { Train, Val, Test };
std::string to_string(Split split);

struct Sample {
  Tensor image;  // 3 x H x W in [0, 1]
  int class_id = 0;
  Split split = Split::Train;
  std::string path;
};

// Per-split view: class ids in ascending order and, per class, indices into
// Dataset::samples.
struct SplitView {
  std::vector<int> classes;
  std::vector<std::vector<std::size_t>> members;

  std::size_t size() const;
  // Position of `class_id` in `classes`, or -1.
  int local_index(int class_id) const;
};

struct Dataset {
  std::vector<Sample> samples;
  SplitView train;
  SplitView val;
  SplitView test;

  const SplitView& view(Split split) const;
};

Dataset load_dataset(const std::filesystem::path& root);

// Normalized joint RGB histogram with `bins` levels per channel.
std::vector<double> color_histogram(const RgbImage& image, int bins = 4);

}  // namespace sgm
