#include "sgm/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgm/checkpoint.hpp"
#include "sgm/errors.hpp"
#include "sgm/image_io.hpp"
#include "sgm/io.hpp"
#include "sgm/synthscene.hpp"

namespace sgm {

namespace fs = std::filesystem;

std::filesystem::path resolve_output(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

PretrainOptions pretrain_options(const RunConfig& c) {
  PretrainOptions o;
  o.epochs = c.pretrain_epochs;
  o.batch = c.pretrain_batch;
  o.learning_rate = static_cast<float>(c.pretrain_lr);
  o.momentum = static_cast<float>(c.pretrain_momentum);
  o.weight_decay = static_cast<float>(c.pretrain_weight_decay);
  o.rotation_weight = static_cast<float>(c.rotation_weight);
  o.seed = c.seed;
  return o;
}

MetaTrainOptions meta_train_options(const RunConfig& c) {
  MetaTrainOptions o;
  o.way = c.way;
  o.shot = c.shot;
  o.queries = c.meta_queries;
  o.epochs = c.meta_epochs;
  o.episodes_per_epoch = c.meta_episodes_per_epoch;
  o.val_episodes = c.val_episodes;
  o.val_queries = c.queries;
  o.learning_rate = static_cast<float>(c.meta_lr);
  o.weight_decay = static_cast<float>(c.meta_weight_decay);
  o.patience = c.patience;
  o.seed = c.seed;
  return o;
}

std::string metrics_json(const EvalReport& report, const RunConfig& config, const std::string& method,
                         std::size_t degenerate_pairs) {
  nlohmann::ordered_json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["task"] = std::to_string(config.way) + "w" + std::to_string(config.shot) + "s";
  j["method"] = method;
  j["episodes"] = report.episodes;
  j["queries"] = config.queries;
  j["mean_acc"] = report.mean_accuracy;
  j["ci95"] = report.ci95;
  j["tie_count"] = report.tie_count;
  j["seed"] = config.seed;
  j["ablation"] = {{"no_propagation", config.no_propagation}, {"no_interaction", config.no_interaction}};
  j["degenerate_pairs"] = degenerate_pairs;
  return j.dump(2) + "\n";
}

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const IoError*>(&e) ||
      dynamic_cast<const CapacityError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const StructureError*>(&e))
    return 2;
  return 1;
}

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  // Explicit flags; applied after the file and --set.
  std::string data, backbone, matcher, metrics;
  std::uint64_t seed = 0;
  int way = 0, shot = 0, queries = 0, episodes = 0;
  bool no_propagation = false, no_interaction = false;
};

void add_common(CLI::App* cmd, Options& o, bool task_flags) {
  cmd->add_option("--config", o.config_file, "key=value run configuration file");
  cmd->add_option("--set", o.sets, "override one config key (key=value), repeatable");
  cmd->add_option("--data", o.data, "dataset directory");
  cmd->add_option("--backbone", o.backbone, "backbone checkpoint path");
  cmd->add_option("--matcher", o.matcher, "matcher checkpoint path");
  cmd->add_option("--seed", o.seed, "random seed");
  if (task_flags) {
    cmd->add_option("--way", o.way, "classes per episode");
    cmd->add_option("--shot", o.shot, "support samples per class");
    cmd->add_option("--queries", o.queries, "query samples per class");
    cmd->add_option("--episodes", o.episodes, "evaluation episodes");
    cmd->add_option("--metrics", o.metrics, "metrics JSON output path");
  }
  cmd->add_flag("--no-propagation", o.no_propagation, "drop the intra-graph propagation layer");
  cmd->add_flag("--no-interaction", o.no_interaction, "drop the cross-graph interaction layer");
}

RunConfig build_config(const CLI::App* cmd, const Options& o) {
  RunConfig c;
  KeyValues kv;
  if (!o.config_file.empty()) kv = KeyValues::load(o.config_file);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  auto given = [&](const char* flag) { return cmd->get_option_no_throw(flag) && cmd->count(flag) > 0; };
  if (given("--data")) kv.set("dataset_dir", o.data);
  if (given("--backbone")) kv.set("backbone_checkpoint", o.backbone);
  if (given("--matcher")) kv.set("matcher_checkpoint", o.matcher);
  if (given("--metrics")) kv.set("metrics_path", o.metrics);
  if (given("--seed")) kv.set("seed", std::to_string(o.seed));
  if (given("--way")) kv.set("way", std::to_string(o.way));
  if (given("--shot")) kv.set("shot", std::to_string(o.shot));
  if (given("--queries")) kv.set("queries", std::to_string(o.queries));
  if (given("--episodes")) kv.set("episodes", std::to_string(o.episodes));
  if (o.no_propagation) kv.set("no_propagation", "true");
  if (o.no_interaction) kv.set("no_interaction", "true");
  c.apply(kv);
  c.validate();
  return c;
}

Dataset load_split_data(const RunConfig& c) {
  const fs::path dir = resolve_output(c.dataset_dir);
  if (!fs::exists(dir / "index.tsv")) throw DataError("dataset not found: " + (dir / "index.tsv").string());
  return load_dataset(dir);
}

std::pair<std::vector<Tensor>, std::vector<int>> split_samples(const Dataset& ds, const SplitView& view) {
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (std::size_t c = 0; c < view.classes.size(); ++c)
    for (std::size_t i : view.members[c]) {
      images.push_back(ds.samples[i].image);
      labels.push_back(static_cast<int>(c));
    }
  return {images, labels};
}

Checkpoint load_required(const std::string& path, const char* what) {
  const fs::path p = resolve_output(path);
  if (!fs::exists(p)) throw DataError(std::string(what) + " checkpoint not found: " + p.string());
  return Checkpoint::load(p);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_gen_data(const std::string& manifest_path, const std::string& out_dir, bool force, unsigned threads,
                 std::ostream& out) {
  DatasetManifest m =
      manifest_path.empty() ? DatasetManifest::default_manifest() : DatasetManifest::load(manifest_path);
  const fs::path dir = resolve_output(out_dir);
  const std::size_t n = generate_dataset(m, dir, {force, threads});
  out << "gen-data: wrote " << n << " images for " << m.classes.size() << " classes to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& c, std::ostream& out) {
  const Dataset ds = load_split_data(c);
  auto [images, labels] = split_samples(ds, ds.train);
  const auto t0 = std::chrono::steady_clock::now();
  PretrainResult res = pretrain(images, labels, ds.train.classes.size(), pretrain_options(c), [&](const PretrainEpoch& e) {
    out << "pretrain epoch " << e.epoch << " lr " << e.learning_rate << " loss " << fixed(e.mean_loss, 4)
        << " train_acc " << fixed(e.train_accuracy, 4) << " time " << fixed(e.seconds, 1) << "s\n"
        << std::flush;
  });
  const double acc = class_accuracy(res.backbone, res.heads, images, labels);
  const fs::path path = resolve_output(c.backbone_checkpoint);
  backbone_checkpoint(res.backbone, res.heads).save(path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "pretrain: " << c.pretrain_epochs << " epochs, base-class accuracy " << fixed(acc, 4) << ", "
      << fixed(secs, 1) << "s, wrote " << path.string() << "\n";
  return 0;
}

int cmd_meta_train(const RunConfig& c, std::ostream& out) {
  const Checkpoint bck = load_required(c.backbone_checkpoint, "backbone");
  const Conv5Backbone backbone = load_backbone(bck);
  const Dataset ds = load_split_data(c);
  const Split train_split[] = {Split::Train}, val_split[] = {Split::Val};
  const FeatureBank train = FeatureBank::build(backbone, ds, train_split);
  const FeatureBank val = FeatureBank::build(backbone, ds, val_split);
  GraphDims dims;
  dims.channels = backbone.out_channels();
  dims.grid = train.maps().dim(2);
  const Ablation ablation{c.no_propagation, c.no_interaction};
  const auto t0 = std::chrono::steady_clock::now();
  MetaTrainResult res =
      meta_train(train, ds.train, val, ds.val, dims, ablation, meta_train_options(c), [&](const MetaEpoch& e) {
        out << "meta-train epoch " << e.epoch << " loss " << fixed(e.mean_loss, 5) << " val_acc "
            << fixed(e.val_accuracy, 4) << " time " << fixed(e.seconds, 1) << "s\n"
            << std::flush;
      });
  const fs::path path = resolve_output(c.matcher_checkpoint);
  matcher_checkpoint(res.model).save(path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "meta-train: best epoch " << res.best_epoch << " val_acc " << fixed(res.best_val_accuracy, 4) << ", "
      << fixed(secs, 1) << "s, wrote " << path.string() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& c, const std::string& baseline, std::ostream& out, std::ostream& err) {
  const Conv5Backbone backbone = load_backbone(load_required(c.backbone_checkpoint, "backbone"));
  std::optional<MatcherModel> model;
  if (baseline.empty()) model = load_matcher(load_required(c.matcher_checkpoint, "matcher"));
  const Dataset ds = load_split_data(c);
  const Split test_split[] = {Split::Test};
  const FeatureBank bank = FeatureBank::build(backbone, ds, test_split);

  EvalReport report;
  std::string method;
  std::size_t degenerate = 0;
  if (!baseline.empty()) {
    PrototypeScorer scorer(bank, parse_metric(baseline));
    method = scorer.name();
    report = evaluate(scorer, ds.test, c.way, c.shot, c.queries, c.episodes, c.seed);
  } else {
    if (model->gmm.ablation != Ablation{c.no_propagation, c.no_interaction})
      throw ConfigError("matcher checkpoint was trained with ablation (no_propagation=" +
                        std::to_string(model->gmm.ablation.no_propagation) +
                        ", no_interaction=" + std::to_string(model->gmm.ablation.no_interaction) +
                        "), which differs from the requested flags");
    GraphMatchScorer scorer(bank, model->gcm, model->gmm);
    method = scorer.name();
    report = evaluate(scorer, ds.test, c.way, c.shot, c.queries, c.episodes, c.seed);
    degenerate = scorer.diagnostics().degenerate_pairs;
    if (degenerate) err << "warning: " << degenerate << " pair(s) had a zero-norm graph representation\n";
  }
  const fs::path path = resolve_output(c.metrics_path);
  write_file_atomic(path, metrics_json(report, c, method, degenerate));
  out << "evaluate: " << method << " " << c.way << "-way " << c.shot << "-shot over " << report.episodes
      << " episodes: mean_acc " << fixed(report.mean_accuracy, 4) << " ci95 " << fixed(report.ci95, 4)
      << " ties " << report.tie_count << ", wrote " << path.string() << "\n";
  return 0;
}

int cmd_match_viz(const RunConfig& c, const std::string& support_path, const std::string& query_path,
                  const std::string& out_dir, std::ostream& out) {
  const Conv5Backbone backbone = load_backbone(load_required(c.backbone_checkpoint, "backbone"));
  const MatcherModel model = load_matcher(load_required(c.matcher_checkpoint, "matcher"));
  const Tensor support = image_to_tensor(read_ppm(support_path));
  const Tensor query = image_to_tensor(read_ppm(query_path));
  const SceneGraph gs = build_graph(extract_spatial(backbone, support), model.gcm);
  const SceneGraph gq = build_graph(extract_spatial(backbone, query), model.gcm);
  const Tensor w = export_matching_weights(gs, gq);

  const fs::path dir = resolve_output(out_dir);
  const std::size_t m = gs.node_count, grid = model.gcm.dims.grid;
  std::ostringstream csv;
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t q = 0; q < m; ++q) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(w[r * m + q]));
      csv << (q ? "," : "") << buf;
    }
    csv << "\n";
  }
  write_file_atomic(dir / "matching_weights.csv", csv.str());
  for (std::size_t r = 0; r < m; ++r) {
    GrayImage img;
    img.width = grid;
    img.height = grid;
    float mx = 0.0f;
    for (std::size_t q = 0; q < m; ++q) mx = std::max(mx, w[r * m + q]);
    for (std::size_t q = 0; q < m; ++q)
      img.pixels.push_back(static_cast<std::uint8_t>(mx > 0.0f ? std::lround(255.0f * w[r * m + q] / mx) : 0));
    char name[32];
    std::snprintf(name, sizeof(name), "node_%02zu.pgm", r);
    write_pgm(dir / name, img);
  }
  out << "match-viz: wrote matching_weights.csv and " << m << " heatmaps to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot scene classification by scene-graph matching", "sgmnet"};
  app.require_subcommand(1);

  std::string manifest, gen_out = "data";
  bool force = false;
  unsigned threads = 0;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
  gen->add_option("--manifest", manifest, "dataset manifest (built-in default when omitted)");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_flag("--force", force, "write into a non-empty directory");
  gen->add_option("--threads", threads, "worker threads (0 = all cores)");

  Options pre_o, meta_o, eval_o, viz_o;
  auto* pre = app.add_subcommand("pretrain", "pre-train the backbone on base classes");
  add_common(pre, pre_o, false);
  auto* meta = app.add_subcommand("meta-train", "meta-train the graph modules on frozen features");
  add_common(meta, meta_o, true);
  auto* eval = app.add_subcommand("evaluate", "evaluate on test-split episodes");
  add_common(eval, eval_o, true);
  std::string baseline;
  eval->add_option("--baseline", baseline, "prototype baseline instead of graph matching")
      ->check(CLI::IsMember({"cosine", "euclidean"}));
  auto* viz = app.add_subcommand("match-viz", "export interaction weights for an image pair");
  add_common(viz, viz_o, false);
  std::string support_img, query_img, viz_out;
  viz->add_option("--support", support_img, "support image (PPM)")->required();
  viz->add_option("--query", query_img, "query image (PPM)")->required();
  viz->add_option("--out", viz_out, "output directory")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(manifest, gen_out, force, threads, out);
    if (pre->parsed()) return cmd_pretrain(build_config(pre, pre_o), out);
    if (meta->parsed()) return cmd_meta_train(build_config(meta, meta_o), out);
    if (eval->parsed()) return cmd_evaluate(build_config(eval, eval_o), baseline, out, err);
    if (viz->parsed()) return cmd_match_viz(build_config(viz, viz_o), support_img, query_img, viz_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}

}  // namespace sgm
