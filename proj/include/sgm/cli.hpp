#pragma once

// Command-line surface. `run` is the whole program minus process setup, so
// tests can drive it in-process.
//
//   sgmnet gen-data   [--manifest FILE] [--out DIR] [--force]
//   sgmnet pretrain   [--config FILE] [--set key=value ...]
//   sgmnet meta-train [--config FILE] [--no-propagation] [--no-interaction]
//   sgmnet evaluate   [--config FILE] [--baseline cosine|euclidean] [--episodes N] ...
//   sgmnet match-viz  --support IMG --query IMG --out DIR
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sgm/backbone.hpp"
#include "sgm/config.hpp"
#include "sgm/episodic.hpp"

namespace sgm {

inline constexpr const char* kOutputRootEnv = "SGMNET_OUTPUT_ROOT";
inline constexpr int kMetricsSchemaVersion = 1;

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

PretrainOptions pretrain_options(const RunConfig& config);
MetaTrainOptions meta_train_options(const RunConfig& config);

// Relative paths resolve against $SGMNET_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::string& path);

// Metrics document written by `evaluate`.
std::string metrics_json(const EvalReport& report, const RunConfig& config, const std::string& method,
                         std::size_t degenerate_pairs);

}  // namespace sgm
