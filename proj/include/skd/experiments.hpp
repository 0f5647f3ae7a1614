#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/config.hpp"
#include "skd/dataset.hpp"
#include "skd/piad.hpp"
#include "skd/vit.hpp"
#include "skd/wpac.hpp"

#include <json.hpp>

namespace skd::exp {

enum class Criterion { random, magnitude, taylor_fo, wpac };
const char* to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);

// Attention-dim pruning with no fine-tuning. Baseline criteria zero out the
// pruned per-head dims; the wpac criterion transforms first and keeps the
// leading block.
vit::Model prune_by_criterion(const vit::Model& m, const vit::Batch& proxy, Criterion c,
                              double keep_ratio, std::uint64_t seed,
                              const wpac::WpacOptions& wopt = {});

struct ReportRow {
  std::string section;
  std::uint64_t seed = 0;
  std::string item;
  double ratio = 0.0;
  double value = 0.0;
};

struct ExperimentReport {
  std::string run_id;
  std::string config_hash;
  std::vector<ReportRow> rows;
  double wall_seconds = 0.0;  // manifest only, never in the CSV

  std::string to_csv() const;
  nlohmann::json plot_data() const;  // rows grouped by section/item
};

void write_csv(const ExperimentReport& r, const std::string& path);
ExperimentReport read_csv(const std::string& path);
// Refuses to merge reports whose config hashes disagree.
ExperimentReport merge_reports(const std::vector<ExperimentReport>& reports);

vit::Model train_base_model(const config::Config& cfg, const data::Dataset& ds,
                            std::uint64_t seed);

ExperimentReport compare_criteria(const config::Config& cfg, const data::Dataset& ds,
                                  const std::vector<vit::Model>& base_models);

enum class Ablation { weighting, proxy_size, dropout_strategy };
Ablation ablation_from_string(const std::string& s);

ExperimentReport run_ablation(Ablation which, const config::Config& cfg, const data::Dataset& ds,
                              const std::vector<vit::Model>& base_models);

// Uniform channel dropout training (units dropped independently, no
// importance); the contrast case for the dropout-strategy ablation.
std::vector<train::EpochStats> train_channel_dropout(vit::Model& m, const data::Dataset& ds,
                                                     const piad::PiadConfig& cfg,
                                                     double drop_prob);

}  // namespace skd::exp
