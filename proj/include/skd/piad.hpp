#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/dataset.hpp"
#include "skd/rng.hpp"
#include "skd/vit.hpp"

#include <json.hpp>

namespace skd::piad {

// A contiguous group of importance-ordered dims, dropped and restored as one
// piece. MHSA units span the same rank range in every head.
struct DroppableUnit {
  int id = 0;
  vit::ModuleId module;
  index_t rank_begin = 0, rank_end = 0;  // [begin, end)
  std::uint64_t macs = 0;
  double score_sum = 0.0;  // merged units average their members' scores
  index_t score_members = 1;
  std::vector<int> merged_from;

  double score() const { return score_sum / static_cast<double>(score_members); }
  index_t width() const { return rank_end - rank_begin; }
};

struct DropoutEntry {
  DroppableUnit unit;
  index_t epoch_appended = 0;
};

struct DropoutList {
  std::vector<DropoutEntry> entries;  // ascending importance: entry 0 drops first
  std::uint64_t cumulative_macs = 0;
};

struct PiadConfig {
  double target_ratio = 0.5;       // r, fraction of full-model MACs to cover
  index_t progressive_epochs = 8;  // P_e
  index_t epochs = 20;
  double lr = 0.01;
  double momentum = 0.9;
  bool cosine = true;
  index_t batch_size = 64;
  index_t proxy_size = 256;
  std::uint64_t seed = 0;
  bool truncation_includes_zero = true;  // sample s from {0..L}, not {1..L}
};

struct DropoutState {
  std::vector<DroppableUnit> remaining;  // build order: per module, trailing ranks first
  DropoutList list;
  std::uint64_t total_macs = 0;  // full-model MACs
  std::uint64_t max_unit_macs = 0;
  index_t last_update_epoch = 0;
};

// 8 rank-aligned units per MHSA (each spanning all heads) and 32 hidden-range
// units per MLP, trailing ranks first.
std::vector<DroppableUnit> build_units(const vit::ArchConfig& arch);

DropoutState init_state(const vit::Model& model);

// Mask with the first `drop` listed units removed.
vit::SubnetMask mask_dropping(const vit::Model& model, const DropoutList& list, index_t drop);
vit::SubnetMask smallest_mask(const vit::Model& model, const DropoutState& st);

// One progressive step: score remaining units on the smallest sub-network,
// merge out-of-order units, append lowest-scoring ones until the epoch's MACs
// budget is crossed. Safe to call twice in the same epoch.
void update_dropout_list(DropoutState& st, const vit::Model& model, const vit::Batch& proxy,
                         index_t epoch, const PiadConfig& cfg);

// Exposed for tests: fixpoint merge over one module's units in traversal order.
void merge_module_units(std::vector<DroppableUnit>& units);

// Number of kept listed units, uniform over {0..L} (or {1..L}).
index_t sample_truncation(const DropoutList& list, Rng& rng, bool include_zero = true);
vit::SubnetMask sample_subnetwork(const vit::Model& model, const DropoutList& list, Rng& rng,
                                  bool include_zero = true);

struct PiadEpochStats {
  index_t epoch = 0;
  double mean_cost = 0.0;
  double lr = 0.0;
  index_t list_len = 0;
  std::uint64_t listed_macs = 0;
};

struct PiadResult {
  DropoutState state;
  std::vector<PiadEpochStats> log;
};

// Super-network training: grow the list for P_e epochs while training
// truncation-sampled sub-networks; only parameters active in the sampled
// sub-network are updated.
PiadResult train_piad(vit::Model& model, const data::Dataset& ds, const PiadConfig& cfg);

// Physically slice the checkpoint down to `target_macs`, dropping listed units
// from position 0 up. No data access, no retraining.
vit::Model extract_subnetwork(const vit::Model& model, const DropoutList& list,
                              std::uint64_t target_macs);

nlohmann::json state_to_json(const DropoutState& st);
DropoutState state_from_json(const nlohmann::json& j);
void save_state(const DropoutState& st, const std::string& path);
DropoutState load_state(const std::string& path);

}  // namespace skd::piad
