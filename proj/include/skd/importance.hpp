#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/vit.hpp"

namespace skd::importance {

// first-order Taylor estimate of the cost change from zeroing one element
inline double taylor_element(double activation, double grad) {
  return std::abs(grad * activation);
}

// MACs bookkeeping. Counts cover the projection/attention/MLP multiplies;
// layernorm, softmax and bias adds are excluded by convention.
struct MacsModel {
  index_t tokens = 0, embed_dim = 0, heads = 0, head_dim = 0, mlp_hidden = 0;
  index_t patch_dim = 0, num_patches = 0, num_classes = 0;
  index_t depth = 0;

  static MacsModel from(const vit::ArchConfig& a);

  // one per-head rank, counted across all H heads
  std::uint64_t mhsa_rank_macs() const {
    return static_cast<std::uint64_t>(heads) *
           (4 * tokens * embed_dim + 2 * tokens * tokens);
  }
  std::uint64_t mlp_dim_macs() const { return static_cast<std::uint64_t>(2) * tokens * embed_dim; }
  std::uint64_t overhead() const {
    return static_cast<std::uint64_t>(num_patches) * embed_dim * patch_dim +
           static_cast<std::uint64_t>(num_classes) * embed_dim;
  }
  std::uint64_t full_total() const;                     // overhead + every unit
  std::uint64_t model_macs(const vit::Model& m) const;  // honors per-block kept dims
  std::uint64_t masked_macs(const vit::Model& m, const vit::SubnetMask& mask) const;
};

// MACs of one droppable unit: g rank slices spanning all heads (MHSA) or g
// hidden dims (MLP).
std::uint64_t macs_of_unit(const vit::ArchConfig& arch, vit::ModuleKind kind, index_t group_size);

// gamma_m = (C(D | m skipped) - C(D)) / C(D); may be negative.
double module_sensitivity(const vit::Model& m, const vit::Batch& proxy, const vit::ModuleId& module,
                          const vit::SubnetMask* mask = nullptr);

struct ModuleScores {
  std::vector<double> theta;       // per-dimension raw Taylor scores, >= 0
  std::vector<double> alpha;       // theta normalized to sum 1
  std::vector<double> importance;  // gamma * alpha
  double gamma = 0.0;
  bool uniform_fallback = false;  // all-zero theta
};

// alpha/I from theta and gamma; all-zero theta falls back to uniform alpha.
ModuleScores combine(std::vector<double> theta, double gamma);

// Per-dimension Taylor scores from a populated cache with gradients.
// MHSA: one score per rank, summed over heads and over the q/k/v projections.
// MLP: one score per hidden dim from the post-activation features.
std::vector<double> dim_scores(const vit::ActivationCache& cache, const vit::ModuleId& module);

// Per (head, rank) scores, row-major [heads][attn_dim]; used by the pruning
// criteria that pick dims per head.
std::vector<double> attention_dim_scores_per_head(const vit::ActivationCache& cache, index_t block);

// Full evaluation: forward+backward over the proxy, then gamma and scores.
ModuleScores dimension_importance(const vit::Model& m, const vit::Batch& proxy,
                                  const vit::ModuleId& module,
                                  const vit::SubnetMask* mask = nullptr);

inline double unit_score(double importance_sum, std::uint64_t unit_macs) {
  require(unit_macs > 0, "unit_score: unit MACs must be positive");
  return importance_sum / static_cast<double>(unit_macs);
}

struct ImportanceReport {
  std::vector<vit::ModuleId> module_ids;
  std::vector<ModuleScores> modules;
  std::string proxy_desc;
  std::uint64_t proxy_seed = 0;
};

// tabular text: module, dim, theta, alpha, importance
std::string report_to_table(const ImportanceReport& r);

ImportanceReport evaluate_all_modules(const vit::Model& m, const vit::Batch& proxy,
                                      const vit::SubnetMask* mask = nullptr);

}  // namespace skd::importance
