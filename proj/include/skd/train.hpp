#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "skd/common.hpp"
#include "skd/dataset.hpp"
#include "skd/rng.hpp"
#include "skd/vit.hpp"

namespace skd::train {

// Per-channel update permissions for one optimizer step. Parameters tied to an
// inactive channel keep their bits (no momentum drift either).
struct ActivityMask {
  std::vector<std::vector<std::vector<char>>> attn;  // [block][head][attn_dim]
  std::vector<std::vector<char>> mlp;                // [block][mlp_dim]
  std::vector<char> attn_module_active, mlp_module_active;  // skip flags

  static ActivityMask full(const vit::Model& m);
  static ActivityMask from_subnet(const vit::Model& m, const vit::SubnetMask& mask);
};

class SgdMomentum {
public:
  SgdMomentum(const vit::Model& like, double momentum);
  void step(vit::Model& m, const vit::Model& grad, double lr);
  void step(vit::Model& m, const vit::Model& grad, double lr, const ActivityMask& act);

private:
  vit::Model velocity_;
  double momentum_;
};

struct TrainConfig {
  index_t epochs = 30;
  index_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  bool cosine = true;
  std::uint64_t seed = 0;
};

struct EpochStats {
  index_t epoch = 0;
  double mean_cost = 0.0;
  double lr = 0.0;
};

double cosine_lr(double base, index_t epoch, index_t total);

// Plain training of the full network (also the fine-tune baseline).
std::vector<EpochStats> fit(vit::Model& m, const data::Dataset& ds, const TrainConfig& cfg);

// Training with a caller-chosen sub-network per batch. The sampler returns the
// mask used for the forward/backward and the optimizer honors it.
using MaskSampler = std::function<vit::SubnetMask(Rng&)>;
std::vector<EpochStats> fit_with_sampler(vit::Model& m, const data::Dataset& ds,
                                         const TrainConfig& cfg, const MaskSampler& sampler);

}  // namespace skd::train
