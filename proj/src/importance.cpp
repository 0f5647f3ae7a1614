#include "skd/importance.hpp"

#include <cmath>
#include <sstream>

namespace skd::importance {

MacsModel MacsModel::from(const vit::ArchConfig& a) {
  MacsModel mm;
  mm.tokens = a.tokens();
  mm.embed_dim = a.embed_dim;
  mm.heads = a.heads;
  mm.head_dim = a.head_dim();
  mm.mlp_hidden = a.mlp_hidden;
  mm.patch_dim = a.patch_dim();
  mm.num_patches = a.num_patches();
  mm.num_classes = a.num_classes;
  mm.depth = a.depth;
  return mm;
}

std::uint64_t MacsModel::full_total() const {
  return overhead() + depth * (head_dim * mhsa_rank_macs() + mlp_hidden * mlp_dim_macs());
}

std::uint64_t MacsModel::model_macs(const vit::Model& m) const {
  std::uint64_t total = overhead();
  for (const auto& blk : m.blocks)
    total += blk.attn_dim * mhsa_rank_macs() + blk.mlp_dim * mlp_dim_macs();
  return total;
}

std::uint64_t MacsModel::masked_macs(const vit::Model& m, const vit::SubnetMask& mask) const {
  mask.validate(m);
  std::uint64_t total = overhead();
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    if (!mask.skip_attn[b]) {
      // per-head rank cost is uniform, so sum kept ranks over heads
      std::uint64_t kept = 0;
      for (index_t h = 0; h < m.arch.heads; ++h) kept += mask.k_attn[b][h];
      total += kept * (mhsa_rank_macs() / heads);
    }
    if (!mask.skip_mlp[b]) total += mask.k_mlp[b] * mlp_dim_macs();
  }
  return total;
}

std::uint64_t macs_of_unit(const vit::ArchConfig& arch, vit::ModuleKind kind, index_t group_size) {
  require(group_size >= 1, "macs_of_unit: empty unit");
  const MacsModel mm = MacsModel::from(arch);
  if (kind == vit::ModuleKind::mhsa) return group_size * mm.mhsa_rank_macs();
  return group_size * mm.mlp_dim_macs();
}

double module_sensitivity(const vit::Model& m, const vit::Batch& proxy, const vit::ModuleId& module,
                          const vit::SubnetMask* mask) {
  const double base = vit::forward(m, proxy, mask).cost;
  require(base > 0.0, "module_sensitivity: degenerate zero cost");
  const double skipped = vit::skip_module_forward(m, proxy, module, mask);
  return (skipped - base) / base;
}

ModuleScores combine(std::vector<double> theta, double gamma) {
  require(!theta.empty(), "combine: module has no dimensions");
  ModuleScores s;
  s.gamma = gamma;
  double total = 0.0;
  for (double t : theta) {
    require(t >= 0.0 && std::isfinite(t), "combine: theta must be non-negative and finite");
    total += t;
  }
  s.theta = std::move(theta);
  s.alpha.resize(s.theta.size());
  if (total > 0.0) {
    for (index_t i = 0; i < s.theta.size(); ++i) s.alpha[i] = s.theta[i] / total;
  } else {
    s.uniform_fallback = true;
    const double u = 1.0 / static_cast<double>(s.theta.size());
    for (auto& a : s.alpha) a = u;
  }
  s.importance.resize(s.theta.size());
  for (index_t i = 0; i < s.theta.size(); ++i) s.importance[i] = gamma * s.alpha[i];
  return s;
}

std::vector<double> dim_scores(const vit::ActivationCache& cache, const vit::ModuleId& module) {
  require(cache.populated && cache.has_grads, "dim_scores: cache is missing gradients");
  require(module.block < cache.blocks.size(), "dim_scores: unknown module " + to_string(module));
  const auto& bc = cache.blocks[module.block];
  if (module.kind == vit::ModuleKind::mlp) {
    require(!bc.dhpost.empty(), "dim_scores: MLP gradients absent (module skipped?)");
    const index_t rows = bc.dhpost.size();
    require(rows == bc.hpost.size(), "dim_scores: activation/grad size mismatch");
    // hpost layout is [B, n, mlp_dim]; istd2 is [B, n]
    const index_t bn = bc.istd2.size();
    require(bn > 0 && rows % bn == 0, "dim_scores: inconsistent cache layout");
    const index_t width = rows / bn;
    std::vector<double> theta(width, 0.0);
    for (index_t t = 0; t < bn; ++t) {
      const double* act = bc.hpost.data() + t * width;
      const double* grd = bc.dhpost.data() + t * width;
      for (index_t j = 0; j < width; ++j) theta[j] += taylor_element(act[j], grd[j]);
    }
    return theta;
  }
  // MHSA: rank scores summed over heads and q/k/v
  require(!bc.heads.empty() && !bc.heads[0].dq.empty(),
          "dim_scores: attention gradients absent (module skipped?)");
  const index_t bn = bc.istd1.size();
  std::vector<double> theta;
  for (const auto& hc : bc.heads) {
    const index_t rows = hc.q.size();
    require(rows == hc.dq.size() && rows % bn == 0, "dim_scores: inconsistent head cache");
    const index_t width = rows / bn;
    if (theta.empty()) theta.assign(width, 0.0);
    for (index_t t = 0; t < bn; ++t) {
      const index_t off = t * width;
      for (index_t r = 0; r < width; ++r) {
        theta[r] += taylor_element(hc.q[off + r], hc.dq[off + r]) +
                    taylor_element(hc.k[off + r], hc.dk[off + r]) +
                    taylor_element(hc.v[off + r], hc.dv[off + r]);
      }
    }
  }
  return theta;
}

std::vector<double> attention_dim_scores_per_head(const vit::ActivationCache& cache,
                                                  index_t block) {
  require(cache.populated && cache.has_grads, "attention scores: cache is missing gradients");
  const auto& bc = cache.blocks[block];
  const index_t bn = bc.istd1.size();
  std::vector<double> scores;
  index_t width = 0;
  for (index_t h = 0; h < bc.heads.size(); ++h) {
    const auto& hc = bc.heads[h];
    width = hc.q.size() / bn;
    if (scores.empty()) scores.assign(bc.heads.size() * width, 0.0);
    for (index_t t = 0; t < bn; ++t) {
      const index_t off = t * width;
      for (index_t r = 0; r < width; ++r)
        scores[h * width + r] += taylor_element(hc.q[off + r], hc.dq[off + r]) +
                                 taylor_element(hc.k[off + r], hc.dk[off + r]) +
                                 taylor_element(hc.v[off + r], hc.dv[off + r]);
    }
  }
  return scores;
}

ModuleScores dimension_importance(const vit::Model& m, const vit::Batch& proxy,
                                  const vit::ModuleId& module, const vit::SubnetMask* mask) {
  vit::ActivationCache cache;
  vit::forward(m, proxy, mask, &cache);
  vit::Model grad;
  vit::backward(m, proxy, mask, cache, grad);
  const double gamma = module_sensitivity(m, proxy, module, mask);
  return combine(dim_scores(cache, module), gamma);
}

std::string report_to_table(const ImportanceReport& r) {
  std::ostringstream out;
  out << "module\tdim\ttheta\talpha\timportance\n";
  out.precision(12);
  for (index_t mi = 0; mi < r.modules.size(); ++mi) {
    const auto& s = r.modules[mi];
    for (index_t i = 0; i < s.theta.size(); ++i) {
      out << vit::to_string(r.module_ids[mi]) << '\t' << i << '\t' << s.theta[i] << '\t'
          << s.alpha[i] << '\t' << s.importance[i] << '\n';
    }
  }
  return out.str();
}

ImportanceReport evaluate_all_modules(const vit::Model& m, const vit::Batch& proxy,
                                      const vit::SubnetMask* mask) {
  ImportanceReport rep;
  vit::ActivationCache cache;
  vit::forward(m, proxy, mask, &cache);
  vit::Model grad;
  vit::backward(m, proxy, mask, cache, grad);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    for (auto kind : {vit::ModuleKind::mhsa, vit::ModuleKind::mlp}) {
      vit::ModuleId id{b, kind};
      const double gamma = module_sensitivity(m, proxy, id, mask);
      rep.module_ids.push_back(id);
      rep.modules.push_back(combine(dim_scores(cache, id), gamma));
    }
  }
  return rep;
}

}  // namespace skd::importance
