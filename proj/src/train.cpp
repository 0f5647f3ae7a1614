#include "skd/train.hpp"

#include <cmath>

namespace skd::train {

ActivityMask ActivityMask::full(const vit::Model& m) {
  ActivityMask a;
  a.attn.resize(m.blocks.size());
  a.mlp.resize(m.blocks.size());
  a.attn_module_active.assign(m.blocks.size(), 1);
  a.mlp_module_active.assign(m.blocks.size(), 1);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    a.attn[b].assign(m.arch.heads, std::vector<char>(m.blocks[b].attn_dim, 1));
    a.mlp[b].assign(m.blocks[b].mlp_dim, 1);
  }
  return a;
}

ActivityMask ActivityMask::from_subnet(const vit::Model& m, const vit::SubnetMask& mask) {
  mask.validate(m);
  ActivityMask a = full(m);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    a.attn_module_active[b] = mask.skip_attn[b] ? 0 : 1;
    a.mlp_module_active[b] = mask.skip_mlp[b] ? 0 : 1;
    for (index_t h = 0; h < m.arch.heads; ++h)
      for (index_t r = mask.k_attn[b][h]; r < m.blocks[b].attn_dim; ++r) a.attn[b][h][r] = 0;
    for (index_t r = mask.k_mlp[b]; r < m.blocks[b].mlp_dim; ++r) a.mlp[b][r] = 0;
  }
  return a;
}

SgdMomentum::SgdMomentum(const vit::Model& like, double momentum) : momentum_(momentum) {
  velocity_ = like;
  vit::for_each_tensor(velocity_, [](const std::string&, std::vector<double>& v,
                                     const std::vector<index_t>&) {
    std::fill(v.begin(), v.end(), 0.0);
  });
}

namespace {

inline void update_span(double* p, const double* g, double* v, index_t count, double mu,
                        double lr) {
  for (index_t i = 0; i < count; ++i) {
    v[i] = mu * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

}  // namespace

void SgdMomentum::step(vit::Model& m, const vit::Model& grad, double lr) {
  std::vector<std::vector<double>*> ps, vs;
  std::vector<const std::vector<double>*> gs;
  vit::for_each_tensor(m, [&](const std::string&, std::vector<double>& t,
                              const std::vector<index_t>&) { ps.push_back(&t); });
  vit::for_each_tensor(grad, [&](const std::string&, const std::vector<double>& t,
                                 const std::vector<index_t>&) { gs.push_back(&t); });
  vit::for_each_tensor(velocity_, [&](const std::string&, std::vector<double>& t,
                                      const std::vector<index_t>&) { vs.push_back(&t); });
  for (index_t i = 0; i < ps.size(); ++i)
    update_span(ps[i]->data(), gs[i]->data(), vs[i]->data(), ps[i]->size(), momentum_, lr);
}

void SgdMomentum::step(vit::Model& m, const vit::Model& grad, double lr, const ActivityMask& act) {
  const index_t d = m.arch.embed_dim;
  auto upd = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& v,
                 index_t begin, index_t end) {
    update_span(p.data() + begin, g.data() + begin, v.data() + begin, end - begin, momentum_, lr);
  };
  auto upd_all = [&](std::vector<double>& p, const std::vector<double>& g,
                     std::vector<double>& v) { upd(p, g, v, 0, p.size()); };

  upd_all(m.patch_w, grad.patch_w, velocity_.patch_w);
  upd_all(m.patch_b, grad.patch_b, velocity_.patch_b);
  upd_all(m.cls, grad.cls, velocity_.cls);
  upd_all(m.pos, grad.pos, velocity_.pos);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const auto& gblk = grad.blocks[b];
    auto& vblk = velocity_.blocks[b];
    upd_all(blk.ln1_g, gblk.ln1_g, vblk.ln1_g);
    upd_all(blk.ln1_b, gblk.ln1_b, vblk.ln1_b);
    upd_all(blk.ln2_g, gblk.ln2_g, vblk.ln2_g);
    upd_all(blk.ln2_b, gblk.ln2_b, vblk.ln2_b);
    const index_t ad = blk.attn_dim;
    if (act.attn_module_active[b]) {
      for (index_t h = 0; h < m.arch.heads; ++h) {
        auto& hd = blk.heads[h];
        const auto& ghd = gblk.heads[h];
        auto& vhd = vblk.heads[h];
        const auto& keep = act.attn[b][h];
        for (index_t r = 0; r < ad; ++r) {
          if (!keep[r]) continue;
          upd(hd.wq, ghd.wq, vhd.wq, r * d, (r + 1) * d);
          upd(hd.wk, ghd.wk, vhd.wk, r * d, (r + 1) * d);
          upd(hd.wv, ghd.wv, vhd.wv, r * d, (r + 1) * d);
          upd(hd.bq, ghd.bq, vhd.bq, r, r + 1);
          upd(hd.bk, ghd.bk, vhd.bk, r, r + 1);
          upd(hd.bv, ghd.bv, vhd.bv, r, r + 1);
          for (index_t j = 0; j < d; ++j) upd(hd.wo, ghd.wo, vhd.wo, j * ad + r, j * ad + r + 1);
        }
      }
      upd_all(blk.bo, gblk.bo, vblk.bo);
    }
    const index_t mm = blk.mlp_dim;
    if (act.mlp_module_active[b]) {
      const auto& keep = act.mlp[b];
      for (index_t r = 0; r < mm; ++r) {
        if (!keep[r]) continue;
        upd(blk.w1, gblk.w1, vblk.w1, r * d, (r + 1) * d);
        upd(blk.b1, gblk.b1, vblk.b1, r, r + 1);
        for (index_t j = 0; j < d; ++j) upd(blk.w2, gblk.w2, vblk.w2, j * mm + r, j * mm + r + 1);
      }
      upd_all(blk.b2, gblk.b2, vblk.b2);
    }
  }
  upd_all(m.lnf_g, grad.lnf_g, velocity_.lnf_g);
  upd_all(m.lnf_b, grad.lnf_b, velocity_.lnf_b);
  upd_all(m.head_w, grad.head_w, velocity_.head_w);
  upd_all(m.head_b, grad.head_b, velocity_.head_b);
}

double cosine_lr(double base, index_t epoch, index_t total) {
  if (total <= 1) return base;
  const double t = static_cast<double>(epoch) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * t));
}

namespace {

std::vector<EpochStats> run_training(vit::Model& m, const data::Dataset& ds,
                                     const TrainConfig& cfg, const MaskSampler* sampler) {
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, "train: epochs and batch_size must be >= 1");
  require(ds.train.size() >= cfg.batch_size, "train: batch size exceeds train split");
  SgdMomentum opt(m, cfg.momentum);
  Rng rng(cfg.seed ^ 0x1f3d'5b79'0246'8aceULL);
  std::vector<index_t> order(ds.train.size());
  for (index_t i = 0; i < order.size(); ++i) order[i] = ds.train.begin + i;

  std::vector<EpochStats> log;
  for (index_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.cosine ? cosine_lr(cfg.lr, e, cfg.epochs) : cfg.lr;
    rng.shuffle(order);
    double cost_sum = 0.0;
    index_t batches = 0;
    for (index_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
      std::vector<index_t> idx(order.begin() + start, order.begin() + start + cfg.batch_size);
      vit::Batch batch = data::to_batch(ds, idx);
      vit::SubnetMask mask;
      const vit::SubnetMask* mask_ptr = nullptr;
      if (sampler) {
        mask = (*sampler)(rng);
        mask_ptr = &mask;
      }
      vit::ActivationCache cache;
      const auto res = vit::forward(m, batch, mask_ptr, &cache);
      if (!std::isfinite(res.cost))
        throw NumericalError("training diverged at epoch " + std::to_string(e + 1) + " batch " +
                             std::to_string(batches + 1));
      vit::Model grad;
      vit::backward(m, batch, mask_ptr, cache, grad);
      if (mask_ptr) {
        opt.step(m, grad, lr, train::ActivityMask::from_subnet(m, mask));
      } else {
        opt.step(m, grad, lr);
      }
      cost_sum += res.cost;
      ++batches;
    }
    log.push_back({e + 1, cost_sum / std::max<index_t>(batches, 1), lr});
  }
  return log;
}

}  // namespace

std::vector<EpochStats> fit(vit::Model& m, const data::Dataset& ds, const TrainConfig& cfg) {
  return run_training(m, ds, cfg, nullptr);
}

std::vector<EpochStats> fit_with_sampler(vit::Model& m, const data::Dataset& ds,
                                         const TrainConfig& cfg, const MaskSampler& sampler) {
  return run_training(m, ds, cfg, &sampler);
}

}  // namespace skd::train
