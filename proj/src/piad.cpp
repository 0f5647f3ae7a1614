#include "skd/piad.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "skd/importance.hpp"
#include "skd/train.hpp"

namespace skd::piad {

std::vector<DroppableUnit> build_units(const vit::ArchConfig& arch) {
  arch.validate();
  const index_t dh = arch.head_dim();
  const index_t dm = arch.mlp_hidden;
  require(dh % 8 == 0, "build_units: head dim must split into 8 groups");
  require(dm % 32 == 0, "build_units: mlp hidden dim must split into 32 groups");
  const index_t g_attn = dh / 8;
  const index_t g_mlp = dm / 32;

  std::vector<DroppableUnit> units;
  int id = 0;
  for (index_t b = 0; b < arch.depth; ++b) {
    for (index_t u = 0; u < 8; ++u) {  // trailing ranks first
      DroppableUnit unit;
      unit.id = id++;
      unit.module = {b, vit::ModuleKind::mhsa};
      unit.rank_end = dh - u * g_attn;
      unit.rank_begin = unit.rank_end - g_attn;
      unit.macs = importance::macs_of_unit(arch, vit::ModuleKind::mhsa, g_attn);
      units.push_back(unit);
    }
    for (index_t u = 0; u < 32; ++u) {
      DroppableUnit unit;
      unit.id = id++;
      unit.module = {b, vit::ModuleKind::mlp};
      unit.rank_end = dm - u * g_mlp;
      unit.rank_begin = unit.rank_end - g_mlp;
      unit.macs = importance::macs_of_unit(arch, vit::ModuleKind::mlp, g_mlp);
      units.push_back(unit);
    }
  }
  return units;
}

DropoutState init_state(const vit::Model& model) {
  for (const auto& blk : model.blocks)
    require(blk.attn_dim == model.arch.head_dim() && blk.mlp_dim == model.arch.mlp_hidden,
            "piad: the super-network must start from full per-block dims");
  DropoutState st;
  st.remaining = build_units(model.arch);
  const auto mm = importance::MacsModel::from(model.arch);
  st.total_macs = mm.model_macs(model);
  for (const auto& u : st.remaining) st.max_unit_macs = std::max(st.max_unit_macs, u.macs);
  return st;
}

vit::SubnetMask mask_dropping(const vit::Model& model, const DropoutList& list, index_t drop) {
  require(drop <= list.entries.size(), "mask_dropping: drop count exceeds list length");
  vit::SubnetMask mask = vit::SubnetMask::full(model);
  for (index_t i = 0; i < drop; ++i) {
    const auto& u = list.entries[i].unit;
    if (u.module.kind == vit::ModuleKind::mhsa) {
      for (index_t h = 0; h < model.arch.heads; ++h) mask.k_attn[u.module.block][h] -= u.width();
    } else {
      mask.k_mlp[u.module.block] -= u.width();
    }
  }
  mask.validate(model);
  return mask;
}

vit::SubnetMask smallest_mask(const vit::Model& model, const DropoutState& st) {
  return mask_dropping(model, st.list, st.list.entries.size());
}

void merge_module_units(std::vector<DroppableUnit>& units) {
  bool merged = true;
  while (merged) {
    merged = false;
    std::vector<DroppableUnit> out;
    out.reserve(units.size());
    for (auto& u : units) {
      if (!out.empty() && u.score() < out.back().score()) {
        DroppableUnit& host = out.back();
        host.rank_begin = u.rank_begin;  // traversal goes trailing to leading
        host.macs += u.macs;
        host.score_sum += u.score_sum;
        host.score_members += u.score_members;
        host.merged_from.push_back(u.id);
        host.merged_from.insert(host.merged_from.end(), u.merged_from.begin(),
                                u.merged_from.end());
        merged = true;
      } else {
        out.push_back(std::move(u));
      }
    }
    units = std::move(out);
  }
}

void update_dropout_list(DropoutState& st, const vit::Model& model, const vit::Batch& proxy,
                         index_t epoch, const PiadConfig& cfg) {
  require(epoch >= 1 && epoch <= cfg.progressive_epochs,
          "update_dropout_list: epoch outside the progressive phase");
  const double target = static_cast<double>(epoch) * cfg.target_ratio /
                        static_cast<double>(cfg.progressive_epochs) *
                        static_cast<double>(st.total_macs);
  st.last_update_epoch = epoch;
  if (static_cast<double>(st.list.cumulative_macs) >= target) return;  // idempotent

  // score the remaining units on the smallest sub-network
  const vit::SubnetMask small = smallest_mask(model, st);
  vit::ActivationCache cache;
  vit::forward(model, proxy, &small, &cache);
  vit::Model grad;
  vit::backward(model, proxy, &small, cache, grad);

  std::map<std::pair<index_t, int>, importance::ModuleScores> scores;
  for (auto& u : st.remaining) {
    const auto key = std::make_pair(u.module.block, static_cast<int>(u.module.kind));
    auto it = scores.find(key);
    if (it == scores.end()) {
      const double gamma = importance::module_sensitivity(model, proxy, u.module, &small);
      it = scores.emplace(key, importance::combine(importance::dim_scores(cache, u.module), gamma))
               .first;
    }
    const auto& imp = it->second.importance;
    double sum = 0.0;
    for (index_t r = u.rank_begin; r < u.rank_end; ++r) sum += imp[r];
    u.score_sum = importance::unit_score(sum, u.macs);
    u.score_members = 1;
    u.merged_from.clear();
  }

  // merge per module, keeping traversal order (trailing first); the leading
  // unit stays out of the merge since it can never be dropped (masks keep at
  // least one dim per module) and must not drag droppable units with it
  std::vector<DroppableUnit> merged_units;
  {
    std::map<std::pair<index_t, int>, std::vector<DroppableUnit>> grouped;
    std::vector<std::pair<index_t, int>> group_order;
    for (auto& u : st.remaining) {
      const auto key = std::make_pair(u.module.block, static_cast<int>(u.module.kind));
      if (grouped.find(key) == grouped.end()) group_order.push_back(key);
      grouped[key].push_back(std::move(u));
    }
    for (const auto& key : group_order) {
      auto& g = grouped[key];
      DroppableUnit lead;
      bool has_lead = false;
      if (!g.empty() && g.back().rank_begin == 0) {
        lead = std::move(g.back());
        g.pop_back();
        has_lead = true;
      }
      merge_module_units(g);
      for (auto& u : g) merged_units.push_back(std::move(u));
      if (has_lead) merged_units.push_back(std::move(lead));
    }
  }
  st.remaining = std::move(merged_units);
  for (const auto& u : st.remaining) st.max_unit_macs = std::max(st.max_unit_macs, u.macs);

  // append lowest scores first; within a module only the most-trailing unit is
  // eligible, and each module keeps its leading unit so masks stay valid
  while (static_cast<double>(st.list.cumulative_macs) < target) {
    int best = -1;
    std::map<std::pair<index_t, int>, bool> taken;
    for (index_t i = 0; i < st.remaining.size(); ++i) {
      const auto& u = st.remaining[i];
      const auto key = std::make_pair(u.module.block, static_cast<int>(u.module.kind));
      if (taken.count(key)) continue;  // not the most-trailing remaining unit
      taken[key] = true;
      if (u.rank_begin == 0) continue;  // the module's last unit is never dropped
      if (best < 0) {
        best = static_cast<int>(i);
        continue;
      }
      const auto& bu = st.remaining[best];
      const auto lhs = std::make_tuple(u.score(), u.module.block,
                                       u.module.kind == vit::ModuleKind::mlp ? 0 : 1,
                                       u.rank_begin);
      const auto rhs = std::make_tuple(bu.score(), bu.module.block,
                                       bu.module.kind == vit::ModuleKind::mlp ? 0 : 1,
                                       bu.rank_begin);
      if (lhs < rhs) best = static_cast<int>(i);
    }
    if (best < 0)
      throw ValidationError("update_dropout_list: no droppable units left before the MACs target");
    DropoutEntry entry;
    entry.unit = st.remaining[best];
    entry.epoch_appended = epoch;
    st.list.cumulative_macs += entry.unit.macs;
    st.list.entries.push_back(std::move(entry));
    st.remaining.erase(st.remaining.begin() + best);
  }
}

index_t sample_truncation(const DropoutList& list, Rng& rng, bool include_zero) {
  const index_t L = list.entries.size();
  if (L == 0) return 0;
  if (include_zero) return static_cast<index_t>(rng.below(L + 1));
  return 1 + static_cast<index_t>(rng.below(L));
}

vit::SubnetMask sample_subnetwork(const vit::Model& model, const DropoutList& list, Rng& rng,
                                  bool include_zero) {
  const index_t kept = sample_truncation(list, rng, include_zero);
  return mask_dropping(model, list, list.entries.size() - kept);
}

PiadResult train_piad(vit::Model& model, const data::Dataset& ds, const PiadConfig& cfg) {
  require(cfg.target_ratio >= 0.0 && cfg.target_ratio < 1.0, "piad: target ratio must be in [0,1)");
  require(cfg.progressive_epochs >= 1 && cfg.progressive_epochs <= cfg.epochs,
          "piad: progressive epochs must be in [1, epochs]");
  PiadResult result;
  result.state = init_state(model);
  auto& st = result.state;

  if (cfg.target_ratio > 0.0) {
    // feasibility: every module keeps its leading unit
    std::uint64_t droppable = 0;
    std::map<std::pair<index_t, int>, std::uint64_t> lead;
    for (const auto& u : st.remaining) {
      droppable += u.macs;
      lead[{u.module.block, static_cast<int>(u.module.kind)}] = u.macs;
    }
    for (const auto& [k, v] : lead) droppable -= v;
    require(cfg.target_ratio * static_cast<double>(st.total_macs) <=
                static_cast<double>(droppable),
            "piad: target ratio exceeds droppable MACs");
  }

  const auto proxy_idx = data::sample_proxy(ds, cfg.proxy_size, cfg.seed);
  const vit::Batch proxy = data::to_batch(ds, proxy_idx);

  train::SgdMomentum opt(model, cfg.momentum);
  Rng rng(cfg.seed ^ 0x9bd6'1cc0'4e87'23abULL);
  std::vector<index_t> order(ds.train.size());
  for (index_t i = 0; i < order.size(); ++i) order[i] = ds.train.begin + i;

  for (index_t e = 1; e <= cfg.epochs; ++e) {
    if (cfg.target_ratio > 0.0 && e <= cfg.progressive_epochs)
      update_dropout_list(st, model, proxy, e, cfg);

    const double lr = cfg.cosine ? train::cosine_lr(cfg.lr, e - 1, cfg.epochs) : cfg.lr;
    rng.shuffle(order);
    double cost_sum = 0.0;
    index_t batches = 0;
    for (index_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
      std::vector<index_t> idx(order.begin() + start, order.begin() + start + cfg.batch_size);
      vit::Batch batch = data::to_batch(ds, idx);
      const vit::SubnetMask mask =
          sample_subnetwork(model, st.list, rng, cfg.truncation_includes_zero);
      vit::ActivationCache cache;
      const auto res = vit::forward(model, batch, &mask, &cache);
      if (!std::isfinite(res.cost))
        throw NumericalError("piad diverged at epoch " + std::to_string(e) + " batch " +
                             std::to_string(batches + 1));
      vit::Model grad;
      vit::backward(model, batch, &mask, cache, grad);
      opt.step(model, grad, lr, train::ActivityMask::from_subnet(model, mask));
      cost_sum += res.cost;
      ++batches;
    }
    result.log.push_back({e, cost_sum / std::max<index_t>(batches, 1), lr,
                          st.list.entries.size(), st.list.cumulative_macs});
  }
  return result;
}

vit::Model extract_subnetwork(const vit::Model& model, const DropoutList& list,
                              std::uint64_t target_macs) {
  const auto mm = importance::MacsModel::from(model.arch);
  std::uint64_t macs = mm.model_macs(model);

  std::vector<index_t> k_attn(model.blocks.size()), k_mlp(model.blocks.size());
  for (index_t b = 0; b < model.blocks.size(); ++b) {
    k_attn[b] = model.blocks[b].attn_dim;
    k_mlp[b] = model.blocks[b].mlp_dim;
  }
  index_t dropped = 0;
  while (macs > target_macs && dropped < list.entries.size()) {
    const auto& u = list.entries[dropped].unit;
    if (u.module.kind == vit::ModuleKind::mhsa)
      k_attn[u.module.block] -= u.width();
    else
      k_mlp[u.module.block] -= u.width();
    macs -= u.macs;
    ++dropped;
  }
  require(macs <= target_macs, "extract: target below the smallest achievable sub-network");

  vit::Model out = model;
  const index_t d = model.arch.embed_dim;
  for (index_t b = 0; b < model.blocks.size(); ++b) {
    auto& blk = out.blocks[b];
    const auto& src = model.blocks[b];
    const index_t ka = k_attn[b], km = k_mlp[b];
    require(ka >= 1 && km >= 1, "extract: a module lost all dims");
    for (index_t h = 0; h < model.arch.heads; ++h) {
      auto& hd = blk.heads[h];
      const auto& sh = src.heads[h];
      hd.wq.assign(sh.wq.begin(), sh.wq.begin() + ka * d);
      hd.wk.assign(sh.wk.begin(), sh.wk.begin() + ka * d);
      hd.wv.assign(sh.wv.begin(), sh.wv.begin() + ka * d);
      hd.bq.assign(sh.bq.begin(), sh.bq.begin() + ka);
      hd.bk.assign(sh.bk.begin(), sh.bk.begin() + ka);
      hd.bv.assign(sh.bv.begin(), sh.bv.begin() + ka);
      hd.wo.resize(d * ka);
      for (index_t j = 0; j < d; ++j)
        std::copy_n(sh.wo.data() + j * src.attn_dim, ka, hd.wo.data() + j * ka);
    }
    blk.w1.assign(src.w1.begin(), src.w1.begin() + km * d);
    blk.b1.assign(src.b1.begin(), src.b1.begin() + km);
    blk.w2.resize(d * km);
    for (index_t j = 0; j < d; ++j)
      std::copy_n(src.w2.data() + j * src.mlp_dim, km, blk.w2.data() + j * km);
    blk.attn_dim = ka;
    blk.mlp_dim = km;
  }
  return out;
}

namespace {

nlohmann::json unit_to_json(const DroppableUnit& u) {
  return {{"id", u.id},
          {"block", u.module.block},
          {"kind", u.module.kind == vit::ModuleKind::mhsa ? "mhsa" : "mlp"},
          {"rank_begin", u.rank_begin},
          {"rank_end", u.rank_end},
          {"macs", u.macs},
          {"score_sum", u.score_sum},
          {"score_members", u.score_members},
          {"merged_from", u.merged_from}};
}

DroppableUnit unit_from_json(const nlohmann::json& j) {
  DroppableUnit u;
  u.id = j.at("id").get<int>();
  u.module.block = j.at("block").get<index_t>();
  u.module.kind = j.at("kind").get<std::string>() == "mhsa" ? vit::ModuleKind::mhsa
                                                            : vit::ModuleKind::mlp;
  u.rank_begin = j.at("rank_begin").get<index_t>();
  u.rank_end = j.at("rank_end").get<index_t>();
  u.macs = j.at("macs").get<std::uint64_t>();
  u.score_sum = j.at("score_sum").get<double>();
  u.score_members = j.at("score_members").get<index_t>();
  u.merged_from = j.at("merged_from").get<std::vector<int>>();
  return u;
}

}  // namespace

nlohmann::json state_to_json(const DropoutState& st) {
  nlohmann::json j;
  j["kind"] = "dropout_list";
  j["total_macs"] = st.total_macs;
  j["max_unit_macs"] = st.max_unit_macs;
  j["last_update_epoch"] = st.last_update_epoch;
  j["cumulative_macs"] = st.list.cumulative_macs;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : st.list.entries) {
    nlohmann::json je = unit_to_json(e.unit);
    je["epoch_appended"] = e.epoch_appended;
    je["score"] = e.unit.score();
    entries.push_back(std::move(je));
  }
  j["entries"] = std::move(entries);
  nlohmann::json rem = nlohmann::json::array();
  for (const auto& u : st.remaining) rem.push_back(unit_to_json(u));
  j["remaining"] = std::move(rem);
  return j;
}

DropoutState state_from_json(const nlohmann::json& j) {
  require(j.value("kind", "") == "dropout_list", "dropout list: unexpected json payload");
  DropoutState st;
  st.total_macs = j.at("total_macs").get<std::uint64_t>();
  st.max_unit_macs = j.at("max_unit_macs").get<std::uint64_t>();
  st.last_update_epoch = j.at("last_update_epoch").get<index_t>();
  for (const auto& je : j.at("entries")) {
    DropoutEntry e;
    e.unit = unit_from_json(je);
    e.epoch_appended = je.at("epoch_appended").get<index_t>();
    st.list.entries.push_back(std::move(e));
  }
  st.list.cumulative_macs = j.at("cumulative_macs").get<std::uint64_t>();
  for (const auto& ju : j.at("remaining")) st.remaining.push_back(unit_from_json(ju));
  return st;
}

void save_state(const DropoutState& st, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "dropout list: cannot open '" + path + "' for writing");
  f << state_to_json(st).dump(2) << '\n';
  require(f.good(), "dropout list: write failed");
}

DropoutState load_state(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "dropout list: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("dropout list: malformed json: ") + e.what());
  }
  return state_from_json(j);
}

}  // namespace skd::piad
