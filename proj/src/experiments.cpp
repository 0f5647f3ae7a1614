#include "skd/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "skd/importance.hpp"
#include "skd/train.hpp"

namespace skd::exp {

const char* to_string(Criterion c) {
  switch (c) {
    case Criterion::random: return "random";
    case Criterion::magnitude: return "magnitude";
    case Criterion::taylor_fo: return "taylor_fo";
    default: return "wpac";
  }
}

Criterion criterion_from_string(const std::string& s) {
  if (s == "random") return Criterion::random;
  if (s == "magnitude") return Criterion::magnitude;
  if (s == "taylor_fo" || s == "taylor") return Criterion::taylor_fo;
  if (s == "wpac") return Criterion::wpac;
  throw ValidationError("unknown criterion '" + s + "'");
}

namespace {

void zero_attn_rank(vit::BlockParamsT<double>& blk, index_t h, index_t r, index_t d) {
  auto& hd = blk.heads[h];
  std::fill_n(hd.wq.begin() + r * d, d, 0.0);
  std::fill_n(hd.wk.begin() + r * d, d, 0.0);
  std::fill_n(hd.wv.begin() + r * d, d, 0.0);
  hd.bq[r] = 0.0;
  hd.bk[r] = 0.0;
  hd.bv[r] = 0.0;
  for (index_t j = 0; j < d; ++j) hd.wo[j * blk.attn_dim + r] = 0.0;
}

void zero_mlp_dim(vit::BlockParamsT<double>& blk, index_t r, index_t d) {
  std::fill_n(blk.w1.begin() + r * d, d, 0.0);
  blk.b1[r] = 0.0;
  for (index_t j = 0; j < d; ++j) blk.w2[j * blk.mlp_dim + r] = 0.0;
}

index_t keep_count(double keep_ratio, index_t dims) {
  require(keep_ratio > 0.0 && keep_ratio <= 1.0, "prune: keep ratio must be in (0, 1]");
  const index_t k = static_cast<index_t>(std::llround(keep_ratio * static_cast<double>(dims)));
  require(k >= 1, "prune: keep set is empty at this ratio");
  return std::min(k, dims);
}

}  // namespace

vit::Model prune_by_criterion(const vit::Model& m, const vit::Batch& proxy, Criterion c,
                              double keep_ratio, std::uint64_t seed,
                              const wpac::WpacOptions& wopt) {
  const index_t d = m.arch.embed_dim;

  if (c == Criterion::wpac) {
    vit::Model out = m;
    wpac::WpacOptions opt = wopt;
    opt.seed = seed;
    wpac::transform(out, proxy, opt);
    for (auto& blk : out.blocks) {
      const index_t k = keep_count(keep_ratio, blk.attn_dim);
      for (index_t h = 0; h < m.arch.heads; ++h)
        for (index_t r = k; r < blk.attn_dim; ++r) zero_attn_rank(blk, h, r, d);
    }
    return out;
  }

  // per (head, rank) scores in the model's original coordinates
  std::vector<std::vector<double>> scores(m.blocks.size());
  if (c == Criterion::taylor_fo) {
    vit::ActivationCache cache;
    vit::forward(m, proxy, nullptr, &cache);
    vit::Model grad;
    vit::backward(m, proxy, nullptr, cache, grad);
    for (index_t b = 0; b < m.blocks.size(); ++b)
      scores[b] = importance::attention_dim_scores_per_head(cache, b);
  } else if (c == Criterion::magnitude) {
    for (index_t b = 0; b < m.blocks.size(); ++b) {
      const auto& blk = m.blocks[b];
      scores[b].assign(m.arch.heads * blk.attn_dim, 0.0);
      for (index_t h = 0; h < m.arch.heads; ++h) {
        const auto& hd = blk.heads[h];
        for (index_t r = 0; r < blk.attn_dim; ++r) {
          double s = 0.0;
          for (index_t j = 0; j < d; ++j)
            s += std::abs(hd.wq[r * d + j]) + std::abs(hd.wk[r * d + j]) +
                 std::abs(hd.wv[r * d + j]);
          for (index_t j = 0; j < d; ++j) s += std::abs(hd.wo[j * blk.attn_dim + r]);
          scores[b][h * blk.attn_dim + r] = s;
        }
      }
    }
  }

  Rng rng(seed ^ 0x1357'9bdf'2468'aceeULL);
  vit::Model out = m;
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = out.blocks[b];
    const index_t ad = blk.attn_dim;
    const index_t k = keep_count(keep_ratio, ad);
    for (index_t h = 0; h < m.arch.heads; ++h) {
      std::vector<index_t> order(ad);
      std::iota(order.begin(), order.end(), index_t{0});
      if (c == Criterion::random) {
        rng.shuffle(order);
      } else {
        const double* s = scores[b].data() + h * ad;
        std::stable_sort(order.begin(), order.end(),
                         [&](index_t x, index_t y) { return s[x] > s[y]; });
      }
      std::vector<char> keep(ad, 0);
      for (index_t i = 0; i < k; ++i) keep[order[i]] = 1;
      for (index_t r = 0; r < ad; ++r)
        if (!keep[r]) zero_attn_rank(blk, h, r, d);
    }
  }
  return out;
}

std::string ExperimentReport::to_csv() const {
  std::ostringstream out;
  out << "config_hash,run_id,section,seed,item,ratio,value\n";
  char buf[64];
  for (const auto& r : rows) {
    out << config_hash << ',' << run_id << ',' << r.section << ',' << r.seed << ',' << r.item
        << ',';
    std::snprintf(buf, sizeof(buf), "%.6g", r.ratio);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.10g", r.value);
    out << buf << '\n';
  }
  return out.str();
}

nlohmann::json ExperimentReport::plot_data() const {
  nlohmann::json series = nlohmann::json::object();
  for (const auto& r : rows) {
    series[r.section][r.item].push_back(
        {{"seed", r.seed}, {"ratio", r.ratio}, {"value", r.value}});
  }
  return {{"config_hash", config_hash}, {"run_id", run_id}, {"series", series}};
}

void write_csv(const ExperimentReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "report: cannot open '" + path + "' for writing");
  f << r.to_csv();
  require(f.good(), "report: write failed");
}

ExperimentReport read_csv(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "report: cannot open '" + path + "'");
  ExperimentReport rep;
  std::string line;
  require(static_cast<bool>(std::getline(f, line)), "report: empty file");
  require(line == "config_hash,run_id,section,seed,item,ratio,value",
          "report: unexpected CSV header in '" + path + "'");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string hash, run, section, seed, item, ratio, value;
    std::getline(ss, hash, ',');
    std::getline(ss, run, ',');
    std::getline(ss, section, ',');
    std::getline(ss, seed, ',');
    std::getline(ss, item, ',');
    std::getline(ss, ratio, ',');
    std::getline(ss, value, ',');
    if (rep.rows.empty() && rep.config_hash.empty()) {
      rep.config_hash = hash;
      rep.run_id = run;
    }
    require(hash == rep.config_hash, "report: mixed config hashes inside '" + path + "'");
    ReportRow row;
    row.section = section;
    row.seed = std::stoull(seed);
    row.item = item;
    row.ratio = std::stod(ratio);
    row.value = std::stod(value);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

ExperimentReport merge_reports(const std::vector<ExperimentReport>& reports) {
  require(!reports.empty(), "merge: nothing to merge");
  ExperimentReport out;
  out.config_hash = reports.front().config_hash;
  out.run_id = reports.front().run_id + "+merged";
  for (const auto& r : reports) {
    require(r.config_hash == out.config_hash,
            "merge: refusing to merge reports with different config hashes (" + r.config_hash +
                " vs " + out.config_hash + ")");
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    out.wall_seconds += r.wall_seconds;
  }
  return out;
}

vit::Model train_base_model(const config::Config& cfg, const data::Dataset& ds,
                            std::uint64_t seed) {
  Rng rng(seed ^ 0xfeed'f00d'dead'beefULL);
  vit::Model m = vit::init_model(cfg.arch, rng);
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  train::fit(m, ds, tc);
  return m;
}

namespace {

vit::SubnetMask attn_ratio_mask(const vit::Model& m, double keep_ratio) {
  vit::SubnetMask mask = vit::SubnetMask::full(m);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    const index_t k = keep_count(keep_ratio, m.blocks[b].attn_dim);
    for (index_t h = 0; h < m.arch.heads; ++h) mask.k_attn[b][h] = k;
  }
  return mask;
}

}  // namespace

ExperimentReport compare_criteria(const config::Config& cfg, const data::Dataset& ds,
                                  const std::vector<vit::Model>& base_models) {
  ExperimentReport rep;
  rep.config_hash = config::config_hash(cfg);
  rep.run_id = "compare-criteria";
  const vit::Batch test = data::split_batch(ds, ds.test);
  for (std::uint64_t seed = 0; seed < base_models.size(); ++seed) {
    const vit::Model& base = base_models[seed];
    rep.rows.push_back({"criteria", seed, "full", 1.0, vit::accuracy(base, test)});
    const auto proxy_idx = data::sample_proxy(ds, cfg.wpac_proxy_size, seed);
    const vit::Batch proxy = data::to_batch(ds, proxy_idx);
    for (Criterion c :
         {Criterion::random, Criterion::magnitude, Criterion::taylor_fo, Criterion::wpac}) {
      for (double ratio : cfg.experiment.ratios) {
        vit::Model pruned = prune_by_criterion(base, proxy, c, ratio, seed, cfg.wpac);
        rep.rows.push_back({"criteria", seed, to_string(c), ratio, vit::accuracy(pruned, test)});
      }
    }
  }
  return rep;
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "weighting") return Ablation::weighting;
  if (s == "proxy-size" || s == "proxy_size") return Ablation::proxy_size;
  if (s == "dropout-strategy" || s == "dropout_strategy") return Ablation::dropout_strategy;
  throw ValidationError("unknown ablation '" + s + "'");
}

std::vector<train::EpochStats> train_channel_dropout(vit::Model& m, const data::Dataset& ds,
                                                     const piad::PiadConfig& cfg,
                                                     double drop_prob) {
  require(drop_prob >= 0.0 && drop_prob < 1.0, "channel dropout: bad drop probability");
  const auto units = piad::build_units(m.arch);
  train::SgdMomentum opt(m, cfg.momentum);
  Rng rng(cfg.seed ^ 0x0cd0'cd0c'd0cd'0cdfULL);
  std::vector<index_t> order(ds.train.size());
  for (index_t i = 0; i < order.size(); ++i) order[i] = ds.train.begin + i;
  const index_t d = m.arch.embed_dim;

  std::vector<train::EpochStats> log;
  for (index_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.cosine ? train::cosine_lr(cfg.lr, e, cfg.epochs) : cfg.lr;
    rng.shuffle(order);
    double cost_sum = 0.0;
    index_t batches = 0;
    for (index_t start = 0; start + cfg.batch_size <= order.size(); start += cfg.batch_size) {
      std::vector<index_t> idx(order.begin() + start, order.begin() + start + cfg.batch_size);
      vit::Batch batch = data::to_batch(ds, idx);

      // drop units independently; the leading unit of each module always stays
      vit::Model dropped = m;
      train::ActivityMask act = train::ActivityMask::full(m);
      for (const auto& u : units) {
        if (u.rank_begin == 0) continue;
        if (rng.uniform() >= drop_prob) continue;
        auto& blk = dropped.blocks[u.module.block];
        if (u.module.kind == vit::ModuleKind::mhsa) {
          for (index_t h = 0; h < m.arch.heads; ++h)
            for (index_t r = u.rank_begin; r < u.rank_end; ++r) {
              zero_attn_rank(blk, h, r, d);
              act.attn[u.module.block][h][r] = 0;
            }
        } else {
          for (index_t r = u.rank_begin; r < u.rank_end; ++r) {
            zero_mlp_dim(blk, r, d);
            act.mlp[u.module.block][r] = 0;
          }
        }
      }

      vit::ActivationCache cache;
      const auto res = vit::forward(dropped, batch, nullptr, &cache);
      if (!std::isfinite(res.cost))
        throw NumericalError("channel dropout diverged at epoch " + std::to_string(e + 1));
      vit::Model grad;
      vit::backward(dropped, batch, nullptr, cache, grad);
      opt.step(m, grad, lr, act);
      cost_sum += res.cost;
      ++batches;
    }
    log.push_back({e + 1, cost_sum / std::max<index_t>(batches, 1), lr});
  }
  return log;
}

namespace {

ExperimentReport ablate_weighting(const config::Config& cfg, const data::Dataset& ds,
                                  const std::vector<vit::Model>& base_models) {
  ExperimentReport rep;
  rep.config_hash = config::config_hash(cfg);
  rep.run_id = "ablate-weighting";
  const vit::Batch test = data::split_batch(ds, ds.test);
  const double retention = 0.5;
  for (std::uint64_t seed = 0; seed < base_models.size(); ++seed) {
    const auto proxy_idx = data::sample_proxy(ds, cfg.wpac_proxy_size, seed);
    const vit::Batch proxy = data::to_batch(ds, proxy_idx);
    for (auto w : {wpac::Weighting::importance, wpac::Weighting::uniform,
                   wpac::Weighting::class_token, wpac::Weighting::random_tokens}) {
      vit::Model m = base_models[seed];
      wpac::WpacOptions opt = cfg.wpac;
      opt.weighting = w;
      opt.seed = seed;
      wpac::transform(m, proxy, opt);
      const vit::SubnetMask mask = attn_ratio_mask(m, retention);
      rep.rows.push_back(
          {"weighting", seed, wpac::to_string(w), retention, vit::accuracy(m, test, &mask)});
    }
  }
  return rep;
}

ExperimentReport ablate_proxy_size(const config::Config& cfg, const data::Dataset& ds,
                                   const std::vector<vit::Model>& base_models) {
  ExperimentReport rep;
  rep.config_hash = config::config_hash(cfg);
  rep.run_id = "ablate-proxy-size";
  const vit::Batch test = data::split_batch(ds, ds.test);
  const double retention = 0.5;
  for (std::uint64_t seed = 0; seed < base_models.size(); ++seed) {
    for (index_t size : {index_t{16}, index_t{64}, index_t{256}, index_t{1024}}) {
      const index_t usable = std::min(size, ds.train.size());
      const auto proxy_idx = data::sample_proxy(ds, usable, seed);
      const vit::Batch proxy = data::to_batch(ds, proxy_idx);
      vit::Model m = base_models[seed];
      wpac::WpacOptions opt = cfg.wpac;
      opt.weighting = wpac::Weighting::importance;
      opt.seed = seed;
      wpac::transform(m, proxy, opt);
      const vit::SubnetMask mask = attn_ratio_mask(m, retention);
      rep.rows.push_back({"proxy_size", seed, std::to_string(usable), retention,
                          vit::accuracy(m, test, &mask)});
    }
  }
  return rep;
}

ExperimentReport ablate_dropout(const config::Config& cfg, const data::Dataset& ds,
                                const std::vector<vit::Model>& base_models) {
  ExperimentReport rep;
  rep.config_hash = config::config_hash(cfg);
  rep.run_id = "ablate-dropout";
  const vit::Batch test = data::split_batch(ds, ds.test);
  for (std::uint64_t seed = 0; seed < base_models.size(); ++seed) {
    const auto proxy_idx = data::sample_proxy(ds, cfg.wpac_proxy_size, seed);
    const vit::Batch proxy = data::to_batch(ds, proxy_idx);

    vit::Model skd = base_models[seed];
    wpac::WpacOptions wopt = cfg.wpac;
    wopt.weighting = wpac::Weighting::importance;
    wopt.seed = seed;
    wpac::transform(skd, proxy, wopt);

    piad::PiadConfig pc = cfg.piad;
    pc.seed = seed;
    vit::Model piad_model = skd;
    const auto piad_res = piad::train_piad(piad_model, ds, pc);
    const vit::SubnetMask smallest = piad::smallest_mask(piad_model, piad_res.state);

    const double r = pc.target_ratio;
    rep.rows.push_back(
        {"dropout", seed, "pre_piad_smallest", r, vit::accuracy(skd, test, &smallest)});
    rep.rows.push_back(
        {"dropout", seed, "piad_smallest", r, vit::accuracy(piad_model, test, &smallest)});
    rep.rows.push_back({"dropout", seed, "piad_full", r, vit::accuracy(piad_model, test)});

    vit::Model plain = skd;
    train::TrainConfig ft;
    ft.epochs = pc.epochs;
    ft.batch_size = pc.batch_size;
    ft.lr = pc.lr;
    ft.momentum = pc.momentum;
    ft.cosine = pc.cosine;
    ft.seed = seed;
    train::fit(plain, ds, ft);
    rep.rows.push_back(
        {"dropout", seed, "none_smallest", r, vit::accuracy(plain, test, &smallest)});
    rep.rows.push_back({"dropout", seed, "none_full", r, vit::accuracy(plain, test)});

    vit::Model cd = skd;
    train_channel_dropout(cd, ds, pc, r * 0.5);
    rep.rows.push_back({"dropout", seed, "cd_smallest", r, vit::accuracy(cd, test, &smallest)});
    rep.rows.push_back({"dropout", seed, "cd_full", r, vit::accuracy(cd, test)});
  }
  return rep;
}

}  // namespace

ExperimentReport run_ablation(Ablation which, const config::Config& cfg, const data::Dataset& ds,
                              const std::vector<vit::Model>& base_models) {
  require(!base_models.empty(), "ablation: needs at least one trained base model");
  switch (which) {
    case Ablation::weighting: return ablate_weighting(cfg, ds, base_models);
    case Ablation::proxy_size: return ablate_proxy_size(cfg, ds, base_models);
    default: return ablate_dropout(cfg, ds, base_models);
  }
}

}  // namespace skd::exp
