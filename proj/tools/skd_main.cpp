#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "skd/checkpoint.hpp"
#include "skd/config.hpp"
#include "skd/dataset.hpp"
#include "skd/experiments.hpp"
#include "skd/importance.hpp"
#include "skd/piad.hpp"
#include "skd/train.hpp"
#include "skd/wpac.hpp"

namespace fs = std::filesystem;
using namespace skd;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "config file (INI-style sections)");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out_dir, "output directory");
}

config::Config load_config(const CommonOpts& c) {
  return c.config_path.empty() ? config::defaults() : config::load(c.config_path);
}

void write_manifest(const CommonOpts& c, const config::Config& cfg, const std::string& command,
                    const std::vector<std::string>& artifacts, double seconds) {
  nlohmann::json j;
  j["command"] = command;
  j["config_hash"] = config::config_hash(cfg);
  j["seed"] = c.seed;
  j["run_id"] = command + "-s" + std::to_string(c.seed);
  j["artifacts"] = artifacts;
  j["wall_seconds"] = seconds;
  std::ofstream f(fs::path(c.out_dir) / "manifest.json", std::ios::trunc);
  require(f.good(), "cannot write manifest in '" + c.out_dir + "'");
  f << j.dump(2) << '\n';
}

class Stopwatch {
public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

private:
  std::chrono::steady_clock::time_point start_;
};

vit::Batch random_image_batch(const vit::ArchConfig& arch, index_t count, Rng& rng) {
  vit::Batch b;
  b.count = count;
  b.pixels = arch.channels * arch.image_size * arch.image_size;
  b.images.resize(b.count * b.pixels);
  for (auto& v : b.images) v = rng.uniform();
  b.labels.assign(count, 0);
  return b;
}

double max_logit_delta(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (index_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<vit::Model> train_bases(const config::Config& cfg, const data::Dataset& ds,
                                    std::uint64_t base_seed, index_t seeds) {
  std::vector<vit::Model> models;
  for (index_t i = 0; i < seeds; ++i) {
    std::cout << "training base model, seed " << (base_seed + i) << "...\n" << std::flush;
    models.push_back(exp::train_base_model(cfg, ds, base_seed + i));
  }
  return models;
}

int run(int argc, char** argv) {
  CLI::App app{"skdvit: prefix-extractable vision transformer compression toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  CommonOpts gen_c;
  gen_c.seed = 1;
  add_common(gen, gen_c);

  // train-base
  auto* trainb = app.add_subcommand("train-base", "train the full toy model");
  CommonOpts train_c;
  std::string train_data;
  add_common(trainb, train_c);
  trainb->add_option("--data", train_data, "dataset container")->required();

  // wpac
  auto* wp = app.add_subcommand("wpac", "apply the function-preserving concentration transform");
  CommonOpts wpac_c;
  std::string wpac_model, wpac_data, wpac_weighting;
  index_t wpac_proxy = 0;
  double wpac_ridge = -1.0;
  bool wpac_verify = false;
  add_common(wp, wpac_c);
  wp->add_option("--model", wpac_model, "input checkpoint")->required();
  wp->add_option("--data", wpac_data, "dataset container")->required();
  wp->add_option("--weighting", wpac_weighting, "importance|uniform|class|rand");
  wp->add_option("--proxy-size", wpac_proxy, "proxy sample count");
  wp->add_option("--ridge", wpac_ridge, "diagonal added to covariances");
  wp->add_flag("--verify", wpac_verify, "check output preservation and fail on drift");

  // piad
  auto* pd = app.add_subcommand("piad", "train the super-network with progressive dropout");
  CommonOpts piad_c;
  std::string piad_model, piad_data;
  add_common(pd, piad_c);
  pd->add_option("--model", piad_model, "transformed checkpoint")->required();
  pd->add_option("--data", piad_data, "dataset container")->required();

  // extract
  auto* ex = app.add_subcommand("extract", "slice a sub-network checkpoint, no data needed");
  CommonOpts ex_c;
  std::string ex_model, ex_list, ex_out_file;
  double ex_target = 0.0;
  add_common(ex, ex_c);
  ex->add_option("--model", ex_model, "super-network checkpoint")->required();
  ex->add_option("--list", ex_list, "dropout list json")->required();
  ex->add_option("--target-macs", ex_target, "absolute MACs, or a fraction in (0,1]")->required();
  ex->add_option("--out-file", ex_out_file, "output checkpoint path");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate accuracy and cost");
  CommonOpts ev_c;
  std::string ev_model, ev_data, ev_split = "test";
  double ev_keep_attn = 1.0, ev_keep_mlp = 1.0;
  add_common(ev, ev_c);
  ev->add_option("--model", ev_model, "checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset container")->required();
  ev->add_option("--split", ev_split, "train|val|test");
  ev->add_option("--keep-attn", ev_keep_attn, "prefix-keep ratio for attention dims");
  ev->add_option("--keep-mlp", ev_keep_mlp, "prefix-keep ratio for hidden dims");

  // compare-criteria
  auto* cc = app.add_subcommand("compare-criteria", "pruning criteria comparison table");
  CommonOpts cc_c;
  std::string cc_data, cc_ratios;
  index_t cc_seeds = 0;
  add_common(cc, cc_c);
  cc->add_option("--data", cc_data, "dataset container")->required();
  cc->add_option("--ratios", cc_ratios, "comma-separated keep ratios");
  cc->add_option("--seeds", cc_seeds, "number of seeds");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run one ablation study");
  CommonOpts ab_c;
  std::string ab_which, ab_data;
  index_t ab_seeds = 0;
  add_common(ab, ab_c);
  ab->add_option("--which", ab_which, "weighting|proxy-size|dropout-strategy")->required();
  ab->add_option("--data", ab_data, "dataset container")->required();
  ab->add_option("--seeds", ab_seeds, "number of seeds");

  // report
  auto* rp = app.add_subcommand("report", "merge report CSVs (config hashes must match)");
  CommonOpts rp_c;
  std::vector<std::string> rp_inputs;
  add_common(rp, rp_c);
  rp->add_option("inputs", rp_inputs, "input CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints the message and usage
    return code == 0 ? 0 : 1;
  }

  if (gen->parsed()) {
    Stopwatch sw;
    const auto cfg = load_config(gen_c);
    fs::create_directories(gen_c.out_dir);
    const auto ds = data::gen_data(gen_c.seed, cfg.experiment.counts, cfg.experiment.channels);
    const std::string path = (fs::path(gen_c.out_dir) / "dataset.skdc").string();
    data::save_dataset(ds, path);
    write_manifest(gen_c, cfg, "gen-data", {path}, sw.seconds());
    std::cout << "wrote " << path << ": " << ds.count() << " images (" << ds.train.size()
              << " train / " << ds.val.size() << " val / " << ds.test.size() << " test)\n";
    return 0;
  }

  if (trainb->parsed()) {
    Stopwatch sw;
    const auto cfg = load_config(train_c);
    fs::create_directories(train_c.out_dir);
    const auto ds = data::load_dataset(train_data);
    vit::Model m = exp::train_base_model(cfg, ds, train_c.seed);
    const std::string path =
        (fs::path(train_c.out_dir) / ("base_s" + std::to_string(train_c.seed) + ".skdc")).string();
    io::save_model(m, path);
    const auto test = data::split_batch(ds, ds.test);
    std::cout << "wrote " << path << ", test accuracy " << vit::accuracy(m, test) << "\n";
    write_manifest(train_c, cfg, "train-base", {path}, sw.seconds());
    return 0;
  }

  if (wp->parsed()) {
    Stopwatch sw;
    auto cfg = load_config(wpac_c);
    fs::create_directories(wpac_c.out_dir);
    const auto ds = data::load_dataset(wpac_data);
    vit::Model m = io::load_model(wpac_model);
    const vit::Model original = m;

    wpac::WpacOptions opt = cfg.wpac;
    if (!wpac_weighting.empty()) opt.weighting = wpac::weighting_from_string(wpac_weighting);
    if (wpac_proxy > 0) cfg.wpac_proxy_size = wpac_proxy;
    if (wpac_ridge >= 0.0) opt.ridge = wpac_ridge;
    opt.seed = wpac_c.seed;

    const auto proxy_idx = data::sample_proxy(ds, cfg.wpac_proxy_size, wpac_c.seed);
    const auto report = wpac::transform(m, data::to_batch(ds, proxy_idx), opt);

    index_t warnings = 0;
    for (const auto& t : report.transforms)
      if (t.ill_conditioned) ++warnings;
    if (warnings)
      std::cout << "warning: " << warnings << " ill-conditioned covariance(s); consider --ridge\n";

    const std::string mpath = (fs::path(wpac_c.out_dir) / "wpac.skdc").string();
    const std::string rpath = (fs::path(wpac_c.out_dir) / "wpac_report.json").string();
    io::save_model(m, mpath);
    {
      std::ofstream f(rpath, std::ios::trunc);
      f << report.to_json().dump(2) << '\n';
    }

    if (wpac_verify) {
      Rng rng(wpac_c.seed ^ 0xabcd'ef01'2345'6789ULL);
      const auto probe = random_image_batch(m.arch, 100, rng);
      const double d64 =
          max_logit_delta(vit::forward(original, probe).logits, vit::forward(m, probe).logits);
      const auto f32a = vit::forward(vit::cast_f32(original), probe).logits;
      const auto f32b = vit::forward(vit::cast_f32(m), probe).logits;
      double d32 = 0.0;
      for (index_t i = 0; i < f32a.size(); ++i)
        d32 = std::max(d32, std::abs(static_cast<double>(f32a[i]) - f32b[i]));
      std::cout << "max logit deviation: " << d64 << " (64-bit), " << d32 << " (32-bit)\n";
      if (d64 > 1e-9 || d32 > 1e-5)
        throw NumericalError("wpac --verify: function preservation drift exceeds tolerance");
    }

    write_manifest(wpac_c, cfg, "wpac", {mpath, rpath}, sw.seconds());
    std::cout << "wrote " << mpath << "\n";
    return 0;
  }

  if (pd->parsed()) {
    Stopwatch sw;
    const auto cfg = load_config(piad_c);
    fs::create_directories(piad_c.out_dir);
    const auto ds = data::load_dataset(piad_data);
    vit::Model m = io::load_model(piad_model);
    piad::PiadConfig pc = cfg.piad;
    pc.seed = piad_c.seed;
    const auto result = piad::train_piad(m, ds, pc);
    const std::string mpath = (fs::path(piad_c.out_dir) / "piad.skdc").string();
    const std::string lpath = (fs::path(piad_c.out_dir) / "piad.dropout.json").string();
    io::save_model(m, mpath);
    piad::save_state(result.state, lpath);
    for (const auto& e : result.log)
      std::cout << "epoch " << e.epoch << ": cost " << e.mean_cost << ", list " << e.list_len
                << " units (" << e.listed_macs << " MACs)\n";
    write_manifest(piad_c, cfg, "piad", {mpath, lpath}, sw.seconds());
    return 0;
  }

  if (ex->parsed()) {
    Stopwatch sw;
    const auto cfg = load_config(ex_c);
    fs::create_directories(ex_c.out_dir);
    vit::Model m = io::load_model(ex_model);
    const auto state = piad::load_state(ex_list);
    const auto mm = importance::MacsModel::from(m.arch);
    const std::uint64_t full = mm.model_macs(m);
    require(ex_target > 0.0, "extract: target must be positive");
    const std::uint64_t target =
        ex_target <= 1.0 ? static_cast<std::uint64_t>(ex_target * static_cast<double>(full))
                         : static_cast<std::uint64_t>(ex_target);
    vit::Model sliced = piad::extract_subnetwork(m, state.list, target);
    const std::string path = ex_out_file.empty()
                                 ? (fs::path(ex_c.out_dir) / "extracted.skdc").string()
                                 : ex_out_file;
    io::save_model(sliced, path);
    std::cout << "wrote " << path << ": " << mm.model_macs(sliced) << " MACs (target " << target
              << ", full " << full << "), extraction took " << sw.seconds() << " s\n";
    write_manifest(ex_c, cfg, "extract", {path}, sw.seconds());
    return 0;
  }

  if (ev->parsed()) {
    const auto ds = data::load_dataset(ev_data);
    vit::Model m = io::load_model(ev_model);
    const data::Split* split = &ds.test;
    if (ev_split == "train") split = &ds.train;
    else if (ev_split == "val") split = &ds.val;
    else require(ev_split == "test", "eval: unknown split '" + ev_split + "'");
    const auto batch = data::split_batch(ds, *split);
    vit::SubnetMask mask = vit::SubnetMask::full(m);
    if (ev_keep_attn < 1.0 || ev_keep_mlp < 1.0) {
      for (index_t b = 0; b < m.blocks.size(); ++b) {
        for (index_t h = 0; h < m.arch.heads; ++h)
          mask.k_attn[b][h] = std::max<index_t>(
              1, static_cast<index_t>(std::llround(ev_keep_attn * m.blocks[b].attn_dim)));
        mask.k_mlp[b] = std::max<index_t>(
            1, static_cast<index_t>(std::llround(ev_keep_mlp * m.blocks[b].mlp_dim)));
      }
    }
    const auto res = vit::forward(m, batch, &mask);
    const double acc = vit::accuracy(m, batch, &mask);
    const auto mm = importance::MacsModel::from(m.arch);
    std::cout << "split " << ev_split << ": accuracy " << acc << ", cost " << res.cost
              << ", masked MACs " << mm.masked_macs(m, mask) << "\n";
    return 0;
  }

  if (cc->parsed()) {
    Stopwatch sw;
    auto cfg = load_config(cc_c);
    fs::create_directories(cc_c.out_dir);
    if (cc_seeds > 0) cfg.experiment.seeds = cc_seeds;
    if (!cc_ratios.empty()) {
      cfg.experiment.ratios.clear();
      std::stringstream ss(cc_ratios);
      std::string item;
      while (std::getline(ss, item, ',')) cfg.experiment.ratios.push_back(std::stod(item));
    }
    const auto ds = data::load_dataset(cc_data);
    const auto bases = train_bases(cfg, ds, cc_c.seed, cfg.experiment.seeds);
    auto rep = exp::compare_criteria(cfg, ds, bases);
    rep.wall_seconds = sw.seconds();
    const std::string csv = (fs::path(cc_c.out_dir) / "criteria.csv").string();
    const std::string plot = (fs::path(cc_c.out_dir) / "criteria_plot.json").string();
    exp::write_csv(rep, csv);
    {
      std::ofstream f(plot, std::ios::trunc);
      f << rep.plot_data().dump(2) << '\n';
    }
    std::cout << rep.to_csv();
    write_manifest(cc_c, cfg, "compare-criteria", {csv, plot}, sw.seconds());
    return 0;
  }

  if (ab->parsed()) {
    Stopwatch sw;
    auto cfg = load_config(ab_c);
    fs::create_directories(ab_c.out_dir);
    if (ab_seeds > 0) cfg.experiment.seeds = ab_seeds;
    const auto which = exp::ablation_from_string(ab_which);
    const auto ds = data::load_dataset(ab_data);
    const auto bases = train_bases(cfg, ds, ab_c.seed, cfg.experiment.seeds);
    auto rep = exp::run_ablation(which, cfg, ds, bases);
    rep.wall_seconds = sw.seconds();
    const std::string stem = "ablate_" + std::string(ab_which);
    const std::string csv = (fs::path(ab_c.out_dir) / (stem + ".csv")).string();
    const std::string plot = (fs::path(ab_c.out_dir) / (stem + "_plot.json")).string();
    exp::write_csv(rep, csv);
    {
      std::ofstream f(plot, std::ios::trunc);
      f << rep.plot_data().dump(2) << '\n';
    }
    std::cout << rep.to_csv();
    write_manifest(ab_c, cfg, "ablate", {csv, plot}, sw.seconds());
    return 0;
  }

  if (rp->parsed()) {
    const auto cfg = load_config(rp_c);
    fs::create_directories(rp_c.out_dir);
    std::vector<exp::ExperimentReport> reports;
    for (const auto& p : rp_inputs) reports.push_back(exp::read_csv(p));
    const auto merged = exp::merge_reports(reports);
    const std::string path = (fs::path(rp_c.out_dir) / "merged.csv").string();
    exp::write_csv(merged, path);
    std::cout << "wrote " << path << " (" << merged.rows.size() << " rows)\n";
    write_manifest(rp_c, cfg, "report", {path}, 0.0);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
