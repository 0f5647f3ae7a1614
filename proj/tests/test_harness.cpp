#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "skd/config.hpp"
#include "skd/experiments.hpp"
#include "skd/train.hpp"
#include "testutil.hpp"

using namespace skd;

namespace {

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

std::string temp_path(const char* name) {
  return std::string("/tmp/skd_harness_") + std::to_string(::getpid()) + "_" + name;
}

}  // namespace

TEST_CASE("gen_data: determinism, counts, balance") {
  data::GenCounts counts;
  counts.train_per_class = 12;
  counts.val_per_class = 2;
  counts.test_per_class = 3;

  const auto a = data::gen_data(99, counts);
  CHECK(a.train.size() == 12 * 8);
  CHECK(a.val.size() == 2 * 8);
  CHECK(a.test.size() == 3 * 8);
  CHECK(a.count() == 17 * 8);

  std::vector<index_t> hist(8, 0);
  for (index_t i = a.train.begin; i < a.train.end; ++i) ++hist[a.labels[i]];
  for (index_t c = 0; c < 8; ++c) CHECK(hist[c] == 12);

  for (float v : a.images) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  const std::string p1 = temp_path("ds1.skdc"), p2 = temp_path("ds2.skdc");
  data::save_dataset(a, p1);
  data::save_dataset(data::gen_data(99, counts), p2);
  CHECK(file_bytes(p1) == file_bytes(p2));

  const auto b = data::gen_data(100, counts);
  CHECK(a.images != b.images);

  const auto loaded = data::load_dataset(p1);
  CHECK(loaded.images == a.images);
  CHECK(loaded.labels == a.labels);
  CHECK(loaded.class_names == a.class_names);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("sample_proxy") {
  const auto ds = testutil::tiny_dataset(7);
  SUBCASE("whole split") {
    const auto idx = data::sample_proxy(ds, ds.train.size(), 5);
    std::set<index_t> unique(idx.begin(), idx.end());
    CHECK(unique.size() == ds.train.size());
    CHECK(*unique.begin() >= ds.train.begin);
    CHECK(*unique.rbegin() < ds.train.end);
  }
  SUBCASE("distinct indices, inside the train split") {
    const auto idx = data::sample_proxy(ds, 64, 5);
    std::set<index_t> unique(idx.begin(), idx.end());
    CHECK(unique.size() == 64);
    for (index_t i : unique) {
      CHECK(i >= ds.train.begin);
      CHECK(i < ds.train.end);
    }
  }
  SUBCASE("different seeds draw different subsets") {
    const auto a = data::sample_proxy(ds, 32, 1);
    const auto b = data::sample_proxy(ds, 32, 2);
    CHECK(a != b);
  }
  SUBCASE("oversized request errors") {
    CHECK_THROWS_AS(data::sample_proxy(ds, ds.train.size() + 1, 1), ValidationError);
  }
}

TEST_CASE("prune_by_criterion basics") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(21);
  Rng rng(71);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 24, 3));
  const auto test = data::split_batch(ds, ds.test);
  const auto full_logits = vit::forward(m, test).logits;

  SUBCASE("keep_ratio 1 with wpac preserves the function") {
    const auto pruned = exp::prune_by_criterion(m, proxy, exp::Criterion::wpac, 1.0, 0);
    CHECK(testutil::max_abs_diff(full_logits, vit::forward(pruned, test).logits) <= 1e-9);
  }
  SUBCASE("keep_ratio 1 with baselines is a no-op") {
    for (auto c : {exp::Criterion::random, exp::Criterion::magnitude, exp::Criterion::taylor_fo}) {
      const auto pruned = exp::prune_by_criterion(m, proxy, c, 1.0, 0);
      CHECK(vit::forward(pruned, test).logits == full_logits);
    }
  }
  SUBCASE("random pruning changes the outputs and stays evaluable") {
    const auto pruned = exp::prune_by_criterion(m, proxy, exp::Criterion::random, 0.25, 0);
    CHECK(testutil::max_abs_diff(full_logits, vit::forward(pruned, test).logits) > 0.0);
    const double acc = vit::accuracy(pruned, test);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    MESSAGE("random 1/4 accuracy on an untrained model: ", acc);
  }
  SUBCASE("same seed, same random pruning") {
    const auto a = exp::prune_by_criterion(m, proxy, exp::Criterion::random, 0.5, 9);
    const auto b = exp::prune_by_criterion(m, proxy, exp::Criterion::random, 0.5, 9);
    CHECK(a.blocks[0].heads[0].wv == b.blocks[0].heads[0].wv);
  }
  SUBCASE("ratios outside (0,1] error") {
    CHECK_THROWS_AS(exp::prune_by_criterion(m, proxy, exp::Criterion::magnitude, 0.0, 0),
                    ValidationError);
    CHECK_THROWS_AS(exp::prune_by_criterion(m, proxy, exp::Criterion::magnitude, 1.5, 0),
                    ValidationError);
  }
  SUBCASE("tiny ratios that empty the keep set error") {
    CHECK_THROWS_AS(exp::prune_by_criterion(m, proxy, exp::Criterion::magnitude, 0.01, 0),
                    ValidationError);
  }
}

TEST_CASE("config parsing") {
  SUBCASE("defaults round-trip through the canonical dump") {
    const auto c = config::defaults();
    const auto reparsed = config::parse(config::canonical_dump(c));
    CHECK(config::canonical_dump(reparsed) == config::canonical_dump(c));
    CHECK(config::config_hash(reparsed) == config::config_hash(c));
  }
  SUBCASE("values apply and change the hash") {
    const auto c = config::parse("[arch]\nembed_dim = 32\nheads = 2\n[train]\nlr = 0.1\n"
                                 "[experiment]\nratios = 0.5, 0.75\n");
    CHECK(c.arch.embed_dim == 32);
    CHECK(c.train.lr == 0.1);
    CHECK(c.experiment.ratios == std::vector<double>{0.5, 0.75});
    CHECK(config::config_hash(c) != config::config_hash(config::defaults()));
  }
  SUBCASE("comments and blank lines are fine") {
    const auto c = config::parse("# top comment\n\n[piad]\ntarget_ratio = 0.4  # inline\n");
    CHECK(c.piad.target_ratio == 0.4);
  }
  SUBCASE("unknown keys and sections are rejected") {
    CHECK_THROWS_AS(config::parse("[arch]\nwat = 3\n"), ValidationError);
    CHECK_THROWS_AS(config::parse("[nope]\nx = 1\n"), ValidationError);
    CHECK_THROWS_AS(config::parse("x = 1\n"), ValidationError);
  }
  SUBCASE("missing file errors") { CHECK_THROWS_AS(config::load("/nonexistent.ini"), ValidationError); }
}

TEST_CASE("report CSV round trip and hash-checked merging") {
  exp::ExperimentReport rep;
  rep.config_hash = "00ff00ff00ff00ff";
  rep.run_id = "unit";
  rep.rows.push_back({"criteria", 0, "wpac", 0.5, 0.8125});
  rep.rows.push_back({"criteria", 1, "random", 0.25, 0.1321428571});

  const std::string path = temp_path("report.csv");
  exp::write_csv(rep, path);
  const auto loaded = exp::read_csv(path);
  CHECK(loaded.config_hash == rep.config_hash);
  REQUIRE(loaded.rows.size() == 2);
  CHECK(loaded.rows[0].item == "wpac");
  CHECK(loaded.rows[0].value == doctest::Approx(0.8125).epsilon(1e-9));
  CHECK(loaded.rows[1].seed == 1);

  SUBCASE("merge accepts equal hashes") {
    const auto merged = exp::merge_reports({rep, loaded});
    CHECK(merged.rows.size() == 4);
  }
  SUBCASE("merge refuses mismatched hashes") {
    exp::ExperimentReport other = rep;
    other.config_hash = "1111111111111111";
    CHECK_THROWS_AS(exp::merge_reports({rep, other}), ValidationError);
  }
  std::remove(path.c_str());

  SUBCASE("csv bytes are deterministic") {
    CHECK(rep.to_csv() == rep.to_csv());
    const auto plot = rep.plot_data();
    CHECK(plot.dump() == rep.plot_data().dump());
  }
}

TEST_CASE("criteria comparison report has the expected shape and reproduces exactly") {
  config::Config cfg;
  cfg.arch = testutil::small_arch();
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.train.lr = 0.05;
  cfg.wpac_proxy_size = 24;
  cfg.experiment.seeds = 1;
  cfg.experiment.ratios = {0.5};

  const auto ds = testutil::tiny_dataset(30);
  auto run = [&] {
    std::vector<vit::Model> bases;
    bases.push_back(exp::train_base_model(cfg, ds, 0));
    return exp::compare_criteria(cfg, ds, bases);
  };
  const auto rep = run();
  // 1 full row + 4 criteria x 1 ratio
  CHECK(rep.rows.size() == 1 + 4);
  std::set<std::string> items;
  for (const auto& r : rep.rows) items.insert(r.item);
  CHECK(items == std::set<std::string>{"full", "random", "magnitude", "taylor_fo", "wpac"});
  CHECK(rep.config_hash == config::config_hash(cfg));

  const auto rep2 = run();
  CHECK(rep.to_csv() == rep2.to_csv());
}

TEST_CASE("channel dropout training leaves frozen channels untouched per step") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(31);
  Rng rng(91);
  vit::Model m = vit::init_model(arch, rng);
  piad::PiadConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.lr = 0.03;
  cfg.seed = 3;
  const auto log = exp::train_channel_dropout(m, ds, cfg, 0.5);
  CHECK(log.size() == 1);
  CHECK(std::isfinite(log[0].mean_cost));
}
