#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "skd/importance.hpp"
#include "skd/piad.hpp"
#include "testutil.hpp"

using namespace skd;

namespace {

piad::DroppableUnit make_unit(int id, index_t begin, index_t end, double score) {
  piad::DroppableUnit u;
  u.id = id;
  u.rank_begin = begin;
  u.rank_end = end;
  u.macs = 10 * (end - begin);
  u.score_sum = score;
  u.score_members = 1;
  return u;
}

}  // namespace

TEST_CASE("build_units shapes and counts") {
  vit::ArchConfig arch;  // defaults: depth 4, d_h 16, mlp 128
  const auto units = piad::build_units(arch);
  CHECK(units.size() == 4 * (8 + 32));

  // first unit: block 0 MHSA, trailing 2 ranks, spanning all heads
  CHECK(units[0].module.block == 0);
  CHECK(units[0].module.kind == vit::ModuleKind::mhsa);
  CHECK(units[0].rank_begin == 14);
  CHECK(units[0].rank_end == 16);
  CHECK(units[0].macs == importance::macs_of_unit(arch, vit::ModuleKind::mhsa, 2));

  // units within a module descend through the ranks contiguously
  for (index_t i = 1; i < 8; ++i) {
    CHECK(units[i].rank_end == units[i - 1].rank_begin);
  }
  CHECK(units[7].rank_begin == 0);
  CHECK(units[8].module.kind == vit::ModuleKind::mlp);
  CHECK(units[8].rank_end == 128);
  CHECK(units[8].width() == 4);

  SUBCASE("indivisible hidden dim errors") {
    vit::ArchConfig bad = arch;
    bad.mlp_hidden = 130;
    CHECK_THROWS_AS(piad::build_units(bad), ValidationError);
  }
}

TEST_CASE("merge rule: the spec trace") {
  // scores by descending rank [0.1, 0.5, 0.2]: the 0.2 unit merges into the
  // 0.5 unit at averaged score 0.35, the 0.1 unit stays separate
  std::vector<piad::DroppableUnit> units;
  units.push_back(make_unit(0, 12, 16, 0.1));
  units.push_back(make_unit(1, 8, 12, 0.5));
  units.push_back(make_unit(2, 4, 8, 0.2));
  piad::merge_module_units(units);
  REQUIRE(units.size() == 2);
  CHECK(units[0].id == 0);
  CHECK(units[0].score() == doctest::Approx(0.1));
  CHECK(units[1].id == 1);
  CHECK(units[1].score() == doctest::Approx(0.35));
  CHECK(units[1].rank_begin == 4);
  CHECK(units[1].rank_end == 12);
  CHECK(units[1].macs == 80);
  CHECK(units[1].merged_from == std::vector<int>{2});
}

TEST_CASE("merge rule: fixpoint keeps survivors ordered trailing-low to leading-high") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<piad::DroppableUnit> units;
    const index_t n = 2 + rng.below(10);
    index_t end = n * 4;
    for (index_t i = 0; i < n; ++i) {
      units.push_back(make_unit(static_cast<int>(i), end - 4, end, rng.uniform()));
      end -= 4;
    }
    piad::merge_module_units(units);
    for (index_t i = 1; i < units.size(); ++i) {
      CHECK(units[i].score() >= units[i - 1].score());
      CHECK(units[i].rank_end == units[i - 1].rank_begin);  // contiguous chain
    }
  }
}

TEST_CASE("dropout list schedule invariant") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(2);
  Rng rng(5);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 32, 1));

  piad::PiadConfig cfg;
  cfg.target_ratio = 0.45;
  cfg.progressive_epochs = 5;
  cfg.epochs = 5;
  auto st = piad::init_state(m);

  for (index_t t = 1; t <= cfg.progressive_epochs; ++t) {
    piad::update_dropout_list(st, m, proxy, t, cfg);
    const double target = double(t) * cfg.target_ratio / double(cfg.progressive_epochs) *
                          double(st.total_macs);
    CHECK(double(st.list.cumulative_macs) >= target - double(st.max_unit_macs));
    CHECK(double(st.list.cumulative_macs) <= target + double(st.max_unit_macs));

    // idempotent within an epoch
    const index_t len = st.list.entries.size();
    piad::update_dropout_list(st, m, proxy, t, cfg);
    CHECK(st.list.entries.size() == len);

    // listed units cover a contiguous trailing range per module
    std::map<std::pair<index_t, int>, index_t> lowest;
    for (const auto& e : st.list.entries) {
      const auto key = std::make_pair(e.unit.module.block, int(e.unit.module.kind));
      const index_t dim = e.unit.module.kind == vit::ModuleKind::mhsa ? arch.head_dim()
                                                                      : arch.mlp_hidden;
      if (!lowest.count(key)) lowest[key] = dim;
      CHECK(e.unit.rank_end == lowest[key]);  // suffix-contiguous appends
      lowest[key] = e.unit.rank_begin;
    }
    // and the masks stay valid
    piad::smallest_mask(m, st).validate(m);
  }
  CHECK(st.list.entries.size() > 0);
}

TEST_CASE("minimum progress at epoch one with a tiny budget") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(3);
  Rng rng(6);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 16, 1));
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.01;  // far below one unit at t=1
  cfg.progressive_epochs = 8;
  auto st = piad::init_state(m);
  piad::update_dropout_list(st, m, proxy, 1, cfg);
  CHECK(st.list.entries.size() >= 1);
}

TEST_CASE("impossible budget reports an error") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(4);
  Rng rng(8);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 16, 1));
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.999;  // more than the droppable mass
  cfg.progressive_epochs = 1;
  auto st = piad::init_state(m);
  CHECK_THROWS_AS(piad::update_dropout_list(st, m, proxy, 1, cfg), ValidationError);
}

TEST_CASE("truncation sampling") {
  piad::DropoutList list;

  SUBCASE("empty list always keeps the full network") {
    Rng rng(1);
    CHECK(piad::sample_truncation(list, rng) == 0);
  }

  for (int i = 0; i < 9; ++i) {
    piad::DropoutEntry e;
    e.unit = make_unit(i, 0, 1, 0.1 * i);
    list.entries.push_back(e);
  }

  SUBCASE("s equals L keeps everything; the mask is the full network") {
    const auto arch = testutil::small_arch();
    Rng rng(2);
    vit::Model m = vit::init_model(arch, rng);
    const auto mask = piad::mask_dropping(m, piad::DropoutList{}, 0);
    CHECK(mask.is_full(m));
  }

  SUBCASE("draws are uniform over {0..L} by chi-square") {
    Rng rng(20240807);
    std::vector<index_t> counts(10, 0);
    const index_t draws = 100000;
    for (index_t i = 0; i < draws; ++i) ++counts[piad::sample_truncation(list, rng)];
    const double p = testutil::chi_square_p_value(counts, double(draws) / 10.0);
    MESSAGE("chi-square p = ", p);
    CHECK(p > 0.01);
  }

  SUBCASE("paper-literal range {1..L} never drops everything") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) CHECK(piad::sample_truncation(list, rng, false) >= 1);
  }
}

TEST_CASE("piad training with r=0 degenerates to fine-tuning") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(11);
  Rng rng(31);
  vit::Model m = vit::init_model(arch, rng);
  const vit::Model before = m;
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.0;
  cfg.progressive_epochs = 1;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.proxy_size = 16;
  cfg.lr = 0.05;
  const auto result = piad::train_piad(m, ds, cfg);
  CHECK(result.state.list.entries.empty());
  CHECK(m.patch_w != before.patch_w);  // it did train
  CHECK(result.log.size() == 2);
}

TEST_CASE("piad training, list growth and usable masks") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(12);
  Rng rng(37);
  vit::Model m = vit::init_model(arch, rng);
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.4;
  cfg.progressive_epochs = 3;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.proxy_size = 16;
  cfg.lr = 0.02;
  const auto result = piad::train_piad(m, ds, cfg);
  CHECK(result.state.list.entries.size() > 0);
  const double target = cfg.target_ratio * double(result.state.total_macs);
  CHECK(double(result.state.list.cumulative_macs) >=
        target - double(result.state.max_unit_macs));
  // the list freezes after the progressive phase
  for (const auto& e : result.state.list.entries)
    CHECK(e.epoch_appended <= cfg.progressive_epochs);
  piad::smallest_mask(m, result.state).validate(m);
}

TEST_CASE("extraction: slicing, equivalence, nesting") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(13);
  Rng rng(41);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 24, 2));
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.5;
  cfg.progressive_epochs = 4;
  auto st = piad::init_state(m);
  for (index_t t = 1; t <= 4; ++t) piad::update_dropout_list(st, m, proxy, t, cfg);

  const auto mm = importance::MacsModel::from(arch);
  const std::uint64_t full = mm.model_macs(m);

  SUBCASE("full target keeps every tensor bit-identical") {
    const auto same = piad::extract_subnetwork(m, st.list, full);
    CHECK(same.blocks[0].attn_dim == m.blocks[0].attn_dim);
    CHECK(same.blocks[0].w1 == m.blocks[0].w1);
    CHECK(mm.model_macs(same) == full);
  }

  SUBCASE("smallest target drops every listed unit") {
    const std::uint64_t smallest = full - st.list.cumulative_macs;
    const auto tiny = piad::extract_subnetwork(m, st.list, smallest);
    CHECK(mm.model_macs(tiny) == smallest);
    CHECK_THROWS_AS(piad::extract_subnetwork(m, st.list, smallest - 1), ValidationError);
  }

  SUBCASE("sliced forward equals masked forward") {
    const auto batch = data::to_batch(ds, data::sample_proxy(ds, 16, 9));
    Rng trng(5);
    for (int trial = 0; trial < 6; ++trial) {
      const index_t drop = trng.below(st.list.entries.size() + 1);
      std::uint64_t target = full;
      for (index_t i = 0; i < drop; ++i) target -= st.list.entries[i].unit.macs;
      const auto sliced = piad::extract_subnetwork(m, st.list, target);
      const auto mask = piad::mask_dropping(m, st.list, drop);
      const auto a = vit::forward(sliced, batch);
      const auto b = vit::forward(m, batch, &mask);
      CHECK(testutil::max_abs_diff(a.logits, b.logits) <= 1e-6);
    }
  }

  SUBCASE("smaller extractions are prefixes of larger ones") {
    Rng trng(7);
    for (int trial = 0; trial < 10; ++trial) {
      std::uint64_t t1 = full - st.list.cumulative_macs +
                         trng.below(st.list.cumulative_macs);
      std::uint64_t t2 = t1 + trng.below(full - t1 + 1);
      const auto small = piad::extract_subnetwork(m, st.list, t1);
      const auto large = piad::extract_subnetwork(m, st.list, t2);
      const index_t d = arch.embed_dim;
      for (index_t b = 0; b < arch.depth; ++b) {
        CHECK(small.blocks[b].attn_dim <= large.blocks[b].attn_dim);
        CHECK(small.blocks[b].mlp_dim <= large.blocks[b].mlp_dim);
        // kept rows are literally the leading rows of the larger model
        for (index_t h = 0; h < arch.heads; ++h)
          for (index_t i = 0; i < small.blocks[b].attn_dim * d; ++i)
            CHECK(small.blocks[b].heads[h].wv[i] == large.blocks[b].heads[h].wv[i]);
        for (index_t i = 0; i < small.blocks[b].mlp_dim * d; ++i)
          CHECK(small.blocks[b].w1[i] == large.blocks[b].w1[i]);
      }
    }
  }
}

TEST_CASE("dropout state round-trips through json") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(14);
  Rng rng(43);
  vit::Model m = vit::init_model(arch, rng);
  const auto proxy = data::to_batch(ds, data::sample_proxy(ds, 16, 2));
  piad::PiadConfig cfg;
  cfg.target_ratio = 0.3;
  cfg.progressive_epochs = 2;
  auto st = piad::init_state(m);
  piad::update_dropout_list(st, m, proxy, 1, cfg);
  piad::update_dropout_list(st, m, proxy, 2, cfg);

  const std::string path = "/tmp/skd_test_state_" + std::to_string(::getpid()) + ".json";
  piad::save_state(st, path);
  const auto loaded = piad::load_state(path);
  CHECK(loaded.list.entries.size() == st.list.entries.size());
  CHECK(loaded.list.cumulative_macs == st.list.cumulative_macs);
  CHECK(loaded.total_macs == st.total_macs);
  CHECK(loaded.remaining.size() == st.remaining.size());
  for (index_t i = 0; i < st.list.entries.size(); ++i) {
    CHECK(loaded.list.entries[i].unit.id == st.list.entries[i].unit.id);
    CHECK(loaded.list.entries[i].unit.score() ==
          doctest::Approx(st.list.entries[i].unit.score()));
  }
  std::remove(path.c_str());
}
