#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "skd/importance.hpp"
#include "testutil.hpp"

using namespace skd;

TEST_CASE("taylor_element") {
  CHECK(importance::taylor_element(0.0, 5.0) == 0.0);
  CHECK(importance::taylor_element(3.0, 0.0) == 0.0);
  CHECK(importance::taylor_element(3.0, 2.0) == 6.0);
  CHECK(importance::taylor_element(-3.0, 2.0) == 6.0);
  // doubling the activation doubles the score
  CHECK(importance::taylor_element(6.0, 2.0) == 2.0 * importance::taylor_element(3.0, 2.0));
}

TEST_CASE("module_sensitivity") {
  const auto arch = testutil::tiny_arch();
  Rng rng(41);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 6, rng);

  SUBCASE("zero-output module scores zero") {
    for (auto& hd : m.blocks[0].heads) std::fill(hd.wo.begin(), hd.wo.end(), 0.0);
    std::fill(m.blocks[0].bo.begin(), m.blocks[0].bo.end(), 0.0);
    CHECK(importance::module_sensitivity(m, batch, {0, vit::ModuleKind::mhsa}) == 0.0);
  }

  SUBCASE("matches the relative-increase formula") {
    const vit::ModuleId id{1, vit::ModuleKind::mlp};
    const double base = vit::forward(m, batch).cost;
    const double skipped = vit::skip_module_forward(m, batch, id);
    const double gamma = importance::module_sensitivity(m, batch, id);
    CHECK(gamma == doctest::Approx((skipped - base) / base).epsilon(1e-15));
    // formula case: a module whose removal doubles the cost scores exactly 1
    CHECK((2.0 * base - base) / base == doctest::Approx(1.0));
  }
}

TEST_CASE("combine: alpha normalization and gamma scaling") {
  SUBCASE("uniform theta") {
    const auto s = importance::combine({1.0, 1.0, 1.0, 1.0}, 0.8);
    for (double a : s.alpha) CHECK(a == doctest::Approx(0.25));
    for (double i : s.importance) CHECK(i == doctest::Approx(0.2));
    CHECK_FALSE(s.uniform_fallback);
  }
  SUBCASE("ratio case") {
    const auto s = importance::combine({3.0, 1.0}, 1.0);
    CHECK(s.alpha[0] == doctest::Approx(0.75));
    CHECK(s.alpha[1] == doctest::Approx(0.25));
    CHECK(s.importance[0] == doctest::Approx(0.75));
  }
  SUBCASE("alpha sums to one and ignores positive rescaling") {
    Rng rng(3);
    std::vector<double> theta(17);
    for (auto& t : theta) t = rng.uniform() + 0.01;
    const auto a = importance::combine(theta, 0.4);
    CHECK(std::accumulate(a.alpha.begin(), a.alpha.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> scaled = theta;
    for (auto& t : scaled) t *= 37.5;
    const auto b = importance::combine(scaled, 0.4);
    for (index_t i = 0; i < theta.size(); ++i)
      CHECK(testutil::rel_err(a.alpha[i], b.alpha[i]) <= 1e-12);
  }
  SUBCASE("all-zero theta falls back to uniform and is flagged") {
    const auto s = importance::combine({0.0, 0.0}, 1.0);
    CHECK(s.uniform_fallback);
    CHECK(s.alpha[0] == doctest::Approx(0.5));
  }
  SUBCASE("negative gamma propagates") {
    const auto s = importance::combine({1.0, 3.0}, -2.0);
    CHECK(s.importance[0] == doctest::Approx(-0.5));
    CHECK(s.importance[1] == doctest::Approx(-1.5));
  }
}

TEST_CASE("unit_score") {
  CHECK(importance::unit_score(0.2 + 0.3, 10) == doctest::Approx(0.05));
  CHECK_THROWS_AS(importance::unit_score(1.0, 0), ValidationError);
  // equal mass, cheaper unit ranks higher, 2:1
  const double a = importance::unit_score(1.0, 10);
  const double b = importance::unit_score(1.0, 20);
  CHECK(a == doctest::Approx(2.0 * b));
}

TEST_CASE("macs formulas") {
  vit::ArchConfig arch;  // defaults: n = 17, d = 64, H = 4
  REQUIRE(arch.tokens() == 17);

  // MLP unit of 4 hidden dims: 4 * 2 * 17 * 64
  CHECK(importance::macs_of_unit(arch, vit::ModuleKind::mlp, 4) == 8704);
  // MHSA unit of 2 ranks across 4 heads: 2 * 4 * (4*17*64 + 2*17^2)
  CHECK(importance::macs_of_unit(arch, vit::ModuleKind::mhsa, 2) == 39440);

  const auto mm = importance::MacsModel::from(arch);
  SUBCASE("model total equals overhead plus all units") {
    std::uint64_t units = 0;
    for (index_t b = 0; b < arch.depth; ++b)
      units += importance::macs_of_unit(arch, vit::ModuleKind::mhsa, arch.head_dim()) +
               importance::macs_of_unit(arch, vit::ModuleKind::mlp, arch.mlp_hidden);
    CHECK(mm.full_total() == mm.overhead() + units);
  }
  SUBCASE("additivity over arbitrary partitions") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      index_t left = arch.mlp_hidden;
      std::uint64_t sum = 0;
      while (left > 0) {
        const index_t g = 1 + rng.below(left);
        sum += importance::macs_of_unit(arch, vit::ModuleKind::mlp, g);
        left -= g;
      }
      CHECK(sum == importance::macs_of_unit(arch, vit::ModuleKind::mlp, arch.mlp_hidden));
    }
  }
  SUBCASE("masked macs track kept dims") {
    vit::Model m = vit::make_model(arch);
    CHECK(mm.model_macs(m) == mm.full_total());
    auto mask = vit::SubnetMask::full(m);
    mask.k_mlp[0] = arch.mlp_hidden - 4;
    CHECK(mm.masked_macs(m, mask) ==
          mm.full_total() - importance::macs_of_unit(arch, vit::ModuleKind::mlp, 4));
  }
}

TEST_CASE("dimension importance on a live model") {
  const auto arch = testutil::tiny_arch();
  Rng rng(47);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 6, rng);

  const auto mlp = importance::dimension_importance(m, batch, {0, vit::ModuleKind::mlp});
  CHECK(mlp.theta.size() == arch.mlp_hidden);
  CHECK(std::accumulate(mlp.alpha.begin(), mlp.alpha.end(), 0.0) ==
        doctest::Approx(1.0).epsilon(1e-12));
  for (double t : mlp.theta) CHECK(t >= 0.0);

  const auto attn = importance::dimension_importance(m, batch, {0, vit::ModuleKind::mhsa});
  CHECK(attn.theta.size() == arch.head_dim());

  SUBCASE("ranking is invariant to rescaling the cost") {
    // scaling the cost scales gamma and theta together; argsort of I stays put
    auto scaled_theta = attn.theta;
    for (auto& t : scaled_theta) t *= 3.7;
    const auto scaled = importance::combine(scaled_theta, attn.gamma * 3.7);
    std::vector<index_t> order_a(attn.importance.size()), order_b(order_a.size());
    std::iota(order_a.begin(), order_a.end(), index_t{0});
    order_b = order_a;
    std::stable_sort(order_a.begin(), order_a.end(), [&](index_t x, index_t y) {
      return attn.importance[x] > attn.importance[y];
    });
    std::stable_sort(order_b.begin(), order_b.end(), [&](index_t x, index_t y) {
      return scaled.importance[x] > scaled.importance[y];
    });
    CHECK(order_a == order_b);
  }
}

TEST_CASE("importance report serializes to the tabular format") {
  const auto arch = testutil::tiny_arch();
  Rng rng(53);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 4, rng);
  const auto rep = importance::evaluate_all_modules(m, batch);
  CHECK(rep.modules.size() == 2 * arch.depth);
  const std::string table = importance::report_to_table(rep);
  CHECK(table.find("blocks.0.attn\t0\t") != std::string::npos);
  CHECK(table.find("blocks.1.mlp\t") != std::string::npos);
  // one line per dimension plus the header
  index_t lines = 0;
  for (char c : table)
    if (c == '\n') ++lines;
  CHECK(lines == 1 + arch.depth * (arch.head_dim() + arch.mlp_hidden));
}
