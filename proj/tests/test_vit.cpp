#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "skd/checkpoint.hpp"
#include "skd/train.hpp"
#include "skd/vit.hpp"
#include "testutil.hpp"

using namespace skd;
using testutil::rel_err;

namespace {

double cost_of(const vit::Model& m, const vit::Batch& b, const vit::Perturbation* probe = nullptr) {
  return vit::forward(m, b, nullptr, static_cast<vit::ActivationCache*>(nullptr), probe).cost;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/skd_test_") + std::to_string(::getpid()) + "_" + name;
}

}  // namespace

TEST_CASE("zero network gives uniform logits and ln(C) cost") {
  const auto arch = testutil::tiny_arch();
  vit::Model m = vit::make_model(arch);  // all parameters zero
  Rng rng(3);
  const auto batch = testutil::random_batch(arch, 4, rng);
  const auto res = vit::forward(m, batch);
  for (double l : res.logits) CHECK(l == 0.0);
  CHECK(res.cost == doctest::Approx(std::log(double(arch.num_classes))).epsilon(1e-12));
}

TEST_CASE("full mask is bit-identical to no mask") {
  const auto arch = testutil::tiny_arch();
  Rng rng(11);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 6, rng);
  const auto a = vit::forward(m, batch);
  const auto mask = vit::SubnetMask::full(m);
  const auto b = vit::forward(m, batch, &mask);
  CHECK(a.logits == b.logits);
  CHECK(a.cost == b.cost);
}

TEST_CASE("masking one head dim perturbs logits boundedly") {
  const auto arch = testutil::tiny_arch();
  Rng rng(13);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 4, rng);
  auto mask = vit::SubnetMask::full(m);
  mask.k_attn[0][0] = arch.head_dim() - 1;
  const auto full = vit::forward(m, batch);
  const auto masked = vit::forward(m, batch, &mask);
  const double diff = testutil::max_abs_diff(full.logits, masked.logits);
  CHECK(diff > 0.0);
  CHECK(diff < 10.0);
  MESSAGE("one-dim mask perturbation: ", diff);
}

TEST_CASE("batch gradient is the mean of per-sample gradients") {
  const auto arch = testutil::tiny_arch();
  Rng rng(17);
  vit::Model m = vit::init_model(arch, rng);
  auto one = testutil::random_batch(arch, 1, rng);

  vit::Batch pair = one;
  pair.count = 2;
  pair.images.insert(pair.images.end(), one.images.begin(), one.images.end());
  pair.labels = {0, 1};

  auto grad_for = [&](const vit::Batch& b) {
    vit::ActivationCache cache;
    vit::forward(m, b, nullptr, &cache);
    vit::Model g;
    vit::backward(m, b, nullptr, cache, g);
    return g;
  };
  one.labels = {0};
  const vit::Model g0 = grad_for(one);
  one.labels = {1};
  const vit::Model g1 = grad_for(one);
  const vit::Model gp = grad_for(pair);

  double worst = 0.0;
  vit::for_each_tensor(gp, [&](const std::string& name, const std::vector<double>& v,
                               const std::vector<index_t>&) {
    const std::vector<double>* a = nullptr;
    const std::vector<double>* b = nullptr;
    vit::for_each_tensor(g0, [&](const std::string& n2, const std::vector<double>& v2,
                                 const std::vector<index_t>&) {
      if (n2 == name) a = &v2;
    });
    vit::for_each_tensor(g1, [&](const std::string& n2, const std::vector<double>& v2,
                                 const std::vector<index_t>&) {
      if (n2 == name) b = &v2;
    });
    for (index_t i = 0; i < v.size(); ++i)
      worst = std::max(worst, std::abs(v[i] - 0.5 * ((*a)[i] + (*b)[i])));
  });
  CHECK(worst <= 1e-12);
}

TEST_CASE("analytic parameter gradients match central finite differences") {
  const auto arch = testutil::tiny_arch();
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    vit::Model m = vit::init_model(arch, rng);
    const auto batch = testutil::random_batch(arch, 2, rng);
    vit::ActivationCache cache;
    vit::forward(m, batch, nullptr, &cache);
    vit::Model grad;
    vit::backward(m, batch, nullptr, cache, grad);

    std::vector<std::vector<double>*> params;
    std::vector<const std::vector<double>*> grads;
    vit::for_each_tensor(m, [&](const std::string&, std::vector<double>& v,
                                const std::vector<index_t>&) { params.push_back(&v); });
    vit::for_each_tensor(grad, [&](const std::string&, const std::vector<double>& v,
                                   const std::vector<index_t>&) { grads.push_back(&v); });

    Rng pick(seed * 31 + 5);
    for (index_t t = 0; t < params.size(); ++t) {
      auto& vec = *params[t];
      const index_t samples = std::min<index_t>(vec.size(), 3);
      for (index_t s = 0; s < samples; ++s) {
        const index_t i = pick.below(vec.size());
        const double keep = vec[i];
        vec[i] = keep + eps;
        const double up = cost_of(m, batch);
        vec[i] = keep - eps;
        const double down = cost_of(m, batch);
        vec[i] = keep;
        const double fd = (up - down) / (2.0 * eps);
        worst = std::max(worst, rel_err(fd, (*grads[t])[i]));
      }
    }
  }
  MESSAGE("max parameter-grad relative error: ", worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("cached activation gradients match re-run finite differences") {
  const auto arch = testutil::tiny_arch();
  Rng rng(55);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 2, rng);
  vit::ActivationCache cache;
  vit::forward(m, batch, nullptr, &cache);
  vit::Model grad;
  vit::backward(m, batch, nullptr, cache, grad);

  const index_t n = arch.tokens();
  const double eps = 1e-5;
  double worst = 0.0;
  auto probe_check = [&](vit::Perturbation::Site site, index_t block, index_t head,
                         index_t sample, index_t token, index_t dim, double analytic) {
    vit::Perturbation p{site, block, head, sample, token, dim, eps};
    const double up = cost_of(m, batch, &p);
    p.delta = -eps;
    const double down = cost_of(m, batch, &p);
    const double fd = (up - down) / (2.0 * eps);
    worst = std::max(worst, rel_err(fd, analytic));
  };

  Rng pick(77);
  for (index_t block = 0; block < arch.depth; ++block) {
    const auto& bc = cache.blocks[block];
    const index_t ad = m.blocks[block].attn_dim;
    const index_t mm = m.blocks[block].mlp_dim;
    for (int rep = 0; rep < 4; ++rep) {
      const index_t s = pick.below(batch.count);
      const index_t t = pick.below(n);
      const index_t h = pick.below(arch.heads);
      const index_t r = pick.below(ad);
      const auto& hc = bc.heads[h];
      const index_t off = (s * n + t) * ad + r;
      probe_check(vit::Perturbation::Site::q, block, h, s, t, r, hc.dq[off]);
      probe_check(vit::Perturbation::Site::k, block, h, s, t, r, hc.dk[off]);
      probe_check(vit::Perturbation::Site::v, block, h, s, t, r, hc.dv[off]);
      const index_t col = pick.below(n);
      probe_check(vit::Perturbation::Site::attn, block, h, s, t, col,
                  hc.dattn[(s * n + t) * n + col]);
      const index_t md = pick.below(mm);
      probe_check(vit::Perturbation::Site::mlp_hidden, block, 0, s, t, md,
                  bc.dhpost[(s * n + t) * mm + md]);
    }
  }
  MESSAGE("max activation-grad relative error: ", worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("backward without a populated cache errors") {
  const auto arch = testutil::tiny_arch();
  Rng rng(5);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 2, rng);
  vit::ActivationCache cache;
  vit::Model grad;
  CHECK_THROWS_AS(vit::backward(m, batch, nullptr, cache, grad), ValidationError);
}

TEST_CASE("skip_module_forward") {
  const auto arch = testutil::tiny_arch();
  Rng rng(23);
  vit::Model m = vit::init_model(arch, rng);
  const auto batch = testutil::random_batch(arch, 4, rng);

  SUBCASE("skipping a zero-output module leaves the cost unchanged") {
    for (auto& hd : m.blocks[1].heads) std::fill(hd.wo.begin(), hd.wo.end(), 0.0);
    std::fill(m.blocks[1].bo.begin(), m.blocks[1].bo.end(), 0.0);
    const double base = cost_of(m, batch);
    const double skipped = vit::skip_module_forward(m, batch, {1, vit::ModuleKind::mhsa});
    CHECK(skipped == doctest::Approx(base).epsilon(1e-15));
  }

  SUBCASE("skipping every module leaves the embed+head path") {
    vit::SubnetMask mask = vit::SubnetMask::full(m);
    for (index_t b = 0; b < arch.depth; ++b) {
      mask.skip_attn[b] = true;
      mask.skip_mlp[b] = true;
    }
    const auto res = vit::forward(m, batch, &mask);

    // oracle: strip all blocks out of the model and run the same forward
    vit::ArchConfig flat = arch;
    flat.depth = 1;
    vit::Model stub = vit::make_model(flat);
    stub.patch_w = m.patch_w;
    stub.patch_b = m.patch_b;
    stub.cls = m.cls;
    stub.pos = m.pos;
    stub.lnf_g = m.lnf_g;
    stub.lnf_b = m.lnf_b;
    stub.head_w = m.head_w;
    stub.head_b = m.head_b;
    vit::SubnetMask stub_mask = vit::SubnetMask::full(stub);
    stub_mask.skip_attn[0] = true;
    stub_mask.skip_mlp[0] = true;
    const auto expect = vit::forward(stub, batch, &stub_mask);
    CHECK(testutil::max_abs_diff(res.logits, expect.logits) == 0.0);
  }

  SUBCASE("skipping a live module changes the cost") {
    const double base = cost_of(m, batch);
    const double skipped = vit::skip_module_forward(m, batch, {0, vit::ModuleKind::mlp});
    CHECK(skipped != base);
    MESSAGE("skip cost delta: ", skipped - base);
  }

  CHECK_THROWS_AS(vit::skip_module_forward(m, batch, {99, vit::ModuleKind::mlp}),
                  ValidationError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto arch = testutil::tiny_arch();
  Rng rng(31);
  vit::Model m = vit::init_model(arch, rng);
  const std::string path = temp_path("roundtrip.skdc");
  io::save_model(m, path);
  const vit::Model loaded = io::load_model(path);

  bool equal = true;
  std::vector<const std::vector<double>*> a, b;
  vit::for_each_tensor(m, [&](const std::string&, const std::vector<double>& v,
                              const std::vector<index_t>&) { a.push_back(&v); });
  vit::for_each_tensor(loaded, [&](const std::string&, const std::vector<double>& v,
                                   const std::vector<index_t>&) { b.push_back(&v); });
  for (index_t i = 0; i < a.size(); ++i)
    if (*a[i] != *b[i]) equal = false;
  CHECK(equal);
  std::remove(path.c_str());
}

TEST_CASE("truncated checkpoint fails the checksum") {
  const auto arch = testutil::tiny_arch();
  Rng rng(33);
  vit::Model m = vit::init_model(arch, rng);
  const std::string path = temp_path("truncated.skdc");
  io::save_model(m, path);
  std::ifstream in(path, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  raw.resize(raw.size() - 37);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  out.close();
  CHECK_THROWS_WITH_AS(static_cast<void>(io::load_model(path)),
                       doctest::Contains("checksum"), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("declared arch mismatch names the offending tensor") {
  const auto arch = testutil::tiny_arch();
  Rng rng(35);
  vit::Model m = vit::init_model(arch, rng);
  const std::string path = temp_path("badarch.skdc");
  io::save_model(m, path);
  io::Container c = io::read_container(path);
  c.meta["block_mlp_dims"] = std::vector<index_t>{48, 48};  // lie about the shape
  io::write_container(path, c);
  CHECK_THROWS_WITH_AS(static_cast<void>(io::load_model(path)), doctest::Contains("mlp.w1"),
                       ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("non-finite activations are reported with the block index") {
  const auto arch = testutil::tiny_arch();
  Rng rng(41);
  vit::Model m = vit::init_model(arch, rng);
  std::fill(m.blocks[0].w1.begin(), m.blocks[0].w1.end(), 1e200);
  std::fill(m.blocks[0].w2.begin(), m.blocks[0].w2.end(), 1e200);
  const auto batch = testutil::random_batch(arch, 1, rng);
  CHECK_THROWS_WITH_AS(static_cast<void>(vit::forward(m, batch)), doctest::Contains("block 0"),
                       NumericalError);
}

TEST_CASE("fixed seed reproduces the training trajectory bit for bit") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(9);
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.lr = 0.05;
  tc.seed = 4242;

  auto run_once = [&](const char* name) {
    Rng rng(777);
    vit::Model m = vit::init_model(arch, rng);
    train::fit(m, ds, tc);
    const std::string path = temp_path(name);
    io::save_model(m, path);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::remove(path.c_str());
    return raw;
  };
  CHECK(run_once("det_a.skdc") == run_once("det_b.skdc"));
}

TEST_CASE("gradient isolation: masked-out parameters are bit-unchanged by a step") {
  const auto arch = testutil::small_arch();
  const auto ds = testutil::tiny_dataset(10);
  Rng rng(91);
  vit::Model m = vit::init_model(arch, rng);
  auto mask = vit::SubnetMask::full(m);
  mask.k_attn[0][0] = 4;
  mask.k_attn[1][1] = 7;
  mask.k_mlp[0] = 20;

  const vit::Model before = m;
  const auto batch = data::to_batch(ds, data::sample_proxy(ds, 16, 3));
  vit::ActivationCache cache;
  vit::forward(m, batch, &mask, &cache);
  vit::Model grad;
  vit::backward(m, batch, &mask, cache, grad);
  train::SgdMomentum opt(m, 0.9);
  opt.step(m, grad, 0.1, train::ActivityMask::from_subnet(m, mask));

  const auto& hd = m.blocks[0].heads[0];
  const auto& hd0 = before.blocks[0].heads[0];
  const index_t d = arch.embed_dim;
  for (index_t r = 4; r < m.blocks[0].attn_dim; ++r) {
    for (index_t j = 0; j < d; ++j) {
      CHECK(hd.wq[r * d + j] == hd0.wq[r * d + j]);
      CHECK(hd.wv[r * d + j] == hd0.wv[r * d + j]);
      CHECK(hd.wo[j * m.blocks[0].attn_dim + r] == hd0.wo[j * m.blocks[0].attn_dim + r]);
    }
    CHECK(hd.bq[r] == hd0.bq[r]);
  }
  for (index_t r = 20; r < m.blocks[0].mlp_dim; ++r) {
    CHECK(m.blocks[0].w1[r * d] == before.blocks[0].w1[r * d]);
    CHECK(m.blocks[0].b1[r] == before.blocks[0].b1[r]);
  }
  // and the active side did move
  CHECK(m.blocks[0].heads[0].wq[0] != before.blocks[0].heads[0].wq[0]);
}
