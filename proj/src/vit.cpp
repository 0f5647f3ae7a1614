#include "skd/vit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "skd/linalg.hpp"
#include "skd/parallel.hpp"

namespace skd::vit {

namespace {

constexpr double kLnEps = 1e-5;
constexpr index_t kChunk = 8;  // fixed batch chunking keeps merges thread-count independent

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return cdf + x * pdf;
}

// y = g*xhat + b per token; xhat and istd stored for backward
template <typename T>
void layernorm_row(const T* x, const T* g, const T* b, index_t d, T* y, T* xhat, T* istd) {
  T mu = T(0);
  for (index_t j = 0; j < d; ++j) mu += x[j];
  mu /= T(d);
  T var = T(0);
  for (index_t j = 0; j < d; ++j) {
    const T c = x[j] - mu;
    var += c * c;
  }
  var /= T(d);
  const T is = T(1) / std::sqrt(var + T(kLnEps));
  *istd = is;
  for (index_t j = 0; j < d; ++j) {
    xhat[j] = (x[j] - mu) * is;
    y[j] = g[j] * xhat[j] + b[j];
  }
}

// dx for one token given upstream dy, using stashed xhat/istd
void layernorm_row_backward(const double* dy, const double* g, const double* xhat, double istd,
                            index_t d, double* dx, double* dg, double* db) {
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (index_t j = 0; j < d; ++j) {
    const double dxh = dy[j] * g[j];
    mean_dxhat += dxh;
    mean_dxhat_xhat += dxh * xhat[j];
    dg[j] += dy[j] * xhat[j];
    db[j] += dy[j];
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (index_t j = 0; j < d; ++j) {
    const double dxh = dy[j] * g[j];
    dx[j] += istd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
  }
}

template <typename T>
void softmax_row(T* row, index_t n) {
  T mx = row[0];
  for (index_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = T(0);
  for (index_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T(1) / sum;
  for (index_t j = 0; j < n; ++j) row[j] *= inv;
}

template <typename T>
void extract_patch(const double* image, const ArchConfig& a, index_t patch, T* out) {
  const index_t ps = a.patch_size;
  const index_t side = a.patches_per_side();
  const index_t pr = (patch / side) * ps;
  const index_t pc = (patch % side) * ps;
  index_t i = 0;
  for (index_t ch = 0; ch < a.channels; ++ch) {
    const double* plane = image + ch * a.image_size * a.image_size;
    for (index_t r = 0; r < ps; ++r)
      for (index_t c = 0; c < ps; ++c) out[i++] = static_cast<T>(plane[(pr + r) * a.image_size + pc + c]);
  }
}

struct MaskView {
  const SubnetMask* mask = nullptr;
  index_t keep_attn(index_t b, index_t h, index_t full) const {
    return mask ? mask->k_attn[b][h] : full;
  }
  index_t keep_mlp(index_t b, index_t full) const { return mask ? mask->k_mlp[b] : full; }
  bool skip_attn(index_t b) const { return mask && mask->skip_attn[b]; }
  bool skip_mlp(index_t b) const { return mask && mask->skip_mlp[b]; }
};

template <typename T>
void zero_tail_cols(T* m, index_t rows, index_t cols, index_t keep) {
  if (keep >= cols) return;
  for (index_t t = 0; t < rows; ++t) {
    T* row = m + t * cols;
    for (index_t j = keep; j < cols; ++j) row[j] = T(0);
  }
}

}  // namespace

void ArchConfig::validate() const {
  require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          "arch: image_size must be a positive multiple of patch_size");
  require(channels >= 1, "arch: channels must be >= 1");
  require(depth >= 1, "arch: depth must be >= 1");
  require(heads >= 1 && embed_dim % heads == 0, "arch: embed_dim must be divisible by heads");
  require(mlp_hidden >= 1, "arch: mlp_hidden must be >= 1");
  require(num_classes >= 2, "arch: num_classes must be >= 2");
}

std::string to_string(const ModuleId& id) {
  return "blocks." + std::to_string(id.block) + (id.kind == ModuleKind::mhsa ? ".attn" : ".mlp");
}

Model make_model(const ArchConfig& arch) {
  arch.validate();
  Model m;
  m.arch = arch;
  const index_t d = arch.embed_dim;
  m.patch_w.assign(d * arch.patch_dim(), 0.0);
  m.patch_b.assign(d, 0.0);
  m.cls.assign(d, 0.0);
  m.pos.assign(arch.tokens() * d, 0.0);
  m.blocks.resize(arch.depth);
  for (auto& blk : m.blocks) {
    blk.attn_dim = arch.head_dim();
    blk.mlp_dim = arch.mlp_hidden;
    blk.ln1_g.assign(d, 0.0);
    blk.ln1_b.assign(d, 0.0);
    blk.ln2_g.assign(d, 0.0);
    blk.ln2_b.assign(d, 0.0);
    blk.heads.resize(arch.heads);
    for (auto& hd : blk.heads) {
      hd.wq.assign(blk.attn_dim * d, 0.0);
      hd.wk.assign(blk.attn_dim * d, 0.0);
      hd.wv.assign(blk.attn_dim * d, 0.0);
      hd.bq.assign(blk.attn_dim, 0.0);
      hd.bk.assign(blk.attn_dim, 0.0);
      hd.bv.assign(blk.attn_dim, 0.0);
      hd.wo.assign(d * blk.attn_dim, 0.0);
    }
    blk.bo.assign(d, 0.0);
    blk.w1.assign(blk.mlp_dim * d, 0.0);
    blk.b1.assign(blk.mlp_dim, 0.0);
    blk.w2.assign(d * blk.mlp_dim, 0.0);
    blk.b2.assign(d, 0.0);
  }
  m.lnf_g.assign(d, 0.0);
  m.lnf_b.assign(d, 0.0);
  m.head_w.assign(arch.num_classes * d, 0.0);
  m.head_b.assign(arch.num_classes, 0.0);
  return m;
}

// Same shapes as `like`, all zeros (gradient buffer for possibly-extracted models).
static Model clone_zeroed(const Model& like) {
  Model g = like;
  for_each_tensor(g, [](const std::string&, std::vector<double>& v, const std::vector<index_t>&) {
    std::fill(v.begin(), v.end(), 0.0);
  });
  return g;
}

Model init_model(const ArchConfig& arch, Rng& rng) {
  Model m = make_model(arch);
  auto trunc_normal = [&rng]() {
    for (;;) {
      const double v = rng.normal() * 0.02;
      if (std::abs(v) <= 0.04) return v;
    }
  };
  for_each_tensor(m, [&](const std::string& name, std::vector<double>& v,
                         const std::vector<index_t>&) {
    if (name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g") {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (name.ends_with(".b") || name.ends_with("bq") || name.ends_with("bk") ||
               name.ends_with("bv") || name.ends_with("bo") || name.ends_with("b1") ||
               name.ends_with("b2") || name.ends_with("head.b")) {
      // biases stay zero
    } else {
      for (auto& x : v) x = trunc_normal();
    }
  });
  return m;
}

ModelF32 cast_f32(const Model& m) {
  ModelF32 f;
  f.arch = m.arch;
  auto cast_vec = [](const std::vector<double>& src) {
    std::vector<float> out(src.size());
    for (index_t i = 0; i < src.size(); ++i) out[i] = static_cast<float>(src[i]);
    return out;
  };
  f.patch_w = cast_vec(m.patch_w);
  f.patch_b = cast_vec(m.patch_b);
  f.cls = cast_vec(m.cls);
  f.pos = cast_vec(m.pos);
  f.blocks.resize(m.blocks.size());
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    const auto& s = m.blocks[b];
    auto& t = f.blocks[b];
    t.attn_dim = s.attn_dim;
    t.mlp_dim = s.mlp_dim;
    t.ln1_g = cast_vec(s.ln1_g);
    t.ln1_b = cast_vec(s.ln1_b);
    t.ln2_g = cast_vec(s.ln2_g);
    t.ln2_b = cast_vec(s.ln2_b);
    t.heads.resize(s.heads.size());
    for (index_t h = 0; h < s.heads.size(); ++h) {
      t.heads[h].wq = cast_vec(s.heads[h].wq);
      t.heads[h].wk = cast_vec(s.heads[h].wk);
      t.heads[h].wv = cast_vec(s.heads[h].wv);
      t.heads[h].bq = cast_vec(s.heads[h].bq);
      t.heads[h].bk = cast_vec(s.heads[h].bk);
      t.heads[h].bv = cast_vec(s.heads[h].bv);
      t.heads[h].wo = cast_vec(s.heads[h].wo);
    }
    t.bo = cast_vec(s.bo);
    t.w1 = cast_vec(s.w1);
    t.b1 = cast_vec(s.b1);
    t.w2 = cast_vec(s.w2);
    t.b2 = cast_vec(s.b2);
  }
  f.lnf_g = cast_vec(m.lnf_g);
  f.lnf_b = cast_vec(m.lnf_b);
  f.head_w = cast_vec(m.head_w);
  f.head_b = cast_vec(m.head_b);
  return f;
}

void validate_shapes(const Model& m) {
  m.arch.validate();
  require(m.blocks.size() == m.arch.depth, "model: block count does not match arch depth");
  for_each_tensor(m, [](const std::string& name, const std::vector<double>& v,
                        const std::vector<index_t>& shape) {
    index_t numel = 1;
    for (index_t s : shape) numel *= s;
    require(v.size() == numel, "model tensor '" + name + "' has wrong element count");
    for (double x : v)
      if (!std::isfinite(x)) throw ValidationError("model tensor '" + name + "' has non-finite values");
  });
  for (const auto& blk : m.blocks) {
    require(blk.attn_dim >= 1 && blk.attn_dim <= m.arch.head_dim(), "model: bad block attn_dim");
    require(blk.mlp_dim >= 1 && blk.mlp_dim <= m.arch.mlp_hidden, "model: bad block mlp_dim");
    require(blk.heads.size() == m.arch.heads, "model: bad head count");
  }
}

index_t param_count(const Model& m) {
  index_t n = 0;
  for_each_tensor(m, [&](const std::string&, const std::vector<double>& v,
                         const std::vector<index_t>&) { n += v.size(); });
  return n;
}

SubnetMask SubnetMask::full(const Model& m) {
  SubnetMask mask;
  mask.k_attn.resize(m.blocks.size());
  mask.k_mlp.resize(m.blocks.size());
  mask.skip_attn.assign(m.blocks.size(), false);
  mask.skip_mlp.assign(m.blocks.size(), false);
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    mask.k_attn[b].assign(m.arch.heads, m.blocks[b].attn_dim);
    mask.k_mlp[b] = m.blocks[b].mlp_dim;
  }
  return mask;
}

void SubnetMask::validate(const Model& m) const {
  require(k_attn.size() == m.blocks.size() && k_mlp.size() == m.blocks.size() &&
              skip_attn.size() == m.blocks.size() && skip_mlp.size() == m.blocks.size(),
          "mask: block count mismatch");
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    require(k_attn[b].size() == m.arch.heads, "mask: head count mismatch");
    for (index_t h = 0; h < m.arch.heads; ++h)
      require(k_attn[b][h] >= 1 && k_attn[b][h] <= m.blocks[b].attn_dim,
              "mask: k_attn out of range at block " + std::to_string(b));
    require(k_mlp[b] >= 1 && k_mlp[b] <= m.blocks[b].mlp_dim,
            "mask: k_mlp out of range at block " + std::to_string(b));
  }
}

bool SubnetMask::is_full(const Model& m) const {
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    if (skip_attn[b] || skip_mlp[b]) return false;
    if (k_mlp[b] != m.blocks[b].mlp_dim) return false;
    for (index_t h = 0; h < m.arch.heads; ++h)
      if (k_attn[b][h] != m.blocks[b].attn_dim) return false;
  }
  return true;
}

namespace {

template <typename T>
void resize_cache(ActivationCacheT<T>& cache, const ModelT<T>& m, index_t batch) {
  const index_t n = m.arch.tokens();
  const index_t d = m.arch.embed_dim;
  cache.batch = batch;
  cache.blocks.resize(m.blocks.size());
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    auto& bc = cache.blocks[b];
    const index_t a = m.blocks[b].attn_dim;
    const index_t mm = m.blocks[b].mlp_dim;
    bc.x_in.assign(batch * n * d, T(0));
    bc.xhat1.assign(batch * n * d, T(0));
    bc.xhat2.assign(batch * n * d, T(0));
    bc.istd1.assign(batch * n, T(0));
    bc.istd2.assign(batch * n, T(0));
    bc.x_mid.assign(batch * n * d, T(0));
    bc.heads.resize(m.arch.heads);
    for (auto& hc : bc.heads) {
      hc.q.assign(batch * n * a, T(0));
      hc.k.assign(batch * n * a, T(0));
      hc.v.assign(batch * n * a, T(0));
      hc.attn.assign(batch * n * n, T(0));
      hc.attn_out.assign(batch * n * a, T(0));
      hc.dq.clear();
      hc.dk.clear();
      hc.dv.clear();
      hc.dattn.clear();
    }
    bc.hpre.assign(batch * n * mm, T(0));
    bc.hpost.assign(batch * n * mm, T(0));
    bc.dhpost.clear();
  }
  cache.x_out.assign(batch * n * d, T(0));
  cache.xhatf.assign(batch * d, T(0));
  cache.istdf.assign(batch, T(0));
  cache.probs.assign(batch * m.arch.num_classes, T(0));
  cache.costs.assign(batch, T(0));
  cache.populated = false;
  cache.has_grads = false;
}

// Forward for one sample. `x` scratch is [n, d]; buffers sized by caller.
template <typename T>
struct SampleScratch {
  std::vector<T> x, h1, h2, branch, tmp_nd, q, k, v, smat, oh, hpre, hpost, xf, patch;
  std::vector<T> xhat_local, istd_local;
  void resize(const ArchConfig& a, index_t max_attn, index_t max_mlp) {
    const index_t n = a.tokens();
    const index_t d = a.embed_dim;
    x.assign(n * d, T(0));
    h1.assign(n * d, T(0));
    h2.assign(n * d, T(0));
    branch.assign(n * d, T(0));
    tmp_nd.assign(n * d, T(0));
    q.assign(n * max_attn, T(0));
    k.assign(n * max_attn, T(0));
    v.assign(n * max_attn, T(0));
    smat.assign(n * n, T(0));
    oh.assign(n * max_attn, T(0));
    hpre.assign(n * max_mlp, T(0));
    hpost.assign(n * max_mlp, T(0));
    xf.assign(d, T(0));
    patch.assign(a.patch_dim(), T(0));
    xhat_local.assign(n * d, T(0));
    istd_local.assign(n, T(0));
  }
};

template <typename T>
double forward_sample(const ModelT<T>& m, const double* image, int label, index_t sample,
                      const MaskView& mv, ActivationCacheT<T>* cache, const Perturbation* probe,
                      SampleScratch<T>& sc, T* logits_out) {
  const ArchConfig& a = m.arch;
  const index_t n = a.tokens();
  const index_t d = a.embed_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(a.head_dim()));

  // embed
  for (index_t j = 0; j < d; ++j) sc.x[j] = m.cls[j] + m.pos[j];
  for (index_t p = 0; p < a.num_patches(); ++p) {
    extract_patch(image, a, p, sc.patch.data());
    T* row = sc.x.data() + (p + 1) * d;
    linalg::gemm_nt(sc.patch.data(), m.patch_w.data(), row, 1, a.patch_dim(), d);
    const T* pos = m.pos.data() + (p + 1) * d;
    for (index_t j = 0; j < d; ++j) row[j] += m.patch_b[j] + pos[j];
  }

  auto probe_here = [&](Perturbation::Site site, index_t block, index_t head) {
    return probe && probe->site == site && probe->block == block && probe->head == head &&
           probe->sample == sample;
  };

  for (index_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    auto* bc = cache ? &cache->blocks[b] : nullptr;
    if (bc) std::copy(sc.x.begin(), sc.x.end(), bc->x_in.begin() + sample * n * d);

    T* xhat1 = bc ? bc->xhat1.data() + sample * n * d : sc.xhat_local.data();
    T* istd1 = bc ? bc->istd1.data() + sample * n : sc.istd_local.data();
    for (index_t t = 0; t < n; ++t)
      layernorm_row(sc.x.data() + t * d, blk.ln1_g.data(), blk.ln1_b.data(), d,
                    sc.h1.data() + t * d, xhat1 + t * d, istd1 + t);

    if (!mv.skip_attn(b)) {
      std::fill(sc.branch.begin(), sc.branch.end(), T(0));
      for (index_t h = 0; h < a.heads; ++h) {
        const auto& hd = blk.heads[h];
        const index_t ad = blk.attn_dim;
        const index_t keep = mv.keep_attn(b, h, ad);

        auto project = [&](const std::vector<T>& w, const std::vector<T>& bias, T* out) {
          linalg::gemm_nt(sc.h1.data(), w.data(), out, n, d, ad);
          for (index_t t = 0; t < n; ++t)
            for (index_t r = 0; r < ad; ++r) out[t * ad + r] += bias[r];
          zero_tail_cols(out, n, ad, keep);
        };
        project(hd.wq, hd.bq, sc.q.data());
        project(hd.wk, hd.bk, sc.k.data());
        project(hd.wv, hd.bv, sc.v.data());
        if (probe_here(Perturbation::Site::q, b, h))
          sc.q[probe->token * ad + probe->dim] += static_cast<T>(probe->delta);
        if (probe_here(Perturbation::Site::k, b, h))
          sc.k[probe->token * ad + probe->dim] += static_cast<T>(probe->delta);
        if (probe_here(Perturbation::Site::v, b, h))
          sc.v[probe->token * ad + probe->dim] += static_cast<T>(probe->delta);
        if (bc) {
          auto& hc = bc->heads[h];
          std::copy_n(sc.q.data(), n * ad, hc.q.begin() + sample * n * ad);
          std::copy_n(sc.k.data(), n * ad, hc.k.begin() + sample * n * ad);
          std::copy_n(sc.v.data(), n * ad, hc.v.begin() + sample * n * ad);
        }

        linalg::gemm_nt(sc.q.data(), sc.k.data(), sc.smat.data(), n, ad, n);
        for (index_t i = 0; i < n * n; ++i) sc.smat[i] *= scale;
        for (index_t t = 0; t < n; ++t) softmax_row(sc.smat.data() + t * n, n);
        if (probe_here(Perturbation::Site::attn, b, h))
          sc.smat[probe->token * n + probe->dim] += static_cast<T>(probe->delta);
        if (bc) std::copy_n(sc.smat.data(), n * n, bc->heads[h].attn.begin() + sample * n * n);

        linalg::gemm_nn(sc.smat.data(), sc.v.data(), sc.oh.data(), n, n, ad);
        if (bc)
          std::copy_n(sc.oh.data(), n * ad, bc->heads[h].attn_out.begin() + sample * n * ad);

        linalg::gemm_nt(sc.oh.data(), hd.wo.data(), sc.tmp_nd.data(), n, ad, d);
        for (index_t i = 0; i < n * d; ++i) sc.branch[i] += sc.tmp_nd[i];
      }
      for (index_t t = 0; t < n; ++t)
        for (index_t j = 0; j < d; ++j) sc.x[t * d + j] += sc.branch[t * d + j] + blk.bo[j];
    }
    if (bc) std::copy(sc.x.begin(), sc.x.end(), bc->x_mid.begin() + sample * n * d);

    T* xhat2 = bc ? bc->xhat2.data() + sample * n * d : sc.xhat_local.data();
    T* istd2 = bc ? bc->istd2.data() + sample * n : sc.istd_local.data();
    for (index_t t = 0; t < n; ++t)
      layernorm_row(sc.x.data() + t * d, blk.ln2_g.data(), blk.ln2_b.data(), d,
                    sc.h2.data() + t * d, xhat2 + t * d, istd2 + t);

    if (!mv.skip_mlp(b)) {
      const index_t mm = blk.mlp_dim;
      const index_t keep = mv.keep_mlp(b, mm);
      linalg::gemm_nt(sc.h2.data(), blk.w1.data(), sc.hpre.data(), n, d, mm);
      for (index_t t = 0; t < n; ++t)
        for (index_t r = 0; r < mm; ++r) sc.hpre[t * mm + r] += blk.b1[r];
      for (index_t i = 0; i < n * mm; ++i) sc.hpost[i] = gelu(sc.hpre[i]);
      zero_tail_cols(sc.hpost.data(), n, mm, keep);
      if (probe_here(Perturbation::Site::mlp_hidden, b, 0))
        sc.hpost[probe->token * mm + probe->dim] += static_cast<T>(probe->delta);
      if (bc) {
        std::copy_n(sc.hpre.data(), n * mm, bc->hpre.begin() + sample * n * mm);
        std::copy_n(sc.hpost.data(), n * mm, bc->hpost.begin() + sample * n * mm);
      }
      linalg::gemm_nt(sc.hpost.data(), blk.w2.data(), sc.tmp_nd.data(), n, mm, d);
      for (index_t t = 0; t < n; ++t)
        for (index_t j = 0; j < d; ++j) sc.x[t * d + j] += sc.tmp_nd[t * d + j] + blk.b2[j];
    }

    for (index_t i = 0; i < n * d; ++i)
      if (!std::isfinite(static_cast<double>(sc.x[i])))
        throw NumericalError("non-finite activation after block " + std::to_string(b));
  }

  if (cache) std::copy(sc.x.begin(), sc.x.end(), cache->x_out.begin() + sample * n * d);

  // classifier reads the class token only
  T* xhatf = cache ? cache->xhatf.data() + sample * d : sc.xhat_local.data();
  T istdf_local;
  T* istdf = cache ? cache->istdf.data() + sample : &istdf_local;
  layernorm_row(sc.x.data(), m.lnf_g.data(), m.lnf_b.data(), d, sc.xf.data(), xhatf, istdf);

  const index_t C = a.num_classes;
  linalg::gemm_nt(sc.xf.data(), m.head_w.data(), logits_out, 1, d, C);
  for (index_t c = 0; c < C; ++c) logits_out[c] += m.head_b[c];

  T mx = logits_out[0];
  for (index_t c = 1; c < C; ++c) mx = std::max(mx, logits_out[c]);
  T sum = T(0);
  for (index_t c = 0; c < C; ++c) sum += std::exp(logits_out[c] - mx);
  const T lse = mx + std::log(sum);
  if (cache) {
    T* probs = cache->probs.data() + sample * C;
    for (index_t c = 0; c < C; ++c) probs[c] = std::exp(logits_out[c] - lse);
  }
  return static_cast<double>(lse - logits_out[label]);
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ModelT<T>& m, const Batch& batch, const SubnetMask* mask,
                         ActivationCacheT<T>* cache, const Perturbation* probe) {
  const ArchConfig& a = m.arch;
  require(batch.count > 0, "forward: empty batch");
  require(batch.pixels == a.channels * a.image_size * a.image_size,
          "forward: image size does not match arch");
  require(batch.images.size() == batch.count * batch.pixels &&
              batch.labels.size() == batch.count,
          "forward: inconsistent batch buffers");
  for (int lb : batch.labels)
    require(lb >= 0 && static_cast<index_t>(lb) < a.num_classes, "forward: label out of range");
  if (mask) {
    require(mask->k_attn.size() == m.blocks.size() && mask->k_mlp.size() == m.blocks.size() &&
                mask->skip_attn.size() == m.blocks.size() &&
                mask->skip_mlp.size() == m.blocks.size(),
            "mask: block count mismatch");
    for (index_t b = 0; b < m.blocks.size(); ++b) {
      require(mask->k_attn[b].size() == a.heads, "mask: head count mismatch");
      for (index_t h = 0; h < a.heads; ++h)
        require(mask->k_attn[b][h] >= 1 && mask->k_attn[b][h] <= m.blocks[b].attn_dim,
                "mask: k_attn out of range at block " + std::to_string(b));
      require(mask->k_mlp[b] >= 1 && mask->k_mlp[b] <= m.blocks[b].mlp_dim,
              "mask: k_mlp out of range at block " + std::to_string(b));
    }
  }
  MaskView mv{mask};

  if (cache) resize_cache(*cache, m, batch.count);
  ForwardResult<T> result;
  result.logits.assign(batch.count * a.num_classes, T(0));
  std::vector<double> costs(batch.count, 0.0);

  index_t max_attn = 1, max_mlp = 1;
  for (const auto& blk : m.blocks) {
    max_attn = std::max(max_attn, blk.attn_dim);
    max_mlp = std::max(max_mlp, blk.mlp_dim);
  }

  parallel_chunks(batch.count, kChunk, [&](index_t, index_t begin, index_t end) {
    SampleScratch<T> sc;
    sc.resize(a, max_attn, max_mlp);
    for (index_t s = begin; s < end; ++s) {
      costs[s] = forward_sample(m, batch.images.data() + s * batch.pixels, batch.labels[s], s, mv,
                                cache, probe, sc, result.logits.data() + s * a.num_classes);
    }
  });

  double total = 0.0;
  for (index_t s = 0; s < batch.count; ++s) total += costs[s];
  result.cost = total / static_cast<double>(batch.count);
  if (cache) {
    for (index_t s = 0; s < batch.count; ++s) cache->costs[s] = static_cast<T>(costs[s]);
    cache->populated = true;
  }
  return result;
}

template ForwardResult<double> forward<double>(const ModelT<double>&, const Batch&,
                                               const SubnetMask*, ActivationCacheT<double>*,
                                               const Perturbation*);
template ForwardResult<float> forward<float>(const ModelT<float>&, const Batch&,
                                             const SubnetMask*, ActivationCacheT<float>*,
                                             const Perturbation*);

namespace {

// Backward for one sample into a per-chunk grad buffer.
void backward_sample(const Model& m, const Batch& batch, index_t sample, const MaskView& mv,
                     ActivationCache& cache, Model& g, double inv_batch) {
  const ArchConfig& a = m.arch;
  const index_t n = a.tokens();
  const index_t d = a.embed_dim;
  const index_t C = a.num_classes;
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.head_dim()));

  std::vector<double> dx(n * d, 0.0);
  std::vector<double> dlogits(C);
  const double* probs = cache.probs.data() + sample * C;
  for (index_t c = 0; c < C; ++c) dlogits[c] = probs[c] * inv_batch;
  dlogits[batch.labels[sample]] -= inv_batch;

  // classifier head + final layernorm (class token only)
  const double* xhatf = cache.xhatf.data() + sample * d;
  std::vector<double> dxf(d, 0.0);
  std::vector<double> xf(d);
  for (index_t j = 0; j < d; ++j) xf[j] = m.lnf_g[j] * xhatf[j] + m.lnf_b[j];
  for (index_t c = 0; c < C; ++c) {
    g.head_b[c] += dlogits[c];
    const double* wrow = m.head_w.data() + c * d;
    double* gw = g.head_w.data() + c * d;
    for (index_t j = 0; j < d; ++j) {
      gw[j] += dlogits[c] * xf[j];
      dxf[j] += dlogits[c] * wrow[j];
    }
  }
  layernorm_row_backward(dxf.data(), m.lnf_g.data(), xhatf, cache.istdf[sample], d, dx.data(),
                         g.lnf_g.data(), g.lnf_b.data());

  index_t scratch = n * d;
  for (const auto& blk : m.blocks)
    scratch = std::max({scratch, blk.mlp_dim * d, blk.attn_dim * d});
  std::vector<double> dtmp(scratch), dh(n * d), h_rec(n * d);

  for (index_t bi = m.blocks.size(); bi-- > 0;) {
    const auto& blk = m.blocks[bi];
    auto& bc = cache.blocks[bi];
    auto& gblk = g.blocks[bi];
    const index_t mm = blk.mlp_dim;
    const index_t ad = blk.attn_dim;

    // ---- MLP branch ----
    if (!mv.skip_mlp(bi)) {
      const index_t keep = mv.keep_mlp(bi, mm);
      const double* hpre = bc.hpre.data() + sample * n * mm;
      const double* hpost = bc.hpost.data() + sample * n * mm;
      const double* xhat2 = bc.xhat2.data() + sample * n * d;
      const double* istd2 = bc.istd2.data() + sample * n;

      for (index_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (index_t t = 0; t < n; ++t) acc += dx[t * d + j];
        gblk.b2[j] += acc;
      }
      std::vector<double> dhpost(n * mm), dhpre(n * mm);
      // dW2 += dx^T hpost ; dhpost = dx W2
      for (index_t j = 0; j < d; ++j) {
        double* gw2 = gblk.w2.data() + j * mm;
        for (index_t t = 0; t < n; ++t) {
          const double dyv = dx[t * d + j];
          const double* hp = hpost + t * mm;
          for (index_t r = 0; r < mm; ++r) gw2[r] += dyv * hp[r];
        }
      }
      linalg::gemm_nn(dx.data(), blk.w2.data(), dhpost.data(), n, d, mm);
      zero_tail_cols(dhpost.data(), n, mm, keep);
      std::copy(dhpost.begin(), dhpost.end(), bc.dhpost.begin() + sample * n * mm);

      for (index_t i = 0; i < n * mm; ++i) dhpre[i] = dhpost[i] * gelu_grad(hpre[i]);
      for (index_t r = 0; r < mm; ++r) {
        double acc = 0.0;
        for (index_t t = 0; t < n; ++t) acc += dhpre[t * mm + r];
        gblk.b1[r] += acc;
      }
      // recompute h2 from xhat2
      for (index_t t = 0; t < n; ++t)
        for (index_t j = 0; j < d; ++j)
          h_rec[t * d + j] = blk.ln2_g[j] * xhat2[t * d + j] + blk.ln2_b[j];
      linalg::gemm_tn(dhpre.data(), h_rec.data(), dtmp.data(), mm, n, d);
      for (index_t i = 0; i < mm * d; ++i) gblk.w1[i] += dtmp[i];
      linalg::gemm_nn(dhpre.data(), blk.w1.data(), dh.data(), n, mm, d);
      for (index_t t = 0; t < n; ++t)
        layernorm_row_backward(dh.data() + t * d, blk.ln2_g.data(), xhat2 + t * d, istd2[t], d,
                               dx.data() + t * d, gblk.ln2_g.data(), gblk.ln2_b.data());
    }

    // ---- MHSA branch ----
    if (!mv.skip_attn(bi)) {
      const double* xhat1 = bc.xhat1.data() + sample * n * d;
      const double* istd1 = bc.istd1.data() + sample * n;
      for (index_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (index_t t = 0; t < n; ++t) acc += dx[t * d + j];
        gblk.bo[j] += acc;
      }
      std::fill(dh.begin(), dh.end(), 0.0);  // grad wrt h1
      std::vector<double> doh(n * ad), dA(n * n), dS(n * n), dq(n * ad), dk(n * ad), dv(n * ad);
      for (index_t h = 0; h < a.heads; ++h) {
        const auto& hd = blk.heads[h];
        auto& ghd = gblk.heads[h];
        auto& hc = bc.heads[h];
        const index_t keep = mv.keep_attn(bi, h, ad);
        const double* q = hc.q.data() + sample * n * ad;
        const double* k = hc.k.data() + sample * n * ad;
        const double* v = hc.v.data() + sample * n * ad;
        const double* A = hc.attn.data() + sample * n * n;
        const double* oh = hc.attn_out.data() + sample * n * ad;

        linalg::gemm_nn(dx.data(), hd.wo.data(), doh.data(), n, d, ad);
        linalg::gemm_tn(dx.data(), oh, dtmp.data(), d, n, ad);
        for (index_t i = 0; i < d * ad; ++i) ghd.wo[i] += dtmp[i];

        linalg::gemm_nt(doh.data(), v, dA.data(), n, ad, n);
        linalg::gemm_tn(A, doh.data(), dv.data(), n, n, ad);
        zero_tail_cols(dv.data(), n, ad, keep);
        std::copy(dA.begin(), dA.end(), hc.dattn.begin() + sample * n * n);

        for (index_t t = 0; t < n; ++t) {
          const double* arow = A + t * n;
          const double* darow = dA.data() + t * n;
          double dot = 0.0;
          for (index_t j = 0; j < n; ++j) dot += arow[j] * darow[j];
          double* dsrow = dS.data() + t * n;
          for (index_t j = 0; j < n; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
        }
        linalg::gemm_nn(dS.data(), k, dq.data(), n, n, ad);
        linalg::gemm_tn(dS.data(), q, dk.data(), n, n, ad);
        for (index_t i = 0; i < n * ad; ++i) {
          dq[i] *= scale;
          dk[i] *= scale;
        }
        zero_tail_cols(dq.data(), n, ad, keep);
        zero_tail_cols(dk.data(), n, ad, keep);
        std::copy(dq.begin(), dq.end(), hc.dq.begin() + sample * n * ad);
        std::copy(dk.begin(), dk.end(), hc.dk.begin() + sample * n * ad);
        std::copy(dv.begin(), dv.end(), hc.dv.begin() + sample * n * ad);

        for (index_t t = 0; t < n; ++t)
          for (index_t j = 0; j < d; ++j)
            h_rec[t * d + j] = blk.ln1_g[j] * xhat1[t * d + j] + blk.ln1_b[j];
        auto add_proj_grads = [&](const std::vector<double>& dp, std::vector<double>& gw,
                                  std::vector<double>& gb, const std::vector<double>& w) {
          linalg::gemm_tn(dp.data(), h_rec.data(), dtmp.data(), ad, n, d);
          for (index_t i = 0; i < ad * d; ++i) gw[i] += dtmp[i];
          for (index_t r = 0; r < ad; ++r) {
            double acc = 0.0;
            for (index_t t = 0; t < n; ++t) acc += dp[t * ad + r];
            gb[r] += acc;
          }
          linalg::gemm_nn(dp.data(), w.data(), dtmp.data(), n, ad, d);
          for (index_t i = 0; i < n * d; ++i) dh[i] += dtmp[i];
        };
        add_proj_grads(dq, ghd.wq, ghd.bq, hd.wq);
        add_proj_grads(dk, ghd.wk, ghd.bk, hd.wk);
        add_proj_grads(dv, ghd.wv, ghd.bv, hd.wv);
      }
      for (index_t t = 0; t < n; ++t)
        layernorm_row_backward(dh.data() + t * d, blk.ln1_g.data(), xhat1 + t * d, istd1[t], d,
                               dx.data() + t * d, gblk.ln1_g.data(), gblk.ln1_b.data());
    }
  }

  // embeddings
  for (index_t t = 0; t < n; ++t)
    for (index_t j = 0; j < d; ++j) g.pos[t * d + j] += dx[t * d + j];
  for (index_t j = 0; j < d; ++j) g.cls[j] += dx[j];
  std::vector<double> patch(a.patch_dim());
  const double* image = batch.images.data() + sample * batch.pixels;
  for (index_t p = 0; p < a.num_patches(); ++p) {
    extract_patch(image, a, p, patch.data());
    const double* drow = dx.data() + (p + 1) * d;
    for (index_t j = 0; j < d; ++j) {
      g.patch_b[j] += drow[j];
      double* gw = g.patch_w.data() + j * a.patch_dim();
      for (index_t i = 0; i < a.patch_dim(); ++i) gw[i] += drow[j] * patch[i];
    }
  }
}

}  // namespace

void backward(const Model& m, const Batch& batch, const SubnetMask* mask, ActivationCache& cache,
              Model& grad) {
  require(cache.populated && cache.batch == batch.count,
          "backward: cache missing or from a different batch");
  MaskView mv{mask};
  const double inv_batch = 1.0 / static_cast<double>(batch.count);

  // pre-size grad slots in the cache so per-sample writes are disjoint
  const index_t n = m.arch.tokens();
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    auto& bc = cache.blocks[b];
    if (!mv.skip_mlp(b) && bc.dhpost.empty())
      bc.dhpost.assign(cache.batch * n * m.blocks[b].mlp_dim, 0.0);
    for (auto& hc : bc.heads) {
      if (!mv.skip_attn(b) && hc.dq.empty()) {
        const index_t ad = m.blocks[b].attn_dim;
        hc.dq.assign(cache.batch * n * ad, 0.0);
        hc.dk.assign(cache.batch * n * ad, 0.0);
        hc.dv.assign(cache.batch * n * ad, 0.0);
        hc.dattn.assign(cache.batch * n * n, 0.0);
      }
    }
  }

  const index_t nchunks = (batch.count + kChunk - 1) / kChunk;
  std::vector<Model> partials(nchunks);
  parallel_chunks(batch.count, kChunk, [&](index_t ci, index_t begin, index_t end) {
    partials[ci] = clone_zeroed(m);
    for (index_t s = begin; s < end; ++s)
      backward_sample(m, batch, s, mv, cache, partials[ci], inv_batch);
  });

  grad = clone_zeroed(m);
  std::vector<std::vector<double>*> dst_tensors;
  for_each_tensor(grad, [&](const std::string&, std::vector<double>& v,
                            const std::vector<index_t>&) { dst_tensors.push_back(&v); });
  for (index_t ci = 0; ci < nchunks; ++ci) {
    std::vector<const std::vector<double>*> src_tensors;
    for_each_tensor(partials[ci], [&](const std::string&, const std::vector<double>& v,
                                      const std::vector<index_t>&) { src_tensors.push_back(&v); });
    for (index_t ti = 0; ti < dst_tensors.size(); ++ti) {
      auto& dst = *dst_tensors[ti];
      const auto& src = *src_tensors[ti];
      for (index_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  cache.has_grads = true;
}

double skip_module_forward(const Model& m, const Batch& batch, const ModuleId& module,
                           const SubnetMask* mask) {
  require(module.block < m.blocks.size(), "skip_module_forward: unknown module " +
                                              to_string(module));
  SubnetMask sm = mask ? *mask : SubnetMask::full(m);
  if (module.kind == ModuleKind::mhsa)
    sm.skip_attn[module.block] = true;
  else
    sm.skip_mlp[module.block] = true;
  return forward(m, batch, &sm, static_cast<ActivationCache*>(nullptr)).cost;
}

namespace {
template <typename T>
double accuracy_impl(const ModelT<T>& m, const Batch& batch, const SubnetMask* mask) {
  auto res = forward(m, batch, mask, static_cast<ActivationCacheT<T>*>(nullptr));
  const index_t C = m.arch.num_classes;
  index_t correct = 0;
  for (index_t s = 0; s < batch.count; ++s) {
    const T* row = res.logits.data() + s * C;
    index_t arg = 0;
    for (index_t c = 1; c < C; ++c)
      if (row[c] > row[arg]) arg = c;
    if (static_cast<int>(arg) == batch.labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.count);
}
}  // namespace

double accuracy(const Model& m, const Batch& batch, const SubnetMask* mask) {
  return accuracy_impl(m, batch, mask);
}
double accuracy_f32(const ModelF32& m, const Batch& batch, const SubnetMask* mask) {
  return accuracy_impl(m, batch, mask);
}

}  // namespace skd::vit
