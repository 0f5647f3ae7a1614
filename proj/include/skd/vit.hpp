#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/rng.hpp"

namespace skd::vit {

struct ArchConfig {
  index_t image_size = 32;
  index_t patch_size = 8;
  index_t channels = 1;
  index_t depth = 4;
  index_t embed_dim = 64;   // d
  index_t heads = 4;        // H
  index_t mlp_hidden = 128; // d'
  index_t num_classes = 8;

  index_t head_dim() const { return embed_dim / heads; }
  index_t patches_per_side() const { return image_size / patch_size; }
  index_t num_patches() const { return patches_per_side() * patches_per_side(); }
  index_t tokens() const { return num_patches() + 1; }  // class token first
  index_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

// Module addressing: one MHSA or MLP inside one block.
enum class ModuleKind : std::uint8_t { mhsa = 0, mlp = 1 };

struct ModuleId {
  index_t block = 0;
  ModuleKind kind = ModuleKind::mhsa;
  bool operator==(const ModuleId&) const = default;
};

std::string to_string(const ModuleId& id);

template <typename T>
struct HeadParamsT {
  std::vector<T> wq, wk, wv;  // [attn_dim, d]
  std::vector<T> bq, bk, bv;  // [attn_dim]
  std::vector<T> wo;          // [d, attn_dim]
};

template <typename T>
struct BlockParamsT {
  index_t attn_dim = 0;  // kept per-head dims (== head_dim unless extracted)
  index_t mlp_dim = 0;   // kept hidden dims (== mlp_hidden unless extracted)
  std::vector<T> ln1_g, ln1_b, ln2_g, ln2_b;  // [d]
  std::vector<HeadParamsT<T>> heads;
  std::vector<T> bo;       // [d], shared across heads
  std::vector<T> w1, b1;   // [mlp_dim, d], [mlp_dim]
  std::vector<T> w2, b2;   // [d, mlp_dim], [d]
};

template <typename T>
struct ModelT {
  ArchConfig arch;
  std::vector<T> patch_w, patch_b;  // [d, patch_dim], [d]
  std::vector<T> cls;               // [d]
  std::vector<T> pos;               // [tokens, d]
  std::vector<BlockParamsT<T>> blocks;
  std::vector<T> lnf_g, lnf_b;      // [d]
  std::vector<T> head_w, head_b;    // [classes, d], [classes]
};

using Model = ModelT<double>;
using ModelF32 = ModelT<float>;

// Zero-initialized parameter set with the given arch (also used as a gradient buffer).
Model make_model(const ArchConfig& arch);
Model init_model(const ArchConfig& arch, Rng& rng);  // trunc-normal(0.02) weights
ModelF32 cast_f32(const Model& m);

void validate_shapes(const Model& m);
index_t param_count(const Model& m);

// Visit every parameter tensor as (name, data, shape). Order is fixed and is
// the checkpoint directory order.
template <typename T, typename F>
void for_each_tensor(ModelT<T>& m, F&& f);
template <typename T, typename F>
void for_each_tensor(const ModelT<T>& m, F&& f);

// Prefix-keep sub-network selection: per block/head kept leading dims, plus
// whole-module skip flags.
struct SubnetMask {
  std::vector<std::vector<index_t>> k_attn;  // [block][head], in [1, attn_dim]
  std::vector<index_t> k_mlp;                // [block], in [1, mlp_dim]
  std::vector<bool> skip_attn, skip_mlp;     // [block]

  static SubnetMask full(const Model& m);
  void validate(const Model& m) const;
  bool is_full(const Model& m) const;
};

struct Batch {
  index_t count = 0;
  index_t pixels = 0;             // per image
  std::vector<double> images;     // [count, pixels]
  std::vector<int> labels;        // [count]
};

// Finite-difference probe point: add `delta` to one cached activation entry
// during the forward pass and keep going.
struct Perturbation {
  enum class Site { q, k, v, attn, mlp_hidden };
  Site site = Site::q;
  index_t block = 0, head = 0, sample = 0, token = 0, dim = 0;
  double delta = 0.0;
};

template <typename T>
struct HeadCacheT {
  std::vector<T> q, k, v;      // [B, n, attn_dim], post-mask
  std::vector<T> attn;         // [B, n, n]
  std::vector<T> attn_out;     // [B, n, attn_dim]
  std::vector<T> dq, dk, dv;   // loss grads, filled by backward
  std::vector<T> dattn;
};

template <typename T>
struct BlockCacheT {
  std::vector<T> x_in;           // [B, n, d]
  std::vector<T> xhat1, xhat2;   // [B, n, d]
  std::vector<T> istd1, istd2;   // [B, n]
  std::vector<T> x_mid;          // [B, n, d]
  std::vector<HeadCacheT<T>> heads;
  std::vector<T> hpre, hpost;    // [B, n, mlp_dim], hpost is post-mask
  std::vector<T> dhpost;
};

template <typename T>
struct ActivationCacheT {
  index_t batch = 0;
  bool populated = false;
  bool has_grads = false;
  std::vector<BlockCacheT<T>> blocks;
  std::vector<T> x_out;          // [B, n, d] after last block
  std::vector<T> xhatf, istdf;   // final layernorm (class token row used by head)
  std::vector<T> probs;          // [B, classes]
  std::vector<T> costs;          // [B], per-sample cross-entropy
};

using ActivationCache = ActivationCacheT<double>;

template <typename T>
struct ForwardResult {
  std::vector<T> logits;  // [B, classes]
  double cost = 0.0;      // mean cross-entropy
};

// Forward pass. mask == nullptr means the full network; with a full mask the
// output is bit-identical to no mask. cache may be null for inference.
template <typename T>
ForwardResult<T> forward(const ModelT<T>& m, const Batch& batch, const SubnetMask* mask,
                         ActivationCacheT<T>* cache, const Perturbation* probe = nullptr);

template <typename T>
ForwardResult<T> forward(const ModelT<T>& m, const Batch& batch,
                         const SubnetMask* mask = nullptr) {
  return forward(m, batch, mask, static_cast<ActivationCacheT<T>*>(nullptr));
}

// Analytic gradients of the mean cross-entropy w.r.t. every parameter (into
// `grad`, which must have the model's shapes and is zeroed first) and every
// cached activation (into cache.d*). Requires the cache populated by forward
// on the same batch/mask.
void backward(const Model& m, const Batch& batch, const SubnetMask* mask, ActivationCache& cache,
              Model& grad);

// Cost with one residual branch disabled.
double skip_module_forward(const Model& m, const Batch& batch, const ModuleId& module,
                           const SubnetMask* mask = nullptr);

double accuracy(const Model& m, const Batch& batch, const SubnetMask* mask = nullptr);
double accuracy_f32(const ModelF32& m, const Batch& batch, const SubnetMask* mask = nullptr);

// ---- implementation of the tensor visitor ----

namespace detail {
template <typename M, typename F>
void visit_tensors(M& m, F&& f) {
  const auto& a = m.arch;
  using shape_t = std::vector<index_t>;
  f("patch.w", m.patch_w, shape_t{a.embed_dim, a.patch_dim()});
  f("patch.b", m.patch_b, shape_t{a.embed_dim});
  f("cls", m.cls, shape_t{a.embed_dim});
  f("pos", m.pos, shape_t{a.tokens(), a.embed_dim});
  for (index_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    f(p + "ln1.g", blk.ln1_g, shape_t{a.embed_dim});
    f(p + "ln1.b", blk.ln1_b, shape_t{a.embed_dim});
    for (index_t h = 0; h < blk.heads.size(); ++h) {
      auto& hd = blk.heads[h];
      const std::string q = p + "attn." + std::to_string(h) + ".";
      f(q + "wq", hd.wq, shape_t{blk.attn_dim, a.embed_dim});
      f(q + "bq", hd.bq, shape_t{blk.attn_dim});
      f(q + "wk", hd.wk, shape_t{blk.attn_dim, a.embed_dim});
      f(q + "bk", hd.bk, shape_t{blk.attn_dim});
      f(q + "wv", hd.wv, shape_t{blk.attn_dim, a.embed_dim});
      f(q + "bv", hd.bv, shape_t{blk.attn_dim});
      f(q + "wo", hd.wo, shape_t{a.embed_dim, blk.attn_dim});
    }
    f(p + "attn.bo", blk.bo, shape_t{a.embed_dim});
    f(p + "ln2.g", blk.ln2_g, shape_t{a.embed_dim});
    f(p + "ln2.b", blk.ln2_b, shape_t{a.embed_dim});
    f(p + "mlp.w1", blk.w1, shape_t{blk.mlp_dim, a.embed_dim});
    f(p + "mlp.b1", blk.b1, shape_t{blk.mlp_dim});
    f(p + "mlp.w2", blk.w2, shape_t{a.embed_dim, blk.mlp_dim});
    f(p + "mlp.b2", blk.b2, shape_t{a.embed_dim});
  }
  f("final_ln.g", m.lnf_g, shape_t{a.embed_dim});
  f("final_ln.b", m.lnf_b, shape_t{a.embed_dim});
  f("head.w", m.head_w, shape_t{a.num_classes, a.embed_dim});
  f("head.b", m.head_b, shape_t{a.num_classes});
}
}  // namespace detail

template <typename T, typename F>
void for_each_tensor(ModelT<T>& m, F&& f) {
  detail::visit_tensors(m, std::forward<F>(f));
}
template <typename T, typename F>
void for_each_tensor(const ModelT<T>& m, F&& f) {
  detail::visit_tensors(m, std::forward<F>(f));
}

}  // namespace skd::vit
