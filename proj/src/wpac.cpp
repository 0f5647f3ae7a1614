#include "skd/wpac.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "skd/importance.hpp"
#include "skd/rng.hpp"

namespace skd::wpac {

CovarianceAccumulator::CovarianceAccumulator(index_t dim)
    : dim_(dim), weighted_outer_(dim * dim, 0.0), weighted_sum_(dim, 0.0), raw_sum_(dim, 0.0) {
  require(dim >= 1, "covariance: dimension must be >= 1");
}

void CovarianceAccumulator::accumulate(const double* features, const double* weights,
                                       index_t rows) {
  for (index_t i = 0; i < rows; ++i) {
    const double w = weights[i];
    require(w >= 0.0 && std::isfinite(w), "covariance: weights must be non-negative and finite");
    const double* x = features + i * dim_;
    for (index_t a = 0; a < dim_; ++a) {
      raw_sum_[a] += x[a];
      weighted_sum_[a] += w * x[a];
      const double wxa = w * x[a];
      double* row = weighted_outer_.data() + a * dim_;
      for (index_t b = 0; b < dim_; ++b) row[b] += wxa * x[b];
    }
    total_weight_ += w;
  }
  count_ += rows;
}

void CovarianceAccumulator::accumulate(const std::vector<double>& features,
                                       const std::vector<double>& weights) {
  require(weights.size() * dim_ == features.size(), "covariance: feature/weight count mismatch");
  accumulate(features.data(), weights.data(), weights.size());
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
  require(other.dim_ == dim_, "covariance: merging accumulators of different dims");
  count_ += other.count_;
  total_weight_ += other.total_weight_;
  for (index_t i = 0; i < weighted_outer_.size(); ++i) weighted_outer_[i] += other.weighted_outer_[i];
  for (index_t i = 0; i < dim_; ++i) {
    weighted_sum_[i] += other.weighted_sum_[i];
    raw_sum_[i] += other.raw_sum_[i];
  }
}

linalg::Matrix CovarianceAccumulator::finalize() const {
  require(count_ >= 2, "covariance: needs at least 2 tokens");
  // sum_i w_i (x_i - mu)(x_i - mu)^T with the unweighted mean mu, expanded so
  // accumulation stays single-pass
  const double inv_n1 = 1.0 / static_cast<double>(count_ - 1);
  std::vector<double> mu(dim_);
  for (index_t a = 0; a < dim_; ++a) mu[a] = raw_sum_[a] / static_cast<double>(count_);
  linalg::Matrix corr(dim_, dim_);
  for (index_t a = 0; a < dim_; ++a)
    for (index_t b = 0; b < dim_; ++b) {
      const double v = weighted_outer_[a * dim_ + b] - mu[a] * weighted_sum_[b] -
                       weighted_sum_[a] * mu[b] + total_weight_ * mu[a] * mu[b];
      corr(a, b) = v * inv_n1;
    }
  return corr;
}

const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::vo: return "vo";
    case TransformKind::qk: return "qk";
    default: return "mlp-sort";
  }
}

const char* to_string(Weighting w) {
  switch (w) {
    case Weighting::importance: return "importance";
    case Weighting::uniform: return "uniform";
    case Weighting::class_token: return "class_token";
    default: return "random_tokens";
  }
}

Weighting weighting_from_string(const std::string& s) {
  if (s == "importance") return Weighting::importance;
  if (s == "uniform") return Weighting::uniform;
  if (s == "class_token" || s == "class") return Weighting::class_token;
  if (s == "random_tokens" || s == "rand") return Weighting::random_tokens;
  throw ValidationError("unknown weighting '" + s + "'");
}

TransformMatrix compute_transform(const linalg::Matrix& corr, TransformKind kind, double ridge) {
  require(kind != TransformKind::mlp_sort, "compute_transform: mlp-sort comes from rankings");
  linalg::Matrix work = corr;
  if (ridge != 0.0)
    for (index_t i = 0; i < work.rows(); ++i) work(i, i) += ridge;
  auto dec = linalg::sym_eig(work);
  TransformMatrix t;
  t.kind = kind;
  t.w = std::move(dec.eigenvectors);
  t.spectrum = std::move(dec.eigenvalues);
  t.max_eigenvalue = t.spectrum.front();
  t.min_eigenvalue = t.spectrum.back();
  t.ill_conditioned =
      t.min_eigenvalue < 1e-12 * std::max(t.max_eigenvalue, 0.0) || t.min_eigenvalue < -1e-9;
  const double orth = linalg::orthogonality_error(t.w);
  if (orth > 1e-9)
    throw NumericalError("transform basis lost orthogonality: " + std::to_string(orth));
  return t;
}

namespace {

// sum of |grad * act| across the feature dims of one cached projection
void add_rowwise_scores(const std::vector<double>& act, const std::vector<double>& grad,
                        index_t rows, index_t width, std::vector<double>& out) {
  for (index_t t = 0; t < rows; ++t) {
    const double* a = act.data() + t * width;
    const double* g = grad.data() + t * width;
    double s = 0.0;
    for (index_t j = 0; j < width; ++j) s += std::abs(a[j] * g[j]);
    out[t] += s;
  }
}

}  // namespace

std::vector<double> token_weights_v(const vit::ActivationCache& cache, index_t block,
                                    index_t head) {
  require(cache.populated && cache.has_grads, "token_weights: cache is missing gradients");
  const auto& hc = cache.blocks[block].heads[head];
  const index_t rows = cache.blocks[block].istd1.size();  // B*n
  const index_t width = hc.v.size() / rows;
  std::vector<double> w(rows, 0.0);
  add_rowwise_scores(hc.v, hc.dv, rows, width, w);
  return w;
}

std::vector<double> token_weights_qk(const vit::ActivationCache& cache, index_t block,
                                     index_t head) {
  require(cache.populated && cache.has_grads, "token_weights: cache is missing gradients");
  const auto& hc = cache.blocks[block].heads[head];
  const index_t rows = cache.blocks[block].istd1.size();
  const index_t width = hc.q.size() / rows;
  std::vector<double> w(rows, 0.0);
  add_rowwise_scores(hc.q, hc.dq, rows, width, w);
  add_rowwise_scores(hc.k, hc.dk, rows, width, w);
  return w;
}

namespace {

void left_multiply(std::vector<double>& w, index_t rows, index_t cols, const linalg::Matrix& t) {
  // w <- t * w, t is rows x rows
  std::vector<double> out(rows * cols, 0.0);
  linalg::gemm_nn(t.data(), w.data(), out.data(), rows, rows, cols);
  w = std::move(out);
}

void left_multiply_vec(std::vector<double>& b, const linalg::Matrix& t) {
  std::vector<double> out(b.size(), 0.0);
  for (index_t i = 0; i < b.size(); ++i) {
    double acc = 0.0;
    for (index_t j = 0; j < b.size(); ++j) acc += t(i, j) * b[j];
    out[i] = acc;
  }
  b = std::move(out);
}

void right_multiply_transpose(std::vector<double>& w, index_t rows, index_t cols,
                              const linalg::Matrix& t) {
  // w <- w * t^T, t is cols x cols
  std::vector<double> out(rows * cols, 0.0);
  linalg::gemm_nt(w.data(), t.data(), out.data(), rows, cols, cols);
  w = std::move(out);
}

}  // namespace

void apply_vo(vit::HeadParamsT<double>& head, const TransformMatrix& t) {
  require(t.kind == TransformKind::vo, "apply_vo: wrong transform kind");
  const index_t a = t.w.rows();
  require(head.bv.size() == a, "apply_vo: dimension mismatch");
  const index_t d = head.wv.size() / a;
  left_multiply(head.wv, a, d, t.w);
  left_multiply_vec(head.bv, t.w);
  right_multiply_transpose(head.wo, d, a, t.w);
}

void apply_qk(vit::HeadParamsT<double>& head, const TransformMatrix& t) {
  require(t.kind == TransformKind::qk, "apply_qk: wrong transform kind");
  const index_t a = t.w.rows();
  require(head.bq.size() == a, "apply_qk: dimension mismatch");
  const index_t d = head.wq.size() / a;
  left_multiply(head.wq, a, d, t.w);
  left_multiply_vec(head.bq, t.w);
  left_multiply(head.wk, a, d, t.w);
  left_multiply_vec(head.bk, t.w);
}

TransformMatrix apply_mlp_sort(vit::BlockParamsT<double>& block,
                               const std::vector<double>& dim_importance) {
  const index_t m = block.mlp_dim;
  require(dim_importance.size() == m, "apply_mlp_sort: score count mismatch");
  for (double s : dim_importance)
    require(std::isfinite(s), "apply_mlp_sort: scores must be finite");

  std::vector<index_t> ranking(m);
  std::iota(ranking.begin(), ranking.end(), index_t{0});
  std::stable_sort(ranking.begin(), ranking.end(),
                   [&](index_t x, index_t y) { return dim_importance[x] > dim_importance[y]; });

  // gather rows/cols directly; exact and cheaper than multiplying by W_sort
  const index_t d = block.w1.size() / m;
  std::vector<double> w1(m * d), b1(m), w2(d * m);
  for (index_t i = 0; i < m; ++i) {
    const index_t src = ranking[i];
    std::copy_n(block.w1.data() + src * d, d, w1.data() + i * d);
    b1[i] = block.b1[src];
  }
  for (index_t r = 0; r < d; ++r)
    for (index_t i = 0; i < m; ++i) w2[r * m + i] = block.w2[r * m + ranking[i]];
  block.w1 = std::move(w1);
  block.b1 = std::move(b1);
  block.w2 = std::move(w2);

  TransformMatrix t;
  t.kind = TransformKind::mlp_sort;
  t.w = linalg::permutation_from_ranking(ranking);
  return t;
}

nlohmann::json TransformReport::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : transforms) {
    nlohmann::json e;
    e["kind"] = to_string(t.kind);
    e["block"] = t.block;
    if (t.kind != TransformKind::mlp_sort) {
      e["head"] = t.head;
      e["spectrum"] = t.spectrum;
      e["min_eigenvalue"] = t.min_eigenvalue;
      e["max_eigenvalue"] = t.max_eigenvalue;
      e["ill_conditioned"] = t.ill_conditioned;
    }
    out.push_back(std::move(e));
  }
  return out;
}

TransformReport transform(vit::Model& model, const vit::Batch& proxy, const WpacOptions& opt) {
  require(proxy.count > 0, "wpac: proxy set is empty");
  require(opt.batch_size >= 1, "wpac: batch size must be >= 1");
  const index_t depth = model.blocks.size();
  const index_t heads = model.arch.heads;
  const index_t n = model.arch.tokens();

  struct HeadAcc {
    CovarianceAccumulator v, q, k;
  };
  std::vector<std::vector<HeadAcc>> accs(depth);
  std::vector<std::vector<double>> mlp_theta(depth);
  for (index_t b = 0; b < depth; ++b) {
    const index_t a = model.blocks[b].attn_dim;
    accs[b].reserve(heads);
    for (index_t h = 0; h < heads; ++h)
      accs[b].push_back({CovarianceAccumulator(a), CovarianceAccumulator(a),
                         CovarianceAccumulator(a)});
    mlp_theta[b].assign(model.blocks[b].mlp_dim, 0.0);
  }

  Rng rng(opt.seed ^ 0x77c1'8d30'55aa'90efULL);

  for (index_t start = 0; start < proxy.count; start += opt.batch_size) {
    const index_t stop = std::min(proxy.count, start + opt.batch_size);
    vit::Batch chunk;
    chunk.count = stop - start;
    chunk.pixels = proxy.pixels;
    chunk.images.assign(proxy.images.begin() + start * proxy.pixels,
                        proxy.images.begin() + stop * proxy.pixels);
    chunk.labels.assign(proxy.labels.begin() + start, proxy.labels.begin() + stop);

    vit::ActivationCache cache;
    vit::forward(model, chunk, nullptr, &cache);
    vit::Model grad;
    vit::backward(model, chunk, nullptr, cache, grad);

    // token selection/weights shared by the q and k accumulators
    const index_t rows = chunk.count * n;
    std::vector<index_t> selected;
    if (opt.weighting == Weighting::class_token) {
      for (index_t s = 0; s < chunk.count; ++s) selected.push_back(s * n);
    } else if (opt.weighting == Weighting::random_tokens) {
      require(opt.rand_tokens >= 1 && opt.rand_tokens <= n, "wpac: rand_tokens out of range");
      for (index_t s = 0; s < chunk.count; ++s) {
        auto picks = rng.sample_without_replacement(n, opt.rand_tokens);
        std::sort(picks.begin(), picks.end());
        for (auto p : picks) selected.push_back(s * n + p);
      }
    } else {
      selected.resize(rows);
      std::iota(selected.begin(), selected.end(), index_t{0});
    }

    for (index_t b = 0; b < depth; ++b) {
      const auto& bc = cache.blocks[b];
      const index_t a = model.blocks[b].attn_dim;
      for (index_t h = 0; h < heads; ++h) {
        const auto& hc = bc.heads[h];
        std::vector<double> wv, wqk;
        if (opt.weighting == Weighting::importance) {
          wv = token_weights_v(cache, b, h);
          wqk = token_weights_qk(cache, b, h);
        } else {
          wv.assign(rows, 1.0);
          wqk.assign(rows, 1.0);
        }
        std::vector<double> feats(selected.size() * a);
        std::vector<double> wsel(selected.size());
        auto gather = [&](const std::vector<double>& src, const std::vector<double>& w) {
          for (index_t i = 0; i < selected.size(); ++i) {
            std::copy_n(src.data() + selected[i] * a, a, feats.data() + i * a);
            wsel[i] = w[selected[i]];
          }
        };
        gather(hc.v, wv);
        accs[b][h].v.accumulate(feats.data(), wsel.data(), selected.size());
        gather(hc.q, wqk);
        accs[b][h].q.accumulate(feats.data(), wsel.data(), selected.size());
        gather(hc.k, wqk);
        accs[b][h].k.accumulate(feats.data(), wsel.data(), selected.size());
      }
      // MLP ranking always uses Taylor scores over all tokens
      auto theta = importance::dim_scores(cache, {b, vit::ModuleKind::mlp});
      for (index_t j = 0; j < theta.size(); ++j) mlp_theta[b][j] += theta[j];
    }
  }

  TransformReport report;
  for (index_t b = 0; b < depth; ++b) {
    for (index_t h = 0; h < heads; ++h) {
      TransformMatrix tvo = compute_transform(accs[b][h].v.finalize(), TransformKind::vo, opt.ridge);
      tvo.block = b;
      tvo.head = h;
      apply_vo(model.blocks[b].heads[h], tvo);

      linalg::Matrix cq = accs[b][h].q.finalize();
      const linalg::Matrix ck = accs[b][h].k.finalize();
      for (index_t i = 0; i < cq.rows(); ++i)
        for (index_t j = 0; j < cq.cols(); ++j) cq(i, j) += ck(i, j);
      TransformMatrix tqk = compute_transform(cq, TransformKind::qk, opt.ridge);
      tqk.block = b;
      tqk.head = h;
      apply_qk(model.blocks[b].heads[h], tqk);

      report.transforms.push_back(std::move(tvo));
      report.transforms.push_back(std::move(tqk));
    }
    TransformMatrix tsort = apply_mlp_sort(model.blocks[b], mlp_theta[b]);
    tsort.block = b;
    report.transforms.push_back(std::move(tsort));
  }
  return report;
}

}  // namespace skd::wpac
