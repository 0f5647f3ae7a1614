#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/linalg.hpp"
#include "skd/vit.hpp"

#include <json.hpp>

namespace skd::wpac {

// Token-weighted covariance with unweighted-mean centering: rows are centered
// against the global mean over ALL accumulated tokens, then scaled by
// sqrt(weight) before the outer product. Mergeable across shards.
class CovarianceAccumulator {
public:
  explicit CovarianceAccumulator(index_t dim);

  void accumulate(const double* features, const double* weights, index_t rows);
  void accumulate(const std::vector<double>& features, const std::vector<double>& weights);
  void merge(const CovarianceAccumulator& other);

  index_t dim() const { return dim_; }
  index_t count() const { return count_; }
  double total_weight() const { return total_weight_; }

  linalg::Matrix finalize() const;  // Corr, divided by (n - 1)

private:
  index_t dim_ = 0;
  index_t count_ = 0;                  // tokens seen
  double total_weight_ = 0.0;
  std::vector<double> weighted_outer_; // sum w_i x_i x_i^T, d*d
  std::vector<double> weighted_sum_;   // sum w_i x_i
  std::vector<double> raw_sum_;        // sum x_i, for the unweighted mean
};

enum class TransformKind { vo, qk, mlp_sort };
const char* to_string(TransformKind k);

struct TransformMatrix {
  TransformKind kind = TransformKind::vo;
  linalg::Matrix w;                // rows are principal directions (or a permutation)
  std::vector<double> spectrum;    // descending eigenvalues; empty for mlp_sort
  index_t block = 0, head = 0;     // head meaningless for mlp_sort
  double min_eigenvalue = 0.0, max_eigenvalue = 0.0;
  bool ill_conditioned = false;    // warning only
};

// Eigenvectors of corr as rows, descending spectrum, condition diagnostics.
TransformMatrix compute_transform(const linalg::Matrix& corr, TransformKind kind,
                                  double ridge = 0.0);

// Per-token weights: element Taylor scores summed over feature dims.
std::vector<double> token_weights_v(const vit::ActivationCache& cache, index_t block, index_t head);
std::vector<double> token_weights_qk(const vit::ActivationCache& cache, index_t block,
                                     index_t head);

// In-place transform injections; the inverse side always uses the transpose.
void apply_vo(vit::HeadParamsT<double>& head, const TransformMatrix& t);
void apply_qk(vit::HeadParamsT<double>& head, const TransformMatrix& t);
// Sort hidden dims by descending score; exact permutation, returns its record.
TransformMatrix apply_mlp_sort(vit::BlockParamsT<double>& block,
                               const std::vector<double>& dim_importance);

enum class Weighting { importance, uniform, class_token, random_tokens };
const char* to_string(Weighting w);
Weighting weighting_from_string(const std::string& s);

struct WpacOptions {
  Weighting weighting = Weighting::importance;
  index_t rand_tokens = 2;    // tokens per sample for Weighting::random_tokens
  double ridge = 0.0;         // optional diagonal added to Corr
  index_t batch_size = 64;    // proxy is processed in minibatches
  std::uint64_t seed = 0;     // random_tokens draws
};

struct TransformReport {
  std::vector<TransformMatrix> transforms;
  nlohmann::json to_json() const;  // spectra + condition diagnostics per block/head
};

// The whole pipeline: accumulate weighted covariances and MLP importances over
// the proxy, eigendecompose, inject all transforms. Function-preserving.
TransformReport transform(vit::Model& model, const vit::Batch& proxy,
                          const WpacOptions& opt = {});

}  // namespace skd::wpac
