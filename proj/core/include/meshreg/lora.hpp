#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "meshreg/rng.hpp"

namespace meshreg {

/// Low-rank adapter around a frozen weight matrix: y = W x + B (A x).
/// W is m x n and never receives gradients; A is r x n, B is m x r.
/// After merge() the layer is a plain dense matrix with no extra
/// parameters or per-call cost.
template <typename Scalar>
struct LoraLayer {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Mat W;
  Mat A;
  Mat B;
  std::uint32_t rank = 0;
  bool merged = false;

  std::uint32_t rows() const { return static_cast<std::uint32_t>(W.rows()); }
  std::uint32_t cols() const { return static_cast<std::uint32_t>(W.cols()); }

  /// Trainable + frozen parameter count; after merge only W remains.
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(W.size()) + static_cast<std::size_t>(A.size()) +
           static_cast<std::size_t>(B.size());
  }
};

/// B starts at zero and A ~ N(0, (1/r)^2), so the adapted function equals
/// the frozen one at step 0. Ranks above min(m, n)/4 draw a warning;
/// ranks above min(m, n) are invalid.
template <typename Scalar>
LoraLayer<Scalar> lora_init(typename LoraLayer<Scalar>::Mat frozen, std::uint32_t rank,
                            std::uint64_t seed) {
  const auto m = static_cast<std::uint32_t>(frozen.rows());
  const auto n = static_cast<std::uint32_t>(frozen.cols());
  const std::uint32_t limit = std::min(m, n);
  if (rank < 1 || rank > limit) {
    throw std::invalid_argument("lora_init: rank " + std::to_string(rank) +
                                " outside [1, min(m, n) = " + std::to_string(limit) + "]");
  }
  if (rank > limit / 4) {
    std::cerr << "lora_init: warning: rank " << rank << " is large relative to min(m, n) = "
              << limit << "; the adapter is barely low-rank\n";
  }
  LoraLayer<Scalar> layer;
  layer.W = std::move(frozen);
  layer.rank = rank;
  layer.B = LoraLayer<Scalar>::Mat::Zero(m, rank);
  layer.A.resize(rank, n);
  Rng rng(seed);
  const double stddev = 1.0 / static_cast<double>(rank);
  for (std::uint32_t r = 0; r < rank; ++r) {
    for (std::uint32_t c = 0; c < n; ++c) {
      layer.A(r, c) = static_cast<Scalar>(rng.normal(0.0, stddev));
    }
  }
  return layer;
}

/// Factored forward W x + B (A x); BA is never materialized here.
/// Refuses to run on a merged layer (training must use the factors).
template <typename Scalar>
typename LoraLayer<Scalar>::Vec lora_forward(const typename LoraLayer<Scalar>::Vec& x,
                                             const LoraLayer<Scalar>& layer) {
  if (layer.merged) {
    throw std::logic_error("lora_forward: layer is merged; training forward needs the factors");
  }
  return layer.W * x + layer.B * (layer.A * x);
}

/// Dense forward after merge.
template <typename Scalar>
typename LoraLayer<Scalar>::Vec merged_forward(const typename LoraLayer<Scalar>::Vec& x,
                                               const LoraLayer<Scalar>& layer) {
  if (!layer.merged) {
    throw std::logic_error("merged_forward: layer has not been merged");
  }
  return layer.W * x;
}

/// grad_B = upstream (A x)^T, grad_A = (B^T upstream) x^T. W gets no
/// gradient by construction.
template <typename Scalar>
void lora_grads_accumulate(const LoraLayer<Scalar>& layer,
                           const typename LoraLayer<Scalar>::Vec& upstream,
                           const typename LoraLayer<Scalar>::Vec& x,
                           typename LoraLayer<Scalar>::Mat& grad_A,
                           typename LoraLayer<Scalar>::Mat& grad_B) {
  grad_B.noalias() += upstream * (layer.A * x).transpose();
  grad_A.noalias() += (layer.B.transpose() * upstream) * x.transpose();
}

template <typename Scalar>
std::pair<typename LoraLayer<Scalar>::Mat, typename LoraLayer<Scalar>::Mat> lora_grads(
    const typename LoraLayer<Scalar>::Vec& upstream, const typename LoraLayer<Scalar>::Vec& x,
    const LoraLayer<Scalar>& layer) {
  typename LoraLayer<Scalar>::Mat grad_A =
      LoraLayer<Scalar>::Mat::Zero(layer.A.rows(), layer.A.cols());
  typename LoraLayer<Scalar>::Mat grad_B =
      LoraLayer<Scalar>::Mat::Zero(layer.B.rows(), layer.B.cols());
  lora_grads_accumulate(layer, upstream, x, grad_A, grad_B);
  return {std::move(grad_A), std::move(grad_B)};
}

/// W := W + B A; the factors are discarded and further merges refused.
template <typename Scalar>
void lora_merge(LoraLayer<Scalar>& layer) {
  if (layer.merged) throw std::logic_error("lora_merge: layer already merged");
  layer.W.noalias() += layer.B * layer.A;
  layer.A.resize(0, 0);
  layer.B.resize(0, 0);
  layer.merged = true;
}

/// LORA checkpoint: per layer m, n, r and the A then B factors (f32 on
/// disk). W is not stored; it is the caller's frozen weight.
void save_lora(const std::vector<LoraLayer<double>>& layers, const std::string& path);

/// Loads factors into the provided frozen weights (one per stored layer).
std::vector<LoraLayer<double>> load_lora(const std::string& path,
                                         std::vector<Eigen::MatrixXd> frozen_weights);

/// Plain dense-weight checkpoint for merged layers.
void save_dense_weights(const std::vector<Eigen::MatrixXd>& weights, const std::string& path);
std::vector<Eigen::MatrixXd> load_dense_weights(const std::string& path);

}  // namespace meshreg
