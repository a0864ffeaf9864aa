#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tabaconv/rng.hpp"
#include "tabaconv/tensor.hpp"

// Differentiable primitives. Every op records a backward rule when grad mode is
// on and at least one input requires grad. Broadcasting is trailing-dimension
// only: the smaller operand's shape must equal a suffix of the larger's.
namespace tabaconv::ops {

enum class Padding { kZero, kCircular };

// [.., m, p] x [.., p, n] -> [.., m, n]. A 2-D right operand is shared across
// all leading dimensions of the left one.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// "Same" 1-D convolution: x [B,T,F_in], w [k,F_in,F_c], bias [F_c] -> [B,T,F_c].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Padding padding = Padding::kZero);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b);

// Reduces one axis; the axis is removed from the result shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Rows of a 2-D table: x [N,D], rows -> [rows.size(), D]. Embedding lookup.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> rows);

// Σ_i (logsumexp(logits_i) − logits_i[target_i]) for logits [M,V].
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::int64_t> targets);

// Mean over elements of max(z,0) − z·y + log(1 + e^{−|z|}).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels);

// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

// x·w + b over the last axis: x [.., in], w [in, out], b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

}  // namespace tabaconv::ops
