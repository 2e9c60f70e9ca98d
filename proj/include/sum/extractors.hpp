// SPDX-License-Identifier: Apache-2.0
//
// Feature extractors of an interaction module, written against bound
// parameter vars so they can be exercised in isolation.
#pragma once

#include <vector>

#include "sum/autograd.hpp"

namespace sum::extract {

template <typename T>
struct MlpVars {
  Var<T> w1, b1, w2, b2;
};

// linear -> relu -> linear.
template <typename T>
Var<T> mlp(Var<T> x, const MlpVars<T>& p) {
  return ops::linear(ops::relu(ops::linear(x, p.w1, p.b1)), p.w2, p.b2);
}

template <typename T>
struct DotBranchVars {
  Var<T> lc;          // [L x N]   weighted sums of sparse tokens
  Var<T> fc_w, fc_b;  // dense FC: [N_dense*D x L_dense*D], [1 x L_dense*D]
  MlpVars<T> mlp;
};

template <typename T>
struct DotCompressionVars {
  DotBranchVars<T> attention;  // produces Y [D x M]
  DotBranchVars<T> residual;   // produces Z [N x M]
};

namespace detail {

// MLP(Concat(FC(X_dense), LC(X))) as a flat row.
template <typename T>
Var<T> compress_branch(Var<T> tokens, Var<T> dense_tokens, const DotBranchVars<T>& p) {
  Var<T> lc = ops::weighted_row_sum(tokens, p.lc);
  Var<T> fc = ops::linear(ops::flatten(dense_tokens), p.fc_w, p.fc_b);
  return mlp(ops::concat_cols({fc, ops::flatten(lc)}), p.mlp);
}

}  // namespace detail

/// Dot compression with attention on token columns.
///
/// `x` is [D x N] and `x_dense` is [D x N_dense] (one token per column).
/// Y = MLP(Concat(LC(X_dense), LC(X))) reshaped to [D x M], Z from the
/// primed branch reshaped to [N x M], and the result X (X^T Y + Z) is [D x M].
template <typename T>
Var<T> dot_compression_attention(Var<T> x, Var<T> x_dense, const DotCompressionVars<T>& p,
                                 std::size_t out_tokens) {
  const std::size_t d = x.rows(), n = x.cols();
  if (x_dense.rows() != d) {
    throw DimensionError("dot_compression: dense tokens " + x_dense.value().shape_str() +
                         " do not share dim with " + x.value().shape_str());
  }
  Var<T> rows = ops::transpose(x);  // [N x D]
  Var<T> rows_dense = ops::transpose(x_dense);
  Var<T> y_flat = detail::compress_branch(rows, rows_dense, p.attention);
  Var<T> z_flat = detail::compress_branch(rows, rows_dense, p.residual);
  if (y_flat.cols() != d * out_tokens || z_flat.cols() != n * out_tokens) {
    throw DimensionError("dot_compression: MLP outputs " + y_flat.value().shape_str() + " / " +
                         z_flat.value().shape_str() + " do not match M=" +
                         std::to_string(out_tokens));
  }
  Var<T> y = ops::reshape(y_flat, d, out_tokens);
  Var<T> z = ops::reshape(z_flat, n, out_tokens);
  return ops::matmul(x, ops::add(ops::matmul(rows, y), z));
}

template <typename T>
struct CrossLayerVars {
  Var<T> w, b;  // [n x n], [1 x n]
};

/// Stacked cross layers on a flat row: x_{l+1} = x0 * (x_l W_l + b_l) + x_l.
template <typename T>
Var<T> dcn_cross_stack(Var<T> x0, const std::vector<CrossLayerVars<T>>& layers) {
  if (x0.rows() != 1) throw DimensionError("dcn: expects a single row, got " + x0.value().shape_str());
  Var<T> x = x0;
  for (const auto& l : layers) x = ops::add(ops::mul(x0, ops::linear(x, l.w, l.b)), x);
  return x;
}

template <typename T>
struct MixerVars {
  Var<T> ln1_gain, ln1_shift;
  Var<T> token_w1;  // [H_t x N]
  Var<T> token_w2;  // [N x H_t]
  Var<T> ln2_gain, ln2_shift;
  Var<T> channel_w3;  // [D x H_c]
  Var<T> channel_w4;  // [H_c x D]
};

/// One mixer block on tokens-as-rows X [N x D].
///
/// Token mixing acts along N, channel mixing along D:
///   Y = X + W2 relu(W1 LN(X))
///   Z = Y + relu(LN(Y) W3) W4
/// which is the column-token form of the block written for rows.
template <typename T>
Var<T> mlp_mixer_block(Var<T> x, const MixerVars<T>& p, T eps) {
  Var<T> h = ops::relu(ops::matmul(p.token_w1, ops::layer_norm(x, p.ln1_gain, p.ln1_shift, eps)));
  Var<T> y = ops::add(x, ops::matmul(p.token_w2, h));
  Var<T> c = ops::relu(ops::matmul(ops::layer_norm(y, p.ln2_gain, p.ln2_shift, eps), p.channel_w3));
  return ops::add(y, ops::matmul(c, p.channel_w4));
}

}  // namespace sum::extract
