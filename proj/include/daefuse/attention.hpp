#pragma once

// Patch-token attention over feature maps.
//
// A map [N,C,H,W] is cut into non-overlapping p x p spatial tokens
// (row-major over the token grid). For `heads` heads the channels are split
// into equal groups and each token becomes a vector of length
// (C/heads) * p * p, ordered (channel, row-in-patch, col-in-patch).

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "daefuse/error.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

struct TokenLayout {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  int heads = 1;
  int patch = 1;

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int tokens() const { return grid_h() * grid_w(); }
  int head_channels() const { return channels / heads; }
  int token_dim() const { return head_channels() * patch * patch; }
  Dims token_dims() const { return {batch, heads, tokens(), token_dim()}; }
  Dims map_dims() const { return {batch, channels, height, width}; }

  static TokenLayout of(const Tensor& map, int heads, int patch) {
    const Dims d = map.dims();
    TokenLayout t{d[0], d[1], d[2], d[3], heads, patch};
    if (heads < 1 || patch < 1 || d[1] % heads != 0) {
      fail(ErrorKind::ShapeError, "channels " + std::to_string(d[1]) + " not divisible by heads " +
                                      std::to_string(heads));
    }
    if (d[2] % patch != 0 || d[3] % patch != 0) {
      fail(ErrorKind::ShapeError, "spatial size " + std::to_string(d[2]) + "x" + std::to_string(d[3]) +
                                      " is not divisible by token patch " + std::to_string(patch));
    }
    return t;
  }

  // Flat map index of (n, head, token, feature).
  std::size_t map_index(int n, int head, int token, int feature) const {
    const int pp = patch * patch;
    const int c = head * head_channels() + feature / pp;
    const int within = feature % pp;
    const int y = (token / grid_w()) * patch + within / patch;
    const int x = (token % grid_w()) * patch + within % patch;
    return ((static_cast<std::size_t>(n) * channels + c) * height + y) * width + x;
  }
};

/// [N,C,H,W] -> [N,heads,T,D]
inline Tensor tokenize(const Tensor& map, const TokenLayout& layout) {
  return gather(map, layout.token_dims(), make_index(layout.token_dims(), [&](int n, int h, int t, int f) {
                  return layout.map_index(n, h, t, f);
                }));
}

/// [N,heads,T,D] -> [N,C,H,W]; exact inverse of `tokenize`.
inline Tensor untokenize(const Tensor& tokens, const TokenLayout& layout) {
  const Dims td = layout.token_dims();
  auto inverse = std::make_shared<std::vector<std::size_t>>(element_count(layout.map_dims()));
  std::size_t i = 0;
  for (int n = 0; n < td[0]; ++n)
    for (int h = 0; h < td[1]; ++h)
      for (int t = 0; t < td[2]; ++t)
        for (int f = 0; f < td[3]; ++f) (*inverse)[layout.map_index(n, h, t, f)] = i++;
  return gather(tokens, layout.map_dims(), inverse);
}

struct AttentionResult {
  Tensor output;   // [N,C,H,W], laid out like the value map
  Tensor weights;  // [N,heads,Tq,Tk], each row sums to 1
};

/// softmax(Q K^T / sqrt(d)) V on token sequences [N,heads,T,D].
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights_out = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
  const Tensor weights = softmax_last(matmul(q, transpose_last(k)) * scale);
  if (weights_out) *weights_out = weights;
  return matmul(weights, v);
}

/// Multi-head attention where queries come from `query_map` and keys/values
/// from `key_map`/`value_map` (already projected). All maps share dims.
inline AttentionResult map_attention(const Tensor& query_map, const Tensor& key_map, const Tensor& value_map,
                                     int heads, int patch) {
  if (query_map.dims() != key_map.dims() || key_map.dims() != value_map.dims()) {
    fail(ErrorKind::ShapeError, "attention maps differ: " + to_string(query_map.dims()) + " vs " +
                                    to_string(key_map.dims()));
  }
  const TokenLayout layout = TokenLayout::of(query_map, heads, patch);
  AttentionResult r;
  const Tensor out = scaled_dot_attention(tokenize(query_map, layout), tokenize(key_map, layout),
                                          tokenize(value_map, layout), &r.weights);
  r.output = untokenize(out, layout);
  return r;
}

}  // namespace daefuse
