#pragma once

// Encoder stack, reconstruction decoder and the two discriminative blocks,
// all reading from a ModelParameters store.
//
//   shallow  : 3x3 stem, then channel-attention transformer blocks
//   high     : 3x3 stem, then residual conv blocks            (C/2 channels)
//   low      : 1x1 stem + learned token-grid positions, then
//              pre-norm multi-head self-attention blocks        (C/2 channels)
//   combined : concat(high, low) along channels
//   decoder  : 3x3 stem (C or 2C inputs), channel-attention blocks,
//              3x3 head, sigmoid
//   DM1/DM2  : [conv s2 -> LeakyReLU -> BatchNorm] x L, global mean, FC, sigmoid

#include <algorithm>
#include <cstdint>
#include <string>

#include "daefuse/attention.hpp"
#include "daefuse/config.hpp"
#include "daefuse/error.hpp"
#include "daefuse/image.hpp"
#include "daefuse/nn.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

inline constexpr int kMaxTokenGrid = 128;
inline constexpr double kDiscriminatorSlope = 0.2;

/// Tags: 0 = freshly initialized, 1 = produced by phase-one training,
/// 2 = produced by phase-two training.
struct ModelParameters {
  NetworkConfig network;
  AttentionConfig attention;
  ParameterStore store;
  int phase_tag = 0;
  std::int64_t version = 1;
  bool cross_attention = true;  // false: fusion decodes the plain concatenation
};

enum class Discriminator { DM1, DM2 };

inline std::string prefix_of(Discriminator which) { return which == Discriminator::DM1 ? "dm1" : "dm2"; }

struct FeatureEmbedding {
  Tensor shallow;   // [N, C, H, W]
  Tensor high;      // [N, C/2, H, W]
  Tensor low;       // [N, C/2, H, W]
  Tensor combined;  // [N, C, H, W] = concat(high, low)
};

namespace detail {

inline void init_channel_block(const Initializer& init, ParameterStore& s, const std::string& name, int channels,
                               int heads) {
  init.norm(s, name + "/ln1", channels);
  init.conv(s, name + "/qkv", channels, 3 * channels, 1);
  s.add(name + "/temperature", {1, heads, 1, 1}, std::vector<double>(static_cast<std::size_t>(heads), 1.0));
  init.conv(s, name + "/proj", channels, channels, 1, true, 0.5);
  init.norm(s, name + "/ln2", channels);
  init.conv(s, name + "/ffn_in", channels, 2 * channels, 1);
  init.conv(s, name + "/ffn_out", 2 * channels, channels, 1, true, 0.5);
}

inline void init_token_block(const Initializer& init, ParameterStore& s, const std::string& name, int channels) {
  init.norm(s, name + "/ln1", channels);
  init.conv(s, name + "/qkv", channels, 3 * channels, 1);
  init.conv(s, name + "/proj", channels, channels, 1, true, 0.5);
  init.norm(s, name + "/ln2", channels);
  init.conv(s, name + "/ffn_in", channels, 2 * channels, 1);
  init.conv(s, name + "/ffn_out", 2 * channels, channels, 1, true, 0.5);
}

inline int discriminator_width(const NetworkConfig& net, int layer) {
  return std::max(1, net.base_channels / 2) << layer;
}

// L2-normalizes along the last axis.
inline Tensor l2_normalize_last(const Tensor& x) { return x / sqrt(sum(square(x), {3}) + 1e-12); }

inline Tensor feed_forward(const ParameterStore& p, const std::string& name, const Tensor& x) {
  const Tensor y = channel_layer_norm(p, name + "/ln2", x);
  return x + conv_layer(p, name + "/ffn_out", gelu(conv_layer(p, name + "/ffn_in", y)));
}

// Transposed (channel-to-channel) attention block.
inline Tensor channel_block(const ParameterStore& p, const std::string& name, const Tensor& x, int heads) {
  const Dims d = x.dims();
  const int c = d[1];
  const Dims head_dims{d[0], heads, c / heads, d[2] * d[3]};
  const Tensor qkv = conv_layer(p, name + "/qkv", channel_layer_norm(p, name + "/ln1", x));
  const Tensor q = l2_normalize_last(reshape(slice(qkv, 1, 0, c), head_dims));
  const Tensor k = l2_normalize_last(reshape(slice(qkv, 1, c, c), head_dims));
  const Tensor v = reshape(slice(qkv, 1, 2 * c, c), head_dims);
  const Tensor attn = softmax_last(matmul(q, transpose_last(k)) * p.get(name + "/temperature"));
  const Tensor mixed = reshape(matmul(attn, v), d);
  return feed_forward(p, name, x + conv_layer(p, name + "/proj", mixed));
}

inline Tensor token_block(const ParameterStore& p, const std::string& name, const Tensor& x, int heads,
                          int patch) {
  const int c = x.dim(1);
  const Tensor qkv = conv_layer(p, name + "/qkv", channel_layer_norm(p, name + "/ln1", x));
  const AttentionResult r =
      map_attention(slice(qkv, 1, 0, c), slice(qkv, 1, c, c), slice(qkv, 1, 2 * c, c), heads, patch);
  return feed_forward(p, name, x + conv_layer(p, name + "/proj", r.output));
}

// Learned row/column embeddings of the token grid, broadcast over each token.
inline Tensor token_positions(const ParameterStore& p, int channels, int height, int width, int patch) {
  const Dims od{1, channels, height, width};
  auto lookup = [&](const std::string& table, bool rows) {
    return gather(p.get(table), od, make_index(od, [&](int, int c, int y, int x) {
                    const int cell = std::min((rows ? y : x) / patch, kMaxTokenGrid - 1);
                    return static_cast<std::size_t>(cell) * channels + static_cast<std::size_t>(c);
                  }));
  };
  return lookup("dle/pos_row", true) + lookup("dle/pos_col", false);
}

}  // namespace detail

/// Fresh parameters for every module, seeded by `network.weight_init_seed`.
inline ModelParameters init_model(const NetworkConfig& network, const AttentionConfig& attention = {}) {
  network.validate();
  attention.validate(network.embedding_channels());
  ModelParameters m;
  m.network = network;
  m.attention = attention;
  const Initializer init{network.weight_init_seed};
  ParameterStore& s = m.store;
  const int cs = network.shallow_channels();
  const int cb = network.branch_channels();
  const int ce = network.embedding_channels();

  init.conv(s, "se/stem", 1, cs, 3);
  for (int i = 0; i < network.se_blocks; ++i)
    detail::init_channel_block(init, s, "se/block" + std::to_string(i), cs, network.dle_heads);

  init.conv(s, "dhe/stem", cs, cb, 3);
  for (int i = 0; i < network.dhe_blocks; ++i) {
    const std::string name = "dhe/block" + std::to_string(i);
    init.conv(s, name + "/conv1", cb, cb, 3);
    init.conv(s, name + "/conv2", cb, cb, 3, true, 0.5);
  }

  init.conv(s, "dle/stem", cs, cb, 1);
  init.table(s, "dle/pos_row", {1, 1, kMaxTokenGrid, cb}, 0.02);
  init.table(s, "dle/pos_col", {1, 1, kMaxTokenGrid, cb}, 0.02);
  for (int i = 0; i < network.dle_blocks; ++i)
    detail::init_token_block(init, s, "dle/block" + std::to_string(i), cb);

  init.conv(s, "rd/stem_recon", ce, cs, 3);
  init.conv(s, "rd/stem_fuse", 2 * ce, cs, 3);
  for (int i = 0; i < network.se_blocks; ++i)
    detail::init_channel_block(init, s, "rd/block" + std::to_string(i), cs, network.dle_heads);
  init.conv(s, "rd/head", cs, 1, 3, true, 0.5);

  for (const char* dm : {"dm1", "dm2"}) {
    int in = 1;
    for (int l = 0; l < network.disc_layers; ++l) {
      const int out = detail::discriminator_width(network, l);
      const std::string name = std::string(dm) + "/conv" + std::to_string(l);
      init.conv(s, name, in, out, 3);
      init.batch_norm(s, std::string(dm) + "/bn" + std::to_string(l), out);
      in = out;
    }
    init.conv(s, std::string(dm) + "/fc", in, 1, 1);
  }

  // W_v starts at identity so attended embeddings begin as a token average
  // of the other modality's features rather than a random projection.
  for (const char* dir : {"xattn/a2b", "xattn/b2a"}) {
    init.conv(s, std::string(dir) + "/wq", ce, ce, 1, false);
    init.conv(s, std::string(dir) + "/wk", ce, ce, 1, false);
    std::vector<double> eye(static_cast<std::size_t>(ce) * ce, 0.0);
    for (int c = 0; c < ce; ++c) eye[static_cast<std::size_t>(c) * ce + c] = 1.0;
    s.add(std::string(dir) + "/wv/w", {ce, ce, 1, 1}, std::move(eye));
  }
  return m;
}

/// [N,1,H,W] -> [N,C,H,W]
inline Tensor shallow_encode(const ModelParameters& m, const Tensor& images) {
  if (images.dim(1) != 1) fail(ErrorKind::ShapeError, "encoder expects single-channel images");
  Tensor x = conv_layer(m.store, "se/stem", images);
  for (int i = 0; i < m.network.se_blocks; ++i)
    x = detail::channel_block(m.store, "se/block" + std::to_string(i), x, m.network.dle_heads);
  require_finite(x, "shallow features");
  return x;
}

inline Tensor high_frequency_encode(const ModelParameters& m, const Tensor& shallow) {
  Tensor x = conv_layer(m.store, "dhe/stem", shallow);
  for (int i = 0; i < m.network.dhe_blocks; ++i) {
    const std::string name = "dhe/block" + std::to_string(i);
    x = x + conv_layer(m.store, name + "/conv2", gelu(conv_layer(m.store, name + "/conv1", gelu(x))));
  }
  return x;
}

inline Tensor low_frequency_encode(const ModelParameters& m, const Tensor& shallow) {
  const int cb = m.network.branch_channels();
  Tensor x = conv_layer(m.store, "dle/stem", shallow) +
             detail::token_positions(m.store, cb, shallow.dim(2), shallow.dim(3), m.network.dle_token_patch);
  for (int i = 0; i < m.network.dle_blocks; ++i)
    x = detail::token_block(m.store, "dle/block" + std::to_string(i), x, m.network.dle_heads,
                            m.network.dle_token_patch);
  return x;
}

/// Deep branches on an existing shallow map (lets video inference smooth the
/// shallow features across frames first).
inline FeatureEmbedding encode_from_shallow(const ModelParameters& m, const Tensor& shallow) {
  FeatureEmbedding e;
  e.shallow = shallow;
  e.high = high_frequency_encode(m, shallow);
  e.low = low_frequency_encode(m, shallow);
  e.combined = concat({e.high, e.low}, 1);
  require_finite(e.combined, "feature embedding");
  return e;
}

inline FeatureEmbedding encode(const ModelParameters& m, const Tensor& images) {
  return encode_from_shallow(m, shallow_encode(m, images));
}

/// Embedding with C channels uses the reconstruction stem; 2C channels (two
/// concatenated embeddings) uses the fusion stem. Output is [N,1,H,W] in (0,1).
inline Tensor decode(const ModelParameters& m, const Tensor& embedding) {
  const int ce = m.network.embedding_channels();
  std::string stem;
  if (embedding.dim(1) == ce) {
    stem = "rd/stem_recon";
  } else if (embedding.dim(1) == 2 * ce) {
    stem = "rd/stem_fuse";
  } else {
    fail(ErrorKind::ShapeError, "decoder expects " + std::to_string(ce) + " or " + std::to_string(2 * ce) +
                                    " channels, got " + std::to_string(embedding.dim(1)));
  }
  Tensor x = conv_layer(m.store, stem, embedding);
  for (int i = 0; i < m.network.se_blocks; ++i)
    x = detail::channel_block(m.store, "rd/block" + std::to_string(i), x, m.network.dle_heads);
  Tensor out = sigmoid(conv_layer(m.store, "rd/head", x));
  require_finite(out, "decoder output");
  return out;
}

/// Returns [N,1,1,1] scores in (0,1). Training mode normalizes with batch
/// statistics; pass `running` (the model's own store) to also update the
/// running statistics.
inline Tensor discriminate(const ModelParameters& m, const Tensor& images, Discriminator which,
                           Mode mode = Mode::Eval, ParameterStore* running = nullptr) {
  const std::string dm = prefix_of(which);
  Tensor x = images;
  for (int l = 0; l < m.network.disc_layers; ++l) {
    x = conv_layer(m.store, dm + "/conv" + std::to_string(l), x, 2);
    x = leaky_relu(x, kDiscriminatorSlope);
    x = batch_norm(m.store, dm + "/bn" + std::to_string(l), x, mode, running);
  }
  Tensor score = sigmoid(conv_layer(m.store, dm + "/fc", mean(x, {2, 3})));
  require_finite(score, dm + " score");
  return score;
}

inline double discriminate(const ModelParameters& m, const Image& image, Discriminator which) {
  NoGradGuard no_grad;
  return discriminate(m, to_tensor(image), which, Mode::Eval).item();
}

}  // namespace daefuse
