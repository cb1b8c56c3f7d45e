#pragma once

// Attention-guided cross-modality fusion.
//
// Direction "a2b": queries from the A embedding, keys/values from the B
// embedding, producing the attended B embedding. "b2a" mirrors it. The two
// attended embeddings are concatenated (A first) and decoded.

#include <string>

#include "daefuse/attention.hpp"
#include "daefuse/config.hpp"
#include "daefuse/error.hpp"
#include "daefuse/networks.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

/// 1x1 projection kernels [C,C,1,1] for one attention direction.
struct CrossAttentionWeights {
  Tensor wq;
  Tensor wk;
  Tensor wv;
};

enum class AttentionDirection { AQueriesB, BQueriesA };

inline std::string prefix_of(AttentionDirection d) {
  return d == AttentionDirection::AQueriesB ? "xattn/a2b" : "xattn/b2a";
}

/// Counts parameter reads made by the fusion forward pass.
struct ForwardStats {
  std::size_t attention_weight_reads = 0;
};

inline CrossAttentionWeights attention_weights(const ModelParameters& m, AttentionDirection d,
                                               ForwardStats* stats = nullptr) {
  const std::string p = prefix_of(d);
  if (stats) stats->attention_weight_reads += 3;
  return {m.store.get(p + "/wq/w"), m.store.get(p + "/wk/w"), m.store.get(p + "/wv/w")};
}

/// softmax(Q K^T / sqrt(d_k)) V with Q = W_q(query), K = W_k(kv), V = W_v(kv),
/// tokenized per `config`. The result keeps the key/value map layout.
inline AttentionResult cross_attention(const Tensor& query_emb, const Tensor& kv_emb,
                                       const CrossAttentionWeights& w, const AttentionConfig& config) {
  if (query_emb.dims() != kv_emb.dims()) {
    fail(ErrorKind::ShapeError, "cross-attention embeddings differ: " + to_string(query_emb.dims()) + " vs " +
                                    to_string(kv_emb.dims()));
  }
  const Tensor none;
  AttentionResult r = map_attention(conv2d(query_emb, w.wq, none, 1, 0, 0), conv2d(kv_emb, w.wk, none, 1, 0, 0),
                                    conv2d(kv_emb, w.wv, none, 1, 0, 0), config.heads, config.token_patch);
  if (config.residual) r.output = r.output + kv_emb;
  return r;
}

struct FusionOptions {
  bool cross_attention = true;  // false: decode the plain concatenation
};

/// Decodes concat(attended A, attended B) into the fused image [N,1,H,W].
inline Tensor fuse_embeddings(const ModelParameters& m, const Tensor& emb_a, const Tensor& emb_b,
                              const FusionOptions& options = {}, ForwardStats* stats = nullptr) {
  if (emb_a.dims() != emb_b.dims()) {
    fail(ErrorKind::ShapeError, "cannot fuse embeddings " + to_string(emb_a.dims()) + " and " +
                                    to_string(emb_b.dims()));
  }
  if (!options.cross_attention) return decode(m, concat({emb_a, emb_b}, 1));
  const Tensor hat_b =
      cross_attention(emb_a, emb_b, attention_weights(m, AttentionDirection::AQueriesB, stats), m.attention).output;
  const Tensor hat_a =
      cross_attention(emb_b, emb_a, attention_weights(m, AttentionDirection::BQueriesA, stats), m.attention).output;
  return decode(m, concat({hat_a, hat_b}, 1));
}

inline Tensor fuse(const ModelParameters& m, const FeatureEmbedding& emb_a, const FeatureEmbedding& emb_b,
                   const FusionOptions& options = {}, ForwardStats* stats = nullptr) {
  return fuse_embeddings(m, emb_a.combined, emb_b.combined, options, stats);
}

/// Encode both modalities and fuse. Inputs are [N,1,H,W].
inline Tensor fuse_images(const ModelParameters& m, const Tensor& a, const Tensor& b,
                          const FusionOptions& options = {}, ForwardStats* stats = nullptr) {
  return fuse(m, encode(m, a), encode(m, b), options, stats);
}

/// Warm start for the fusion stem: each half of its input channels gets half
/// of the reconstruction stem, so fusing an embedding with itself initially
/// matches reconstruction.
inline void init_fusion_stem_from_reconstruction(ModelParameters& m) {
  const Tensor& recon = m.store.get("rd/stem_recon/w");
  Tensor& fused = m.store.get("rd/stem_fuse/w");
  const Dims rd = recon.dims();  // [Co, C, k, k]
  const std::size_t kk = static_cast<std::size_t>(rd[2]) * rd[3];
  auto out = fused.mutable_values();
  const auto in = recon.values();
  for (int co = 0; co < rd[0]; ++co)
    for (int half = 0; half < 2; ++half)
      for (int ci = 0; ci < rd[1]; ++ci)
        for (std::size_t k = 0; k < kk; ++k) {
          out[((static_cast<std::size_t>(co) * 2 * rd[1]) + half * rd[1] + ci) * kk + k] =
              0.5 * in[(static_cast<std::size_t>(co) * rd[1] + ci) * kk + k];
        }
  const auto rb = m.store.get("rd/stem_recon/b").values();
  auto fb = m.store.get("rd/stem_fuse/b").mutable_values();
  std::copy(rb.begin(), rb.end(), fb.begin());
}

}  // namespace daefuse
