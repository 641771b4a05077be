#pragma once

#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "interagent/numerics.hpp"

namespace interagent::attention {

using numerics::Graph;
using numerics::Value;

/// Projection weights for one attention layer, bound on a graph. Queries and
/// keys/values may come from sources of different widths; the model width is
/// head_count * head_dim.
struct AttnParams {
  Value w_q;  // [d_q_in x d_f]
  Value w_k;  // [d_kv_in x d_f]
  Value w_v;  // [d_kv_in x d_f]
  Value w_o;  // [d_f x d_f]
  int head_count = 1;
  int head_dim = 0;

  int model_dim() const { return head_count * head_dim; }
};

/// Modulation projection for one adaln-wrapped sublayer: silu(cond) is mapped
/// to [scale, shift, gate], each of the sublayer width. The gate third of the
/// projection is zero-initialized so the residual starts as the identity.
struct AdaLNParams {
  Value w_mod;  // [d_cond x 3d]
  Value b_mod;  // [1 x 3d]
};

enum class SparseMode { kEdge, kJoint };

struct SparseConfig {
  SparseMode mode = SparseMode::kEdge;
  double sparsity_ratio = 0.5;      // rho in (0, 1]
  double gumbel_temperature = 1.0;  // tau
  bool noise = false;               // Gumbel noise on the logits
  int joints = 0;                   // J; required for joint mode grouping

  /// Retained units per head: edges in edge mode, other-agent joint groups in
  /// joint mode. Always at least 1.
  Eigen::Index top_k(Eigen::Index units_per_head) const;
};

/// Contiguous equal-size per-head ranges over the flattened edge index.
/// A remainder is absorbed by zero-edge padding.
struct EdgePartition {
  Eigen::Index padded_total = 0;
  Eigen::Index per_head = 0;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges;  // [begin, end)
};

EdgePartition partition_edges(Eigen::Index total_edges, int heads);

/// Standard multi-head scaled dot-product attention (scale 1/sqrt(d_h));
/// heads concatenated, then output-projected.
Value multi_head_attention(Value q_src, Value kv_src, const AttnParams& params);

/// y = x + gate .* sublayer(layer_norm(x) .* (1 + scale) + shift), with the
/// modulation triple derived from cond.
Value adaln(Value x, Value cond, const AdaLNParams& params,
            const std::function<Value(Value)>& sublayer);

/// The (scale, shift, gate) rows for one sublayer of width d.
struct Modulation {
  Value scale, shift, gate;
};
Modulation adaln_modulation(Value cond, const AdaLNParams& params, Eigen::Index d);
/// layer_norm(x) .* (1 + scale) + shift
Value adaln_premod(Value x, const Modulation& mod);
/// x + gate .* sublayer_out
Value adaln_residual(Value x, Value sublayer_out, const Modulation& mod);

/// Per-head attention maps over the head's edge subset:
/// softmax((Q K^T / sqrt(d_f) + G) / tau), rows of the H per-head maps stacked
/// into [(H * l_f) x per_head]. G is i.i.d. Gumbel(0,1) when cfg.noise is on
/// (rng must then be non-null) and zero otherwise.
Value gumbel_attention_map(Value features, Value edges, const AttnParams& params,
                           const SparseConfig& cfg, std::mt19937_64* rng = nullptr);

/// Binary row-wise top-k mask; ties break toward the lowest column index.
Mat topk_mask(const Mat& a, Eigen::Index k);

/// Sparse interaction-graph attention, Hadamard-masked:
/// f' = concat_h[(M_h o A_h) V_h] W_O. The mask is a stop-gradient constant;
/// in joint mode whole other-agent joint groups are kept or dropped together.
Value sparse_edge_attention(Value features, Value edges, const AttnParams& params,
                            const SparseConfig& cfg, std::mt19937_64* rng = nullptr);

/// Group index of a flattened edge: the other-agent joint it points from.
inline Eigen::Index edge_group(Eigen::Index flat_edge, int joints) {
  return (flat_edge % (static_cast<Eigen::Index>(joints) * joints)) / joints;
}

}  // namespace interagent::attention
