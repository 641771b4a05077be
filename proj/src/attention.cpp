#include "interagent/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace interagent::attention {

using namespace numerics;

Eigen::Index SparseConfig::top_k(Eigen::Index units_per_head) const {
  if (!(sparsity_ratio > 0.0) || sparsity_ratio > 1.0)
    throw ConfigError("sparsity ratio must lie in (0, 1]");
  Eigen::Index k = static_cast<Eigen::Index>(std::llround(sparsity_ratio * units_per_head));
  return std::clamp<Eigen::Index>(k, 1, units_per_head);
}

EdgePartition partition_edges(Eigen::Index total_edges, int heads) {
  if (heads < 1) throw ConfigError("partition_edges: head count must be >= 1");
  EdgePartition p;
  p.per_head = (total_edges + heads - 1) / heads;
  p.padded_total = p.per_head * heads;
  for (int h = 0; h < heads; ++h)
    p.ranges.emplace_back(h * p.per_head, (h + 1) * p.per_head);
  return p;
}

Value multi_head_attention(Value q_src, Value kv_src, const AttnParams& params) {
  Value q = matmul(q_src, params.w_q);
  Value k = matmul(kv_src, params.w_k);
  Value v = matmul(kv_src, params.w_v);
  const int dh = params.head_dim;
  std::vector<Value> heads;
  heads.reserve(static_cast<size_t>(params.head_count));
  for (int h = 0; h < params.head_count; ++h) {
    Value qh = slice_cols(q, h * dh, dh);
    Value kh = slice_cols(k, h * dh, dh);
    Value vh = slice_cols(v, h * dh, dh);
    Value logits = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    heads.push_back(matmul(softmax_rows(logits), vh));
  }
  return matmul(concat_cols(heads), params.w_o);
}

Modulation adaln_modulation(Value cond, const AdaLNParams& params, Eigen::Index d) {
  Value mod = linear(silu(cond), params.w_mod, params.b_mod);
  if (mod.cols() != 3 * d) throw DimensionError("adaln: modulation width must be 3x the stream width");
  return {slice_cols(mod, 0, d), slice_cols(mod, d, d), slice_cols(mod, 2 * d, d)};
}

Value adaln_premod(Value x, const Modulation& mod) {
  Graph& g = *x.graph();
  const Eigen::Index d = x.cols();
  Value ones = g.constant(Mat::Ones(1, d));
  Value zeros = g.constant(Mat::Zero(1, d));
  Value normed = layer_norm_rows(x, ones, zeros);
  return add_row_broadcast(mul_row_broadcast(normed, add(ones, mod.scale)), mod.shift);
}

Value adaln_residual(Value x, Value sublayer_out, const Modulation& mod) {
  return add(x, mul_row_broadcast(sublayer_out, mod.gate));
}

Value adaln(Value x, Value cond, const AdaLNParams& params,
            const std::function<Value(Value)>& sublayer) {
  Modulation mod = adaln_modulation(cond, params, x.cols());
  return adaln_residual(x, sublayer(adaln_premod(x, mod)), mod);
}

namespace {

// Pads edge rows with zero-edges up to the partition size and returns the
// per-head key/value slices' parent. Padding rows stay constants.
Value pad_edges(Value edges, const EdgePartition& part) {
  if (edges.rows() == part.padded_total) return edges;
  Graph& g = *edges.graph();
  Value pad = g.constant(Mat::Zero(part.padded_total - edges.rows(), edges.cols()));
  return concat_rows({edges, pad});
}

Mat gumbel_noise(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
  Mat g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i)
    g.data()[i] = -std::log(-std::log(u(rng)));
  return g;
}

struct HeadMaps {
  std::vector<Value> maps;  // per head, [l_f x per_head]
  std::vector<Value> values;  // per head value slice, [per_head x d_h]
  EdgePartition part;
};

HeadMaps head_attention_maps(Value features, Value edges, const AttnParams& params,
                             const SparseConfig& cfg, std::mt19937_64* rng) {
  if (cfg.noise && rng == nullptr)
    throw ContractError("gumbel attention: noise enabled but no rng supplied");
  if (!(cfg.gumbel_temperature > 0.0)) throw ConfigError("gumbel temperature must be positive");
  Graph& g = *features.graph();
  const int dh = params.head_dim;
  const double df = static_cast<double>(params.model_dim());

  HeadMaps out;
  out.part = partition_edges(edges.rows(), params.head_count);
  Value padded = pad_edges(edges, out.part);
  Value q = matmul(features, params.w_q);
  Value k = matmul(padded, params.w_k);
  Value v = matmul(padded, params.w_v);

  for (int h = 0; h < params.head_count; ++h) {
    auto [begin, end] = out.part.ranges[static_cast<size_t>(h)];
    Value qh = slice_cols(q, h * dh, dh);
    Value kh = slice_cols(slice_rows(k, begin, end - begin), h * dh, dh);
    Value vh = slice_cols(slice_rows(v, begin, end - begin), h * dh, dh);
    Value logits = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(df));
    if (cfg.noise)
      logits = add(logits, g.constant(gumbel_noise(*rng, logits.rows(), logits.cols())));
    logits = scale(logits, 1.0 / cfg.gumbel_temperature);
    out.maps.push_back(softmax_rows(logits));
    out.values.push_back(vh);
  }
  return out;
}

// Joint-mode mask: score whole other-agent joint groups by their summed
// attention mass and keep the top groups.
Mat joint_group_mask(const Mat& a, Eigen::Index range_begin, const SparseConfig& cfg) {
  if (cfg.joints < 1) throw ConfigError("joint-mode sparsity requires the joint count");
  std::vector<Eigen::Index> group_of(static_cast<size_t>(a.cols()));
  std::vector<Eigen::Index> groups;  // distinct, in first-appearance order
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    Eigen::Index gidx = edge_group(range_begin + c, cfg.joints);
    group_of[static_cast<size_t>(c)] = gidx;
    if (std::find(groups.begin(), groups.end(), gidx) == groups.end()) groups.push_back(gidx);
  }
  std::sort(groups.begin(), groups.end());
  const Eigen::Index n_groups = static_cast<Eigen::Index>(groups.size());
  const Eigen::Index keep = std::min(cfg.top_k(cfg.joints), n_groups);

  Mat scores = Mat::Zero(a.rows(), n_groups);
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    Eigen::Index slot = std::distance(
        groups.begin(), std::find(groups.begin(), groups.end(), group_of[static_cast<size_t>(c)]));
    scores.col(slot) += a.col(c);
  }
  Mat group_mask = topk_mask(scores, keep);
  Mat mask(a.rows(), a.cols());
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    Eigen::Index slot = std::distance(
        groups.begin(), std::find(groups.begin(), groups.end(), group_of[static_cast<size_t>(c)]));
    mask.col(c) = group_mask.col(slot);
  }
  return mask;
}

}  // namespace

Value gumbel_attention_map(Value features, Value edges, const AttnParams& params,
                           const SparseConfig& cfg, std::mt19937_64* rng) {
  HeadMaps hm = head_attention_maps(features, edges, params, cfg, rng);
  return concat_rows(hm.maps);
}

Mat topk_mask(const Mat& a, Eigen::Index k) {
  if (k < 1 || k > a.cols()) throw ConfigError("topk_mask: k out of range");
  Mat mask = Mat::Zero(a.rows(), a.cols());
  std::vector<Eigen::Index> order(static_cast<size_t>(a.cols()));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index lhs, Eigen::Index rhs) {
      if (a(r, lhs) != a(r, rhs)) return a(r, lhs) > a(r, rhs);
      return lhs < rhs;  // ties break toward the lowest column index
    });
    for (Eigen::Index i = 0; i < k; ++i) mask(r, order[static_cast<size_t>(i)]) = 1.0;
  }
  return mask;
}

Value sparse_edge_attention(Value features, Value edges, const AttnParams& params,
                            const SparseConfig& cfg, std::mt19937_64* rng) {
  HeadMaps hm = head_attention_maps(features, edges, params, cfg, rng);
  std::vector<Value> heads;
  heads.reserve(hm.maps.size());
  for (size_t h = 0; h < hm.maps.size(); ++h) {
    const Mat& a = hm.maps[h].val();
    Mat mask;
    if (cfg.mode == SparseMode::kEdge)
      mask = topk_mask(a, cfg.top_k(a.cols()));
    else
      mask = joint_group_mask(a, hm.part.ranges[h].first, cfg);
    heads.push_back(matmul(hadamard_const(hm.maps[h], mask), hm.values[h]));
  }
  return matmul(concat_cols(heads), params.w_o);
}

}  // namespace interagent::attention
