#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "interagent/attention.hpp"
#include "oracle_helpers.hpp"

using namespace interagent;
using namespace interagent::attention;
using namespace interagent::numerics;
using ia_test::random_mat;
using ia_test::rel_err;

namespace {

// Brute-force per-head attention: explicit loops, exp/sum softmax.
Mat mha_oracle(const Mat& qsrc, const Mat& kvsrc, const Mat& wq, const Mat& wk,
               const Mat& wv, const Mat& wo, int heads) {
  const Eigen::Index dh = wq.cols() / heads;
  Mat q = qsrc * wq, k = kvsrc * wk, v = kvsrc * wv;
  Mat concat(qsrc.rows(), wq.cols());
  for (int h = 0; h < heads; ++h) {
    Mat qh = q.middleCols(h * dh, dh), kh = k.middleCols(h * dh, dh),
        vh = v.middleCols(h * dh, dh);
    for (Eigen::Index i = 0; i < qh.rows(); ++i) {
      Eigen::VectorXd logits = kh * qh.row(i).transpose() / std::sqrt(static_cast<double>(dh));
      Eigen::ArrayXd w = logits.array().exp();
      w /= w.sum();
      concat.block(i, h * dh, 1, dh) = (w.matrix().transpose() * vh);
    }
  }
  return concat * wo;
}

// Dense interaction-graph attention: per-head edge subsets, no mask,
// scale 1/sqrt(d_f), exp/sum softmax.
Mat edge_attention_oracle(const Mat& f, const Mat& edges_in, const Mat& wq, const Mat& wk,
                          const Mat& wv, const Mat& wo, int heads, const Mat* mask_by_head) {
  const Eigen::Index df = wq.cols();
  const Eigen::Index dh = df / heads;
  EdgePartition part = partition_edges(edges_in.rows(), heads);
  Mat edges = Mat::Zero(part.padded_total, edges_in.cols());
  edges.topRows(edges_in.rows()) = edges_in;
  Mat q = f * wq, k = edges * wk, v = edges * wv;
  Mat concat(f.rows(), df);
  for (int h = 0; h < heads; ++h) {
    auto [b, e] = part.ranges[static_cast<size_t>(h)];
    Mat kh = k.middleRows(b, e - b).middleCols(h * dh, dh);
    Mat vh = v.middleRows(b, e - b).middleCols(h * dh, dh);
    Mat qh = q.middleCols(h * dh, dh);
    for (Eigen::Index i = 0; i < qh.rows(); ++i) {
      Eigen::VectorXd logits = kh * qh.row(i).transpose() / std::sqrt(static_cast<double>(df));
      Eigen::ArrayXd w = logits.array().exp();
      w /= w.sum();
      if (mask_by_head)
        w *= mask_by_head[h].row(i).transpose().array();
      concat.block(i, h * dh, 1, dh) = (w.matrix().transpose() * vh);
    }
  }
  return concat * wo;
}

AttnParams bind_attn(Graph& g, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo,
                     int heads, bool grad = false) {
  AttnParams p;
  p.w_q = g.leaf(Tensor(wq, grad));
  p.w_k = g.leaf(Tensor(wk, grad));
  p.w_v = g.leaf(Tensor(wv, grad));
  p.w_o = g.leaf(Tensor(wo, grad));
  p.head_count = heads;
  p.head_dim = static_cast<int>(wq.cols()) / heads;
  return p;
}

// Full-sort mask oracle (independent of the stable_sort implementation).
Mat topk_oracle(const Mat& a, Eigen::Index k) {
  Mat mask = Mat::Zero(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::vector<std::pair<double, Eigen::Index>> scored;
    for (Eigen::Index c = 0; c < a.cols(); ++c) scored.emplace_back(a(r, c), c);
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
      if (x.first != y.first) return x.first > y.first;
      return x.second < y.second;
    });
    for (Eigen::Index i = 0; i < k; ++i) mask(r, scored[static_cast<size_t>(i)].second) = 1.0;
  }
  return mask;
}

}  // namespace

TEST_CASE("multi_head_attention: single token with identity projections") {
  Graph g;
  Mat x(1, 4);
  x << 0.3, -1.2, 0.5, 2.0;
  AttnParams p = bind_attn(g, Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4),
                           Mat::Identity(4, 4), 1);
  Value y = multi_head_attention(g.constant(x), g.constant(x), p);
  CHECK((y.val() - x).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("multi_head_attention: identical keys average the values") {
  Graph g;
  Mat kv(2, 2);
  kv << 1, 2, 1, 5;  // first column (the key) identical, values distinct
  Mat wk(2, 2);
  wk << 1, 0, 0, 0;
  AttnParams p = bind_attn(g, Mat::Identity(2, 2), wk, Mat::Identity(2, 2), Mat::Identity(2, 2), 1);
  Mat q(1, 2);
  q << 0.7, -0.3;
  Value y = multi_head_attention(g.constant(q), g.constant(kv), p);
  Mat want = 0.5 * (kv.row(0) + kv.row(1));
  CHECK((y.val() - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("multi_head_attention matches brute-force oracle") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const int heads = 2, df = 8;
    Mat qsrc = random_mat(rng, 3, 5), kvsrc = random_mat(rng, 4, 6);
    Mat wq = random_mat(rng, 5, df), wk = random_mat(rng, 6, df), wv = random_mat(rng, 6, df),
        wo = random_mat(rng, df, df);
    Graph g;
    AttnParams p = bind_attn(g, wq, wk, wv, wo, heads);
    Value y = multi_head_attention(g.constant(qsrc), g.constant(kvsrc), p);
    CHECK((y.val() - mha_oracle(qsrc, kvsrc, wq, wk, wv, wo, heads)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("multi_head_attention rejects mismatched shapes") {
  Graph g;
  AttnParams p = bind_attn(g, Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4),
                           Mat::Identity(4, 4), 1);
  CHECK_THROWS_AS(multi_head_attention(g.constant(Mat::Zero(2, 3)), g.constant(Mat::Zero(2, 4)), p),
                  DimensionError);
}

TEST_CASE("adaln: zero gate is the exact identity") {
  std::mt19937_64 rng(103);
  Graph g;
  const int d = 6;
  Mat x = random_mat(rng, 3, d);
  Mat cond = random_mat(rng, 1, d);
  AdaLNParams p;
  p.w_mod = g.constant(Mat::Zero(d, 3 * d));
  p.b_mod = g.constant(Mat::Zero(1, 3 * d));
  Mat w = random_mat(rng, d, d);
  Value y = adaln(g.constant(x), g.constant(cond), p,
                  [&](Value u) { return matmul(u, g.constant(w)); });
  CHECK((y.val() - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adaln: unit gate, zero scale/shift is a plain residual sublayer") {
  std::mt19937_64 rng(107);
  Graph g;
  const int d = 5;
  Mat x = random_mat(rng, 4, d);
  AdaLNParams p;
  p.w_mod = g.constant(Mat::Zero(d, 3 * d));
  Mat b = Mat::Zero(1, 3 * d);
  b.middleCols(2 * d, d).setOnes();
  p.b_mod = g.constant(b);
  Mat w = random_mat(rng, d, d);
  Value y = adaln(g.constant(x), g.constant(Mat::Zero(1, d)), p,
                  [&](Value u) { return matmul(u, g.constant(w)); });

  Value ln = layer_norm_rows(g.constant(x), g.constant(Mat::Ones(1, d)), g.constant(Mat::Zero(1, d)));
  Mat want = x + ln.val() * w;
  CHECK((y.val() - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("adaln gradient wrt cond matches finite differences") {
  std::mt19937_64 rng(109);
  const int d = 4;
  for (int seed = 0; seed < 10; ++seed) {
    Mat x = random_mat(rng, 3, d);
    Mat cond0 = random_mat(rng, 1, d);
    Mat wmod = random_mat(rng, d, 3 * d), bmod = random_mat(rng, 1, 3 * d);
    Mat w = random_mat(rng, d, d);
    auto run = [&](const Mat& cond, Mat* gc) {
      Graph g;
      Value vc = g.leaf(Tensor(cond, true));
      AdaLNParams p;
      p.w_mod = g.constant(wmod);
      p.b_mod = g.constant(bmod);
      Value y = adaln(g.constant(x), vc, p, [&](Value u) { return gelu(matmul(u, g.constant(w))); });
      Value loss = frobenius_norm(y);
      if (gc) {
        g.backward(loss);
        *gc = g.grad_of(vc);
      }
      return loss.val()(0, 0);
    };
    Mat gc;
    run(cond0, &gc);
    Mat fd = finite_diff_grad([&](const Mat& c) { return run(c, nullptr); }, cond0);
    CHECK(rel_err(gc, fd) <= 1e-4);
  }
}

TEST_CASE("partition_edges: exact division, padding, coverage") {
  EdgePartition p = partition_edges(225, 5);
  CHECK(p.per_head == 45);
  CHECK(p.padded_total == 225);
  REQUIRE(p.ranges.size() == 5);
  for (int h = 0; h < 5; ++h) {
    CHECK(p.ranges[static_cast<size_t>(h)].first == 45 * h);
    CHECK(p.ranges[static_cast<size_t>(h)].second == 45 * (h + 1));
  }

  EdgePartition q = partition_edges(8, 3);
  CHECK(q.padded_total == 9);
  CHECK(q.per_head == 3);

  std::mt19937_64 rng(113);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Index total = 1 + static_cast<Eigen::Index>(rng() % 97);
    int heads = 1 + static_cast<int>(rng() % 7);
    EdgePartition part = partition_edges(total, heads);
    CHECK(part.padded_total >= total);
    Eigen::Index covered = 0;
    for (auto [b, e] : part.ranges) {
      CHECK(b == covered);  // contiguous, disjoint
      covered = e;
    }
    CHECK(covered == part.padded_total);
  }
}

TEST_CASE("gumbel map with noise off and tau 1 is plain edge softmax") {
  std::mt19937_64 rng(127);
  const int heads = 2, df = 6;
  Mat f = random_mat(rng, 3, df);
  Mat edges = random_mat(rng, 8, 3);
  Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df);
  Graph g;
  AttnParams p = bind_attn(g, wq, wk, wv, Mat::Identity(df, df), heads);
  SparseConfig cfg;
  cfg.noise = false;
  cfg.gumbel_temperature = 1.0;
  Value a = gumbel_attention_map(g.constant(f), g.constant(edges), p, cfg);

  EdgePartition part = partition_edges(8, heads);
  Mat padded = Mat::Zero(part.padded_total, 3);
  padded.topRows(8) = edges;
  const int dh = df / heads;
  for (int h = 0; h < heads; ++h) {
    auto [b, e] = part.ranges[static_cast<size_t>(h)];
    Mat qh = (f * wq).middleCols(h * dh, dh);
    Mat kh = (padded * wk).middleRows(b, e - b).middleCols(h * dh, dh);
    Mat logits = qh * kh.transpose() / std::sqrt(static_cast<double>(df));
    Mat want = ia_test::softmax_oracle(logits);
    Mat got = a.val().middleRows(h * f.rows(), f.rows());
    CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-12);
  }

  // rows sum to one
  for (Eigen::Index r = 0; r < a.val().rows(); ++r)
    CHECK(std::abs(a.val().row(r).sum() - 1.0) <= 1e-9);
}

TEST_CASE("gumbel map at low temperature concentrates on the argmax") {
  std::mt19937_64 rng(131);
  const int df = 4;
  // distinct logits: resample until every row has a clear top-1 gap
  for (;;) {
    Mat f = random_mat(rng, 2, df);
    Mat edges = random_mat(rng, 6, 3);
    Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df);
    Mat logits = (f * wq) * (edges * wk).transpose() / std::sqrt(static_cast<double>(df));
    bool distinct = true;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      std::vector<double> sorted(logits.row(r).data(), logits.row(r).data() + logits.cols());
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[0] - sorted[1] < 0.1) distinct = false;
    }
    if (!distinct) continue;
    Graph g;
    AttnParams p = bind_attn(g, wq, wk, wv, Mat::Identity(df, df), 1);
    SparseConfig cfg;
    cfg.noise = false;
    cfg.gumbel_temperature = 0.01;
    Value a = gumbel_attention_map(g.constant(f), g.constant(edges), p, cfg);
    for (Eigen::Index r = 0; r < a.val().rows(); ++r) {
      Eigen::Index arg;
      a.val().row(r).maxCoeff(&arg);
      CHECK(a.val()(r, arg) >= 0.999);
    }
    break;
  }
}

TEST_CASE("gumbel map determinism: noise off bitwise, noise on seed-reproducible") {
  std::mt19937_64 rng(137);
  const int df = 4;
  Mat f = random_mat(rng, 2, df);
  Mat edges = random_mat(rng, 4, 3);
  Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df);

  auto run = [&](bool noise, uint64_t seed) {
    Graph g;
    AttnParams p = bind_attn(g, wq, wk, wv, Mat::Identity(df, df), 2);
    SparseConfig cfg;
    cfg.noise = noise;
    std::mt19937_64 nrng(seed);
    return Mat(gumbel_attention_map(g.constant(f), g.constant(edges), p, cfg,
                                    noise ? &nrng : nullptr)
                   .val());
  };
  CHECK((run(false, 0) - run(false, 1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((run(true, 7) - run(true, 7)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((run(true, 7) - run(true, 8)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("topk_mask: direct cases and tie rule") {
  Mat row(1, 3);
  row << 0.5, 0.3, 0.2;
  Mat m = topk_mask(row, 2);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(0, 1) == 1.0);
  CHECK(m(0, 2) == 0.0);

  CHECK((topk_mask(row, 3).array() == 1.0).all());

  Mat tie(1, 3);
  tie << 0.4, 0.4, 0.2;
  Mat mt = topk_mask(tie, 1);
  CHECK(mt(0, 0) == 1.0);
  CHECK(mt(0, 1) == 0.0);

  CHECK_THROWS_AS(topk_mask(row, 0), ConfigError);
  CHECK_THROWS_AS(topk_mask(row, 4), ConfigError);
}

TEST_CASE("topk_mask matches a full-sort oracle on 100 random matrices") {
  std::mt19937_64 rng(139);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng() % 6);
    Eigen::Index cols = 2 + static_cast<Eigen::Index>(rng() % 10);
    Mat a = random_mat(rng, rows, cols);
    if (trial % 3 == 0) a(0, 0) = a(0, cols - 1);  // exercise ties sometimes
    Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % static_cast<uint64_t>(cols));
    Mat got = topk_mask(a, k);
    Mat want = topk_oracle(a, k);
    CHECK((got - want).cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index r = 0; r < rows; ++r) CHECK(got.row(r).sum() == static_cast<double>(k));
  }
}

TEST_CASE("topk_mask retention is monotone in k") {
  std::mt19937_64 rng(149);
  for (int trial = 0; trial < 25; ++trial) {
    Mat a = random_mat(rng, 4, 9);
    for (Eigen::Index k = 1; k < 9; ++k) {
      Mat mk = topk_mask(a, k), mk1 = topk_mask(a, k + 1);
      CHECK(((mk1 - mk).array() >= 0.0).all());  // retained set only grows
    }
  }
}

TEST_CASE("sparse attention with rho 1 equals dense edge attention") {
  std::mt19937_64 rng(151);
  for (int trial = 0; trial < 5; ++trial) {
    const int heads = 2, df = 8;
    Mat f = random_mat(rng, 3, df);
    Mat edges = random_mat(rng, 12, 3);
    Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df),
        wo = random_mat(rng, df, df);
    Graph g;
    AttnParams p = bind_attn(g, wq, wk, wv, wo, heads);
    SparseConfig cfg;
    cfg.sparsity_ratio = 1.0;
    Value y = sparse_edge_attention(g.constant(f), g.constant(edges), p, cfg);
    Mat dense = edge_attention_oracle(f, edges, wq, wk, wv, wo, heads, nullptr);
    CHECK((y.val() - dense).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("sparse attention matches brute-force masked softmax oracle (J=3, l_e=2, H=1)") {
  std::mt19937_64 rng(157);
  const int joints = 3, frames = 2, heads = 1, df = 6;
  const Eigen::Index n_edges = frames * joints * joints;  // 18
  for (int trial = 0; trial < 10; ++trial) {
    Mat f = random_mat(rng, 4, df);
    Mat edges = random_mat(rng, n_edges, 3);
    Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df),
        wo = random_mat(rng, df, df);
    SparseConfig cfg;
    cfg.sparsity_ratio = 0.5;
    cfg.joints = joints;

    // oracle: exp/sum softmax, sort-based mask, Hadamard, value mix
    Mat logits = (f * wq) * (edges * wk).transpose() / std::sqrt(static_cast<double>(df));
    Mat a = ia_test::softmax_oracle(logits);
    Mat mask = topk_oracle(a, cfg.top_k(n_edges));
    Mat want = (a.cwiseProduct(mask)) * (edges * wv) * wo;

    Graph g;
    AttnParams p = bind_attn(g, wq, wk, wv, wo, heads);
    Value y = sparse_edge_attention(g.constant(f), g.constant(edges), p, cfg);
    CHECK((y.val() - want).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("sparse attention with k=1 selects a single value row per head") {
  std::mt19937_64 rng(163);
  const int df = 4;
  Mat f = random_mat(rng, 2, df);
  Mat edges = random_mat(rng, 5, 3);
  Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df);
  Graph g;
  AttnParams p = bind_attn(g, wq, wk, wv, Mat::Identity(df, df), 1);
  SparseConfig cfg;
  cfg.sparsity_ratio = 1e-9;  // forces k = 1
  Value y = sparse_edge_attention(g.constant(f), g.constant(edges), p, cfg);

  EdgePartition part = partition_edges(5, 1);
  Mat padded = Mat::Zero(part.padded_total, 3);
  padded.topRows(5) = edges;
  Mat logits = (f * wq) * (padded * wk).transpose() / std::sqrt(static_cast<double>(df));
  Mat a = ia_test::softmax_oracle(logits);
  Mat v = padded * wv;
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    Eigen::Index arg;
    a.row(r).maxCoeff(&arg);
    Mat want = a(r, arg) * v.row(arg);  // exactly the top edge's value row, softmax-scaled
    CHECK((y.val().row(r) - want).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("joint-mode sparsity keeps whole other-agent joint groups") {
  std::mt19937_64 rng(167);
  const int joints = 3, frames = 2, df = 6;
  const Eigen::Index n_edges = frames * joints * joints;
  Mat f = random_mat(rng, 3, df);
  Mat edges = random_mat(rng, n_edges, 3);
  Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 3, df), wv = random_mat(rng, 3, df),
      wo = Mat::Identity(df, df);
  SparseConfig cfg;
  cfg.mode = SparseMode::kJoint;
  cfg.sparsity_ratio = 0.34;  // round(0.34 * 3) = 1 group
  cfg.joints = joints;

  Graph g;
  AttnParams p = bind_attn(g, wq, wk, wv, wo, 1);
  Value y = sparse_edge_attention(g.constant(f), g.constant(edges), p, cfg);

  // oracle: group scores are summed attention mass per other-agent joint
  Mat logits = (f * wq) * (edges * wk).transpose() / std::sqrt(static_cast<double>(df));
  Mat a = ia_test::softmax_oracle(logits);
  Mat v = edges * wv;
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    Eigen::Vector3d score = Eigen::Vector3d::Zero();
    for (Eigen::Index c = 0; c < n_edges; ++c) score(edge_group(c, joints)) += a(r, c);
    Eigen::Index best;
    score.maxCoeff(&best);
    Mat want = Mat::Zero(1, df);
    for (Eigen::Index c = 0; c < n_edges; ++c)
      if (edge_group(c, joints) == best) want += a(r, c) * v.row(c);
    CHECK((y.val().row(r) - want).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("sparse attention gradients match finite differences (noise off)") {
  std::mt19937_64 rng(173);
  const int joints = 3, df = 4;
  const Eigen::Index n_edges = joints * joints;
  int done = 0;
  while (done < 10) {
    Mat f0 = random_mat(rng, 2, df);
    Mat edges = random_mat(rng, n_edges, 3);
    Mat wq0 = random_mat(rng, df, df), wk0 = random_mat(rng, 3, df), wv0 = random_mat(rng, 3, df),
        wo = random_mat(rng, df, df);
    SparseConfig cfg;
    cfg.sparsity_ratio = 0.5;
    cfg.joints = joints;

    // Reject instances whose top-k boundary is too tight for finite
    // differences to stay on one side of the mask switch.
    Mat logits = (f0 * wq0) * (edges * wk0).transpose() / std::sqrt(static_cast<double>(df));
    Mat a = ia_test::softmax_oracle(logits);
    Eigen::Index k = cfg.top_k(n_edges);
    bool well_separated = true;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      std::vector<double> sorted(a.row(r).data(), a.row(r).data() + a.cols());
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[static_cast<size_t>(k - 1)] - sorted[static_cast<size_t>(k)] < 1e-3)
        well_separated = false;
    }
    if (!well_separated) continue;
    ++done;

    auto run = [&](const Mat& f, const Mat& wq, const Mat& wk, const Mat& wv, Mat* gf, Mat* gq,
                   Mat* gk, Mat* gv) {
      Graph g;
      Value vf = g.leaf(Tensor(f, true));
      AttnParams p;
      p.w_q = g.leaf(Tensor(wq, true));
      p.w_k = g.leaf(Tensor(wk, true));
      p.w_v = g.leaf(Tensor(wv, true));
      p.w_o = g.constant(wo);
      p.head_count = 1;
      p.head_dim = df;
      Value loss = frobenius_norm(sparse_edge_attention(vf, g.constant(edges), p, cfg));
      if (gf) {
        g.backward(loss);
        *gf = g.grad_of(vf);
        *gq = g.grad_of(p.w_q);
        *gk = g.grad_of(p.w_k);
        *gv = g.grad_of(p.w_v);
      }
      return loss.val()(0, 0);
    };
    Mat gf, gq, gk, gv;
    run(f0, wq0, wk0, wv0, &gf, &gq, &gk, &gv);
    Mat fdf = finite_diff_grad([&](const Mat& m) { return run(m, wq0, wk0, wv0, 0, 0, 0, 0); }, f0);
    Mat fdq = finite_diff_grad([&](const Mat& m) { return run(f0, m, wk0, wv0, 0, 0, 0, 0); }, wq0);
    Mat fdk = finite_diff_grad([&](const Mat& m) { return run(f0, wq0, m, wv0, 0, 0, 0, 0); }, wk0);
    Mat fdv = finite_diff_grad([&](const Mat& m) { return run(f0, wq0, wk0, m, 0, 0, 0, 0); }, wv0);
    CHECK(rel_err(gf, fdf) <= 1e-4);
    CHECK(rel_err(gq, fdq) <= 1e-4);
    CHECK(rel_err(gk, fdk) <= 1e-4);
    CHECK(rel_err(gv, fdv) <= 1e-4);
  }
}

TEST_CASE("multi_head_attention gradients match finite differences") {
  std::mt19937_64 rng(179);
  for (int seed = 0; seed < 10; ++seed) {
    const int heads = 2, df = 6;
    Mat q0 = random_mat(rng, 3, df);
    Mat kv = random_mat(rng, 4, 5);
    Mat wq = random_mat(rng, df, df), wk = random_mat(rng, 5, df), wv = random_mat(rng, 5, df),
        wo = random_mat(rng, df, df);
    auto run = [&](const Mat& q, Mat* gq) {
      Graph g;
      Value vq = g.leaf(Tensor(q, true));
      AttnParams p = bind_attn(g, wq, wk, wv, wo, heads);
      Value loss = frobenius_norm(multi_head_attention(vq, g.constant(kv), p));
      if (gq) {
        g.backward(loss);
        *gq = g.grad_of(vq);
      }
      return loss.val()(0, 0);
    };
    Mat gq;
    run(q0, &gq);
    Mat fd = finite_diff_grad([&](const Mat& m) { return run(m, nullptr); }, q0);
    CHECK(rel_err(gq, fd) <= 1e-4);
  }
}
