#include "interagent/numerics.hpp"

#include <cmath>
#include <numeric>

namespace interagent::numerics {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

std::string dims(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Value matmul(Value a, Value b) {
  require(a.cols() == b.rows(), "matmul: inner dims disagree " + dims(a.val()) + " * " + dims(b.val()));
  Graph& g = *a.graph();
  Mat y = a.val() * b.val();
  bool rg = g.node(a.id()).requires_grad || g.node(b.id()).requires_grad;
  int ia = a.id(), ib = b.id();
  return g.push(std::move(y), rg, {}, [ia, ib](Graph& g, const Mat& go) {
    g.accumulate(ia, go * g.node(ib).value.transpose());
    g.accumulate(ib, g.node(ia).value.transpose() * go);
  });
}

Value matmul_nt(Value a, Value b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dims disagree " + dims(a.val()) + " * " + dims(b.val()) + "^T");
  Graph& g = *a.graph();
  Mat y = a.val() * b.val().transpose();
  bool rg = g.node(a.id()).requires_grad || g.node(b.id()).requires_grad;
  int ia = a.id(), ib = b.id();
  return g.push(std::move(y), rg, {}, [ia, ib](Graph& g, const Mat& go) {
    g.accumulate(ia, go * g.node(ib).value);
    g.accumulate(ib, go.transpose() * g.node(ia).value);
  });
}

Value add(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch " + dims(a.val()) + " vs " + dims(b.val()));
  Graph& g = *a.graph();
  bool rg = g.node(a.id()).requires_grad || g.node(b.id()).requires_grad;
  int ia = a.id(), ib = b.id();
  return g.push(a.val() + b.val(), rg, {}, [ia, ib](Graph& g, const Mat& go) {
    g.accumulate(ia, go);
    g.accumulate(ib, go);
  });
}

Value sub(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch " + dims(a.val()) + " vs " + dims(b.val()));
  Graph& g = *a.graph();
  bool rg = g.node(a.id()).requires_grad || g.node(b.id()).requires_grad;
  int ia = a.id(), ib = b.id();
  return g.push(a.val() - b.val(), rg, {}, [ia, ib](Graph& g, const Mat& go) {
    g.accumulate(ia, go);
    g.accumulate(ib, -go);
  });
}

Value hadamard(Value a, Value b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  Graph& g = *a.graph();
  bool rg = g.node(a.id()).requires_grad || g.node(b.id()).requires_grad;
  int ia = a.id(), ib = b.id();
  return g.push(a.val().cwiseProduct(b.val()), rg, {}, [ia, ib](Graph& g, const Mat& go) {
    g.accumulate(ia, go.cwiseProduct(g.node(ib).value));
    g.accumulate(ib, go.cwiseProduct(g.node(ia).value));
  });
}

Value scale(Value a, double c) {
  Graph& g = *a.graph();
  int ia = a.id();
  return g.push(a.val() * c, g.node(ia).requires_grad, {},
                [ia, c](Graph& g, const Mat& go) { g.accumulate(ia, go * c); });
}

Value add_row_broadcast(Value x, Value row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row_broadcast: row must be 1x" + std::to_string(x.cols()));
  Graph& g = *x.graph();
  Mat y = x.val();
  y.rowwise() += Eigen::RowVectorXd(row.val().row(0));
  bool rg = g.node(x.id()).requires_grad || g.node(row.id()).requires_grad;
  int ix = x.id(), ir = row.id();
  return g.push(std::move(y), rg, {}, [ix, ir](Graph& g, const Mat& go) {
    g.accumulate(ix, go);
    g.accumulate(ir, go.colwise().sum());
  });
}

Value mul_row_broadcast(Value x, Value row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "mul_row_broadcast: row must be 1x" + std::to_string(x.cols()));
  Graph& g = *x.graph();
  Mat y = x.val().array().rowwise() * row.val().row(0).array();
  bool rg = g.node(x.id()).requires_grad || g.node(row.id()).requires_grad;
  int ix = x.id(), ir = row.id();
  return g.push(std::move(y), rg, {}, [ix, ir](Graph& g, const Mat& go) {
    Mat gx = go.array().rowwise() * g.node(ir).value.row(0).array();
    g.accumulate(ix, gx);
    Mat gr = (go.cwiseProduct(g.node(ix).value)).colwise().sum();
    g.accumulate(ir, gr);
  });
}

Value hadamard_const(Value x, const Mat& mask) {
  require(mask.rows() == x.rows() && mask.cols() == x.cols(), "hadamard_const: shape mismatch");
  Graph& g = *x.graph();
  int ix = x.id();
  Mat m = mask;
  return g.push(x.val().cwiseProduct(m), g.node(ix).requires_grad, {},
                [ix, m](Graph& g, const Mat& go) { g.accumulate(ix, go.cwiseProduct(m)); });
}

Value mul_scalar_broadcast(Value x, Value s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar_broadcast: s must be 1x1");
  Graph& g = *x.graph();
  bool rg = g.node(x.id()).requires_grad || g.node(s.id()).requires_grad;
  int ix = x.id(), is = s.id();
  return g.push(x.val() * s.val()(0, 0), rg, {}, [ix, is](Graph& g, const Mat& go) {
    g.accumulate(ix, go * g.node(is).value(0, 0));
    g.accumulate(is, Mat::Constant(1, 1, go.cwiseProduct(g.node(ix).value).sum()));
  });
}

Value add_scalar_broadcast(Value x, Value s) {
  require(s.rows() == 1 && s.cols() == 1, "add_scalar_broadcast: s must be 1x1");
  Graph& g = *x.graph();
  bool rg = g.node(x.id()).requires_grad || g.node(s.id()).requires_grad;
  int ix = x.id(), is = s.id();
  return g.push(x.val().array() + s.val()(0, 0), rg, {}, [ix, is](Graph& g, const Mat& go) {
    g.accumulate(ix, go);
    g.accumulate(is, Mat::Constant(1, 1, go.sum()));
  });
}

Value linear(Value x, Value w, Value b) {
  Value y = matmul(x, w);
  if (!b.valid()) return y;
  return add_row_broadcast(y, b);
}

Value softmax_rows(Value logits) {
  Graph& g = *logits.graph();
  const Mat& x = logits.val();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    y.row(r) = e / e.sum();
  }
  int ix = logits.id();
  Mat yc = y;
  return g.push(std::move(y), g.node(ix).requires_grad, {}, [ix, yc](Graph& g, const Mat& go) {
    Mat gx(go.rows(), go.cols());
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      double dot = go.row(r).dot(yc.row(r));
      gx.row(r) = yc.row(r).cwiseProduct(go.row(r).array().matrix() - Mat::Constant(1, go.cols(), dot));
    }
    g.accumulate(ix, gx);
  });
}

Value layer_norm_rows(Value x, Value gain, Value bias, double eps) {
  require(x.cols() >= 1, "layer_norm: empty feature dim");
  require(gain.rows() == 1 && gain.cols() == x.cols(), "layer_norm: gain must be 1x" + std::to_string(x.cols()));
  require(bias.rows() == 1 && bias.cols() == x.cols(), "layer_norm: bias must be 1x" + std::to_string(x.cols()));
  Graph& g = *x.graph();
  const Mat& xv = x.val();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Mat xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  Mat y = (xhat.array().rowwise() * gain.val().row(0).array()).rowwise() + bias.val().row(0).array();
  bool rg = g.node(x.id()).requires_grad || g.node(gain.id()).requires_grad ||
            g.node(bias.id()).requires_grad;
  int ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.push(std::move(y), rg, {}, [ix, ig, ib, xhat, inv_std, d](Graph& g, const Mat& go) {
    const Mat& gv = g.node(ig).value;
    Mat dxhat = go.array().rowwise() * gv.row(0).array();
    Mat gx(go.rows(), go.cols());
    for (Eigen::Index r = 0; r < go.rows(); ++r) {
      // standard layer-norm backward in terms of xhat
      double mean_d = dxhat.row(r).mean();
      double mean_dx = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
      gx.row(r) = inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
    }
    g.accumulate(ix, gx);
    g.accumulate(ig, (go.cwiseProduct(xhat)).colwise().sum());
    g.accumulate(ib, go.colwise().sum());
    (void)d;
  });
}

namespace {
inline double norm_cdf(double v) { return 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); }
}  // namespace

Value gelu(Value x) {
  Graph& g = *x.graph();
  Mat y = x.val().unaryExpr([](double v) { return v * norm_cdf(v); });
  int ix = x.id();
  return g.push(std::move(y), g.node(ix).requires_grad, {}, [ix](Graph& g, const Mat& go) {
    Mat local = g.node(ix).value.unaryExpr([](double v) {
      double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      return norm_cdf(v) + v * pdf;
    });
    g.accumulate(ix, go.cwiseProduct(local));
  });
}

Value silu(Value x) {
  Graph& g = *x.graph();
  const Mat& xv = x.val();
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-xv.array()).exp());
  Mat y = (xv.array() * s).matrix();
  int ix = x.id();
  return g.push(std::move(y), g.node(ix).requires_grad, {}, [ix](Graph& g, const Mat& go) {
    const Eigen::ArrayXXd xa = g.node(ix).value.array();
    Eigen::ArrayXXd s = 1.0 / (1.0 + (-xa).exp());
    g.accumulate(ix, (go.array() * (s + xa * s * (1.0 - s))).matrix());
  });
}

Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  Graph& g = *parts.front().graph();
  Eigen::Index cols = parts.front().cols(), rows = 0;
  bool rg = false;
  for (const Value& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || g.node(p.id()).requires_grad;
  }
  Mat y(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  for (const Value& p : parts) {
    y.middleRows(r, p.rows()) = p.val();
    spans.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return g.push(std::move(y), rg, {}, [spans](Graph& g, const Mat& go) {
    Eigen::Index r = 0;
    for (auto [id, n] : spans) {
      g.accumulate(id, go.middleRows(r, n));
      r += n;
    }
  });
}

Value slice_rows(Value x, Eigen::Index r0, Eigen::Index n) {
  require(r0 >= 0 && n >= 0 && r0 + n <= x.rows(), "slice_rows: out of range");
  Graph& g = *x.graph();
  int ix = x.id();
  Eigen::Index rows = x.rows(), cols = x.cols();
  return g.push(x.val().middleRows(r0, n), g.node(ix).requires_grad, {},
                [ix, r0, n, rows, cols](Graph& g, const Mat& go) {
                  Mat gx = Mat::Zero(rows, cols);
                  gx.middleRows(r0, n) = go;
                  g.accumulate(ix, gx);
                });
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  Graph& g = *parts.front().graph();
  Eigen::Index rows = parts.front().rows(), cols = 0;
  bool rg = false;
  for (const Value& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || g.node(p.id()).requires_grad;
  }
  Mat y(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::pair<int, Eigen::Index>> spans;
  for (const Value& p : parts) {
    y.middleCols(c, p.cols()) = p.val();
    spans.emplace_back(p.id(), p.cols());
    c += p.cols();
  }
  return g.push(std::move(y), rg, {}, [spans](Graph& g, const Mat& go) {
    Eigen::Index c = 0;
    for (auto [id, n] : spans) {
      g.accumulate(id, go.middleCols(c, n));
      c += n;
    }
  });
}

Value slice_cols(Value x, Eigen::Index c0, Eigen::Index n) {
  require(c0 >= 0 && n >= 0 && c0 + n <= x.cols(), "slice_cols: out of range");
  Graph& g = *x.graph();
  int ix = x.id();
  Eigen::Index rows = x.rows(), cols = x.cols();
  return g.push(x.val().middleCols(c0, n), g.node(ix).requires_grad, {},
                [ix, c0, n, rows, cols](Graph& g, const Mat& go) {
                  Mat gx = Mat::Zero(rows, cols);
                  gx.middleCols(c0, n) = go;
                  g.accumulate(ix, gx);
                });
}

Value reshape(Value x, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == x.rows() * x.cols(), "reshape: element count mismatch");
  Graph& g = *x.graph();
  int ix = x.id();
  Eigen::Index orow = x.rows(), ocol = x.cols();
  Mat y(rows, cols);
  // row-major relabeling of the same element order
  Eigen::Map<const Eigen::VectorXd> flat(x.val().data(), x.val().size());
  Eigen::Map<Eigen::VectorXd>(y.data(), y.size()) = flat;
  return g.push(std::move(y), g.node(ix).requires_grad, {},
                [ix, orow, ocol](Graph& g, const Mat& go) {
                  Mat gx(orow, ocol);
                  Eigen::Map<const Eigen::VectorXd> flat(go.data(), go.size());
                  Eigen::Map<Eigen::VectorXd>(gx.data(), gx.size()) = flat;
                  g.accumulate(ix, gx);
                });
}

Value sum_all(Value x) {
  Graph& g = *x.graph();
  int ix = x.id();
  Eigen::Index rows = x.rows(), cols = x.cols();
  return g.push(Mat::Constant(1, 1, x.val().sum()), g.node(ix).requires_grad, {},
                [ix, rows, cols](Graph& g, const Mat& go) {
                  g.accumulate(ix, Mat::Constant(rows, cols, go(0, 0)));
                });
}

Value mean_all(Value x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.rows() * x.cols()));
}

Value frobenius_norm(Value x) {
  Graph& g = *x.graph();
  int ix = x.id();
  double norm = x.val().norm();
  return g.push(Mat::Constant(1, 1, norm), g.node(ix).requires_grad, {},
                [ix, norm](Graph& g, const Mat& go) {
                  if (norm <= 0.0) return;  // subgradient 0 at the origin
                  g.accumulate(ix, (go(0, 0) / norm) * g.node(ix).value);
                });
}

Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& x, double eps) {
  if (!(eps > 0)) throw ContractError("finite_diff_grad: eps must be positive");
  Mat grad(x.rows(), x.cols());
  Mat probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double keep = probe.data()[i];
    probe.data()[i] = keep + eps;
    double fp = f(probe);
    probe.data()[i] = keep - eps;
    double fm = f(probe);
    probe.data()[i] = keep;
    grad.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

}  // namespace interagent::numerics
