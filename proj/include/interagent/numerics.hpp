#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "interagent/errors.hpp"

namespace interagent {

// All in-memory arithmetic is 64-bit, row-major. 32-bit appears only in the
// on-disk formats (dataset, checkpoint), widened exactly on load.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

namespace numerics {

/// Dense value with an explicit shape record. The canonical storage is a
/// row-major matrix; rank-1 data lives in a single row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Mat value, bool requires_grad = false)
      : value(std::move(value)), requires_grad(requires_grad) {}

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool grad = false) {
    return Tensor(Mat::Zero(rows, cols), grad);
  }

  std::vector<Eigen::Index> shape() const { return {value.rows(), value.cols()}; }
  Eigen::Index size() const { return value.size(); }

  Mat value;
  bool requires_grad = false;
};

/// Ordered name -> Tensor table. std::map keeps iteration deterministic,
/// which fixes the gradient-reduction and serialization order.
using ParamStore = std::map<std::string, Tensor>;

class Graph;

/// Handle to a node on a Graph tape. Cheap to copy; valid as long as the
/// graph lives and is not cleared.
class Value {
 public:
  Value() = default;
  Value(Graph* graph, int id) : graph_(graph), id_(id) {}

  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  int id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse
/// of the creation order is already a topological order for backward.
class Graph {
 public:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched by backward
    bool requires_grad = false;
    std::string name;  // nonempty only for named leaves
    std::function<void(Graph&, const Mat&)> pull;  // pushes grad to parents
  };

  Value constant(Mat value) { return push(std::move(value), false, {}, nullptr); }

  Value leaf(const Tensor& t, const std::string& name = {}) {
    return push(t.value, t.requires_grad, name, nullptr);
  }

  /// Leaf bound to a named parameter; gradient retrievable by name.
  Value param(const ParamStore& store, const std::string& name) {
    auto it = store.find(name);
    if (it == store.end()) throw ContractError("unknown parameter: " + name);
    return push(it->second.value, it->second.requires_grad, name, nullptr);
  }

  Value push(Mat value, bool requires_grad, std::string name,
             std::function<void(Graph&, const Mat&)> pull) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  /// Accumulate a gradient contribution into node `id`.
  void accumulate(int id, const Mat& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse pass from a scalar seed. Gradients of leaves not on any path
  /// from the seed stay zero.
  void backward(Value seed) {
    if (seed.graph() != this) throw ContractError("seed belongs to another graph");
    const Node& s = node(seed.id());
    if (s.value.rows() != 1 || s.value.cols() != 1)
      throw ContractError("backward seed must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<size_t>(seed.id())].grad = Mat::Ones(1, 1);
    for (int i = seed.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0 || !n.pull) continue;
      n.pull(*this, n.grad);
    }
  }

  /// Gradient of a node after backward(); zeros when the node is off-path.
  Mat grad_of(Value v) const {
    const Node& n = node(v.id());
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Named-leaf gradients, accumulated per name (a parameter may be bound
  /// more than once on the same tape).
  std::map<std::string, Mat> named_grads() const {
    std::map<std::string, Mat> out;
    for (const auto& n : nodes_) {
      if (n.name.empty() || !n.requires_grad) continue;
      Mat g = n.grad.size() == 0 ? Mat::Zero(n.value.rows(), n.value.cols()) : n.grad;
      auto it = out.find(n.name);
      if (it == out.end())
        out.emplace(n.name, std::move(g));
      else
        it->second += g;
    }
    return out;
  }

 private:
  std::vector<Node> nodes_;
};

inline const Mat& Value::val() const { return graph_->node(id_).value; }

// ---- recorded operations ------------------------------------------------

Value matmul(Value a, Value b);     // A * B
Value matmul_nt(Value a, Value b);  // A * B^T
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value hadamard(Value a, Value b);
Value scale(Value a, double c);
Value add_row_broadcast(Value x, Value row);  // x [n x d] + row [1 x d]
Value mul_row_broadcast(Value x, Value row);  // x [n x d] .* row [1 x d]
Value hadamard_const(Value x, const Mat& mask);  // mask is a stop-gradient constant
Value mul_scalar_broadcast(Value x, Value s);    // s is 1x1
Value add_scalar_broadcast(Value x, Value s);    // s is 1x1

/// y = x W + b, the workhorse projection. b may be an empty handle for a
/// bias-free projection.
Value linear(Value x, Value w, Value b);

Value softmax_rows(Value logits);
Value layer_norm_rows(Value x, Value gain, Value bias, double eps = 1e-5);
Value gelu(Value x);
Value silu(Value x);

Value concat_rows(const std::vector<Value>& parts);
Value slice_rows(Value x, Eigen::Index r0, Eigen::Index n);
Value concat_cols(const std::vector<Value>& parts);
Value slice_cols(Value x, Eigen::Index c0, Eigen::Index n);
Value reshape(Value x, Eigen::Index rows, Eigen::Index cols);

Value sum_all(Value x);        // 1x1
Value mean_all(Value x);       // 1x1
Value frobenius_norm(Value x); // 1x1, gradient 0 at the origin

// ---- oracle -------------------------------------------------------------

/// Central finite differences of a scalar function, coordinate by
/// coordinate. Test oracle; independent of the tape.
Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& x,
                     double eps = 1e-5);

}  // namespace numerics
}  // namespace interagent
