// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records one forward pass. Every value is a row-major dynamic matrix;
// scalars are 1x1. Parameters enter the tape as leaves and their gradients
// are collected after backward() into a Gradients buffer owned by the caller,
// so several tapes (one per document) can run against the same ParamStore.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cassert>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace matchvie::ad {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using SparseMat = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
struct Parameter {
  std::string name;
  Mat<Scalar> value;
  std::size_t index = 0;
};

/// Ordered, named collection of trainable arrays.
template <typename Scalar>
class ParamStore {
 public:
  Parameter<Scalar>& add(const std::string& name, Mat<Scalar> init) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = name;
    p->value = std::move(init);
    p->index = params_.size();
    by_name_[name] = p->index;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<Scalar>& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter<Scalar>& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Per-parameter gradient buffers, indexed like the ParamStore.
template <typename Scalar>
struct Gradients {
  std::vector<Mat<Scalar>> grads;

  explicit Gradients(const ParamStore<Scalar>& store) : grads(store.size()) {
    for (std::size_t i = 0; i < store.size(); ++i)
      grads[i] = Mat<Scalar>::Zero(store[i].value.rows(), store[i].value.cols());
  }
  void zero() {
    for (auto& g : grads) g.setZero();
  }
  void add(const Gradients& other) {
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
  }
  Scalar norm() const {
    Scalar s = 0;
    for (const auto& g : grads) s += g.squaredNorm();
    return std::sqrt(s);
  }
  void scale(Scalar k) {
    for (auto& g : grads) g *= k;
  }
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }
};

template <typename Scalar>
class Tape {
 public:
  using Matrix = Mat<Scalar>;
  using Backward = std::function<void(const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Matrix value) { return push(std::move(value), false, nullptr); }

  Var<Scalar> param(Parameter<Scalar>& p) {
    auto it = param_nodes_.find(p.index);
    if (it != param_nodes_.end()) return {this, it->second};
    Var<Scalar> v = push(p.value, true, nullptr);
    nodes_[v.id].param_index = static_cast<long>(p.index);
    param_nodes_[p.index] = v.id;
    return v;
  }

  /// Records an op output. `backward` receives d(loss)/d(output) and must
  /// propagate into its inputs with accumulate().
  Var<Scalar> record(Matrix value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }
  Var<Scalar> record(Matrix value, std::span<const Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  bool requires_grad(Var<Scalar> v) const { return nodes_[v.id].requires_grad; }

  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix* grad(Var<Scalar> v) const {
    const auto& n = nodes_[v.id];
    return n.has_grad ? &n.grad : nullptr;
  }

  void backward(Var<Scalar> loss) {
    auto& root = nodes_[loss.id];
    if (!root.requires_grad) return;
    root.grad = Matrix::Ones(root.value.rows(), root.value.cols());
    root.has_grad = true;
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      // Ops only write to inputs, which always have lower ids.
      if (n.has_grad && n.backward) n.backward(n.grad);
    }
  }

  /// Adds every parameter gradient seen on this tape into `out`.
  void collect(Gradients<Scalar>& out) const {
    for (const auto& [index, id] : param_nodes_) {
      const auto& n = nodes_[id];
      if (n.has_grad) out.grads[index] += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    long param_index = -1;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<Scalar> push(Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // deque: push_back keeps references to earlier values valid.
  std::deque<Node> nodes_;
  std::unordered_map<std::size_t, int> param_nodes_;
};

}  // namespace matchvie::ad
