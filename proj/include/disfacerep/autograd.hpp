#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph records every operation applied to its Vars; node ids are assigned
// in creation order, which is a valid topological order, so backward() just
// walks the tape in reverse. Graphs are single-use and single-threaded: build
// one per sample, call backward once, read the leaf gradients.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace disfacerep::ad {

template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}
  Matrix(int r, int c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::span<T> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const T> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  bool operator==(const Matrix&) const = default;
};

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
  return out;
}

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  const Matrix<T>& value() const;
  const Matrix<T>& grad() const;
  int rows() const { return value().rows; }
  int cols() const { return value().cols; }
  // Scalar read for 1x1 results.
  T item() const { return value().data.at(0); }
  Graph<T>* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, int id) : graph_(g), id_(id) {}
  Graph<T>* graph_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, {}); }
  Var<T> variable(Matrix<T> value) { return push(std::move(value), true, {}); }

  // Adds an op result. requires_grad is inherited from the parents.
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> parents, Backward backward);
  Var<T> record(Matrix<T> value, const std::vector<int>& parent_ids, Backward backward);

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates.
  void backward(Var<T> out);

  const Matrix<T>& value(int id) const { return nodes_[id].value; }
  const Matrix<T>& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, zero-allocated on first use.
  Matrix<T>& grad_buffer(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    Backward backward;
  };
  Var<T> push(Matrix<T> value, bool requires_grad, Backward backward);
  std::vector<Node> nodes_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return graph_->value(id_);
}
template <typename T>
const Matrix<T>& Var<T>::grad() const {
  return graph_->grad(id_);
}

// Gather: out.data[i] = index[i] >= 0 ? a.data[index[i]] : 0. The index map
// covers reshapes, transposes, patch extraction, im2col, and nearest upsampling.
using IndexMap = std::shared_ptr<const std::vector<int>>;

template <typename T>
Var<T> gather(Var<T> a, int rows, int cols, IndexMap index);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a * b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
// Adds a 1 x cols row to every row of a.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
// Scales row i of a by col(i, 0).
template <typename T> Var<T> mul_col(Var<T> a, Var<T> col);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
// 1 - a
template <typename T> Var<T> one_minus(Var<T> a);

template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
// tanh approximation of GELU.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
// Elementwise min(max(a, lo), hi); gradient is zero where clamped.
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);

template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// Row-wise unit normalization. Rows with norm below eps map to zero (with zero
// gradient), which makes cosine similarity against them 0.
template <typename T> Var<T> normalize_rows(Var<T> a, T eps = T(1e-12));

template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(Var<T> a, int begin, int count);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
// sum_i w_i a_i with constant weights shaped like a.
template <typename T> Var<T> weighted_sum(Var<T> a, const Matrix<T>& weights);
// Mean over rows: r x c -> 1 x c.
template <typename T> Var<T> mean_rows(Var<T> a);

// Mean of each grid cell of an (H*W) x C image: returns (grid*grid) x C.
// H and W must be divisible by grid.
template <typename T> Var<T> block_mean_pool(Var<T> image, int height, int width, int grid);

// sum over entries of the logistic loss with targets in {0, 1}.
template <typename T> Var<T> bce_with_logits_sum(Var<T> logits, const Matrix<T>& targets);
// Mean over rows of softmax cross-entropy; targets[r] indexes a column.
template <typename T> Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& targets);

// Index maps for gather. Results are cached per shape and shared.
IndexMap transpose_index(int rows, int cols);
// (H*W) x C image -> (grid*grid) x (patch*patch*C) patch rows, patches in
// row-major grid order, pixels row-major within a patch.
IndexMap patchify_index(int height, int width, int channels, int patch);
// 3x3 same-padding im2col for an (H*W) x C map -> (H*W) x (9*C).
IndexMap im2col3x3_index(int height, int width, int channels);
// Nearest-neighbour upsampling of an (h*w) x C map by factor f.
IndexMap upsample_index(int height, int width, int channels, int factor);

}  // namespace disfacerep::ad
