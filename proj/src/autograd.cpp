#include "disfacerep/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

#include "disfacerep/error.hpp"

namespace disfacerep::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> map(Matrix<T>& m) {
  return {m.data.data(), m.rows, m.cols};
}
template <typename T>
Eigen::Map<const RowMat<T>> map(const Matrix<T>& m) {
  return {m.data.data(), m.rows, m.cols};
}

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
bool same_shape(const Matrix<T>& a, const Matrix<T>& b) {
  return a.rows == b.rows && a.cols == b.cols;
}

// Elementwise unary op: forward f(x), backward derivative df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Graph<T>& g = *a.graph();
  const Matrix<T>& av = a.value();
  Matrix<T> out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = f(av.data[i]);
  const int ia = a.id();
  return g.record(std::move(out), {a}, [ia, df](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const Matrix<T>& go = g.grad(self);
    const Matrix<T>& x = g.value(ia);
    const Matrix<T>& y = g.value(self);
    Matrix<T>& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * df(x.data[i], y.data[i]);
  });
}

std::mutex& cache_mutex() {
  static std::mutex m;
  return m;
}

template <typename Key, typename Build>
IndexMap cached(std::map<Key, IndexMap>& cache, const Key& key, Build build) {
  std::lock_guard<std::mutex> lock(cache_mutex());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto made = std::make_shared<const std::vector<int>>(build());
  cache.emplace(key, made);
  return made;
}

}  // namespace

template <typename T>
Var<T> Graph<T>::push(Matrix<T> value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward)});
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Graph<T>::record(Matrix<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
  bool rg = false;
  for (const auto& p : parents) {
    require(p.graph() == this, "operands belong to different graphs");
    rg = rg || nodes_[p.id()].requires_grad;
  }
  return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
}

template <typename T>
Var<T> Graph<T>::record(Matrix<T> value, const std::vector<int>& parent_ids, Backward backward) {
  bool rg = false;
  for (int id : parent_ids) rg = rg || nodes_.at(id).requires_grad;
  return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
}

template <typename T>
Matrix<T>& Graph<T>::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix<T>(n.value.rows, n.value.cols);
  if (n.grad.rows != n.value.rows) n.grad = Matrix<T>(n.value.rows, n.value.cols);
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> out) {
  require(out.graph() == this, "backward on a foreign var");
  require(out.value().size() == 1, "backward needs a scalar output");
  if (!nodes_[out.id()].requires_grad) return;
  grad_buffer(out.id()).data[0] += T(1);
  for (int id = out.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

template <typename T>
Var<T> gather(Var<T> a, int rows, int cols, IndexMap index) {
  require(index && index->size() == static_cast<std::size_t>(rows) * cols, "gather index size mismatch");
  const Matrix<T>& av = a.value();
  Matrix<T> out(rows, cols);
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= 0) {
      require(static_cast<std::size_t>(idx[i]) < av.size(), "gather index out of range");
      out.data[i] = av.data[idx[i]];
    }
  }
  const int ia = a.id();
  return a.graph()->record(std::move(out), {a}, [ia, index](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const Matrix<T>& go = g.grad(self);
    Matrix<T>& ga = g.grad_buffer(ia);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= 0) ga.data[idx[i]] += go.data[i];
    }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Matrix<T>& av = a.value();
  const Matrix<T>& bv = b.value();
  require(av.cols == bv.rows, "matmul inner dimensions differ");
  Matrix<T> out(av.rows, bv.cols);
  map(out).noalias() = map(av) * map(bv);
  const int ia = a.id(), ib = b.id();
  return a.graph()->record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      Matrix<T>& ga = g.grad_buffer(ia);
      map(ga).noalias() += map(go) * map(g.value(ib)).transpose();
    }
    if (g.requires_grad(ib)) {
      Matrix<T>& gb = g.grad_buffer(ib);
      map(gb).noalias() += map(g.value(ia)).transpose() * map(go);
    }
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Matrix<T>& av = a.value();
  const Matrix<T>& bv = b.value();
  require(av.cols == bv.cols, "matmul_nt column counts differ");
  Matrix<T> out(av.rows, bv.rows);
  map(out).noalias() = map(av) * map(bv).transpose();
  const int ia = a.id(), ib = b.id();
  return a.graph()->record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      Matrix<T>& ga = g.grad_buffer(ia);
      map(ga).noalias() += map(go) * map(g.value(ib));
    }
    if (g.requires_grad(ib)) {
      Matrix<T>& gb = g.grad_buffer(ib);
      map(gb).noalias() += map(go).transpose() * map(g.value(ia));
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  return gather(a, a.cols(), a.rows(), transpose_index(a.rows(), a.cols()));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(same_shape(a.value(), b.value()), "add shape mismatch");
  Matrix<T> out = a.value();
  const Matrix<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    for (int id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      Matrix<T>& gx = g.grad_buffer(id);
      for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require(same_shape(a.value(), b.value()), "sub shape mismatch");
  Matrix<T> out = a.value();
  const Matrix<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      Matrix<T>& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    }
    if (g.requires_grad(ib)) {
      Matrix<T>& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] -= go.data[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require(same_shape(a.value(), b.value()), "mul shape mismatch");
  Matrix<T> out = a.value();
  const Matrix<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  const int ia = a.id(), ib = b.id();
  return a.graph()->record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      const Matrix<T>& bv = g.value(ib);
      Matrix<T>& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * bv.data[i];
    }
    if (g.requires_grad(ib)) {
      const Matrix<T>& av = g.value(ia);
      Matrix<T>& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i] * av.data[i];
    }
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  const Matrix<T>& rv = row.value();
  require(rv.rows == 1 && rv.cols == a.cols(), "add_row expects a 1 x cols row");
  Matrix<T> out = a.value();
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) out(r, c) += rv.data[c];
  }
  const int ia = a.id(), ir = row.id();
  return a.graph()->record(std::move(out), {a, row}, [ia, ir](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      Matrix<T>& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    }
    if (g.requires_grad(ir)) {
      Matrix<T>& gr = g.grad_buffer(ir);
      for (int r = 0; r < go.rows; ++r) {
        for (int c = 0; c < go.cols; ++c) gr.data[c] += go(r, c);
      }
    }
  });
}

template <typename T>
Var<T> mul_col(Var<T> a, Var<T> col) {
  const Matrix<T>& cv = col.value();
  require(cv.cols == 1 && cv.rows == a.rows(), "mul_col expects a rows x 1 column");
  Matrix<T> out = a.value();
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) out(r, c) *= cv.data[r];
  }
  const int ia = a.id(), ic = col.id();
  return a.graph()->record(std::move(out), {a, col}, [ia, ic](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    if (g.requires_grad(ia)) {
      const Matrix<T>& cv = g.value(ic);
      Matrix<T>& ga = g.grad_buffer(ia);
      for (int r = 0; r < go.rows; ++r) {
        for (int c = 0; c < go.cols; ++c) ga(r, c) += go(r, c) * cv.data[r];
      }
    }
    if (g.requires_grad(ic)) {
      const Matrix<T>& av = g.value(ia);
      Matrix<T>& gc = g.grad_buffer(ic);
      for (int r = 0; r < go.rows; ++r) {
        T acc = 0;
        for (int c = 0; c < go.cols; ++c) acc += go(r, c) * av(r, c);
        gc.data[r] += acc;
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  return unary(a, [](T x) { return T(1) - x; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(
      a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  return unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x))); },
      [](T x, T) {
        const T u = kC * (x + kA * x * x * x);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return unary(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const Matrix<T>& av = a.value();
  Matrix<T> out(av.rows, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    T m = av(r, 0);
    for (int c = 1; c < av.cols; ++c) m = std::max(m, av(r, c));
    T s = 0;
    for (int c = 0; c < av.cols; ++c) {
      out(r, c) = std::exp(av(r, c) - m);
      s += out(r, c);
    }
    for (int c = 0; c < av.cols; ++c) out(r, c) /= s;
  }
  const int ia = a.id();
  return a.graph()->record(std::move(out), {a}, [ia](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const Matrix<T>& go = g.grad(self);
    const Matrix<T>& y = g.value(self);
    Matrix<T>& ga = g.grad_buffer(ia);
    for (int r = 0; r < y.rows; ++r) {
      T dot = 0;
      for (int c = 0; c < y.cols; ++c) dot += go(r, c) * y(r, c);
      for (int c = 0; c < y.cols; ++c) ga(r, c) += y(r, c) * (go(r, c) - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Matrix<T>& xv = x.value();
  const int n = xv.cols;
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          "layer_norm gain/bias must be 1 x cols");
  const Matrix<T>& gv = gamma.value();
  const Matrix<T>& bv = beta.value();
  Matrix<T> out(xv.rows, n);
  // Cached per-row normalized values and inverse std for backward.
  auto xhat = std::make_shared<Matrix<T>>(xv.rows, n);
  auto inv_std = std::make_shared<std::vector<T>>(xv.rows);
  for (int r = 0; r < xv.rows; ++r) {
    T mu = 0;
    for (int c = 0; c < n; ++c) mu += xv(r, c);
    mu /= n;
    T var = 0;
    for (int c = 0; c < n; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= n;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < n; ++c) {
      (*xhat)(r, c) = (xv(r, c) - mu) * is;
      out(r, c) = (*xhat)(r, c) * gv.data[c] + bv.data[c];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph()->record(std::move(out), {x, gamma, beta}, [=](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    const int rows = go.rows;
    if (g.requires_grad(ig)) {
      Matrix<T>& gg = g.grad_buffer(ig);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < n; ++c) gg.data[c] += go(r, c) * (*xhat)(r, c);
      }
    }
    if (g.requires_grad(ib)) {
      Matrix<T>& gb = g.grad_buffer(ib);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < n; ++c) gb.data[c] += go(r, c);
      }
    }
    if (g.requires_grad(ix)) {
      const Matrix<T>& gv = g.value(ig);
      Matrix<T>& gx = g.grad_buffer(ix);
      for (int r = 0; r < rows; ++r) {
        T sum_d = 0, sum_dx = 0;
        for (int c = 0; c < n; ++c) {
          const T d = go(r, c) * gv.data[c];
          sum_d += d;
          sum_dx += d * (*xhat)(r, c);
        }
        for (int c = 0; c < n; ++c) {
          const T d = go(r, c) * gv.data[c];
          gx(r, c) += (*inv_std)[r] / n * (n * d - sum_d - (*xhat)(r, c) * sum_dx);
        }
      }
    }
  });
}

template <typename T>
Var<T> normalize_rows(Var<T> a, T eps) {
  const Matrix<T>& av = a.value();
  Matrix<T> out(av.rows, av.cols);
  auto norms = std::make_shared<std::vector<T>>(av.rows);
  for (int r = 0; r < av.rows; ++r) {
    T s = 0;
    for (int c = 0; c < av.cols; ++c) s += av(r, c) * av(r, c);
    const T nrm = std::sqrt(s);
    (*norms)[r] = nrm;
    if (nrm < eps) continue;
    for (int c = 0; c < av.cols; ++c) out(r, c) = av(r, c) / nrm;
  }
  const int ia = a.id();
  return a.graph()->record(std::move(out), {a}, [ia, norms, eps](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const Matrix<T>& go = g.grad(self);
    const Matrix<T>& y = g.value(self);
    Matrix<T>& ga = g.grad_buffer(ia);
    for (int r = 0; r < y.rows; ++r) {
      const T nrm = (*norms)[r];
      if (nrm < eps) continue;
      T dot = 0;
      for (int c = 0; c < y.cols; ++c) dot += go(r, c) * y(r, c);
      for (int c = 0; c < y.cols; ++c) ga(r, c) += (go(r, c) - y(r, c) * dot) / nrm;
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_rows needs at least one part");
  const int cols = parts[0].cols();
  int rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  std::vector<int> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
    off += pv.size();
    ids.push_back(p.id());
  }
  Graph<T>& graph = *parts[0].graph();
  for (const auto& p : parts) require(p.graph() == &graph, "operands belong to different graphs");
  return graph.record(std::move(out), ids, [ids](Graph<T>& g, int self) {
    const Matrix<T>& go = g.grad(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = g.value(id).size();
      if (g.requires_grad(id)) {
        Matrix<T>& gx = g.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gx.data[i] += go.data[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, int begin, int count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows out of range");
  const int cols = a.cols();
  auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(count) * cols);
  for (int i = 0; i < count * cols; ++i) (*idx)[i] = begin * cols + i;
  return gather(a, count, cols, idx);
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data) s += v;
  const int ia = a.id();
  return a.graph()->record(Matrix<T>(1, 1, s), {a}, [ia](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const T go = g.grad(self).data[0];
    Matrix<T>& ga = g.grad_buffer(ia);
    for (T& v : ga.data) v += go;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

template <typename T>
Var<T> weighted_sum(Var<T> a, const Matrix<T>& weights) {
  require(same_shape(a.value(), weights), "weighted_sum shape mismatch");
  T s = 0;
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) s += weights.data[i] * av.data[i];
  const int ia = a.id();
  return a.graph()->record(Matrix<T>(1, 1, s), {a}, [ia, weights](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const T go = g.grad(self).data[0];
    Matrix<T>& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] += go * weights.data[i];
  });
}

template <typename T>
Var<T> mean_rows(Var<T> a) {
  const Matrix<T>& av = a.value();
  Matrix<T> out(1, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    for (int c = 0; c < av.cols; ++c) out.data[c] += av(r, c);
  }
  for (T& v : out.data) v /= av.rows;
  const int ia = a.id();
  return a.graph()->record(std::move(out), {a}, [ia](Graph<T>& g, int self) {
    if (!g.requires_grad(ia)) return;
    const Matrix<T>& go = g.grad(self);
    Matrix<T>& ga = g.grad_buffer(ia);
    const T inv = T(1) / ga.rows;
    for (int r = 0; r < ga.rows; ++r) {
      for (int c = 0; c < ga.cols; ++c) ga(r, c) += go.data[c] * inv;
    }
  });
}

template <typename T>
Var<T> block_mean_pool(Var<T> image, int height, int width, int grid) {
  const Matrix<T>& iv = image.value();
  require(iv.rows == height * width, "block_mean_pool: rows must equal height*width");
  require(grid > 0 && height % grid == 0 && width % grid == 0, "block_mean_pool: grid must divide the image");
  const int ch = iv.cols;
  const int bh = height / grid, bw = width / grid;
  const T inv = T(1) / static_cast<T>(bh * bw);
  Matrix<T> out(grid * grid, ch);
  for (int y = 0; y < height; ++y) {
    const int cy = y / bh;
    for (int x = 0; x < width; ++x) {
      const int cell = cy * grid + x / bw;
      const T* src = &iv.data[(static_cast<std::size_t>(y) * width + x) * ch];
      T* dst = &out.data[static_cast<std::size_t>(cell) * ch];
      for (int c = 0; c < ch; ++c) dst[c] += src[c];
    }
  }
  for (T& v : out.data) v *= inv;
  const int ii = image.id();
  return image.graph()->record(std::move(out), {image}, [=](Graph<T>& g, int self) {
    if (!g.requires_grad(ii)) return;
    const Matrix<T>& go = g.grad(self);
    Matrix<T>& gi = g.grad_buffer(ii);
    for (int y = 0; y < height; ++y) {
      const int cy = y / bh;
      for (int x = 0; x < width; ++x) {
        const int cell = cy * grid + x / bw;
        const T* src = &go.data[static_cast<std::size_t>(cell) * ch];
        T* dst = &gi.data[(static_cast<std::size_t>(y) * width + x) * ch];
        for (int c = 0; c < ch; ++c) dst[c] += src[c] * inv;
      }
    }
  });
}

template <typename T>
Var<T> bce_with_logits_sum(Var<T> logits, const Matrix<T>& targets) {
  const Matrix<T>& lv = logits.value();
  require(same_shape(lv, targets), "bce target shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const T x = lv.data[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x * t
    s += std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0)) - x * targets.data[i];
  }
  const int il = logits.id();
  return logits.graph()->record(Matrix<T>(1, 1, s), {logits}, [il, targets](Graph<T>& g, int self) {
    if (!g.requires_grad(il)) return;
    const T go = g.grad(self).data[0];
    const Matrix<T>& lv = g.value(il);
    Matrix<T>& gl = g.grad_buffer(il);
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const T x = lv.data[i];
      const T p = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      gl.data[i] += go * (p - targets.data[i]);
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& targets) {
  const Matrix<T>& lv = logits.value();
  require(static_cast<int>(targets.size()) == lv.rows, "cross-entropy target count mismatch");
  auto probs = std::make_shared<Matrix<T>>(lv.rows, lv.cols);
  T loss = 0;
  for (int r = 0; r < lv.rows; ++r) {
    require(targets[r] >= 0 && targets[r] < lv.cols, "cross-entropy target out of range");
    T m = lv(r, 0);
    for (int c = 1; c < lv.cols; ++c) m = std::max(m, lv(r, c));
    T s = 0;
    for (int c = 0; c < lv.cols; ++c) {
      (*probs)(r, c) = std::exp(lv(r, c) - m);
      s += (*probs)(r, c);
    }
    for (int c = 0; c < lv.cols; ++c) (*probs)(r, c) /= s;
    loss -= std::log(std::max((*probs)(r, targets[r]), std::numeric_limits<T>::min()));
  }
  loss /= lv.rows;
  const int il = logits.id();
  return logits.graph()->record(Matrix<T>(1, 1, loss), {logits}, [il, probs, targets](Graph<T>& g, int self) {
    if (!g.requires_grad(il)) return;
    const T go = g.grad(self).data[0] / static_cast<T>(probs->rows);
    Matrix<T>& gl = g.grad_buffer(il);
    for (int r = 0; r < probs->rows; ++r) {
      for (int c = 0; c < probs->cols; ++c) {
        gl(r, c) += go * ((*probs)(r, c) - (c == targets[r] ? T(1) : T(0)));
      }
    }
  });
}

IndexMap transpose_index(int rows, int cols) {
  static std::map<std::pair<int, int>, IndexMap> cache;
  return cached(cache, std::pair{rows, cols}, [&] {
    std::vector<int> idx(static_cast<std::size_t>(rows) * cols);
    for (int c = 0; c < cols; ++c) {
      for (int r = 0; r < rows; ++r) idx[static_cast<std::size_t>(c) * rows + r] = r * cols + c;
    }
    return idx;
  });
}

IndexMap patchify_index(int height, int width, int channels, int patch) {
  require(height % patch == 0 && width % patch == 0, "patch size must divide the image");
  static std::map<std::tuple<int, int, int, int>, IndexMap> cache;
  return cached(cache, std::tuple{height, width, channels, patch}, [&] {
    const int gh = height / patch, gw = width / patch;
    const int row_len = patch * patch * channels;
    std::vector<int> idx(static_cast<std::size_t>(gh) * gw * row_len);
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        const int p = py * gw + px;
        int k = 0;
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) {
            const int y = py * patch + dy, x = px * patch + dx;
            for (int c = 0; c < channels; ++c) {
              idx[static_cast<std::size_t>(p) * row_len + k++] = (y * width + x) * channels + c;
            }
          }
        }
      }
    }
    return idx;
  });
}

IndexMap im2col3x3_index(int height, int width, int channels) {
  static std::map<std::tuple<int, int, int>, IndexMap> cache;
  return cached(cache, std::tuple{height, width, channels}, [&] {
    const int row_len = 9 * channels;
    std::vector<int> idx(static_cast<std::size_t>(height) * width * row_len, -1);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t base = (static_cast<std::size_t>(y) * width + x) * row_len;
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = y + dy, sx = x + dx;
            const bool inside = sy >= 0 && sy < height && sx >= 0 && sx < width;
            for (int c = 0; c < channels; ++c) {
              idx[base + k++] = inside ? (sy * width + sx) * channels + c : -1;
            }
          }
        }
      }
    }
    return idx;
  });
}

IndexMap upsample_index(int height, int width, int channels, int factor) {
  static std::map<std::tuple<int, int, int, int>, IndexMap> cache;
  return cached(cache, std::tuple{height, width, channels, factor}, [&] {
    const int oh = height * factor, ow = width * factor;
    std::vector<int> idx(static_cast<std::size_t>(oh) * ow * channels);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        for (int c = 0; c < channels; ++c) {
          idx[(static_cast<std::size_t>(y) * ow + x) * channels + c] =
              ((y / factor) * width + x / factor) * channels + c;
        }
      }
    }
    return idx;
  });
}

#define DFR_INSTANTIATE(T)                                                              \
  template class Graph<T>;                                                              \
  template Var<T> gather(Var<T>, int, int, IndexMap);                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                               \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                            \
  template Var<T> transpose(Var<T>);                                                    \
  template Var<T> add(Var<T>, Var<T>);                                                  \
  template Var<T> sub(Var<T>, Var<T>);                                                  \
  template Var<T> mul(Var<T>, Var<T>);                                                  \
  template Var<T> add_row(Var<T>, Var<T>);                                              \
  template Var<T> mul_col(Var<T>, Var<T>);                                              \
  template Var<T> scale(Var<T>, T);                                                     \
  template Var<T> add_scalar(Var<T>, T);                                                \
  template Var<T> one_minus(Var<T>);                                                    \
  template Var<T> sigmoid(Var<T>);                                                      \
  template Var<T> relu(Var<T>);                                                         \
  template Var<T> gelu(Var<T>);                                                         \
  template Var<T> log(Var<T>);                                                          \
  template Var<T> clamp(Var<T>, T, T);                                                  \
  template Var<T> softmax_rows(Var<T>);                                                 \
  template Var<T> layer_norm_rows(Var<T>, Var<T>, Var<T>, T);                           \
  template Var<T> normalize_rows(Var<T>, T);                                            \
  template Var<T> concat_rows(std::span<const Var<T>>);                                 \
  template Var<T> slice_rows(Var<T>, int, int);                                         \
  template Var<T> sum(Var<T>);                                                          \
  template Var<T> mean(Var<T>);                                                         \
  template Var<T> weighted_sum(Var<T>, const Matrix<T>&);                               \
  template Var<T> mean_rows(Var<T>);                                                    \
  template Var<T> block_mean_pool(Var<T>, int, int, int);                               \
  template Var<T> bce_with_logits_sum(Var<T>, const Matrix<T>&);                        \
  template Var<T> softmax_cross_entropy(Var<T>, const std::vector<int>&);

DFR_INSTANTIATE(float)
DFR_INSTANTIATE(double)

#undef DFR_INSTANTIATE

}  // namespace disfacerep::ad
