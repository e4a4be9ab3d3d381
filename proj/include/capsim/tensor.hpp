#ifndef CAPSIM_TENSOR_HPP
#define CAPSIM_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "capsim/common.hpp"

namespace capsim::predictor {

template <typename T>
struct Mat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T& at(size_t i, size_t j) { return data[i * cols + j]; }
  const T& at(size_t i, size_t j) const { return data[i * cols + j]; }
  T* row_ptr(size_t i) { return data.data() + i * cols; }
  const T* row_ptr(size_t i) const { return data.data() + i * cols; }
  size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
};

// out += a * b
template <typename T>
void matmul_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  for (size_t i = 0; i < a.rows; ++i) {
    T* orow = out.row_ptr(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const T av = a.at(i, k);
      const T* brow = b.row_ptr(k);
      for (size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T
template <typename T>
void matmul_nt_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  for (size_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row_ptr(i);
    T* orow = out.row_ptr(i);
    for (size_t k = 0; k < b.rows; ++k) {
      const T* brow = b.row_ptr(k);
      T acc = T(0);
      for (size_t j = 0; j < a.cols; ++j) acc += arow[j] * brow[j];
      orow[k] += acc;
    }
  }
}

// out += a^T * b
template <typename T>
void matmul_tn_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  for (size_t i = 0; i < a.rows; ++i) {
    const T* arow = a.row_ptr(i);
    const T* brow = b.row_ptr(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      T* orow = out.row_ptr(k);
      for (size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
}

// Row-wise softmax with an optional column validity mask; invalid columns get
// exactly zero weight. Direct (non-graph) form shared by the inference oracle
// paths and tests.
template <typename T>
Mat<T> softmax_rows_direct(const Mat<T>& scores, const std::vector<uint8_t>* valid = nullptr) {
  if (valid && valid->size() != scores.cols)
    throw ShapeError("softmax mask length does not match column count");
  Mat<T> out(scores.rows, scores.cols);
  for (size_t i = 0; i < scores.rows; ++i) {
    const T* x = scores.row_ptr(i);
    T* y = out.row_ptr(i);
    T max_v = -std::numeric_limits<T>::infinity();
    for (size_t j = 0; j < scores.cols; ++j)
      if (!valid || (*valid)[j]) max_v = std::max(max_v, x[j]);
    if (max_v == -std::numeric_limits<T>::infinity())
      throw ShapeError("softmax row has no valid columns");
    T sum = T(0);
    for (size_t j = 0; j < scores.cols; ++j) {
      if (!valid || (*valid)[j]) {
        y[j] = std::exp(x[j] - max_v);
        sum += y[j];
      } else {
        y[j] = T(0);
      }
    }
    for (size_t j = 0; j < scores.cols; ++j) y[j] /= sum;
  }
  return out;
}

// softmax(Q K^T / sqrt(d)) V with PAD masking over key rows.
template <typename T>
Mat<T> attention_direct(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                        const std::vector<uint8_t>* key_valid = nullptr) {
  if (q.cols != k.cols) throw ShapeError("attention: Q and K dimension mismatch");
  if (k.rows != v.rows) throw ShapeError("attention: K and V row mismatch");
  if (q.cols < 1) throw ShapeError("attention: d must be >= 1");
  Mat<T> scores(q.rows, k.rows);
  matmul_nt_acc(q, k, scores);
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.cols));
  for (auto& s : scores.data) s *= inv_sqrt_d;
  Mat<T> weights = softmax_rows_direct(scores, key_valid);
  Mat<T> out(q.rows, v.cols);
  matmul_acc(weights, v, out);
  return out;
}

// Reverse-mode tape over matrices. Nodes are created eagerly (values computed
// at construction); backward() walks the tape in reverse creation order.
template <typename T>
class Graph {
public:
  using Id = uint32_t;

  const Mat<T>& value(Id id) const { return nodes_[id].val; }
  const Mat<T>& grad(Id id) const { return nodes_[id].grad; }

  Id constant(Mat<T> m) {
    Node n;
    n.val = std::move(m);
    n.needs_grad = false;
    return push(std::move(n));
  }

  // Leaf bound to external parameter storage. grad_out may be null for
  // inference-only graphs.
  Id param(const Mat<T>* value, Mat<T>* grad_out) {
    Node n;
    n.val = *value;
    n.needs_grad = grad_out != nullptr;
    n.extern_grad = grad_out;
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    const Mat<T>&va = val(a);
    const Mat<T>&vb = val(b);
    if (va.cols != vb.rows) throw ShapeError("matmul shape mismatch");
    Node n;
    n.val = Mat<T>(va.rows, vb.cols);
    matmul_acc(va, vb, n.val);
    n.needs_grad = needs(a) || needs(b);
    n.back = [this, a, b](Node& self) {
      if (needs(a)) matmul_nt_acc(self.grad, val(b), ensure_grad(a));
      if (needs(b)) matmul_tn_acc(val(a), self.grad, ensure_grad(b));
    };
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    const Mat<T>&va = val(a);
    const Mat<T>&vb = val(b);
    if (!va.same_shape(vb)) throw ShapeError("add shape mismatch");
    Node n;
    n.val = va;
    for (size_t i = 0; i < vb.size(); ++i) n.val.data[i] += vb.data[i];
    n.needs_grad = needs(a) || needs(b);
    n.back = [this, a, b](Node& self) {
      for (Id p : {a, b}) {
        if (!needs(p)) continue;
        Mat<T>& g = ensure_grad(p);
        for (size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
      }
    };
    return push(std::move(n));
  }

  // a (n x c) + row (1 x c) broadcast over rows.
  Id add_row_broadcast(Id a, Id row) {
    const Mat<T>&va = val(a);
    const Mat<T>&vr = val(row);
    if (vr.rows != 1 || vr.cols != va.cols) throw ShapeError("add_row_broadcast shape mismatch");
    Node n;
    n.val = va;
    for (size_t i = 0; i < va.rows; ++i)
      for (size_t j = 0; j < va.cols; ++j) n.val.at(i, j) += vr.at(0, j);
    n.needs_grad = needs(a) || needs(row);
    n.back = [this, a, row](Node& self) {
      if (needs(a)) {
        Mat<T>& g = ensure_grad(a);
        for (size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
      }
      if (needs(row)) {
        Mat<T>& g = ensure_grad(row);
        for (size_t i = 0; i < self.grad.rows; ++i)
          for (size_t j = 0; j < self.grad.cols; ++j) g.at(0, j) += self.grad.at(i, j);
      }
    };
    return push(std::move(n));
  }

  Id add_const(Id a, const Mat<T>& m) {
    const Mat<T>&va = val(a);
    if (!va.same_shape(m)) throw ShapeError("add_const shape mismatch");
    Node n;
    n.val = va;
    for (size_t i = 0; i < m.size(); ++i) n.val.data[i] += m.data[i];
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
    };
    return push(std::move(n));
  }

  Id scale(Id a, T s) {
    Node n;
    n.val = val(a);
    for (auto& v : n.val.data) v *= s;
    n.needs_grad = needs(a);
    n.back = [this, a, s](Node& self) {
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
    };
    return push(std::move(n));
  }

  Id transpose(Id a) {
    const Mat<T>&va = val(a);
    Node n;
    n.val = Mat<T>(va.cols, va.rows);
    for (size_t i = 0; i < va.rows; ++i)
      for (size_t j = 0; j < va.cols; ++j) n.val.at(j, i) = va.at(i, j);
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < self.grad.rows; ++i)
        for (size_t j = 0; j < self.grad.cols; ++j) g.at(j, i) += self.grad.at(i, j);
    };
    return push(std::move(n));
  }

  Id softmax_rows(Id a, std::vector<uint8_t> col_valid = {}) {
    const Mat<T>&va = val(a);
    Node n;
    n.val = softmax_rows_direct(va, col_valid.empty() ? nullptr : &col_valid);
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < self.val.rows; ++i) {
        const T* y = self.val.row_ptr(i);
        const T* dy = self.grad.row_ptr(i);
        T dot = T(0);
        for (size_t j = 0; j < self.val.cols; ++j) dot += y[j] * dy[j];
        T* gx = g.row_ptr(i);
        for (size_t j = 0; j < self.val.cols; ++j) gx[j] += y[j] * (dy[j] - dot);
      }
    };
    return push(std::move(n));
  }

  Id layer_norm_rows(Id a, Id gain, Id bias, T eps = T(1e-5)) {
    const Mat<T>&va = val(a);
    const Mat<T>&vg = val(gain);
    const Mat<T>&vb = val(bias);
    if (vg.rows != 1 || vg.cols != va.cols || vb.rows != 1 || vb.cols != va.cols)
      throw ShapeError("layer_norm gain/bias must be 1 x cols");
    Node n;
    n.val = Mat<T>(va.rows, va.cols);
    Mat<T> xhat(va.rows, va.cols);
    std::vector<T> inv_std(va.rows);
    const T inv_n = T(1) / static_cast<T>(va.cols);
    for (size_t i = 0; i < va.rows; ++i) {
      const T* x = va.row_ptr(i);
      T mean = T(0);
      for (size_t j = 0; j < va.cols; ++j) mean += x[j];
      mean *= inv_n;
      T var = T(0);
      for (size_t j = 0; j < va.cols; ++j) {
        T d = x[j] - mean;
        var += d * d;
      }
      var *= inv_n;
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[i] = is;
      for (size_t j = 0; j < va.cols; ++j) {
        xhat.at(i, j) = (x[j] - mean) * is;
        n.val.at(i, j) = vg.at(0, j) * xhat.at(i, j) + vb.at(0, j);
      }
    }
    n.needs_grad = needs(a) || needs(gain) || needs(bias);
    n.back = [this, a, gain, bias, xhat = std::move(xhat),
              inv_std = std::move(inv_std)](Node& self) {
      const Mat<T>& vg = val(gain);
      const size_t cols = self.val.cols;
      const T inv_n = T(1) / static_cast<T>(cols);
      if (needs(gain)) {
        Mat<T>& gg = ensure_grad(gain);
        for (size_t i = 0; i < self.grad.rows; ++i)
          for (size_t j = 0; j < cols; ++j) gg.at(0, j) += self.grad.at(i, j) * xhat.at(i, j);
      }
      if (needs(bias)) {
        Mat<T>& gb = ensure_grad(bias);
        for (size_t i = 0; i < self.grad.rows; ++i)
          for (size_t j = 0; j < cols; ++j) gb.at(0, j) += self.grad.at(i, j);
      }
      if (needs(a)) {
        Mat<T>& gx = ensure_grad(a);
        std::vector<T> h(cols);
        for (size_t i = 0; i < self.grad.rows; ++i) {
          T mean_h = T(0), mean_hx = T(0);
          for (size_t j = 0; j < cols; ++j) {
            h[j] = vg.at(0, j) * self.grad.at(i, j);
            mean_h += h[j];
            mean_hx += h[j] * xhat.at(i, j);
          }
          mean_h *= inv_n;
          mean_hx *= inv_n;
          for (size_t j = 0; j < cols; ++j)
            gx.at(i, j) += inv_std[i] * (h[j] - mean_h - xhat.at(i, j) * mean_hx);
        }
      }
    };
    return push(std::move(n));
  }

  Id relu(Id a) {
    Node n;
    n.val = val(a);
    for (auto& v : n.val.data) v = v > T(0) ? v : T(0);
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      const Mat<T>& x = val(a);
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < g.size(); ++i)
        if (x.data[i] > T(0)) g.data[i] += self.grad.data[i];
    };
    return push(std::move(n));
  }

  Id softplus(Id a) {
    const Mat<T>&va = val(a);
    Node n;
    n.val = Mat<T>(va.rows, va.cols);
    for (size_t i = 0; i < va.size(); ++i) {
      const T x = va.data[i];
      n.val.data[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      const Mat<T>& x = val(a);
      Mat<T>& g = ensure_grad(a);
      for (size_t i = 0; i < g.size(); ++i) {
        const T xi = x.data[i];
        const T sig = xi >= T(0) ? T(1) / (T(1) + std::exp(-xi))
                                 : std::exp(xi) / (T(1) + std::exp(xi));
        g.data[i] += self.grad.data[i] * sig;
      }
    };
    return push(std::move(n));
  }

  Id select_row(Id a, size_t row) {
    const Mat<T>&va = val(a);
    if (row >= va.rows) throw ShapeError("select_row out of range");
    Node n;
    n.val = Mat<T>(1, va.cols);
    for (size_t j = 0; j < va.cols; ++j) n.val.at(0, j) = va.at(row, j);
    n.needs_grad = needs(a);
    n.back = [this, a, row](Node& self) {
      Mat<T>& g = ensure_grad(a);
      for (size_t j = 0; j < self.grad.cols; ++j) g.at(row, j) += self.grad.at(0, j);
    };
    return push(std::move(n));
  }

  Id stack_rows(std::vector<Id> rows_in) {
    if (rows_in.empty()) throw ShapeError("stack_rows needs at least one row");
    const size_t cols = val(rows_in[0]).cols;
    Node n;
    n.val = Mat<T>(rows_in.size(), cols);
    n.needs_grad = false;
    for (size_t i = 0; i < rows_in.size(); ++i) {
      const Mat<T>& r = val(rows_in[i]);
      if (r.rows != 1 || r.cols != cols) throw ShapeError("stack_rows: rows must be 1 x cols");
      for (size_t j = 0; j < cols; ++j) n.val.at(i, j) = r.at(0, j);
      n.needs_grad = n.needs_grad || needs(rows_in[i]);
    }
    n.back = [this, rows_in](Node& self) {
      for (size_t i = 0; i < rows_in.size(); ++i) {
        if (!needs(rows_in[i])) continue;
        Mat<T>& g = ensure_grad(rows_in[i]);
        for (size_t j = 0; j < self.grad.cols; ++j) g.at(0, j) += self.grad.at(i, j);
      }
    };
    return push(std::move(n));
  }

  Id concat_cols(std::vector<Id> parts) {
    if (parts.empty()) throw ShapeError("concat_cols needs at least one part");
    const size_t rows = val(parts[0]).rows;
    size_t total = 0;
    for (Id p : parts) {
      if (val(p).rows != rows) throw ShapeError("concat_cols: row mismatch");
      total += val(p).cols;
    }
    Node n;
    n.val = Mat<T>(rows, total);
    n.needs_grad = false;
    size_t off = 0;
    for (Id p : parts) {
      const Mat<T>& m = val(p);
      for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < m.cols; ++j) n.val.at(i, off + j) = m.at(i, j);
      off += m.cols;
      n.needs_grad = n.needs_grad || needs(p);
    }
    n.back = [this, parts](Node& self) {
      size_t off2 = 0;
      for (Id p : parts) {
        const size_t c = val(p).cols;
        if (needs(p)) {
          Mat<T>& g = ensure_grad(p);
          for (size_t i = 0; i < self.grad.rows; ++i)
            for (size_t j = 0; j < c; ++j) g.at(i, j) += self.grad.at(i, off2 + j);
        }
        off2 += c;
      }
    };
    return push(std::move(n));
  }

  // Gathers rows of `table` (typically the embedding) by index.
  Id gather_rows(Id table, std::vector<uint32_t> ids) {
    const Mat<T>&vt = val(table);
    Node n;
    n.val = Mat<T>(ids.size(), vt.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= vt.rows) throw ShapeError("gather_rows index out of range");
      for (size_t j = 0; j < vt.cols; ++j) n.val.at(i, j) = vt.at(ids[i], j);
    }
    n.needs_grad = needs(table);
    n.back = [this, table, ids = std::move(ids)](Node& self) {
      Mat<T>& g = ensure_grad(table);
      for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = 0; j < self.grad.cols; ++j) g.at(ids[i], j) += self.grad.at(i, j);
    };
    return push(std::move(n));
  }

  Id mean_all(Id a) {
    const Mat<T>&va = val(a);
    Node n;
    n.val = Mat<T>(1, 1);
    T sum = T(0);
    for (const auto& v : va.data) sum += v;
    n.val.at(0, 0) = sum / static_cast<T>(va.size());
    n.needs_grad = needs(a);
    n.back = [this, a](Node& self) {
      Mat<T>& g = ensure_grad(a);
      const T d = self.grad.at(0, 0) / static_cast<T>(g.size());
      for (auto& v : g.data) v += d;
    };
    return push(std::move(n));
  }

  // |pred - fact| / fact for a 1x1 prediction.
  Id mape(Id pred, T fact) {
    if (!(fact > T(0))) throw DomainError("mape requires fact > 0");
    const Mat<T>&vp = val(pred);
    if (vp.rows != 1 || vp.cols != 1) throw ShapeError("mape expects a scalar prediction");
    Node n;
    n.val = Mat<T>(1, 1);
    const T diff = vp.at(0, 0) - fact;
    n.val.at(0, 0) = std::abs(diff) / fact;
    n.needs_grad = needs(pred);
    n.back = [this, pred, fact](Node& self) {
      const T diff2 = val(pred).at(0, 0) - fact;
      const T sign = diff2 > T(0) ? T(1) : (diff2 < T(0) ? T(-1) : T(0));
      ensure_grad(pred).at(0, 0) += self.grad.at(0, 0) * sign / fact;
    };
    return push(std::move(n));
  }

  // s * sum of scalar nodes (batch-mean of losses with s = 1/B).
  Id add_scaled(std::vector<Id> xs, T s) {
    if (xs.empty()) throw ShapeError("add_scaled needs at least one input");
    Node n;
    n.val = Mat<T>(1, 1);
    n.needs_grad = false;
    for (Id x : xs) {
      const Mat<T>& v = val(x);
      if (v.rows != 1 || v.cols != 1) throw ShapeError("add_scaled expects scalars");
      n.val.at(0, 0) += v.at(0, 0);
      n.needs_grad = n.needs_grad || needs(x);
    }
    n.val.at(0, 0) *= s;
    n.back = [this, xs, s](Node& self) {
      for (Id x : xs)
        if (needs(x)) ensure_grad(x).at(0, 0) += s * self.grad.at(0, 0);
    };
    return push(std::move(n));
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to all parameters. Parameter
  // gradients are accumulated into their bound external storage.
  void backward(Id loss) {
    const Mat<T>& lv = nodes_[loss].val;
    if (lv.rows != 1 || lv.cols != 1) throw ShapeError("backward expects a scalar loss");
    ensure_grad(loss).at(0, 0) = T(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(n);
      if (n.extern_grad) {
        for (size_t k = 0; k < n.grad.size(); ++k) n.extern_grad->data[k] += n.grad.data[k];
      }
    }
  }

  size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Mat<T> val;
    Mat<T> grad;
    bool needs_grad = true;
    Mat<T>* extern_grad = nullptr;
    std::function<void(Node&)> back;
  };

  const Mat<T>& val(Id id) const { return nodes_[id].val; }
  bool needs(Id id) const { return nodes_[id].needs_grad; }

  Mat<T>& ensure_grad(Id id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<T>(n.val.rows, n.val.cols);
    return n.grad;
  }

  Id push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace capsim::predictor

#endif
