#pragma once

// Minimal reverse-mode autodiff over dense tensors. Dynamically built tape,
// scalar type templated (float for training, double for gradient checks).
// All reductions run in a fixed order, so results are bit-reproducible for
// any thread count.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "issm/core.hpp"
#include "issm/simd.hpp"

namespace issm::ad {

template <typename S>
struct Node;

template <typename S>
using Tensor = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
  std::vector<int> shape;
  std::vector<S> val;
  std::vector<S> grad;       // allocated lazily when requires_grad
  bool requires_grad = false;
  bool consumed = false;     // backward already ran through this root
  bool visit_mark = false;   // scratch for topological sort
  std::string name;          // parameters only; used in diagnostics
  std::vector<Tensor<S>> parents;
  std::function<void(Node<S>&)> backward_fn;  // accumulates into parents

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <typename S>
Tensor<S> make_tensor(std::vector<int> shape, bool requires_grad = false) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->val.assign(static_cast<size_t>(n->numel()), S(0));
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return n;
}

template <typename S>
Tensor<S> constant(std::vector<int> shape, const std::vector<S>& data) {
  auto t = make_tensor<S>(std::move(shape));
  if (static_cast<int64_t>(data.size()) != t->numel())
    throw ValidationError("constant: data size does not match shape");
  t->val = data;
  return t;
}

template <typename S>
Tensor<S> scalar_const(S v) {
  auto t = make_tensor<S>({1});
  t->val[0] = v;
  return t;
}

namespace detail {

template <typename S>
Tensor<S> make_op(std::vector<int> shape, std::vector<Tensor<S>> parents,
                  std::function<void(Node<S>&)> bw) {
  auto t = make_tensor<S>(std::move(shape));
  for (auto& p : parents)
    if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) {
    t->ensure_grad();
    t->parents = std::move(parents);
    t->backward_fn = std::move(bw);
  }
  return t;
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a->shape != b->shape) throw ValidationError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- backward driver --------------------------------------------------------

template <typename S>
void backward(const Tensor<S>& root) {
  if (root->numel() != 1) throw ValidationError("backward: root must be scalar");
  if (!root->requires_grad) throw ValidationError("backward: root does not require grad");
  if (root->consumed) throw std::runtime_error("backward: graph consumed twice");
  root->consumed = true;
  if (!std::isfinite(static_cast<double>(root->val[0])))
    throw std::runtime_error("backward: non-finite loss value");

  // iterative DFS topological order, marks cleared afterwards
  std::vector<Node<S>*> order;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  std::vector<Node<S>*> visited;
  stack.emplace_back(root.get(), 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx == 0) {
      if (node->visit_mark) {
        stack.pop_back();
        continue;
      }
      node->visit_mark = true;
      visited.push_back(node);
    }
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !p->visit_mark) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : visited) n->visit_mark = false;

  root->ensure_grad();
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace issm::ad

// visit_mark member lives on Node; declared here to keep the struct above tidy.
namespace issm::ad {
// (member injected via definition below)
}

namespace issm::ad {

// ---- elementwise ------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_op<S>(
      a->shape, {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        if (b->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] + b->val[i];
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_op<S>(
      a->shape, {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        if (b->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] -= self.grad[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] - b->val[i];
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_op<S>(
      a->shape, {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * b->val[i];
        if (b->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i] * a->val[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * b->val[i];
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a, c](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * c;
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * c;
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] + c;
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i)
          if (self.val[i] > S(0)) a->grad[i] += self.grad[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] > S(0) ? a->val[i] : S(0);
  return out;
}

// |x| with subgradient 0 at zero.
template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          if (a->val[i] > S(0)) a->grad[i] += self.grad[i];
          else if (a->val[i] < S(0)) a->grad[i] -= self.grad[i];
        }
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = std::abs(a->val[i]);
  return out;
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i)
          a->grad[i] += self.grad[i] * S(2) * a->val[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * a->val[i];
  return out;
}

// sqrt with subgradient 0 at zero (term-1 of the level-set loss hits exact 0).
template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i)
          if (self.val[i] > S(0)) a->grad[i] += self.grad[i] / (S(2) * self.val[i]);
      });
  for (size_t i = 0; i < out->val.size(); ++i)
    out->val[i] = a->val[i] > S(0) ? std::sqrt(a->val[i]) : S(0);
  return out;
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * self.val[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = std::exp(a->val[i]);
  return out;
}

template <typename S>
Tensor<S> reciprocal(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      a->shape, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i)
          a->grad[i] -= self.grad[i] * self.val[i] * self.val[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = S(1) / a->val[i];
  return out;
}

// ---- reductions -------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto out = detail::make_op<S>(
      {1}, {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += self.grad[0];
      });
  S acc = S(0);
  for (S v : a->val) acc += v;
  out->val[0] = acc;
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a->numel());
  auto out = detail::make_op<S>(
      {1}, {a}, [a, inv](Node<S>& self) {
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += self.grad[0] * inv;
      });
  S acc = S(0);
  for (S v : a->val) acc += v;
  out->val[0] = acc * inv;
  return out;
}

// ---- shape ops ---------------------------------------------------------------

template <typename S>
Tensor<S> slice_flat(const Tensor<S>& a, int offset, int len) {
  if (offset < 0 || offset + len > a->numel()) throw ValidationError("slice_flat: out of range");
  auto out = detail::make_op<S>(
      {len}, {a}, [a, offset](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[offset + i] += self.grad[i];
      });
  for (int i = 0; i < len; ++i) out->val[i] = a->val[offset + i];
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != a->numel()) throw ValidationError("reshape: element count mismatch");
  auto out = detail::make_op<S>(
      std::move(shape), {a}, [a](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
      });
  out->val = a->val;
  return out;
}

// concat along columns: a[n,p] ++ b[n,q] -> [n,p+q]
template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[0] != b->shape[0])
    throw ValidationError("concat_cols: need [n,p] and [n,q]");
  const int n = a->shape[0], p = a->shape[1], q = b->shape[1];
  auto out = detail::make_op<S>(
      {n, p + q}, {a, b}, [a, b, n, p, q](Node<S>& self) {
        for (int i = 0; i < n; ++i) {
          if (a->requires_grad)
            for (int j = 0; j < p; ++j) a->grad[i * p + j] += self.grad[i * (p + q) + j];
          if (b->requires_grad)
            for (int j = 0; j < q; ++j) b->grad[i * q + j] += self.grad[i * (p + q) + p + j];
        }
      });
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) out->val[i * (p + q) + j] = a->val[i * p + j];
    for (int j = 0; j < q; ++j) out->val[i * (p + q) + p + j] = b->val[i * q + j];
  }
  return out;
}

// broadcast a vector [m] to [n,m] rows; backward sums over rows
template <typename S>
Tensor<S> tile_rows(const Tensor<S>& v, int n) {
  if (v->shape.size() != 1) throw ValidationError("tile_rows: need a vector");
  const int m = v->shape[0];
  auto out = detail::make_op<S>(
      {n, m}, {v}, [v, n, m](Node<S>& self) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) v->grad[j] += self.grad[i * m + j];
      });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out->val[i * m + j] = v->val[j];
  return out;
}

// elementwise multiply by a scalar tensor [1]
template <typename S>
Tensor<S> mul_scalar_tensor(const Tensor<S>& a, const Tensor<S>& s) {
  if (s->numel() != 1) throw ValidationError("mul_scalar_tensor: scalar must have 1 element");
  auto out = detail::make_op<S>(
      a->shape, {a, s}, [a, s](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * s->val[0];
        if (s->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) s->grad[0] += self.grad[i] * a->val[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * s->val[0];
  return out;
}

// rows of a[n,m] plus vector v[m]
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  if (a->shape.size() != 2 || v->shape.size() != 1 || a->shape[1] != v->shape[0])
    throw ValidationError("add_rowvec: shape mismatch");
  const int n = a->shape[0], m = a->shape[1];
  auto out = detail::make_op<S>(
      a->shape, {a, v}, [a, v, n, m](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        if (v->requires_grad)
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) v->grad[j] += self.grad[i * m + j];
      });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out->val[i * m + j] = a->val[i * m + j] + v->val[j];
  return out;
}

// rows of a[n,m] minus vector v[m]
template <typename S>
Tensor<S> sub_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  if (a->shape.size() != 2 || v->shape.size() != 1 || a->shape[1] != v->shape[0])
    throw ValidationError("sub_rowvec: shape mismatch");
  const int n = a->shape[0], m = a->shape[1];
  auto out = detail::make_op<S>(
      a->shape, {a, v}, [a, v, n, m](Node<S>& self) {
        if (a->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        if (v->requires_grad)
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) v->grad[j] -= self.grad[i * m + j];
      });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out->val[i * m + j] = a->val[i * m + j] - v->val[j];
  return out;
}

// per-column scaling of a[n,m] by vector v[m]
template <typename S>
Tensor<S> mul_colwise(const Tensor<S>& a, const Tensor<S>& v) {
  if (a->shape.size() != 2 || v->shape.size() != 1 || a->shape[1] != v->shape[0])
    throw ValidationError("mul_colwise: shape mismatch");
  const int n = a->shape[0], m = a->shape[1];
  auto out = detail::make_op<S>(
      a->shape, {a, v}, [a, v, n, m](Node<S>& self) {
        if (a->requires_grad)
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) a->grad[i * m + j] += self.grad[i * m + j] * v->val[j];
        if (v->requires_grad)
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) v->grad[j] += self.grad[i * m + j] * a->val[i * m + j];
      });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out->val[i * m + j] = a->val[i * m + j] * v->val[j];
  return out;
}

// ---- small 3-vector helpers (pose math) --------------------------------------

template <typename S>
Tensor<S> cross3(const Tensor<S>& a, const Tensor<S>& b) {
  if (a->numel() != 3 || b->numel() != 3) throw ValidationError("cross3: need 3-vectors");
  auto out = detail::make_op<S>(
      {3}, {a, b}, [a, b](Node<S>& self) {
        const auto& g = self.grad;
        // grad_a = b x g, grad_b = g x a
        if (a->requires_grad) {
          a->grad[0] += b->val[1] * g[2] - b->val[2] * g[1];
          a->grad[1] += b->val[2] * g[0] - b->val[0] * g[2];
          a->grad[2] += b->val[0] * g[1] - b->val[1] * g[0];
        }
        if (b->requires_grad) {
          b->grad[0] += g[1] * a->val[2] - g[2] * a->val[1];
          b->grad[1] += g[2] * a->val[0] - g[0] * a->val[2];
          b->grad[2] += g[0] * a->val[1] - g[1] * a->val[0];
        }
      });
  out->val[0] = a->val[1] * b->val[2] - a->val[2] * b->val[1];
  out->val[1] = a->val[2] * b->val[0] - a->val[0] * b->val[2];
  out->val[2] = a->val[0] * b->val[1] - a->val[1] * b->val[0];
  return out;
}

// columns c1,c2,c3 -> row-major [3,3]
template <typename S>
Tensor<S> stack_cols3(const Tensor<S>& c1, const Tensor<S>& c2, const Tensor<S>& c3) {
  if (c1->numel() != 3 || c2->numel() != 3 || c3->numel() != 3)
    throw ValidationError("stack_cols3: need 3-vectors");
  auto out = detail::make_op<S>(
      {3, 3}, {c1, c2, c3}, [c1, c2, c3](Node<S>& self) {
        for (int i = 0; i < 3; ++i) {
          if (c1->requires_grad) c1->grad[i] += self.grad[i * 3 + 0];
          if (c2->requires_grad) c2->grad[i] += self.grad[i * 3 + 1];
          if (c3->requires_grad) c3->grad[i] += self.grad[i * 3 + 2];
        }
      });
  for (int i = 0; i < 3; ++i) {
    out->val[i * 3 + 0] = c1->val[i];
    out->val[i * 3 + 1] = c2->val[i];
    out->val[i * 3 + 2] = c3->val[i];
  }
  return out;
}

// ---- matmul -------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ValidationError("matmul: incompatible shapes");
  const int n = a->shape[0], k = a->shape[1], m = b->shape[1];
  auto out = detail::make_op<S>(
      {n, m}, {a, b}, [a, b, n, k, m](Node<S>& self) {
        const S* g = self.grad.data();
        if (a->requires_grad) {
          // dA[i,p] = sum_j g[i,j] * B[p,j]
          S* da = a->grad.data();
          const S* bv = b->val.data();
          parallel_for(0, n, [&](int64_t i) {
            const S* gi = g + i * m;
            for (int p = 0; p < k; ++p)
              da[i * k + p] += simd::dot8(gi, bv + p * m, m);
          });
        }
        if (b->requires_grad) {
          // dB[p,j] = sum_i A[i,p] * g[i,j]; partition rows p across threads
          S* db = b->grad.data();
          const S* av = a->val.data();
          const int nt = std::max(1, std::min(thread_count(), k));
          const int chunk = (k + nt - 1) / nt;
          parallel_for(0, nt, [&](int64_t t) {
            const int p0 = static_cast<int>(t) * chunk;
            const int p1 = std::min(k, p0 + chunk);
            if (p0 >= p1) return;
            for (int i = 0; i < n; ++i) {
              const S* gi = g + i * m;
              for (int p = p0; p < p1; ++p) {
                const S aip = av[i * k + p];
                if (aip == S(0)) continue;
                simd::axpy(aip, gi, db + p * m, m);
              }
            }
          });
        }
      });
  // C[i,j] = sum_p A[i,p] B[p,j], accumulated in p order
  const S* av = a->val.data();
  const S* bv = b->val.data();
  S* cv = out->val.data();
  parallel_for(0, n, [&](int64_t i) {
    S* ci = cv + i * m;
    const S* ai = av + i * k;
    for (int p = 0; p < k; ++p) {
      if (ai[p] == S(0)) continue;
      simd::axpy(ai[p], bv + p * m, ci, m);
    }
  });
  return out;
}

// ---- dropout ------------------------------------------------------------------

// Inverted dropout: train mode scales kept activations by 1/(1-p); eval mode
// is the identity.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double p, bool train, uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("dropout: p must be in [0,1)");
  if (!train || p == 0.0) return a;
  auto mask = std::make_shared<std::vector<S>>(a->val.size());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = u(rng) < p ? S(0) : keep_scale;
  auto out = detail::make_op<S>(
      a->shape, {a}, [a, mask](Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * (*mask)[i];
      });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * (*mask)[i];
  return out;
}

}  // namespace issm::ad
