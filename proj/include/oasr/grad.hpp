// Copyright 2026 the oasr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Reverse-mode automatic differentiation over shaped arrays. A Tape is a
// Wengert list: every op appends one node holding its value and a backward
// closure; backward() walks the list once in reverse execution order.
// Exactly the operator set the enhancement/acoustic networks and losses
// need, nothing more. No broadcasting beyond the documented contracts.

#ifndef OASR_GRAD_HPP_
#define OASR_GRAD_HPP_

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "oasr/common.hpp"

namespace oasr::grad {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

// Plain value carrier for weights and fixed kernels. Lives outside any tape;
// tapes bind to it via leaf() and accumulate into grad on backward.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    OASR_CHECK(static_cast<int64_t>(data.size()) == numel_of(shape),
               "tensor: data length ", data.size(), " != numel of ", shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
  }
  static Tensor full(Shape s, T v) {
    int64_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { grad.assign(data.size(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
class Tape;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires = false;
  Tensor<T>* bound = nullptr;  // leaf parameter binding
  const char* op = "leaf";
  std::function<void(Tape<T>&, Node<T>&)> back;
};

// Handle into a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  const std::vector<T>& value() const;
  int64_t numel() const { return static_cast<int64_t>(value().size()); }
  T scalar() const {
    OASR_CHECK(numel() == 1, "scalar(): tensor has shape ", shape_str(shape()));
    return value()[0];
  }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds a parameter tensor; backward accumulates into t.grad.
  Var<T> leaf(Tensor<T>& t) {
    Node<T> n;
    n.shape = t.shape;
    n.value = t.data;
    n.requires = t.requires_grad;
    n.bound = t.requires_grad ? &t : nullptr;
    return push(std::move(n));
  }

  Var<T> constant(Shape shape, std::vector<T> data) {
    Node<T> n;
    n.shape = std::move(shape);
    n.value = std::move(data);
    n.op = "const";
    return push(std::move(n));
  }
  Var<T> constant(const Tensor<T>& t) { return constant(t.shape, t.data); }
  Var<T> scalar_const(T v) { return constant({1}, {v}); }

  Node<T>& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node<T>& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var<T> push(Node<T>&& n) {
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Reverse sweep from a scalar loss. A tape is single-shot: a second
  // backward on the same tape is an error, not silent accumulation.
  void backward(Var<T> loss) {
    OASR_CHECK(loss.tape() == this, "backward: loss from another tape");
    OASR_CHECK(!consumed_, "backward: tape already consumed");
    Node<T>& ln = node(loss.id());
    OASR_CHECK(ln.value.size() == 1, "backward: loss must be scalar, got ",
               shape_str(ln.shape));
    consumed_ = true;
    for (int i = 0; i <= loss.id(); ++i) {
      Node<T>& n = node(i);
      if (n.requires) n.grad.assign(n.value.size(), T(0));
    }
    if (!ln.requires) return;  // loss does not reach any learnable tensor
    ln.grad[0] = T(1);
    for (int i = loss.id(); i >= 0; --i) {
      Node<T>& n = node(i);
      if (n.requires && n.back) n.back(*this, n);
    }
    for (int i = 0; i <= loss.id(); ++i) {
      Node<T>& n = node(i);
      if (n.bound != nullptr) {
        n.bound->ensure_grad();
        for (size_t j = 0; j < n.grad.size(); ++j) n.bound->grad[j] += n.grad[j];
      }
    }
  }

  bool consumed() const { return consumed_; }

  // Distinct op names recorded on this tape (test support: the FD registry
  // must cover every one of them).
  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    for (const auto& n : nodes_) {
      std::string s = n.op;
      if (s == "leaf" || s == "const") continue;
      if (std::find(names.begin(), names.end(), s) == names.end()) names.push_back(s);
    }
    return names;
  }

 private:
  std::deque<Node<T>> nodes_;
  bool consumed_ = false;
};

template <typename T>
const Shape& Var<T>::shape() const {
  return tape_->node(id_).shape;
}
template <typename T>
const std::vector<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

namespace detail {

template <typename T>
Tape<T>* same_tape(Var<T> a, Var<T> b, const char* op) {
  OASR_CHECK(a.tape() && a.tape() == b.tape(), op, ": operands on different tapes");
  return a.tape();
}

template <typename T>
void check_same_shape(Var<T> a, Var<T> b, const char* op) {
  OASR_CHECK(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()),
             " vs ", shape_str(b.shape()));
}

template <typename T>
std::vector<T>& grad_of(Tape<T>& t, int id) {
  return t.node(id).grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary

template <typename T, typename FwdFn, typename BackFn>
Var<T> binary_op(const char* name, Var<T> a, Var<T> b, FwdFn fwd, BackFn bck) {
  Tape<T>* tape = detail::same_tape(a, b, name);
  detail::check_same_shape(a, b, name);
  const auto& av = a.value();
  const auto& bv = b.value();
  Node<T> n;
  n.op = name;
  n.shape = a.shape();
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = fwd(av[i], bv[i]);
  n.requires = tape->node(a.id()).requires || tape->node(b.id()).requires;
  if (n.requires) {
    int ai = a.id(), bi = b.id();
    n.back = [ai, bi, bck](Tape<T>& t, Node<T>& self) {
      Node<T>& na = t.node(ai);
      Node<T>& nb = t.node(bi);
      for (size_t i = 0; i < self.value.size(); ++i) {
        T ga, gb;
        bck(na.value[i], nb.value[i], self.value[i], self.grad[i], ga, gb);
        if (na.requires) na.grad[i] += ga;
        if (nb.requires) nb.grad[i] += gb;
      }
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g, T& ga, T& gb) { ga = g; gb = g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g, T& ga, T& gb) { ga = g; gb = -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T, T g, T& ga, T& gb) { ga = g * y; gb = g * x; });
}

template <typename T>
Var<T> divide(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T out, T g, T& ga, T& gb) { ga = g / y; gb = -g * out / y; });
}

// log-domain addition with a hard floor: values at or below kLogZero stand
// for probability zero and contribute no gradient.
inline constexpr double kLogZero = -1e30;
inline constexpr double kLogZeroGuard = -1e29;

template <typename T>
Var<T> logaddexp(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "logaddexp", a, b,
      [](T x, T y) -> T {
        if (x <= T(kLogZeroGuard) && y <= T(kLogZeroGuard)) return T(kLogZero);
        T m = std::max(x, y), d = std::min(x, y) - m;
        return d < T(-60) ? m : m + std::log1p(std::exp(d));
      },
      [](T x, T y, T out, T g, T& ga, T& gb) {
        ga = (x <= T(kLogZeroGuard)) ? T(0) : g * std::exp(x - out);
        gb = (y <= T(kLogZeroGuard)) ? T(0) : g * std::exp(y - out);
      });
}

// ---------------------------------------------------------------------------
// elementwise unary

template <typename T, typename FwdFn, typename BackFn>
Var<T> unary_op(const char* name, Var<T> a, FwdFn fwd, BackFn bck) {
  Tape<T>* tape = a.tape();
  const auto& av = a.value();
  Node<T> n;
  n.op = name;
  n.shape = a.shape();
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = fwd(av[i]);
  n.requires = tape->node(a.id()).requires;
  if (n.requires) {
    int ai = a.id();
    n.back = [ai, bck](Tape<T>& t, Node<T>& self) {
      Node<T>& na = t.node(ai);
      for (size_t i = 0; i < self.value.size(); ++i)
        na.grad[i] += bck(na.value[i], self.value[i], self.grad[i]);
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary_op<T>(
      "sigmoid", a,
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                 : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
  return unary_op<T>(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <typename T>
Var<T> exp_op(Var<T> a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); },
      [](T, T y, T g) { return g * y; });
}

template <typename T>
Var<T> log_op(Var<T> a) {
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); },
      [](T x, T, T g) { return g / x; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary_op<T>(
      "add_scalar", a, [c](T x) { return x + c; },
      [](T, T, T g) { return g; });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary_op<T>(
      "scale", a, [c](T x) { return x * c; },
      [c](T, T, T g) { return g * c; });
}

// PReLU with a single learnable slope (shape {1}).
template <typename T>
Var<T> prelu(Var<T> x, Var<T> alpha) {
  Tape<T>* tape = detail::same_tape(x, alpha, "prelu");
  OASR_CHECK(alpha.numel() == 1, "prelu: alpha must be scalar");
  const auto& xv = x.value();
  T a = alpha.value()[0];
  Node<T> n;
  n.op = "prelu";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) n.value[i] = xv[i] >= T(0) ? xv[i] : a * xv[i];
  n.requires = tape->node(x.id()).requires || tape->node(alpha.id()).requires;
  if (n.requires) {
    int xi = x.id(), ai = alpha.id();
    n.back = [xi, ai](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& na = t.node(ai);
      T a = na.value[0], gsum = T(0);
      for (size_t i = 0; i < self.value.size(); ++i) {
        T g = self.grad[i], xv = nx.value[i];
        if (nx.requires) nx.grad[i] += xv >= T(0) ? g : g * a;
        if (xv < T(0)) gsum += g * xv;
      }
      if (na.requires) na.grad[0] += gsum;
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// scalar broadcasting (the only broadcast forms supported)

template <typename T>
Var<T> sub_bcast(Var<T> x, Var<T> s) {
  Tape<T>* tape = detail::same_tape(x, s, "sub_bcast");
  OASR_CHECK(s.numel() == 1, "sub_bcast: rhs must be scalar");
  const auto& xv = x.value();
  T sv = s.value()[0];
  Node<T> n;
  n.op = "sub_bcast";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) n.value[i] = xv[i] - sv;
  n.requires = tape->node(x.id()).requires || tape->node(s.id()).requires;
  if (n.requires) {
    int xi = x.id(), si = s.id();
    n.back = [xi, si](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& ns = t.node(si);
      T gsum = T(0);
      for (size_t i = 0; i < self.grad.size(); ++i) {
        if (nx.requires) nx.grad[i] += self.grad[i];
        gsum += self.grad[i];
      }
      if (ns.requires) ns.grad[0] -= gsum;
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> mul_bcast(Var<T> x, Var<T> s) {
  Tape<T>* tape = detail::same_tape(x, s, "mul_bcast");
  OASR_CHECK(s.numel() == 1, "mul_bcast: rhs must be scalar");
  const auto& xv = x.value();
  T sv = s.value()[0];
  Node<T> n;
  n.op = "mul_bcast";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) n.value[i] = xv[i] * sv;
  n.requires = tape->node(x.id()).requires || tape->node(s.id()).requires;
  if (n.requires) {
    int xi = x.id(), si = s.id();
    n.back = [xi, si](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& ns = t.node(si);
      T sv = ns.value[0], acc = T(0);
      for (size_t i = 0; i < self.grad.size(); ++i) {
        if (nx.requires) nx.grad[i] += self.grad[i] * sv;
        acc += self.grad[i] * nx.value[i];
      }
      if (ns.requires) ns.grad[0] += acc;
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>* tape = x.tape();
  const auto& xv = x.value();
  T acc = std::accumulate(xv.begin(), xv.end(), T(0));
  Node<T> n;
  n.op = "sum";
  n.shape = {1};
  n.value = {acc};
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (auto& g : nx.grad) g += self.grad[0];
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> mean(Var<T> x) {
  Tape<T>* tape = x.tape();
  const auto& xv = x.value();
  T inv = T(1) / static_cast<T>(xv.size());
  T acc = std::accumulate(xv.begin(), xv.end(), T(0)) * inv;
  Node<T> n;
  n.op = "mean";
  n.shape = {1};
  n.value = {acc};
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, inv](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (auto& g : nx.grad) g += self.grad[0] * inv;
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape(a, b, "matmul");
  OASR_CHECK(a.shape().size() == 2 && b.shape().size() == 2,
             "matmul: operands must be rank-2, got ", shape_str(a.shape()), " and ",
             shape_str(b.shape()));
  int M = a.shape()[0], K = a.shape()[1], K2 = b.shape()[0], N = b.shape()[1];
  OASR_CHECK(K == K2, "matmul: inner dims differ ", shape_str(a.shape()), " x ",
             shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  Node<T> n;
  n.op = "matmul";
  n.shape = {M, N};
  n.value.assign(static_cast<size_t>(M) * N, T(0));
  for (int m = 0; m < M; ++m) {
    const T* arow = &av[static_cast<size_t>(m) * K];
    T* orow = &n.value[static_cast<size_t>(m) * N];
    for (int k = 0; k < K; ++k) {
      T a_mk = arow[k];
      if (a_mk == T(0)) continue;
      const T* brow = &bv[static_cast<size_t>(k) * N];
      for (int c = 0; c < N; ++c) orow[c] += a_mk * brow[c];
    }
  }
  n.requires = tape->node(a.id()).requires || tape->node(b.id()).requires;
  if (n.requires) {
    int ai = a.id(), bi = b.id();
    n.back = [ai, bi, M, K, N](Tape<T>& t, Node<T>& self) {
      Node<T>& na = t.node(ai);
      Node<T>& nb = t.node(bi);
      if (na.requires) {
        // ga = g * b^T
        for (int m = 0; m < M; ++m) {
          const T* grow = &self.grad[static_cast<size_t>(m) * N];
          T* garow = &na.grad[static_cast<size_t>(m) * K];
          for (int k = 0; k < K; ++k) {
            const T* brow = &nb.value[static_cast<size_t>(k) * N];
            T acc = T(0);
            for (int c = 0; c < N; ++c) acc += grow[c] * brow[c];
            garow[k] += acc;
          }
        }
      }
      if (nb.requires) {
        // gb = a^T * g
        for (int m = 0; m < M; ++m) {
          const T* arow = &na.value[static_cast<size_t>(m) * K];
          const T* grow = &self.grad[static_cast<size_t>(m) * N];
          for (int k = 0; k < K; ++k) {
            T a_mk = arow[k];
            if (a_mk == T(0)) continue;
            T* gbrow = &nb.grad[static_cast<size_t>(k) * N];
            for (int c = 0; c < N; ++c) gbrow[c] += a_mk * grow[c];
          }
        }
      }
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>* tape = a.tape();
  OASR_CHECK(a.shape().size() == 2, "transpose: rank-2 only, got ", shape_str(a.shape()));
  int R = a.shape()[0], C = a.shape()[1];
  const auto& av = a.value();
  Node<T> n;
  n.op = "transpose";
  n.shape = {C, R};
  n.value.resize(av.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      n.value[static_cast<size_t>(c) * R + r] = av[static_cast<size_t>(r) * C + c];
  n.requires = tape->node(a.id()).requires;
  if (n.requires) {
    int ai = a.id();
    n.back = [ai, R, C](Tape<T>& t, Node<T>& self) {
      Node<T>& na = t.node(ai);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          na.grad[static_cast<size_t>(r) * C + c] +=
              self.grad[static_cast<size_t>(c) * R + r];
    };
  }
  return tape->push(std::move(n));
}

// x (R,C) + v (C), added to every row.
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
  Tape<T>* tape = detail::same_tape(x, v, "add_rowvec");
  OASR_CHECK(x.shape().size() == 2 && v.shape().size() == 1 && v.shape()[0] == x.shape()[1],
             "add_rowvec: shapes ", shape_str(x.shape()), " + ", shape_str(v.shape()));
  int R = x.shape()[0], C = x.shape()[1];
  const auto& xv = x.value();
  const auto& vv = v.value();
  Node<T> n;
  n.op = "add_rowvec";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      n.value[static_cast<size_t>(r) * C + c] = xv[static_cast<size_t>(r) * C + c] + vv[c];
  n.requires = tape->node(x.id()).requires || tape->node(v.id()).requires;
  if (n.requires) {
    int xi = x.id(), vi = v.id();
    n.back = [xi, vi, R, C](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nv = t.node(vi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          T g = self.grad[static_cast<size_t>(r) * C + c];
          if (nx.requires) nx.grad[static_cast<size_t>(r) * C + c] += g;
          if (nv.requires) nv.grad[c] += g;
        }
    };
  }
  return tape->push(std::move(n));
}

// x (R,C) + v (R), added to every column (per-channel bias in (C,T) layout).
template <typename T>
Var<T> add_colvec(Var<T> x, Var<T> v) {
  Tape<T>* tape = detail::same_tape(x, v, "add_colvec");
  OASR_CHECK(x.shape().size() == 2 && v.shape().size() == 1 && v.shape()[0] == x.shape()[0],
             "add_colvec: shapes ", shape_str(x.shape()), " + ", shape_str(v.shape()));
  int R = x.shape()[0], C = x.shape()[1];
  const auto& xv = x.value();
  const auto& vv = v.value();
  Node<T> n;
  n.op = "add_colvec";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int r = 0; r < R; ++r) {
    T b = vv[r];
    for (int c = 0; c < C; ++c)
      n.value[static_cast<size_t>(r) * C + c] = xv[static_cast<size_t>(r) * C + c] + b;
  }
  n.requires = tape->node(x.id()).requires || tape->node(v.id()).requires;
  if (n.requires) {
    int xi = x.id(), vi = v.id();
    n.back = [xi, vi, R, C](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nv = t.node(vi);
      for (int r = 0; r < R; ++r) {
        T acc = T(0);
        for (int c = 0; c < C; ++c) {
          T g = self.grad[static_cast<size_t>(r) * C + c];
          if (nx.requires) nx.grad[static_cast<size_t>(r) * C + c] += g;
          acc += g;
        }
        if (nv.requires) nv.grad[r] += acc;
      }
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  OASR_CHECK(!xs.empty(), "concat: empty input list");
  Tape<T>* tape = xs[0].tape();
  const Shape& s0 = xs[0].shape();
  int rank = static_cast<int>(s0.size());
  OASR_CHECK(rank >= 1 && rank <= 2 && axis >= 0 && axis < rank,
             "concat: rank ", rank, " axis ", axis, " unsupported");
  int total = 0;
  for (const auto& x : xs) {
    OASR_CHECK(x.tape() == tape, "concat: operands on different tapes");
    OASR_CHECK(static_cast<int>(x.shape().size()) == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        OASR_CHECK(x.shape()[d] == s0[d], "concat: off-axis dim mismatch ",
                   shape_str(x.shape()), " vs ", shape_str(s0));
    total += x.shape()[axis];
  }
  Shape out = s0;
  out[axis] = total;
  Node<T> n;
  n.op = "concat";
  n.shape = out;
  n.value.resize(static_cast<size_t>(numel_of(out)));
  n.requires = false;
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (const auto& x : xs) {
    ids.push_back(x.id());
    n.requires = n.requires || tape->node(x.id()).requires;
  }
  int rows = rank == 2 ? s0[0] : 1;
  if (rank == 1 || axis == 0) {
    size_t off = 0;
    for (const auto& x : xs) {
      const auto& v = x.value();
      std::copy(v.begin(), v.end(), n.value.begin() + static_cast<long>(off));
      off += v.size();
    }
  } else {  // rank 2, axis 1
    int outC = total;
    int off = 0;
    for (const auto& x : xs) {
      int c = x.shape()[1];
      const auto& v = x.value();
      for (int r = 0; r < rows; ++r)
        std::copy(v.begin() + static_cast<long>(r) * c,
                  v.begin() + static_cast<long>(r + 1) * c,
                  n.value.begin() + static_cast<long>(r) * outC + off);
      off += c;
    }
  }
  if (n.requires) {
    std::vector<int> widths;
    for (const auto& x : xs) widths.push_back(x.shape()[axis]);
    n.back = [ids, widths, axis, rows, rank, total](Tape<T>& t, Node<T>& self) {
      if (rank == 1 || axis == 0) {
        size_t off = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
          Node<T>& nx = t.node(ids[i]);
          size_t len = nx.value.size();
          if (nx.requires)
            for (size_t j = 0; j < len; ++j) nx.grad[j] += self.grad[off + j];
          off += len;
        }
      } else {
        int off = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
          Node<T>& nx = t.node(ids[i]);
          int c = widths[i];
          if (nx.requires)
            for (int r = 0; r < rows; ++r)
              for (int j = 0; j < c; ++j)
                nx.grad[static_cast<size_t>(r) * c + j] +=
                    self.grad[static_cast<size_t>(r) * total + off + j];
          off += c;
        }
      }
    };
  }
  return tape->push(std::move(n));
}

// Half-open [lo, hi) along one axis; rank 1..3.
template <typename T>
Var<T> slice(Var<T> x, int axis, int lo, int hi) {
  Tape<T>* tape = x.tape();
  const Shape& s = x.shape();
  int rank = static_cast<int>(s.size());
  OASR_CHECK(rank >= 1 && rank <= 3 && axis >= 0 && axis < rank, "slice: bad axis ",
             axis, " for ", shape_str(s));
  OASR_CHECK(0 <= lo && lo < hi && hi <= s[axis], "slice: range [", lo, ",", hi,
             ") out of bounds for ", shape_str(s));
  Shape out = s;
  out[axis] = hi - lo;
  // strides of the input
  std::vector<int64_t> stride(static_cast<size_t>(rank), 1);
  for (int d = rank - 2; d >= 0; --d) stride[static_cast<size_t>(d)] = stride[d + 1] * s[d + 1];
  const auto& xv = x.value();
  Node<T> n;
  n.op = "slice";
  n.shape = out;
  int64_t out_n = numel_of(out);
  n.value.resize(static_cast<size_t>(out_n));
  // map each output linear index to input linear index
  auto in_index = [&](int64_t oi) {
    int64_t rem = oi, ii = 0;
    for (int d = 0; d < rank; ++d) {
      int64_t os = 1;
      for (int dd = d + 1; dd < rank; ++dd) os *= out[dd];
      int64_t c = rem / os;
      rem %= os;
      ii += (d == axis ? c + lo : c) * stride[static_cast<size_t>(d)];
    }
    return ii;
  };
  for (int64_t oi = 0; oi < out_n; ++oi) n.value[static_cast<size_t>(oi)] = xv[static_cast<size_t>(in_index(oi))];
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, in_index, out_n](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (int64_t oi = 0; oi < out_n; ++oi)
        nx.grad[static_cast<size_t>(in_index(oi))] += self.grad[static_cast<size_t>(oi)];
    };
  }
  return tape->push(std::move(n));
}

// Column gather on a (T,V) matrix: out[t,s] = x[t, idx[s]].
template <typename T>
Var<T> gather_cols(Var<T> x, std::vector<int> idx) {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 2, "gather_cols: rank-2 only");
  int R = x.shape()[0], C = x.shape()[1];
  int S = static_cast<int>(idx.size());
  for (int i : idx) OASR_CHECK(i >= 0 && i < C, "gather_cols: index ", i, " out of ", C);
  const auto& xv = x.value();
  Node<T> n;
  n.op = "gather_cols";
  n.shape = {R, S};
  n.value.resize(static_cast<size_t>(R) * S);
  for (int r = 0; r < R; ++r)
    for (int s = 0; s < S; ++s)
      n.value[static_cast<size_t>(r) * S + s] = xv[static_cast<size_t>(r) * C + idx[static_cast<size_t>(s)]];
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, idx, R, C, S](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (int r = 0; r < R; ++r)
        for (int s = 0; s < S; ++s)
          nx.grad[static_cast<size_t>(r) * C + idx[static_cast<size_t>(s)]] +=
              self.grad[static_cast<size_t>(r) * S + s];
    };
  }
  return tape->push(std::move(n));
}

// 1-D gather with a precomputed index map; -1 reads as zero. Used to frame
// a waveform into (n_frames, frame_len) windows including reflect padding.
template <typename T>
Var<T> gather1d(Var<T> x, std::shared_ptr<const std::vector<int64_t>> map, Shape out_shape,
                const char* name = "gather1d") {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 1, name, ": input must be rank-1");
  OASR_CHECK(static_cast<int64_t>(map->size()) == numel_of(out_shape), name,
             ": map size mismatch");
  const auto& xv = x.value();
  int64_t in_n = static_cast<int64_t>(xv.size());
  Node<T> n;
  n.op = name;
  n.shape = std::move(out_shape);
  n.value.resize(map->size());
  for (size_t i = 0; i < map->size(); ++i) {
    int64_t j = (*map)[i];
    OASR_CHECK(j < in_n, name, ": map index out of range");
    n.value[i] = j >= 0 ? xv[static_cast<size_t>(j)] : T(0);
  }
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, map](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (size_t i = 0; i < map->size(); ++i) {
        int64_t j = (*map)[i];
        if (j >= 0) nx.grad[static_cast<size_t>(j)] += self.grad[i];
      }
    };
  }
  return tape->push(std::move(n));
}

// Overlap-add of (n_frames, frame_len) rows at the given hop into a signal of
// length (n_frames-1)*hop + frame_len. The adjoint of framing.
template <typename T>
Var<T> overlap_add(Var<T> frames, int hop) {
  Tape<T>* tape = frames.tape();
  OASR_CHECK(frames.shape().size() == 2, "overlap_add: rank-2 input");
  OASR_CHECK(hop > 0, "overlap_add: hop must be positive");
  int Tn = frames.shape()[0], L = frames.shape()[1];
  int64_t out_len = static_cast<int64_t>(Tn - 1) * hop + L;
  const auto& fv = frames.value();
  Node<T> n;
  n.op = "overlap_add";
  n.shape = {static_cast<int>(out_len)};
  n.value.assign(static_cast<size_t>(out_len), T(0));
  for (int t = 0; t < Tn; ++t) {
    const T* row = &fv[static_cast<size_t>(t) * L];
    T* out = &n.value[static_cast<size_t>(t) * hop];
    for (int j = 0; j < L; ++j) out[j] += row[j];
  }
  n.requires = tape->node(frames.id()).requires;
  if (n.requires) {
    int fi = frames.id();
    n.back = [fi, Tn, L, hop](Tape<T>& t, Node<T>& self) {
      Node<T>& nf = t.node(fi);
      for (int f = 0; f < Tn; ++f) {
        T* grow = &nf.grad[static_cast<size_t>(f) * L];
        const T* gout = &self.grad[static_cast<size_t>(f) * hop];
        for (int j = 0; j < L; ++j) grow[j] += gout[j];
      }
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// convolutions ((channels, time) layout)

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, int dilation = 1, int pad = 0) {
  Tape<T>* tape = detail::same_tape(x, w, "conv1d");
  OASR_CHECK(x.shape().size() == 2 && w.shape().size() == 3,
             "conv1d: expected x(Ci,L) w(Co,Ci,K), got ", shape_str(x.shape()), " and ",
             shape_str(w.shape()));
  int Ci = x.shape()[0], L = x.shape()[1];
  int Co = w.shape()[0], Ciw = w.shape()[1], K = w.shape()[2];
  OASR_CHECK(Ci == Ciw, "conv1d: channel mismatch x", shape_str(x.shape()), " w",
             shape_str(w.shape()));
  OASR_CHECK(dilation >= 1 && pad >= 0, "conv1d: bad dilation/pad");
  int Lo = L + 2 * pad - (K - 1) * dilation;
  OASR_CHECK(Lo >= 1, "conv1d: output length ", Lo, " < 1");
  const auto& xv = x.value();
  const auto& wv = w.value();
  Node<T> n;
  n.op = "conv1d";
  n.shape = {Co, Lo};
  n.value.assign(static_cast<size_t>(Co) * Lo, T(0));
  for (int co = 0; co < Co; ++co) {
    T* orow = &n.value[static_cast<size_t>(co) * Lo];
    for (int ci = 0; ci < Ci; ++ci) {
      const T* xrow = &xv[static_cast<size_t>(ci) * L];
      const T* wrow = &wv[(static_cast<size_t>(co) * Ci + ci) * K];
      for (int k = 0; k < K; ++k) {
        T wk = wrow[k];
        if (wk == T(0)) continue;
        int shift = k * dilation - pad;  // input index = t + shift
        int t0 = std::max(0, -shift), t1 = std::min(Lo, L - shift);
        for (int t = t0; t < t1; ++t) orow[t] += wk * xrow[t + shift];
      }
    }
  }
  n.requires = tape->node(x.id()).requires || tape->node(w.id()).requires;
  if (n.requires) {
    int xi = x.id(), wi = w.id();
    n.back = [xi, wi, Ci, L, Co, K, Lo, dilation, pad](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nw = t.node(wi);
      for (int co = 0; co < Co; ++co) {
        const T* grow = &self.grad[static_cast<size_t>(co) * Lo];
        for (int ci = 0; ci < Ci; ++ci) {
          const T* xrow = &nx.value[static_cast<size_t>(ci) * L];
          const T* wrow = &nw.value[(static_cast<size_t>(co) * Ci + ci) * K];
          T* gxrow = nx.requires ? &nx.grad[static_cast<size_t>(ci) * L] : nullptr;
          T* gwrow = nw.requires ? &nw.grad[(static_cast<size_t>(co) * Ci + ci) * K] : nullptr;
          for (int k = 0; k < K; ++k) {
            int shift = k * dilation - pad;
            int t0 = std::max(0, -shift), t1 = std::min(Lo, L - shift);
            if (gxrow != nullptr) {
              T wk = wrow[k];
              for (int s = t0; s < t1; ++s) gxrow[s + shift] += wk * grow[s];
            }
            if (gwrow != nullptr) {
              T acc = T(0);
              for (int s = t0; s < t1; ++s) acc += grow[s] * xrow[s + shift];
              gwrow[k] += acc;
            }
          }
        }
      }
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> w, int dilation = 1, int pad = 0) {
  Tape<T>* tape = detail::same_tape(x, w, "depthwise_conv1d");
  OASR_CHECK(x.shape().size() == 2 && w.shape().size() == 2 && x.shape()[0] == w.shape()[0],
             "depthwise_conv1d: expected x(C,L) w(C,K), got ", shape_str(x.shape()),
             " and ", shape_str(w.shape()));
  int C = x.shape()[0], L = x.shape()[1], K = w.shape()[1];
  int Lo = L + 2 * pad - (K - 1) * dilation;
  OASR_CHECK(Lo >= 1, "depthwise_conv1d: output length ", Lo, " < 1");
  const auto& xv = x.value();
  const auto& wv = w.value();
  Node<T> n;
  n.op = "depthwise_conv1d";
  n.shape = {C, Lo};
  n.value.assign(static_cast<size_t>(C) * Lo, T(0));
  for (int c = 0; c < C; ++c) {
    const T* xrow = &xv[static_cast<size_t>(c) * L];
    const T* wrow = &wv[static_cast<size_t>(c) * K];
    T* orow = &n.value[static_cast<size_t>(c) * Lo];
    for (int k = 0; k < K; ++k) {
      int shift = k * dilation - pad;
      int t0 = std::max(0, -shift), t1 = std::min(Lo, L - shift);
      T wk = wrow[k];
      for (int t = t0; t < t1; ++t) orow[t] += wk * xrow[t + shift];
    }
  }
  n.requires = tape->node(x.id()).requires || tape->node(w.id()).requires;
  if (n.requires) {
    int xi = x.id(), wi = w.id();
    n.back = [xi, wi, C, L, K, Lo, dilation, pad](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nw = t.node(wi);
      for (int c = 0; c < C; ++c) {
        const T* grow = &self.grad[static_cast<size_t>(c) * Lo];
        const T* xrow = &nx.value[static_cast<size_t>(c) * L];
        const T* wrow = &nw.value[static_cast<size_t>(c) * K];
        for (int k = 0; k < K; ++k) {
          int shift = k * dilation - pad;
          int t0 = std::max(0, -shift), t1 = std::min(Lo, L - shift);
          if (nx.requires) {
            T wk = wrow[k];
            T* gxrow = &nx.grad[static_cast<size_t>(c) * L];
            for (int s = t0; s < t1; ++s) gxrow[s + shift] += wk * grow[s];
          }
          if (nw.requires) {
            T acc = T(0);
            for (int s = t0; s < t1; ++s) acc += grow[s] * xrow[s + shift];
            nw.grad[static_cast<size_t>(c) * K + k] += acc;
          }
        }
      }
    };
  }
  return tape->push(std::move(n));
}

// Frequency-only convolution on (C, T, F) maps, valid padding; time axis is
// untouched (the CLDNN convolves along frequency only).
template <typename T>
Var<T> conv2d_freq(Var<T> x, Var<T> w) {
  Tape<T>* tape = detail::same_tape(x, w, "conv2d_freq");
  OASR_CHECK(x.shape().size() == 3 && w.shape().size() == 3 && x.shape()[0] == w.shape()[1],
             "conv2d_freq: expected x(Ci,T,F) w(Co,Ci,K), got ", shape_str(x.shape()),
             " and ", shape_str(w.shape()));
  int Ci = x.shape()[0], Tt = x.shape()[1], F = x.shape()[2];
  int Co = w.shape()[0], K = w.shape()[2];
  int Fo = F - K + 1;
  OASR_CHECK(Fo >= 1, "conv2d_freq: frequency output ", Fo, " < 1 (F=", F, " K=", K, ")");
  const auto& xv = x.value();
  const auto& wv = w.value();
  Node<T> n;
  n.op = "conv2d_freq";
  n.shape = {Co, Tt, Fo};
  n.value.assign(static_cast<size_t>(Co) * Tt * Fo, T(0));
  for (int co = 0; co < Co; ++co)
    for (int ci = 0; ci < Ci; ++ci) {
      const T* wrow = &wv[(static_cast<size_t>(co) * Ci + ci) * K];
      for (int t = 0; t < Tt; ++t) {
        const T* xrow = &xv[(static_cast<size_t>(ci) * Tt + t) * F];
        T* orow = &n.value[(static_cast<size_t>(co) * Tt + t) * Fo];
        for (int f = 0; f < Fo; ++f) {
          T acc = T(0);
          for (int k = 0; k < K; ++k) acc += wrow[k] * xrow[f + k];
          orow[f] += acc;
        }
      }
    }
  n.requires = tape->node(x.id()).requires || tape->node(w.id()).requires;
  if (n.requires) {
    int xi = x.id(), wi = w.id();
    n.back = [xi, wi, Ci, Tt, F, Co, K, Fo](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nw = t.node(wi);
      for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci) {
          const T* wrow = &nw.value[(static_cast<size_t>(co) * Ci + ci) * K];
          T* gwrow = nw.requires ? &nw.grad[(static_cast<size_t>(co) * Ci + ci) * K] : nullptr;
          for (int tt = 0; tt < Tt; ++tt) {
            const T* grow = &self.grad[(static_cast<size_t>(co) * Tt + tt) * Fo];
            const T* xrow = &nx.value[(static_cast<size_t>(ci) * Tt + tt) * F];
            T* gxrow = nx.requires ? &nx.grad[(static_cast<size_t>(ci) * Tt + tt) * F] : nullptr;
            for (int f = 0; f < Fo; ++f) {
              T g = grow[f];
              if (g == T(0)) continue;
              for (int k = 0; k < K; ++k) {
                if (gxrow != nullptr) gxrow[f + k] += g * wrow[k];
                if (gwrow != nullptr) gwrow[k] += g * xrow[f + k];
              }
            }
          }
        }
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
Var<T> add_bias_c3(Var<T> x, Var<T> b) {
  Tape<T>* tape = detail::same_tape(x, b, "add_bias_c3");
  OASR_CHECK(x.shape().size() == 3 && b.shape().size() == 1 && b.shape()[0] == x.shape()[0],
             "add_bias_c3: shapes ", shape_str(x.shape()), " + ", shape_str(b.shape()));
  int C = x.shape()[0];
  int64_t plane = numel_of(x.shape()) / C;
  const auto& xv = x.value();
  const auto& bv = b.value();
  Node<T> n;
  n.op = "add_bias_c3";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int c = 0; c < C; ++c)
    for (int64_t i = 0; i < plane; ++i)
      n.value[static_cast<size_t>(c * plane + i)] = xv[static_cast<size_t>(c * plane + i)] + bv[static_cast<size_t>(c)];
  n.requires = tape->node(x.id()).requires || tape->node(b.id()).requires;
  if (n.requires) {
    int xi = x.id(), bi = b.id();
    n.back = [xi, bi, C, plane](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& nb = t.node(bi);
      for (int c = 0; c < C; ++c) {
        T acc = T(0);
        for (int64_t i = 0; i < plane; ++i) {
          T g = self.grad[static_cast<size_t>(c * plane + i)];
          if (nx.requires) nx.grad[static_cast<size_t>(c * plane + i)] += g;
          acc += g;
        }
        if (nb.requires) nb.grad[static_cast<size_t>(c)] += acc;
      }
    };
  }
  return tape->push(std::move(n));
}

// Non-overlapping max pool of width 2 along the frequency axis of (C,T,F).
template <typename T>
Var<T> maxpool_freq(Var<T> x) {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 3, "maxpool_freq: rank-3 input");
  int C = x.shape()[0], Tt = x.shape()[1], F = x.shape()[2];
  int Fo = F / 2;
  OASR_CHECK(Fo >= 1, "maxpool_freq: F=", F, " too small");
  const auto& xv = x.value();
  Node<T> n;
  n.op = "maxpool_freq";
  n.shape = {C, Tt, Fo};
  n.value.resize(static_cast<size_t>(C) * Tt * Fo);
  auto chosen = std::make_shared<std::vector<int64_t>>(n.value.size());
  for (int c = 0; c < C; ++c)
    for (int t = 0; t < Tt; ++t) {
      const T* xrow = &xv[(static_cast<size_t>(c) * Tt + t) * F];
      size_t obase = (static_cast<size_t>(c) * Tt + t) * Fo;
      int64_t ibase = (static_cast<int64_t>(c) * Tt + t) * F;
      for (int f = 0; f < Fo; ++f) {
        int a = 2 * f, b = 2 * f + 1;
        bool left = xrow[a] >= xrow[b];
        n.value[obase + static_cast<size_t>(f)] = left ? xrow[a] : xrow[b];
        (*chosen)[obase + static_cast<size_t>(f)] = ibase + (left ? a : b);
      }
    }
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, chosen](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (size_t i = 0; i < self.grad.size(); ++i)
        nx.grad[static_cast<size_t>((*chosen)[i])] += self.grad[i];
    };
  }
  return tape->push(std::move(n));
}

// (C, T, F) -> (T, C*F): per-frame flatten feeding the recurrent stack.
template <typename T>
Var<T> merge_channels_freq(Var<T> x) {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 3, "merge_channels_freq: rank-3 input");
  int C = x.shape()[0], Tt = x.shape()[1], F = x.shape()[2];
  const auto& xv = x.value();
  Node<T> n;
  n.op = "merge_channels_freq";
  n.shape = {Tt, C * F};
  n.value.resize(xv.size());
  for (int c = 0; c < C; ++c)
    for (int t = 0; t < Tt; ++t)
      for (int f = 0; f < F; ++f)
        n.value[(static_cast<size_t>(t) * C + c) * F + f] =
            xv[(static_cast<size_t>(c) * Tt + t) * F + f];
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, C, Tt, F](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (int c = 0; c < C; ++c)
        for (int tt = 0; tt < Tt; ++tt)
          for (int f = 0; f < F; ++f)
            nx.grad[(static_cast<size_t>(c) * Tt + tt) * F + f] +=
                self.grad[(static_cast<size_t>(tt) * C + c) * F + f];
    };
  }
  return tape->push(std::move(n));
}

// Splices each frame of (T, C) with its left/right neighbours, replicating
// edge frames, producing (left+1+right, T, C) context maps.
template <typename T>
Var<T> context_expand(Var<T> x, int left, int right) {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 2, "context_expand: rank-2 input");
  OASR_CHECK(left >= 0 && right >= 0, "context_expand: negative context");
  int Tt = x.shape()[0], C = x.shape()[1];
  int J = left + 1 + right;
  const auto& xv = x.value();
  Node<T> n;
  n.op = "context_expand";
  n.shape = {J, Tt, C};
  n.value.resize(static_cast<size_t>(J) * Tt * C);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < Tt; ++t) {
      int src = std::clamp(t + j - left, 0, Tt - 1);
      std::copy(xv.begin() + static_cast<long>(src) * C,
                xv.begin() + static_cast<long>(src + 1) * C,
                n.value.begin() + (static_cast<long>(j) * Tt + t) * C);
    }
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, J, Tt, C, left](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (int j = 0; j < J; ++j)
        for (int tt = 0; tt < Tt; ++tt) {
          int src = std::clamp(tt + j - left, 0, Tt - 1);
          const T* g = &self.grad[(static_cast<size_t>(j) * Tt + tt) * C];
          T* gx = &nx.grad[static_cast<size_t>(src) * C];
          for (int c = 0; c < C; ++c) gx[c] += g[c];
        }
    };
  }
  return tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// normalizations and softmax

template <typename T>
Var<T> log_softmax(Var<T> x) {
  Tape<T>* tape = x.tape();
  OASR_CHECK(x.shape().size() == 2, "log_softmax: rank-2 (T,V) input");
  int R = x.shape()[0], V = x.shape()[1];
  const auto& xv = x.value();
  Node<T> n;
  n.op = "log_softmax";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int r = 0; r < R; ++r) {
    const T* row = &xv[static_cast<size_t>(r) * V];
    T m = row[0];
    for (int v = 1; v < V; ++v) m = std::max(m, row[v]);
    T acc = T(0);
    for (int v = 0; v < V; ++v) acc += std::exp(row[v] - m);
    T lse = m + std::log(acc);
    T* orow = &n.value[static_cast<size_t>(r) * V];
    for (int v = 0; v < V; ++v) orow[v] = row[v] - lse;
  }
  n.requires = tape->node(x.id()).requires;
  if (n.requires) {
    int xi = x.id();
    n.back = [xi, R, V](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      for (int r = 0; r < R; ++r) {
        const T* g = &self.grad[static_cast<size_t>(r) * V];
        const T* y = &self.value[static_cast<size_t>(r) * V];
        T gsum = T(0);
        for (int v = 0; v < V; ++v) gsum += g[v];
        T* gx = &nx.grad[static_cast<size_t>(r) * V];
        for (int v = 0; v < V; ++v) gx[v] += g[v] - std::exp(y[v]) * gsum;
      }
    };
  }
  return tape->push(std::move(n));
}

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;  // fixed tensors: stored in checkpoints, not learned
  Tensor<T> running_var;
  T momentum = T(0.99);

  explicit BatchNormState(int dim = 0)
      : running_mean(Tensor<T>::zeros({dim})), running_var(Tensor<T>::full({dim}, T(1))) {}
};

// Per-feature normalization of (T, C) over the time axis. Training mode uses
// batch statistics and updates the running ones; inference uses running.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state,
                  bool training) {
  Tape<T>* tape = detail::same_tape(x, gamma, "batch_norm");
  detail::same_tape(x, beta, "batch_norm");
  OASR_CHECK(x.shape().size() == 2, "batch_norm: rank-2 (T,C) input");
  int R = x.shape()[0], C = x.shape()[1];
  OASR_CHECK(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
             "batch_norm: affine params must be shape (", C, ")");
  OASR_CHECK(state.running_mean.shape == Shape{C}, "batch_norm: state dim mismatch");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  const T eps = T(kEps);

  std::vector<T> mu(static_cast<size_t>(C), T(0)), var(static_cast<size_t>(C), T(0));
  if (training) {
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) mu[static_cast<size_t>(c)] += xv[static_cast<size_t>(r) * C + c];
    for (auto& m : mu) m /= static_cast<T>(R);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        T d = xv[static_cast<size_t>(r) * C + c] - mu[static_cast<size_t>(c)];
        var[static_cast<size_t>(c)] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(R);
    T m = state.momentum;
    for (int c = 0; c < C; ++c) {
      state.running_mean.data[static_cast<size_t>(c)] =
          m * state.running_mean.data[static_cast<size_t>(c)] + (T(1) - m) * mu[static_cast<size_t>(c)];
      state.running_var.data[static_cast<size_t>(c)] =
          m * state.running_var.data[static_cast<size_t>(c)] + (T(1) - m) * var[static_cast<size_t>(c)];
    }
  } else {
    mu.assign(state.running_mean.data.begin(), state.running_mean.data.end());
    var.assign(state.running_var.data.begin(), state.running_var.data.end());
  }

  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) (*invstd)[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  Node<T> n;
  n.op = "batch_norm";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      size_t i = static_cast<size_t>(r) * C + c;
      (*xhat)[i] = (xv[i] - mu[static_cast<size_t>(c)]) * (*invstd)[static_cast<size_t>(c)];
      n.value[i] = gv[static_cast<size_t>(c)] * (*xhat)[i] + bv[static_cast<size_t>(c)];
    }
  n.requires = tape->node(x.id()).requires || tape->node(gamma.id()).requires ||
               tape->node(beta.id()).requires;
  if (n.requires) {
    int xi = x.id(), gi = gamma.id(), bi = beta.id();
    n.back = [xi, gi, bi, R, C, xhat, invstd, training](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& ng = t.node(gi);
      Node<T>& nb = t.node(bi);
      for (int c = 0; c < C; ++c) {
        T gsum = T(0), gxhat_sum = T(0);
        for (int r = 0; r < R; ++r) {
          size_t i = static_cast<size_t>(r) * C + c;
          gsum += self.grad[i];
          gxhat_sum += self.grad[i] * (*xhat)[i];
        }
        if (ng.requires) ng.grad[static_cast<size_t>(c)] += gxhat_sum;
        if (nb.requires) nb.grad[static_cast<size_t>(c)] += gsum;
        if (nx.requires) {
          T gam = ng.value[static_cast<size_t>(c)], is = (*invstd)[static_cast<size_t>(c)];
          if (training) {
            T invR = T(1) / static_cast<T>(R);
            for (int r = 0; r < R; ++r) {
              size_t i = static_cast<size_t>(r) * C + c;
              nx.grad[i] += gam * is * (self.grad[i] - gsum * invR - (*xhat)[i] * gxhat_sum * invR);
            }
          } else {
            for (int r = 0; r < R; ++r) {
              size_t i = static_cast<size_t>(r) * C + c;
              nx.grad[i] += gam * is * self.grad[i];
            }
          }
        }
      }
    };
  }
  return tape->push(std::move(n));
}

// Global layer norm over a whole (C, T) map with per-channel affine.
template <typename T>
Var<T> global_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  Tape<T>* tape = detail::same_tape(x, gamma, "global_norm");
  detail::same_tape(x, beta, "global_norm");
  OASR_CHECK(x.shape().size() == 2, "global_norm: rank-2 (C,T) input");
  int C = x.shape()[0], L = x.shape()[1];
  OASR_CHECK(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
             "global_norm: affine params must be shape (", C, ")");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  int64_t N = static_cast<int64_t>(xv.size());
  T mu = std::accumulate(xv.begin(), xv.end(), T(0)) / static_cast<T>(N);
  T var = T(0);
  for (T v : xv) var += (v - mu) * (v - mu);
  var /= static_cast<T>(N);
  T is = T(1) / std::sqrt(var + T(kEps));
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  Node<T> n;
  n.op = "global_norm";
  n.shape = x.shape();
  n.value.resize(xv.size());
  for (int c = 0; c < C; ++c)
    for (int l = 0; l < L; ++l) {
      size_t i = static_cast<size_t>(c) * L + l;
      (*xhat)[i] = (xv[i] - mu) * is;
      n.value[i] = gv[static_cast<size_t>(c)] * (*xhat)[i] + bv[static_cast<size_t>(c)];
    }
  n.requires = tape->node(x.id()).requires || tape->node(gamma.id()).requires ||
               tape->node(beta.id()).requires;
  if (n.requires) {
    int xi = x.id(), gi = gamma.id(), bi = beta.id();
    n.back = [xi, gi, bi, C, L, xhat, is, N](Tape<T>& t, Node<T>& self) {
      Node<T>& nx = t.node(xi);
      Node<T>& ng = t.node(gi);
      Node<T>& nb = t.node(bi);
      // h = dL/dxhat
      T hsum = T(0), hx_sum = T(0);
      for (int c = 0; c < C; ++c) {
        T gam = ng.value[static_cast<size_t>(c)];
        T grow = T(0), gxrow = T(0);
        for (int l = 0; l < L; ++l) {
          size_t i = static_cast<size_t>(c) * L + l;
          T h = self.grad[i] * gam;
          hsum += h;
          hx_sum += h * (*xhat)[i];
          grow += self.grad[i];
          gxrow += self.grad[i] * (*xhat)[i];
        }
        if (ng.requires) ng.grad[static_cast<size_t>(c)] += gxrow;
        if (nb.requires) nb.grad[static_cast<size_t>(c)] += grow;
      }
      if (nx.requires) {
        T invN = T(1) / static_cast<T>(N);
        for (int c = 0; c < C; ++c) {
          T gam = ng.value[static_cast<size_t>(c)];
          for (int l = 0; l < L; ++l) {
            size_t i = static_cast<size_t>(c) * L + l;
            T h = self.grad[i] * gam;
            nx.grad[i] += is * (h - hsum * invN - (*xhat)[i] * hx_sum * invN);
          }
        }
      }
    };
  }
  return tape->push(std::move(n));
}

}  // namespace oasr::grad

#endif  // OASR_GRAD_HPP_
