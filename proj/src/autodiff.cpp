// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace moelab {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  MOELAB_REQUIRE(a.valid() && b.valid() && a.tape == b.tape, "operands must live on the same tape");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  MOELAB_REQUIRE(a.shape() == b.shape(),
                 std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Row-wise log-softmax of a (rows, cols) block.
template <typename T>
void log_softmax_rows(const T* in, T* out, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* x = in + static_cast<std::ptrdiff_t>(r) * cols;
    T* y = out + static_cast<std::ptrdiff_t>(r) * cols;
    T mx = *std::max_element(x, x + cols);
    T s = 0;
    for (int j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
    const T lse = mx + std::log(s);
    for (int j = 0; j < cols; ++j) y[j] = x[j] - lse;
  }
}

}  // namespace

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  MOELAB_REQUIRE(loss.tape == this, "loss does not belong to this tape");
  MOELAB_REQUIRE(value(loss).size() == 1,
                 "backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
  if (!requires_grad(loss)) return;
  grad_mut(loss.id).fill(T(1));
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tape<T>& tp = *a.tape;
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  const bool rg = tp.requires_grad(a) || tp.requires_grad(b);
  return tp.push(std::move(out), rg, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_ref(self);
    if (t.requires_grad(a)) accumulate(t.grad_mut(a), g);
    if (t.requires_grad(b)) accumulate(t.grad_mut(b), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tape<T>& tp = *a.tape;
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  {
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  }
  const bool rg = tp.requires_grad(a) || tp.requires_grad(b);
  return tp.push(std::move(out), rg, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_ref(self);
    if (t.requires_grad(a)) accumulate(t.grad_mut(a), g);
    if (t.requires_grad(b)) {
      auto gb = t.grad_mut(b).data();
      auto gs = g.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gs[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tape<T>& tp = *a.tape;
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  {
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  }
  const bool rg = tp.requires_grad(a) || tp.requires_grad(b);
  return tp.push(std::move(out), rg, [a = a.id, b = b.id](Tape<T>& t, int self) {
    auto g = t.grad_ref(self).data();
    if (t.requires_grad(a)) {
      auto ga = t.grad_mut(a).data();
      auto bv = t.value(b).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_mut(b).data();
      auto av = t.value(a).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= c;
  return tp.push(std::move(out), tp.requires_grad(a), [a = a.id, c](Tape<T>& t, int self) {
    auto g = t.grad_ref(self).data();
    auto ga = t.grad_mut(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
  });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& tp = *a.tape;
  T s = 0;
  for (T v : a.value().data()) s += v;
  return tp.push(Tensor<T>::scalar(s), tp.requires_grad(a), [a = a.id](Tape<T>& t, int self) {
    const T g = t.grad_ref(self)[0];
    for (T& v : t.grad_mut(a).data()) v += g;
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  return tp.push(std::move(out), tp.requires_grad(a), [a = a.id](Tape<T>& t, int self) {
    auto g = t.grad_ref(self).data();
    auto x = t.value(a).data();
    auto ga = t.grad_mut(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM

namespace {

struct ConvGeometry {
  int batch, in_ch, height, width, out_ch, kernel, stride, padding, out_h, out_w;
  std::int64_t patch() const { return static_cast<std::int64_t>(in_ch) * kernel * kernel; }
  std::int64_t positions() const { return static_cast<std::int64_t>(batch) * out_h * out_w; }
};

// Output columns [lo, hi) read inside the input row for kernel offset k.
inline void valid_range(const ConvGeometry& g, int k, int& lo, int& hi) {
  const int shift = k - g.padding;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  const int last = g.width - 1 - shift;
  hi = last < 0 ? 0 : std::min(g.out_w, last / g.stride + 1);
  lo = std::min(lo, hi);
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::int64_t npos = g.positions();
  for (int c = 0; c < g.in_ch; ++c)
    for (int ki = 0; ki < g.kernel; ++ki)
      for (int kj = 0; kj < g.kernel; ++kj) {
        int lo, hi;
        valid_range(g, kj, lo, hi);
        const int shift = kj - g.padding;
        T* row = cols + ((static_cast<std::int64_t>(c) * g.kernel + ki) * g.kernel + kj) * npos;
        for (int b = 0; b < g.batch; ++b) {
          const T* plane = x + (static_cast<std::int64_t>(b) * g.in_ch + c) * g.height * g.width;
          T* dst = row + static_cast<std::int64_t>(b) * g.out_h * g.out_w;
          for (int oh = 0; oh < g.out_h; ++oh) {
            const int ih = oh * g.stride - g.padding + ki;
            T* drow = dst + static_cast<std::int64_t>(oh) * g.out_w;
            if (ih < 0 || ih >= g.height) {
              std::fill(drow, drow + g.out_w, T(0));
              continue;
            }
            const T* srow = plane + static_cast<std::int64_t>(ih) * g.width;
            std::fill(drow, drow + lo, T(0));
            if (g.stride == 1) {
              std::copy(srow + lo + shift, srow + hi + shift, drow + lo);
            } else {
              for (int ow = lo; ow < hi; ++ow) drow[ow] = srow[ow * g.stride + shift];
            }
            std::fill(drow + hi, drow + g.out_w, T(0));
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::int64_t npos = g.positions();
  for (int c = 0; c < g.in_ch; ++c)
    for (int ki = 0; ki < g.kernel; ++ki)
      for (int kj = 0; kj < g.kernel; ++kj) {
        int lo, hi;
        valid_range(g, kj, lo, hi);
        const int shift = kj - g.padding;
        const T* row = cols + ((static_cast<std::int64_t>(c) * g.kernel + ki) * g.kernel + kj) * npos;
        for (int b = 0; b < g.batch; ++b) {
          T* plane = dx + (static_cast<std::int64_t>(b) * g.in_ch + c) * g.height * g.width;
          const T* src = row + static_cast<std::int64_t>(b) * g.out_h * g.out_w;
          for (int oh = 0; oh < g.out_h; ++oh) {
            const int ih = oh * g.stride - g.padding + ki;
            if (ih < 0 || ih >= g.height) continue;
            T* drow = plane + static_cast<std::int64_t>(ih) * g.width;
            const T* srow = src + static_cast<std::int64_t>(oh) * g.out_w;
            if (g.stride == 1) {
              for (int ow = lo; ow < hi; ++ow) drow[ow + shift] += srow[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) drow[ow * g.stride + shift] += srow[ow];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int padding) {
  require_same_tape(x, w);
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  MOELAB_REQUIRE(xv.rank() == 4 && wv.rank() == 4, "conv2d expects 4-d input and weight");
  MOELAB_REQUIRE(xv.dim(1) == wv.dim(1), "conv2d channel mismatch: input " + shape_str(xv.shape()) +
                                             " weight " + shape_str(wv.shape()));
  MOELAB_REQUIRE(wv.dim(2) == wv.dim(3), "conv2d expects square kernels");
  MOELAB_REQUIRE(stride >= 1 && padding >= 0, "conv2d stride/padding out of range");
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;
  MOELAB_REQUIRE(g.out_h > 0 && g.out_w > 0, "conv2d output would be empty");

  const std::int64_t npos = g.positions();
  const std::int64_t hw = static_cast<std::int64_t>(g.out_h) * g.out_w;
  RowMat<T> cols(g.patch(), npos);
  im2col(xv.ptr(), g, cols.data());

  RowMat<T> prod = CMapMat<T>(wv.ptr(), g.out_ch, g.patch()) * cols;
  Tensor<T> out(Shape{g.batch, g.out_ch, g.out_h, g.out_w});
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_ch; ++o)
      std::copy_n(prod.data() + o * npos + b * hw, hw, out.ptr() + (static_cast<std::int64_t>(b) * g.out_ch + o) * hw);

  const bool need_w = tp.requires_grad(w);
  const bool need_x = tp.requires_grad(x);
  if (!need_w) cols.resize(0, 0);
  return tp.push(std::move(out), need_w || need_x,
                 [x = x.id, w = w.id, g, cols = std::move(cols)](Tape<T>& t, int self) {
                   const std::int64_t npos = g.positions();
                   const std::int64_t hw = static_cast<std::int64_t>(g.out_h) * g.out_w;
                   const Tensor<T>& gy = t.grad_ref(self);
                   RowMat<T> gmat(g.out_ch, npos);
                   for (int b = 0; b < g.batch; ++b)
                     for (int o = 0; o < g.out_ch; ++o)
                       std::copy_n(gy.ptr() + (static_cast<std::int64_t>(b) * g.out_ch + o) * hw, hw,
                                   gmat.data() + o * npos + b * hw);
                   if (t.requires_grad(w)) {
                     MapMat<T>(t.grad_mut(w).ptr(), g.out_ch, g.patch()).noalias() +=
                         gmat * cols.transpose();
                   }
                   if (t.requires_grad(x)) {
                     RowMat<T> dcols = CMapMat<T>(t.value(w).ptr(), g.out_ch, g.patch()).transpose() * gmat;
                     col2im(dcols.data(), g, t.grad_mut(x).ptr());
                   }
                 });
}

// ---------------------------------------------------------------------------
// Dense layers and pooling

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  require_same_tape(x, w);
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  MOELAB_REQUIRE(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
                 "linear shape mismatch: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const int batch = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  Tensor<T> out(Shape{batch, outf});
  MapMat<T>(out.ptr(), batch, outf).noalias() = CMapMat<T>(xv.ptr(), batch, in) * CMapMat<T>(wv.ptr(), outf, in).transpose();
  bool rg = tp.requires_grad(x) || tp.requires_grad(w);
  int bid = -1;
  if (b.valid()) {
    MOELAB_REQUIRE(b.tape == x.tape && b.value().size() == outf, "linear bias shape mismatch");
    const T* bv = b.value().ptr();
    for (int i = 0; i < batch; ++i)
      for (int o = 0; o < outf; ++o) out[static_cast<std::int64_t>(i) * outf + o] += bv[o];
    rg = rg || tp.requires_grad(b);
    bid = b.id;
  }
  return tp.push(std::move(out), rg, [x = x.id, w = w.id, bid, batch, in, outf](Tape<T>& t, int self) {
    CMapMat<T> g(t.grad_ref(self).ptr(), batch, outf);
    if (t.requires_grad(x))
      MapMat<T>(t.grad_mut(x).ptr(), batch, in).noalias() += g * CMapMat<T>(t.value(w).ptr(), outf, in);
    if (t.requires_grad(w))
      MapMat<T>(t.grad_mut(w).ptr(), outf, in).noalias() += g.transpose() * CMapMat<T>(t.value(x).ptr(), batch, in);
    if (bid >= 0 && t.requires_grad(bid)) {
      T* gb = t.grad_mut(bid).ptr();
      for (int i = 0; i < batch; ++i)
        for (int o = 0; o < outf; ++o) gb[o] += g(i, o);
    }
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  MOELAB_REQUIRE(xv.rank() == 4, "global_avg_pool expects (B,C,H,W)");
  const int batch = xv.dim(0), ch = xv.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out(Shape{batch, ch});
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(batch) * ch; ++i) {
    const T* p = xv.ptr() + i * hw;
    T s = 0;
    for (std::int64_t j = 0; j < hw; ++j) s += p[j];
    out[i] = s / static_cast<T>(hw);
  }
  return tp.push(std::move(out), tp.requires_grad(x), [x = x.id, batch, ch, hw](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_ref(self);
    T* gx = t.grad_mut(x).ptr();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(batch) * ch; ++i) {
      const T v = g[i] / static_cast<T>(hw);
      for (std::int64_t j = 0; j < hw; ++j) gx[i * hw + j] += v;
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family and losses

template <typename T>
Var<T> softmax(Var<T> logits) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.value();
  MOELAB_REQUIRE(z.rank() == 2, "softmax expects (B,K)");
  const int rows = z.dim(0), cols = z.dim(1);
  Tensor<T> out(z.shape());
  log_softmax_rows(z.ptr(), out.ptr(), rows, cols);
  for (T& v : out.data()) v = std::exp(v);
  return tp.push(std::move(out), tp.requires_grad(logits), [z = logits.id, rows, cols](Tape<T>& t, int self) {
    const T* g = t.grad_ref(self).ptr();
    const T* y = t.value(self).ptr();
    T* gz = t.grad_mut(z).ptr();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t o = static_cast<std::int64_t>(r) * cols;
      T dot = 0;
      for (int j = 0; j < cols; ++j) dot += g[o + j] * y[o + j];
      for (int j = 0; j < cols; ++j) gz[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> logits) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.value();
  MOELAB_REQUIRE(z.rank() == 2, "log_softmax expects (B,K)");
  const int rows = z.dim(0), cols = z.dim(1);
  Tensor<T> out(z.shape());
  log_softmax_rows(z.ptr(), out.ptr(), rows, cols);
  return tp.push(std::move(out), tp.requires_grad(logits), [z = logits.id, rows, cols](Tape<T>& t, int self) {
    const T* g = t.grad_ref(self).ptr();
    const T* y = t.value(self).ptr();
    T* gz = t.grad_mut(z).ptr();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t o = static_cast<std::int64_t>(r) * cols;
      T gs = 0;
      for (int j = 0; j < cols; ++j) gs += g[o + j];
      for (int j = 0; j < cols; ++j) gz[o + j] += g[o + j] - std::exp(y[o + j]) * gs;
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.value();
  MOELAB_REQUIRE(z.rank() == 2 && static_cast<std::size_t>(z.dim(0)) == labels.size(),
                 "cross_entropy: logits " + shape_str(z.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  const int rows = z.dim(0), cols = z.dim(1);
  Tensor<T> lsm(z.shape());
  log_softmax_rows(z.ptr(), lsm.ptr(), rows, cols);
  T loss = 0;
  for (int r = 0; r < rows; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    MOELAB_REQUIRE(y >= 0 && y < cols, "cross_entropy: label out of range");
    loss -= lsm[static_cast<std::int64_t>(r) * cols + y];
  }
  loss /= static_cast<T>(rows);
  std::vector<int> ys(labels.begin(), labels.end());
  return tp.push(Tensor<T>::scalar(loss), tp.requires_grad(logits),
                 [z = logits.id, rows, cols, ys = std::move(ys), lsm = std::move(lsm)](Tape<T>& t, int self) {
                   const T g = t.grad_ref(self)[0] / static_cast<T>(rows);
                   T* gz = t.grad_mut(z).ptr();
                   for (int r = 0; r < rows; ++r) {
                     const std::int64_t o = static_cast<std::int64_t>(r) * cols;
                     for (int j = 0; j < cols; ++j) gz[o + j] += g * std::exp(lsm[o + j]);
                     gz[o + ys[static_cast<std::size_t>(r)]] -= g;
                   }
                 });
}

template <typename T>
Var<T> kl_divergence(const Tensor<T>& reference_logits, Var<T> logits) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.value();
  require_same_shape(reference_logits, z, "kl_divergence");
  MOELAB_REQUIRE(z.rank() == 2, "kl_divergence expects (B,K)");
  const int rows = z.dim(0), cols = z.dim(1);
  // Both sides go through the same log-softmax routine so identical logits give exactly zero.
  Tensor<T> ref_lsm(z.shape()), lsm(z.shape());
  log_softmax_rows(reference_logits.ptr(), ref_lsm.ptr(), rows, cols);
  log_softmax_rows(z.ptr(), lsm.ptr(), rows, cols);
  Tensor<T> ref_p(z.shape());
  T loss = 0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    ref_p[i] = std::exp(ref_lsm[i]);
    if (ref_p[i] > T(0)) loss += ref_p[i] * (ref_lsm[i] - lsm[i]);
  }
  loss /= static_cast<T>(rows);
  return tp.push(Tensor<T>::scalar(loss), tp.requires_grad(logits),
                 [z = logits.id, rows, cols, ref_p = std::move(ref_p), lsm = std::move(lsm)](Tape<T>& t, int self) {
                   const T g = t.grad_ref(self)[0] / static_cast<T>(rows);
                   T* gz = t.grad_mut(z).ptr();
                   for (int r = 0; r < rows; ++r) {
                     const std::int64_t o = static_cast<std::int64_t>(r) * cols;
                     T mass = 0;
                     for (int j = 0; j < cols; ++j) mass += ref_p[o + j];
                     for (int j = 0; j < cols; ++j) gz[o + j] += g * (std::exp(lsm[o + j]) * mass - ref_p[o + j]);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Channel routing primitives

template <typename T>
Var<T> channel_gate(Var<T> x, Var<T> gate) {
  require_same_tape(x, gate);
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gate.value();
  MOELAB_REQUIRE(xv.rank() == 4, "channel_gate expects (B,C,H,W)");
  const int batch = xv.dim(0), ch = xv.dim(1);
  const bool per_sample = gv.rank() == 2;
  MOELAB_REQUIRE((per_sample && gv.dim(0) == batch && gv.dim(1) == ch) || (gv.rank() == 1 && gv.dim(0) == ch),
                 "channel_gate: gate " + shape_str(gv.shape()) + " does not fit input " + shape_str(xv.shape()));
  const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out(xv.shape());
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const T m = per_sample ? gv[static_cast<std::int64_t>(b) * ch + c] : gv[c];
      const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
      for (std::int64_t j = 0; j < hw; ++j) out[o + j] = xv[o + j] * m;
    }
  const bool rg = tp.requires_grad(x) || tp.requires_grad(gate);
  return tp.push(std::move(out), rg, [x = x.id, gate = gate.id, batch, ch, hw, per_sample](Tape<T>& t, int self) {
    const T* g = t.grad_ref(self).ptr();
    const T* gv = t.value(gate).ptr();
    if (t.requires_grad(x)) {
      T* gx = t.grad_mut(x).ptr();
      for (int b = 0; b < batch; ++b)
        for (int c = 0; c < ch; ++c) {
          const T m = per_sample ? gv[static_cast<std::int64_t>(b) * ch + c] : gv[c];
          const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
          for (std::int64_t j = 0; j < hw; ++j) gx[o + j] += g[o + j] * m;
        }
    }
    if (t.requires_grad(gate)) {
      const T* xv = t.value(x).ptr();
      T* gg = t.grad_mut(gate).ptr();
      for (int b = 0; b < batch; ++b)
        for (int c = 0; c < ch; ++c) {
          const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
          T s = 0;
          for (std::int64_t j = 0; j < hw; ++j) s += g[o + j] * xv[o + j];
          gg[per_sample ? static_cast<std::int64_t>(b) * ch + c : c] += s;
        }
    }
  });
}

template <typename T>
Var<T> mix_rows(Var<T> probs, const Tensor<T>& membership) {
  Tape<T>& tp = *probs.tape;
  const Tensor<T>& pv = probs.value();
  MOELAB_REQUIRE(pv.rank() == 2 && membership.rank() == 2 && pv.dim(1) == membership.dim(0),
                 "mix_rows shape mismatch");
  const int batch = pv.dim(0), n = pv.dim(1), ch = membership.dim(1);
  Tensor<T> out(Shape{batch, ch});
  MapMat<T>(out.ptr(), batch, ch).noalias() = CMapMat<T>(pv.ptr(), batch, n) * CMapMat<T>(membership.ptr(), n, ch);
  return tp.push(std::move(out), tp.requires_grad(probs),
                 [p = probs.id, membership, batch, n, ch](Tape<T>& t, int self) {
                   MapMat<T>(t.grad_mut(p).ptr(), batch, n).noalias() +=
                       CMapMat<T>(t.grad_ref(self).ptr(), batch, ch) *
                       CMapMat<T>(membership.ptr(), n, ch).transpose();
                 });
}

template <typename T>
Var<T> slice_channels(Var<T> x, std::span<const int> channels) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  MOELAB_REQUIRE(xv.rank() == 4 && !channels.empty(), "slice_channels expects (B,C,H,W) and a non-empty index set");
  const int batch = xv.dim(0), ch = xv.dim(1);
  for (int c : channels) MOELAB_REQUIRE(c >= 0 && c < ch, "slice_channels: channel index out of range");
  const int k = static_cast<int>(channels.size());
  const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out(Shape{batch, k, xv.dim(2), xv.dim(3)});
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < k; ++j)
      std::copy_n(xv.ptr() + (static_cast<std::int64_t>(b) * ch + channels[static_cast<std::size_t>(j)]) * hw, hw,
                  out.ptr() + (static_cast<std::int64_t>(b) * k + j) * hw);
  std::vector<int> idx(channels.begin(), channels.end());
  return tp.push(std::move(out), tp.requires_grad(x), [x = x.id, idx = std::move(idx), batch, ch, hw](Tape<T>& t, int self) {
    const T* g = t.grad_ref(self).ptr();
    T* gx = t.grad_mut(x).ptr();
    const int k = static_cast<int>(idx.size());
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < k; ++j) {
        T* dst = gx + (static_cast<std::int64_t>(b) * ch + idx[static_cast<std::size_t>(j)]) * hw;
        const T* src = g + (static_cast<std::int64_t>(b) * k + j) * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormArgs<T>& args) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  MOELAB_REQUIRE(xv.rank() == 4, "batch_norm expects (B,C,H,W)");
  const int batch = xv.dim(0), ch = xv.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  MOELAB_REQUIRE(gamma.value().size() == ch && beta.value().size() == ch, "batch_norm affine shape mismatch");
  MOELAB_REQUIRE(args.running_mean != nullptr && args.running_var != nullptr &&
                     args.running_mean->size() == ch && args.running_var->size() == ch,
                 "batch_norm needs running statistics of matching size");
  const Tensor<T>* w = args.sample_weights;
  if (w != nullptr)
    MOELAB_REQUIRE(w->rank() == 2 && w->dim(0) == batch && w->dim(1) == ch, "batch_norm sample weight shape mismatch");

  if (args.stats_out != nullptr) *args.stats_out = {Tensor<T>(Shape{ch}), Tensor<T>(Shape{ch}), Tensor<T>(Shape{ch})};
  Tensor<T> mean(Shape{ch}), inv_std(Shape{ch}), count(Shape{ch});
  std::vector<unsigned char> from_batch(static_cast<std::size_t>(ch), 0);
  for (int c = 0; c < ch; ++c) {
    T n = 0, s = 0;
    if (args.mode == NormMode::batch) {
      for (int b = 0; b < batch; ++b) {
        const T wb = w != nullptr ? (*w)[static_cast<std::int64_t>(b) * ch + c] : T(1);
        if (wb == T(0)) continue;
        const T* p = xv.ptr() + (static_cast<std::int64_t>(b) * ch + c) * hw;
        T ps = 0;
        for (std::int64_t j = 0; j < hw; ++j) ps += p[j];
        s += wb * ps;
        n += wb * static_cast<T>(hw);
      }
    }
    count[c] = n;
    if (n > T(0)) {
      const T mu = s / n;
      T ss = 0;
      for (int b = 0; b < batch; ++b) {
        const T wb = w != nullptr ? (*w)[static_cast<std::int64_t>(b) * ch + c] : T(1);
        if (wb == T(0)) continue;
        const T* p = xv.ptr() + (static_cast<std::int64_t>(b) * ch + c) * hw;
        T ps = 0;
        for (std::int64_t j = 0; j < hw; ++j) ps += (p[j] - mu) * (p[j] - mu);
        ss += wb * ps;
      }
      mean[c] = mu;
      const T var = ss / n;
      inv_std[c] = T(1) / std::sqrt(var + args.eps);
      from_batch[static_cast<std::size_t>(c)] = 1;
      if (args.stats_out != nullptr) {
        args.stats_out->mean[c] = mu;
        args.stats_out->var[c] = n > T(1) ? ss / (n - T(1)) : var;
      }
    } else {
      mean[c] = (*args.running_mean)[c];
      inv_std[c] = T(1) / std::sqrt((*args.running_var)[c] + args.eps);
    }
  }
  if (args.stats_out != nullptr) args.stats_out->count = count;

  Tensor<T> xhat(xv.shape()), out(xv.shape());
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
      for (std::int64_t j = 0; j < hw; ++j) {
        const T h = (xv[o + j] - mean[c]) * inv_std[c];
        xhat[o + j] = h;
        out[o + j] = gv[c] * h + bv[c];
      }
    }

  Tensor<T> weights = w != nullptr ? *w : Tensor<T>();
  const bool rg = tp.requires_grad(x) || tp.requires_grad(gamma) || tp.requires_grad(beta);
  return tp.push(std::move(out), rg,
                 [x = x.id, gm = gamma.id, bt = beta.id, batch, ch, hw, xhat = std::move(xhat),
                  inv_std = std::move(inv_std), count = std::move(count), from_batch = std::move(from_batch),
                  weights = std::move(weights)](Tape<T>& t, int self) {
                   const T* g = t.grad_ref(self).ptr();
                   const T* gam = t.value(gm).ptr();
                   std::vector<T> sg(static_cast<std::size_t>(ch), T(0)), sgx(static_cast<std::size_t>(ch), T(0));
                   for (int b = 0; b < batch; ++b)
                     for (int c = 0; c < ch; ++c) {
                       const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
                       T a = 0, bb = 0;
                       for (std::int64_t j = 0; j < hw; ++j) {
                         a += g[o + j];
                         bb += g[o + j] * xhat[o + j];
                       }
                       sg[static_cast<std::size_t>(c)] += a;
                       sgx[static_cast<std::size_t>(c)] += bb;
                     }
                   if (t.requires_grad(gm)) {
                     T* gg = t.grad_mut(gm).ptr();
                     for (int c = 0; c < ch; ++c) gg[c] += sgx[static_cast<std::size_t>(c)];
                   }
                   if (t.requires_grad(bt)) {
                     T* gb = t.grad_mut(bt).ptr();
                     for (int c = 0; c < ch; ++c) gb[c] += sg[static_cast<std::size_t>(c)];
                   }
                   if (!t.requires_grad(x)) return;
                   T* gx = t.grad_mut(x).ptr();
                   for (int b = 0; b < batch; ++b)
                     for (int c = 0; c < ch; ++c) {
                       const std::int64_t o = (static_cast<std::int64_t>(b) * ch + c) * hw;
                       const T k = gam[c] * inv_std[c];
                       T wb = 0;
                       if (from_batch[static_cast<std::size_t>(c)])
                         wb = weights.empty() ? T(1) : weights[static_cast<std::int64_t>(b) * ch + c];
                       const T corr = wb / (count[c] > T(0) ? count[c] : T(1));
                       const T s1 = sg[static_cast<std::size_t>(c)], s2 = sgx[static_cast<std::size_t>(c)];
                       for (std::int64_t j = 0; j < hw; ++j) gx[o + j] += k * (g[o + j] - corr * (s1 + xhat[o + j] * s2));
                     }
                 });
}

// ---------------------------------------------------------------------------

#define MOELAB_INSTANTIATE_OPS(T)                                                          \
  template class Tape<T>;                                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> sub(Var<T>, Var<T>);                                                     \
  template Var<T> mul(Var<T>, Var<T>);                                                     \
  template Var<T> scale(Var<T>, T);                                                        \
  template Var<T> detach(Var<T>);                                                          \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> relu(Var<T>);                                                            \
  template Var<T> conv2d(Var<T>, Var<T>, int, int);                                        \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                         \
  template Var<T> global_avg_pool(Var<T>);                                                 \
  template Var<T> softmax(Var<T>);                                                         \
  template Var<T> log_softmax(Var<T>);                                                     \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                             \
  template Var<T> kl_divergence(const Tensor<T>&, Var<T>);                                 \
  template Var<T> channel_gate(Var<T>, Var<T>);                                            \
  template Var<T> mix_rows(Var<T>, const Tensor<T>&);                                      \
  template Var<T> slice_channels(Var<T>, std::span<const int>);                            \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, const BatchNormArgs<T>&);

MOELAB_INSTANTIATE_OPS(float)
MOELAB_INSTANTIATE_OPS(double)

}  // namespace moelab
