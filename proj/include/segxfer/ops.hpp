#pragma once

// Differentiable operations used by the segmentation and classification
// networks. Each op has a pure tensor-level kernel (namespace kernels) and a
// recording wrapper that wires the kernel into a Graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "segxfer/autodiff.hpp"
#include "segxfer/tensor.hpp"

namespace segxfer {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

namespace kernels {

/// y += a * b. Eigen routes products with a unit dimension to its
/// matrix-vector kernels, whose summation order depends on pointer
/// alignment; those shapes take a plain loop instead.
template <typename Dst, typename A, typename B>
void matmul_add(Dst&& y, const A& a, const B& b) {
  if (y.rows() > 1 && y.cols() > 1 && a.cols() > 1) {
    y.noalias() += a * b;
    return;
  }
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      typename std::decay_t<Dst>::Scalar acc = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a.coeff(i, k) * b.coeff(k, j);
      y.coeffRef(i, j) += acc;
    }
  }
}


inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

/// Unfolds a zero-padded (C, H, W) input into (C*kh*kw, H*W) patch columns
/// written to `col`, which must hold C*kh*kw*H*W values.
template <typename T>
void im2col_into(const Tensor<T>& input, std::size_t kh, std::size_t kw, T* col) {
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::size_t hw = h * w;
  const T* src = input.data().data();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * hw;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
        for (std::size_t y = 0; y < h; ++y) {
          T* out = row + y * w;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - ph;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(out, w, T{0});
            continue;
          }
          for (std::size_t i = 0; i < x0; ++i) out[i] = T{0};
          const T* in = src + (c * h + static_cast<std::size_t>(iy)) * w + x0 + dx;
          std::copy_n(in, x1 - x0, out + x0);
          for (std::size_t i = x1; i < w; ++i) out[i] = T{0};
        }
      }
    }
  }
}

template <typename T>
std::vector<T> im2col(const Tensor<T>& input, std::size_t kh, std::size_t kw) {
  std::vector<T> col(input.size() * kh * kw);
  im2col_into(input, kh, kw, col.data());
  return col;
}

/// Per-thread scratch space, grown on demand and never shrunk.
template <typename T>
T* scratch(std::size_t n, int slot = 0) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

/// Adjoint of im2col: scatters patch-column gradients back onto the input grid.
template <typename T>
void col2im_add(std::span<const T> col, Tensor<T>& grad_input, std::size_t kh, std::size_t kw) {
  const std::size_t c_in = grad_input.dim(0), h = grad_input.dim(1), w = grad_input.dim(2);
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::size_t hw = h * w;
  T* dst = grad_input.data().data();
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col.data() + ((c * kh + ky) * kw + kx) * hw;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? w - static_cast<std::size_t>(dx) : w;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - ph;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* out = dst + (c * h + static_cast<std::size_t>(iy)) * w + x0 + dx;
          const T* in = row + y * w + x0;
          const std::size_t len = x1 - x0;
          for (std::size_t i = 0; i < len; ++i) out[i] += in[i];
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  require_rank(input.shape(), 3, "conv2d_same input");
  require_rank(kernels.shape(), 4, "conv2d_same kernels");
  require_rank(bias.shape(), 1, "conv2d_same bias");
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d_same: kernel expects " + std::to_string(kernels.dim(1)) +
                     " input channels, input has " + std::to_string(input.dim(0)));
  }
  if (bias.dim(0) != kernels.dim(0)) throw ShapeError("conv2d_same: bias length != output channels");
  if (kernels.dim(2) % 2 == 0 || kernels.dim(3) % 2 == 0) {
    throw ShapeError("conv2d_same: kernel extents must be odd");
  }
}

/// Stride-1 zero-padded cross-correlation. When `col_out` is given the patch
/// matrix is handed back for reuse by the backward pass.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                      std::unique_ptr<T[]>* col_out = nullptr) {
  check_conv_shapes(input, kernels, bias);
  const std::size_t c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const std::size_t h = input.dim(1), w = input.dim(2), hw = h * w;
  const std::size_t patch = input.dim(0) * kh * kw;
  std::vector<T> data(c_out * hw);
  for (std::size_t c = 0; c < c_out; ++c) std::fill_n(data.data() + c * hw, hw, bias[c]);
  MatrixView<T> y(data.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(hw));
  ConstMatrixView<T> k(kernels.data().data(), static_cast<Eigen::Index>(c_out),
                       static_cast<Eigen::Index>(patch));
  if (kh == 1 && kw == 1) {
    ConstMatrixView<T> x(input.data().data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(hw));
    matmul_add(y, k, x);
  } else {
    T* col = nullptr;
    if (col_out) {
      col_out->reset(new T[patch * hw]);
      col = col_out->get();
    } else {
      col = scratch<T>(patch * hw);
    }
    im2col_into(input, kh, kw, col);
    ConstMatrixView<T> x(col, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(hw));
    matmul_add(y, k, x);
  }
  return Tensor<T>({c_out, h, w}, std::move(data));
}

/// 2x2 stride-2 max pooling. Ties resolve to the first element of the window
/// in row-major order. `winners` receives flat input indices per output.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input, std::vector<std::uint32_t>* winners = nullptr) {
  require_rank(input.shape(), 3, "maxpool2");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 || w % 2) throw ShapeError("maxpool2: spatial size must be even, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({c, oh, ow});
  if (winners) winners->resize(out.size());
  const T* src = input.data().data();
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const std::size_t base = (ch * h + 2 * y) * w + 2 * x;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int i = 1; i < 4; ++i) {
          if (src[cand[i]] > src[best]) best = cand[i];
        }
        out[o] = src[best];
        if (winners) (*winners)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
  require_rank(input.shape(), 3, "upsample2");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) out.at(ch, y, x) = input.at(ch, y / 2, x / 2);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 3, "concat_channels");
  require_rank(b.shape(), 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor<T>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(data));
}

/// ELU with alpha = 1.
template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v >= T{0} ? v : std::expm1(v);
  return out;
}

/// Softmax over the channel axis of (C, H, W), or over a (C) vector.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  if (logits.rank() != 1 && logits.rank() != 3) {
    throw ShapeError("softmax_channels: expected rank 1 or 3, got " + shape_str(logits.shape()));
  }
  const std::size_t c = logits.dim(0);
  const std::size_t hw = logits.size() / c;
  Tensor<T> out(logits.shape());
  const T* src = logits.data().data();
  T* dst = out.data().data();
  for (std::size_t p = 0; p < hw; ++p) {
    T peak = src[p];
    for (std::size_t k = 1; k < c; ++k) peak = std::max(peak, src[k * hw + p]);
    T total{0};
    for (std::size_t k = 0; k < c; ++k) {
      const T e = std::exp(src[k * hw + p] - peak);
      dst[k * hw + p] = e;
      total += e;
    }
    for (std::size_t k = 0; k < c; ++k) dst[k * hw + p] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require_rank(input.shape(), 1, "dense input");
  require_rank(weights.shape(), 2, "dense weights");
  require_rank(bias.shape(), 1, "dense bias");
  const std::size_t d_out = weights.dim(0), d_in = weights.dim(1);
  if (input.dim(0) != d_in) {
    throw ShapeError("dense: input length " + std::to_string(input.dim(0)) + " != " + std::to_string(d_in));
  }
  if (bias.dim(0) != d_out) throw ShapeError("dense: bias length != output size");
  // Plain loops: Eigen's matrix-vector kernels peel by pointer alignment,
  // which makes the summation order vary between allocations.
  Tensor<T> out = bias;
  const T* x = input.data().data();
  for (std::size_t o = 0; o < d_out; ++o) {
    const T* row = weights.data().data() + o * d_in;
    T acc = out[o];
    for (std::size_t i = 0; i < d_in; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
  return out;
}

}  // namespace kernels

template <typename T>
Var<T> conv2d_same(Var<T> input, Var<T> kernels, Var<T> bias) {
  Graph<T>& g = *input.graph();
  const bool keep = g.requires_grad(kernels) || g.requires_grad(input);
  auto col = std::make_shared<std::unique_ptr<T[]>>();
  Tensor<T> out = kernels::conv2d_same(input.value(), kernels.value(), bias.value(), keep ? col.get() : nullptr);
  auto forward = [input, kernels, bias](const Graph<T>& gr) {
    return kernels::conv2d_same(gr.value(input), gr.value(kernels), gr.value(bias));
  };
  auto backward = [input, kernels, bias, col](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    const Tensor<T>& x = gr.value(input);
    const Tensor<T>& k = gr.value(kernels);
    const auto c_out = static_cast<Eigen::Index>(k.dim(0));
    const std::size_t kh = k.dim(2), kw = k.dim(3);
    const auto patch = static_cast<Eigen::Index>(k.dim(1) * kh * kw);
    const auto hw = static_cast<Eigen::Index>(x.dim(1) * x.dim(2));
    ConstMatrixView<T> dy_m(dy.data().data(), c_out, hw);
    const T* col_ptr = (kh == 1 && kw == 1) ? x.data().data() : col->get();
    ConstMatrixView<T> col_m(col_ptr, patch, hw);
    if (gr.requires_grad(kernels)) {
      MatrixView<T> dk(gr.grad_buffer(kernels).data().data(), c_out, patch);
      kernels::matmul_add(dk, dy_m, col_m.transpose());
    }
    if (gr.requires_grad(bias)) {
      Tensor<T>& db = gr.grad_buffer(bias);
      for (Eigen::Index c = 0; c < c_out; ++c) {
        const T* row = dy.data().data() + c * hw;
        T acc = 0;
        for (Eigen::Index i = 0; i < hw; ++i) acc += row[i];
        db[static_cast<std::size_t>(c)] += acc;
      }
    }
    if (gr.requires_grad(input)) {
      ConstMatrixView<T> k_m(k.data().data(), c_out, patch);
      Tensor<T>& dx = gr.grad_buffer(input);
      if (kh == 1 && kw == 1) {
        MatrixView<T> dx_m(dx.data().data(), patch, hw);
        kernels::matmul_add(dx_m, k_m.transpose(), dy_m);
      } else {
        T* dcol = kernels::scratch<T>(static_cast<std::size_t>(patch * hw), 1);
        MatrixView<T> dcol_m(dcol, patch, hw);
        dcol_m.setZero();
        kernels::matmul_add(dcol_m, k_m.transpose(), dy_m);
        kernels::col2im_add<T>(std::span<const T>(dcol, static_cast<std::size_t>(patch * hw)), dx, kh, kw);
      }
    }
  };
  return g.record("conv2d_same", {input, kernels, bias}, std::move(out), forward, backward);
}

template <typename T>
Var<T> maxpool2(Var<T> input) {
  Graph<T>& g = *input.graph();
  auto winners = std::make_shared<std::vector<std::uint32_t>>();
  Tensor<T> out = kernels::maxpool2(input.value(), winners.get());
  auto forward = [input](const Graph<T>& gr) { return kernels::maxpool2(gr.value(input)); };
  auto backward = [input, winners](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    Tensor<T>& dx = gr.grad_buffer(input);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(*winners)[i]] += dy[i];
  };
  return g.record("maxpool2", {input}, std::move(out), forward, backward);
}

template <typename T>
Var<T> upsample2(Var<T> input) {
  Graph<T>& g = *input.graph();
  auto forward = [input](const Graph<T>& gr) { return kernels::upsample2(gr.value(input)); };
  auto backward = [input](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    Tensor<T>& dx = gr.grad_buffer(input);
    const std::size_t c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t x = 0; x < 2 * w; ++x) dx.at(ch, y / 2, x / 2) += dy.at(ch, y, x);
      }
    }
  };
  return g.record("upsample2", {input}, kernels::upsample2(input.value()), forward, backward);
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph();
  auto forward = [a, b](const Graph<T>& gr) { return kernels::concat_channels(gr.value(a), gr.value(b)); };
  auto backward = [a, b](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    const std::size_t na = gr.value(a).size();
    if (gr.requires_grad(a)) {
      Tensor<T>& da = gr.grad_buffer(a);
      for (std::size_t i = 0; i < na; ++i) da[i] += dy[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& db = gr.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[na + i];
    }
  };
  return g.record("concat_channels", {a, b}, kernels::concat_channels(a.value(), b.value()), forward, backward);
}

template <typename T>
Var<T> elu(Var<T> x) {
  Graph<T>& g = *x.graph();
  auto forward = [x](const Graph<T>& gr) { return kernels::elu(gr.value(x)); };
  // d/dx = 1 for x >= 0, elu(x) + 1 otherwise.
  auto backward = [x](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>& y) {
    const Tensor<T>& xv = gr.value(x);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += xv[i] >= T{0} ? dy[i] : dy[i] * (y[i] + T{1});
  };
  return g.record("elu", {x}, kernels::elu(x.value()), forward, backward);
}

template <typename T>
Var<T> softmax_channels(Var<T> logits) {
  Graph<T>& g = *logits.graph();
  auto forward = [logits](const Graph<T>& gr) { return kernels::softmax_channels(gr.value(logits)); };
  auto backward = [logits](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>& y) {
    Tensor<T>& dx = gr.grad_buffer(logits);
    const std::size_t c = y.dim(0), hw = y.size() / c;
    for (std::size_t p = 0; p < hw; ++p) {
      T dot{0};
      for (std::size_t k = 0; k < c; ++k) dot += dy[k * hw + p] * y[k * hw + p];
      for (std::size_t k = 0; k < c; ++k) dx[k * hw + p] += y[k * hw + p] * (dy[k * hw + p] - dot);
    }
  };
  return g.record("softmax_channels", {logits}, kernels::softmax_channels(logits.value()), forward, backward);
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weights, Var<T> bias) {
  Graph<T>& g = *input.graph();
  auto forward = [input, weights, bias](const Graph<T>& gr) {
    return kernels::dense(gr.value(input), gr.value(weights), gr.value(bias));
  };
  auto backward = [input, weights, bias](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    const Tensor<T>& w = gr.value(weights);
    const std::size_t d_out = w.dim(0), d_in = w.dim(1);
    if (gr.requires_grad(weights)) {
      const T* x = gr.value(input).data().data();
      T* dw = gr.grad_buffer(weights).data().data();
      for (std::size_t o = 0; o < d_out; ++o) {
        for (std::size_t i = 0; i < d_in; ++i) dw[o * d_in + i] += dy[o] * x[i];
      }
    }
    if (gr.requires_grad(bias)) gr.grad_buffer(bias) += dy;
    if (gr.requires_grad(input)) {
      T* dx = gr.grad_buffer(input).data().data();
      for (std::size_t o = 0; o < d_out; ++o) {
        const T* row = w.data().data() + o * d_in;
        for (std::size_t i = 0; i < d_in; ++i) dx[i] += row[i] * dy[o];
      }
    }
  };
  return g.record("dense", {input, weights, bias}, kernels::dense(input.value(), weights.value(), bias.value()),
                  forward, backward);
}

/// Reshapes to a rank-1 vector.
template <typename T>
Var<T> flatten(Var<T> x) {
  Graph<T>& g = *x.graph();
  auto forward = [x](const Graph<T>& gr) { return gr.value(x).reshaped({gr.value(x).size()}); };
  auto backward = [x](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  };
  return g.record("flatten", {x}, x.value().reshaped({x.value().size()}), forward, backward);
}

/// Sum of all elements, as a scalar of shape (1).
template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph();
  auto reduce = [](const Tensor<T>& t) {
    T s{0};
    for (T v : t.data()) s += v;
    return Tensor<T>({1}, std::vector<T>{s});
  };
  auto forward = [x, reduce](const Graph<T>& gr) { return reduce(gr.value(x)); };
  auto backward = [x](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    Tensor<T>& dx = gr.grad_buffer(x);
    for (auto& v : dx.data()) v += dy[0];
  };
  return g.record("sum", {x}, reduce(x.value()), forward, backward);
}

/// Mean of equally shaped terms (e.g. per-sample losses of a batch).
template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw UsageError("mean_of: no terms");
  Graph<T>& g = *terms.front().graph();
  const T scale = T{1} / static_cast<T>(terms.size());
  auto combine = [terms, scale](const Graph<T>& gr) {
    Tensor<T> acc = gr.value(terms.front());
    for (std::size_t i = 1; i < terms.size(); ++i) acc += gr.value(terms[i]);
    for (auto& v : acc.data()) v *= scale;
    return acc;
  };
  auto backward = [terms, scale](Graph<T>& gr, const Tensor<T>& dy, const Tensor<T>&) {
    for (const auto& t : terms) {
      if (!gr.requires_grad(t)) continue;
      Tensor<T>& dt = gr.grad_buffer(t);
      for (std::size_t i = 0; i < dy.size(); ++i) dt[i] += dy[i] * scale;
    }
  };
  for (const auto& t : terms) {
    if (t.shape() != terms.front().shape()) throw ShapeError("mean_of: terms differ in shape");
  }
  return g.record("mean_of", terms, combine(g), combine, backward);
}

}  // namespace segxfer
