#include "toan/autodiff/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "toan/error.hpp"

namespace toan::ad {
namespace {

thread_local std::uint64_t macs = 0;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
using Grads = std::span<T* const>;
template <typename T>
using GradOut = std::span<const T>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw Error(ErrorCode::kShapeMismatch, op + ": " + detail);
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> values) {
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFiniteResult,
                  std::string(op) + " produced a non-finite value");
    }
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) shape_error(op, shape_string(a) + " vs " + shape_string(b));
}

// Splits a shape around `axis` into (outer, extent, inner) blocks.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// View of an operand as a stack of matrices.
struct MatrixStack {
  std::size_t batch, rows, cols;
};

MatrixStack as_stack(const char* op, const Shape& s) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  shape_error(op, "expected rank 2 or 3, got " + shape_string(s));
}

}  // namespace

std::uint64_t mac_count() { return macs; }
void reset_mac_count() { macs = 0; }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data(), m, k) * ConstMap<T>(b.data(), k, n);
  macs += m * n * k;
  Tensor<T> result = finish("matmul", {m, n}, std::move(out));
  Tensor<T> sa = a.detach(), sb = b.detach();
  return Tape<T>::record(result, {&a, &b}, [sa, sb, m, k, n](GradOut<T> g, Grads<T> gi) {
    ConstMap<T> gm(g.data(), m, n);
    if (gi[0]) MutMap<T>(gi[0], m, k).noalias() += gm * ConstMap<T>(sb.data(), k, n).transpose();
    if (gi[1]) MutMap<T>(gi[1], k, n).noalias() += ConstMap<T>(sa.data(), m, k).transpose() * gm;
  });
}

template <typename T>
Tensor<T> bmm_gather(const Tensor<T>& a, std::span<const std::size_t> a_index,
                     const Tensor<T>& b, std::span<const std::size_t> b_index,
                     bool transpose_a, bool transpose_b) {
  const MatrixStack sa = as_stack("bmm", a.shape());
  const MatrixStack sb = as_stack("bmm", b.shape());
  const std::size_t m = transpose_a ? sa.cols : sa.rows;
  const std::size_t k = transpose_a ? sa.rows : sa.cols;
  const std::size_t kb = transpose_b ? sb.cols : sb.rows;
  const std::size_t n = transpose_b ? sb.rows : sb.cols;
  if (k != kb) {
    shape_error("bmm", "inner dims " + std::to_string(k) + " vs " + std::to_string(kb));
  }
  if (a_index.size() != b_index.size() || a_index.empty()) {
    shape_error("bmm", "index lists must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < a_index.size(); ++i) {
    if (a_index[i] >= sa.batch || b_index[i] >= sb.batch) {
      shape_error("bmm", "batch index out of range");
    }
  }
  const std::size_t batch = a_index.size();
  const std::size_t a_step = sa.rows * sa.cols, b_step = sb.rows * sb.cols;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap<T> am(a.data() + a_index[i] * a_step, sa.rows, sa.cols);
    ConstMap<T> bm(b.data() + b_index[i] * b_step, sb.rows, sb.cols);
    MutMap<T> om(out.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) om.noalias() = am * bm;
    else if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
    else if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  }
  macs += batch * m * n * k;
  Tensor<T> result = finish("bmm", {batch, m, n}, std::move(out));

  Tensor<T> ca = a.detach(), cb = b.detach();
  std::vector<std::size_t> ai(a_index.begin(), a_index.end());
  std::vector<std::size_t> bi(b_index.begin(), b_index.end());
  return Tape<T>::record(
      result, {&a, &b},
      [ca, cb, ai = std::move(ai), bi = std::move(bi), sa, sb, m, n, transpose_a,
       transpose_b](GradOut<T> g, Grads<T> gi) {
        const std::size_t a_step = sa.rows * sa.cols, b_step = sb.rows * sb.cols;
        for (std::size_t i = 0; i < ai.size(); ++i) {
          ConstMap<T> gm(g.data() + i * m * n, m, n);
          ConstMap<T> am(ca.data() + ai[i] * a_step, sa.rows, sa.cols);
          ConstMap<T> bm(cb.data() + bi[i] * b_step, sb.rows, sb.cols);
          if (gi[0]) {
            MutMap<T> ga(gi[0] + ai[i] * a_step, sa.rows, sa.cols);
            // C = op(A) op(B)
            if (!transpose_a) {
              if (!transpose_b) ga.noalias() += gm * bm.transpose();
              else ga.noalias() += gm * bm;
            } else {
              if (!transpose_b) ga.noalias() += bm * gm.transpose();
              else ga.noalias() += bm.transpose() * gm.transpose();
            }
          }
          if (gi[1]) {
            MutMap<T> gb(gi[1] + bi[i] * b_step, sb.rows, sb.cols);
            if (!transpose_b) {
              if (!transpose_a) gb.noalias() += am.transpose() * gm;
              else gb.noalias() += am * gm;
            } else {
              if (!transpose_a) gb.noalias() += gm.transpose() * am;
              else gb.noalias() += gm.transpose() * am.transpose();
            }
          }
        }
      });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  const MatrixStack sa = as_stack("bmm", a.shape());
  const MatrixStack sb = as_stack("bmm", b.shape());
  if (sa.batch != sb.batch && sa.batch != 1 && sb.batch != 1) {
    shape_error("bmm", "batch extents " + std::to_string(sa.batch) + " vs " +
                           std::to_string(sb.batch));
  }
  const std::size_t batch = std::max(sa.batch, sb.batch);
  std::vector<std::size_t> ai(batch), bi(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    ai[i] = sa.batch == 1 ? 0 : i;
    bi[i] = sb.batch == 1 ? 0 : i;
  }
  return bmm_gather(a, std::span<const std::size_t>(ai), b,
                    std::span<const std::size_t>(bi), transpose_a, transpose_b);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> result = finish("add", a.shape(), std::move(out));
  return Tape<T>::record(result, {&a, &b}, [](GradOut<T> g, Grads<T> gi) {
    for (int s = 0; s < 2; ++s) {
      if (!gi[s]) continue;
      for (std::size_t i = 0; i < g.size(); ++i) gi[s][i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor<T> result = finish("sub", a.shape(), std::move(out));
  return Tape<T>::record(result, {&a, &b}, [](GradOut<T> g, Grads<T> gi) {
    if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
  });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("hadamard", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> result = finish("hadamard", a.shape(), std::move(out));
  Tensor<T> ca = a.detach(), cb = b.detach();
  return Tape<T>::record(result, {&a, &b}, [ca, cb](GradOut<T> g, Grads<T> gi) {
    if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * cb[i];
    if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * ca[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  Tensor<T> result = finish("scale", a.shape(), std::move(out));
  return Tape<T>::record(result, {&a}, [factor](GradOut<T> g, Grads<T> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.size() != x.dim(1)) {
    shape_error("add_channel_bias",
                shape_string(x.shape()) + " with bias " + shape_string(bias.shape()));
  }
  const AxisSplit s = split_at(x.shape(), 1);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c) {
      const std::size_t base = (o * s.extent + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) out[base + i] = x[base + i] + bias[c];
    }
  Tensor<T> result = finish("add_channel_bias", x.shape(), std::move(out));
  return Tape<T>::record(result, {&x, &bias}, [s](GradOut<T> g, Grads<T> gi) {
    if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    if (gi[1]) {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c) {
          const std::size_t base = (o * s.extent + c) * s.inner;
          T acc = 0;
          for (std::size_t i = 0; i < s.inner; ++i) acc += g[base + i];
          gi[1][c] += acc;
        }
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.size());
  const T slope = static_cast<T>(kLeakySlope);
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Activation::kLeakyRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
      break;
    case Activation::kSigmoid: {
      // Clamped so the result stays strictly inside (0, 1) at this precision.
      const T lo = std::numeric_limits<T>::min();
      const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x[i];
        const T y = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                              : std::exp(v) / (T(1) + std::exp(v));
        out[i] = std::clamp(y, lo, hi);
      }
      break;
    }
  }
  Tensor<T> result = finish("activation", x.shape(), std::move(out));
  Tensor<T> cx = x.detach(), cy = result;
  return Tape<T>::record(result, {&x}, [cx, cy, kind, slope](GradOut<T> g, Grads<T> gi) {
    switch (kind) {
      case Activation::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i) if (cx[i] > T(0)) gi[0][i] += g[i];
        break;
      case Activation::kLeakyRelu:
        for (std::size_t i = 0; i < g.size(); ++i)
          gi[0][i] += cx[i] > T(0) ? g[i] : slope * g[i];
        break;
      case Activation::kSigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * cy[i] * (T(1) - cy[i]);
        break;
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, ci, h, w, co, kh, kw, oh, ow;
  int stride, pad;
  std::size_t patch() const { return ci * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// Output columns [lo, hi) of kernel offset k read inside the input.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, int stride,
                                                       int pad, std::size_t k) {
  const long off = static_cast<long>(k) - pad;
  long lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long hi = (static_cast<long>(in) - 1 - off) >= 0
                ? (static_cast<long>(in) - 1 - off) / stride + 1
                : 0;
  lo = std::min<long>(lo, static_cast<long>(out));
  hi = std::clamp<long>(hi, lo, static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Writes the receptive fields of one sample into columns
// [col_offset, col_offset + positions) of a row-major [patch x ld] matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols, std::size_t ld,
            std::size_t col_offset) {
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [y_lo, y_hi] = valid_range(g.oh, g.h, g.stride, g.pad, ki);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [x_lo, x_hi] = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col_offset;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          T* dst = row + oy * g.ow;
          if (oy < y_lo || oy >= y_hi) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const std::size_t iy = oy * static_cast<std::size_t>(g.stride) + ki - g.pad;
          const T* src = x + (c * g.h + iy) * g.w;
          std::fill_n(dst, x_lo, T(0));
          if (g.stride == 1) {
            std::copy_n(src + x_lo + kj - g.pad, x_hi - x_lo, dst + x_lo);
          } else {
            for (std::size_t ox = x_lo; ox < x_hi; ++ox)
              dst[ox] = src[ox * static_cast<std::size_t>(g.stride) + kj - g.pad];
          }
          std::fill_n(dst + x_hi, g.ow - x_hi, T(0));
        }
      }
    }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t ld, std::size_t col_offset,
            T* dx) {
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [y_lo, y_hi] = valid_range(g.oh, g.h, g.stride, g.pad, ki);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [x_lo, x_hi] = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col_offset;
        for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
          const std::size_t iy = oy * static_cast<std::size_t>(g.stride) + ki - g.pad;
          T* dst = dx + (c * g.h + iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = x_lo; ox < x_hi; ++ox)
            dst[ox * static_cast<std::size_t>(g.stride) + kj - g.pad] += src[ox];
        }
      }
    }
}

// Samples per GEMM so the column buffer stays around 4M entries.
std::size_t conv_chunk(const ConvGeometry& g) {
  const std::size_t per_sample = g.patch() * g.positions();
  return std::clamp<std::size_t>((std::size_t{1} << 22) / std::max<std::size_t>(per_sample, 1),
                                 1, g.batch);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>* bias,
                 int stride, int pad) {
  if (stride <= 0) {
    throw Error(ErrorCode::kInvalidHyperparameter, "conv2d stride must be positive");
  }
  if (pad < 0) {
    throw Error(ErrorCode::kInvalidHyperparameter, "conv2d padding must be non-negative");
  }
  const bool batched = input.rank() == 4;
  if ((input.rank() != 3 && !batched) || kernels.rank() != 4) {
    shape_error("conv2d", shape_string(input.shape()) + " with kernels " +
                              shape_string(kernels.shape()));
  }
  ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.ci = input.dim(batched ? 1 : 0);
  g.h = input.dim(batched ? 2 : 1);
  g.w = input.dim(batched ? 3 : 2);
  g.co = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (kernels.dim(1) != g.ci) {
    shape_error("conv2d", "kernel expects " + std::to_string(kernels.dim(1)) +
                              " input channels, got " + std::to_string(g.ci));
  }
  if (g.kh > g.h + 2 * static_cast<std::size_t>(pad) ||
      g.kw > g.w + 2 * static_cast<std::size_t>(pad)) {
    shape_error("conv2d", "kernel larger than padded input");
  }
  if (bias && bias->size() != g.co) shape_error("conv2d", "bias size mismatch");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t in_step = g.ci * g.h * g.w;
  const std::size_t out_step = g.co * g.positions();
  const std::size_t chunk = conv_chunk(g);
  std::vector<T> out(g.batch * out_step);
  std::vector<T> cols, prod;
  ConstMap<T> wm(kernels.data(), g.co, g.patch());
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0);
    const std::size_t ld = nb * g.positions();
    cols.resize(g.patch() * ld);
    prod.resize(g.co * ld);
    for (std::size_t j = 0; j < nb; ++j)
      im2col(input.data() + (b0 + j) * in_step, g, cols.data(), ld, j * g.positions());
    MutMap<T>(prod.data(), g.co, ld).noalias() = wm * ConstMap<T>(cols.data(), g.patch(), ld);
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t c = 0; c < g.co; ++c) {
        const T add = bias ? (*bias)[c] : T(0);
        const T* src = prod.data() + c * ld + j * g.positions();
        T* dst = out.data() + (b0 + j) * out_step + c * g.positions();
        for (std::size_t p = 0; p < g.positions(); ++p) dst[p] = src[p] + add;
      }
  }
  macs += g.batch * g.co * g.positions() * g.patch();

  Shape shape = batched ? Shape{g.batch, g.co, g.oh, g.ow} : Shape{g.co, g.oh, g.ow};
  Tensor<T> result = finish("conv2d", shape, std::move(out));
  Tensor<T> cx = input.detach(), ck = kernels.detach();
  std::vector<const Tensor<T>*> inputs{&input, &kernels};
  if (bias) inputs.push_back(bias);
  return Tape<T>::record(result, inputs, [cx, ck, g](GradOut<T> grad, Grads<T> gi) {
    const std::size_t in_step = g.ci * g.h * g.w;
    const std::size_t out_step = g.co * g.positions();
    const std::size_t chunk = conv_chunk(g);
    std::vector<T> cols, gprod;
    ConstMap<T> wm(ck.data(), g.co, g.patch());
    for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, g.batch - b0);
      const std::size_t ld = nb * g.positions();
      gprod.resize(g.co * ld);
      for (std::size_t j = 0; j < nb; ++j)
        for (std::size_t c = 0; c < g.co; ++c)
          std::copy_n(grad.data() + (b0 + j) * out_step + c * g.positions(), g.positions(),
                      gprod.data() + c * ld + j * g.positions());
      ConstMap<T> gm(gprod.data(), g.co, ld);
      if (gi[1]) {
        cols.resize(g.patch() * ld);
        for (std::size_t j = 0; j < nb; ++j)
          im2col(cx.data() + (b0 + j) * in_step, g, cols.data(), ld, j * g.positions());
        MutMap<T>(gi[1], g.co, g.patch()).noalias() +=
            gm * ConstMap<T>(cols.data(), g.patch(), ld).transpose();
      }
      if (gi[0]) {
        cols.resize(g.patch() * ld);
        MutMap<T>(cols.data(), g.patch(), ld).noalias() = wm.transpose() * gm;
        for (std::size_t j = 0; j < nb; ++j)
          col2im(cols.data(), g, ld, j * g.positions(), gi[0] + (b0 + j) * in_step);
      }
      if (gi.size() > 2 && gi[2]) {
        for (std::size_t c = 0; c < g.co; ++c) {
          T acc = 0;
          for (std::size_t p = 0; p < ld; ++p) acc += gm(c, p);
          gi[2][c] += acc;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode) {
  if (input.rank() < 2) shape_error("batch_norm", "input needs a channel axis");
  const AxisSplit s = split_at(input.shape(), 1);
  const std::size_t channels = s.extent;
  if (gamma.size() != channels || beta.size() != channels ||
      state.running_mean.size() != channels || state.running_var.size() != channels) {
    shape_error("batch_norm", std::to_string(channels) + " channels vs gamma " +
                                  shape_string(gamma.shape()));
  }
  const std::size_t count = s.outer * s.inner;
  const T eps = static_cast<T>(kBatchNormEps);
  const T momentum = static_cast<T>(kBatchNormMomentum);

  std::vector<T> mean(channels), inv_std(channels);
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* p = input.data() + (o * channels + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* p = input.data() + (o * channels + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mean[c];
      state.running_var[c] =
          (T(1) - momentum) * state.running_var[c] + momentum * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  std::vector<T> xhat(input.size()), out(input.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (o * channels + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        xhat[base + i] = (input[base + i] - mean[c]) * inv_std[c];
        out[base + i] = gamma[c] * xhat[base + i] + beta[c];
      }
    }
  Tensor<T> result = finish("batch_norm", input.shape(), std::move(out));
  Tensor<T> cg = gamma.detach();
  auto saved = std::make_shared<std::vector<T>>(std::move(xhat));
  return Tape<T>::record(
      result, {&input, &gamma, &beta},
      [cg, saved, inv_std = std::move(inv_std), s, count, mode](GradOut<T> g, Grads<T> gi) {
        const std::size_t channels = s.extent;
        const std::vector<T>& xh = *saved;
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t o = 0; o < s.outer; ++o) {
            const std::size_t base = (o * channels + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
              sum_g += g[base + i];
              sum_gx += static_cast<double>(g[base + i]) * xh[base + i];
            }
          }
          if (gi[1]) gi[1][c] += static_cast<T>(sum_gx);
          if (gi[2]) gi[2][c] += static_cast<T>(sum_g);
          if (!gi[0]) continue;
          const T k = cg[c] * inv_std[c];
          const T mg = static_cast<T>(sum_g / count), mgx = static_cast<T>(sum_gx / count);
          for (std::size_t o = 0; o < s.outer; ++o) {
            const std::size_t base = (o * channels + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
              if (mode == Mode::kTrain) {
                gi[0][base + i] += k * (g[base + i] - mg - xh[base + i] * mgx);
              } else {
                gi[0][base + i] += k * g[base + i];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool2(const Tensor<T>& input) {
  if (input.rank() != 3 && input.rank() != 4) {
    shape_error("max_pool2", "expected rank 3 or 4, got " + shape_string(input.shape()));
  }
  const std::size_t r = input.rank();
  const std::size_t h = input.dim(r - 2), w = input.dim(r - 1);
  if (h < 2 || w < 2) shape_error("max_pool2", "spatial extent below 2");
  const std::size_t planes = input.size() / (h * w);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * y + dy) * w + 2 * x + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + y) * ow + x;
        out[o] = src[best];
        argmax[o] = p * h * w + best;
      }
  }
  Shape shape = input.shape();
  shape[r - 2] = oh;
  shape[r - 1] = ow;
  Tensor<T> result = finish("max_pool2", shape, std::move(out));
  return Tape<T>::record(result, {&input},
                         [argmax = std::move(argmax)](GradOut<T> g, Grads<T> gi) {
                           for (std::size_t i = 0; i < g.size(); ++i) gi[0][argmax[i]] += g[i];
                         });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m) {
  if (m.rank() < 1) shape_error("softmax_rows", "rank-0 input");
  const std::size_t cols = m.dim(m.rank() - 1);
  const std::size_t rows = m.size() / cols;
  for (const T& v : m.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFiniteResult, "softmax_rows input");
  }
  std::vector<T> out(m.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = m.data() + r * cols;
    T* y = out.data() + r * cols;
    const T peak = *std::max_element(x, x + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - peak);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  Tensor<T> result = finish("softmax_rows", m.shape(), std::move(out));
  Tensor<T> cy = result;
  return Tape<T>::record(result, {&m}, [cy, rows, cols](GradOut<T> g, Grads<T> gi) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = cy.data() + r * cols;
      const T* gr = g.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
      T* dst = gi[0] + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += y[c] * (gr[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (element_count(shape) != x.size()) {
    shape_error("reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Tensor<T> result(std::move(shape), x.to_vector());
  return Tape<T>::record(result, {&x}, [](GradOut<T> g, Grads<T> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    shape_error("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") on axis " + std::to_string(axis) + " of " +
                             shape_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  const std::size_t len = end - begin;
  std::vector<T> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data() + (o * s.extent + begin) * s.inner, len * s.inner,
                out.data() + o * len * s.inner);
  Shape shape = x.shape();
  shape[axis] = len;
  Tensor<T> result(std::move(shape), std::move(out));
  return Tape<T>::record(result, {&x}, [s, begin, len](GradOut<T> g, Grads<T> gi) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* src = g.data() + o * len * s.inner;
      T* dst = gi[0] + (o * s.extent + begin) * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) shape_error("concat", "axis out of range");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const Tensor<T>& p : parts) {
    if (p.rank() != ref.size()) shape_error("concat", "rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        shape_error("concat", shape_string(p.shape()) + " vs " + shape_string(ref));
      }
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const AxisSplit s = split_at(ref, axis);
  std::vector<T> out(s.outer * total * s.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t len = extents[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(parts[k].data() + o * len, len, out.data() + (o * total * s.inner) + offset);
    offset += len;
  }
  Shape shape = ref;
  shape[axis] = total;
  Tensor<T> result(std::move(shape), std::move(out));
  std::vector<const Tensor<T>*> inputs;
  for (const Tensor<T>& p : parts) inputs.push_back(&p);
  return Tape<T>::record(result, inputs, [s, extents, total](GradOut<T> g, Grads<T> gi) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t len = extents[k] * s.inner;
      if (gi[k]) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* src = g.data() + o * total * s.inner + offset;
          T* dst = gi[k] + o * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> indices) {
  if (x.rank() < 1 || indices.empty()) shape_error("gather", "empty selection");
  const std::size_t row = x.size() / x.dim(0);
  std::vector<T> out(indices.size() * row);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0)) shape_error("gather", "index out of range");
    std::copy_n(x.data() + indices[i] * row, row, out.data() + i * row);
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor<T> result(std::move(shape), std::move(out));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tape<T>::record(result, {&x}, [idx = std::move(idx), row](GradOut<T> g, Grads<T> gi) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = g.data() + i * row;
      T* dst = gi[0] + idx[i] * row;
      for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (const T& v : x.values()) acc += v;
  Tensor<T> result = finish("sum", Shape{}, std::vector<T>{static_cast<T>(acc)});
  return Tape<T>::record(result, {&x}, [n = x.size()](GradOut<T> g, Grads<T> gi) {
    for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("sum_axis", "axis out of range");
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* src = x.data() + (o * s.extent + e) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  Tensor<T> result = finish("sum_axis", shape, std::move(out));
  return Tape<T>::record(result, {&x}, [s](GradOut<T> g, Grads<T> gi) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T* src = g.data() + o * s.inner;
        T* dst = gi[0] + (o * s.extent + e) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("mean_axis", "axis out of range");
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

#define TOAN_INSTANTIATE_OPS(T)                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);              \
  template Tensor<T> bmm_gather(const Tensor<T>&, std::span<const std::size_t>,        \
                                const Tensor<T>&, std::span<const std::size_t>, bool,  \
                                bool);                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                       \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> activation(const Tensor<T>&, Activation);                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int, \
                            int);                                                      \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                BatchNormState<T>&, Mode);                             \
  template Tensor<T> max_pool2(const Tensor<T>&);                                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                 \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);               \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::size_t>);           \
  template Tensor<T> sum(const Tensor<T>&);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                           \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);

TOAN_INSTANTIATE_OPS(float)
TOAN_INSTANTIATE_OPS(double)

#undef TOAN_INSTANTIATE_OPS

}  // namespace toan::ad
