// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "dynaroute/errors.hpp"

namespace dynaroute::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
bool recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void finish(BasicTensor<T>& out, const char* name, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  active_tape()->record(name, std::move(fn));
}

void count_flops(std::uint64_t flops) {
  if (auto* c = active_flop_counter()) c->add(flops);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

std::int64_t out_extent(std::int64_t in, std::int64_t k, int stride, int pad, const char* op) {
  const std::int64_t span = in + 2 * pad - k;
  if (stride <= 0 || pad < 0 || span < 0) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) +
                     " does not fit input extent " + std::to_string(in) + " with padding " +
                     std::to_string(pad));
  }
  return span / stride + 1;
}

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* src, const ConvGeom& g, T* col) {
  const std::int64_t hw_out = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const T* plane = src + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* dst = col + ((c * g.kh + ky) * g.kw + kx) * hw_out;
        // Output columns whose input column lies inside the image.
        std::int64_t ox_lo = 0;
        while (ox_lo < g.wo && ox_lo * g.stride - g.pad + kx < 0) ++ox_lo;
        std::int64_t ox_hi = g.wo;
        while (ox_hi > ox_lo && (ox_hi - 1) * g.stride - g.pad + kx >= g.w) --ox_hi;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          T* row = dst + oy * g.wo;
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          std::fill(row, row + ox_lo, T(0));
          std::fill(row + ox_hi, row + g.wo, T(0));
          const T* in_row = plane + iy * g.w;
          if (g.stride == 1) {
            const std::int64_t ix0 = ox_lo - g.pad + kx;
            if (ox_hi > ox_lo) std::memcpy(row + ox_lo, in_row + ix0, sizeof(T) * (ox_hi - ox_lo));
          } else {
            for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) row[ox] = in_row[ox * g.stride - g.pad + kx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dst) {
  const std::int64_t hw_out = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    T* plane = dst + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* src = col + ((c * g.kh + ky) * g.kw + kx) * hw_out;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* out_row = plane + iy * g.w;
          const T* row = src + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) out_row[ix] += row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void accumulate(const BasicTensor<T>& dst, std::span<const T> src) {
  auto g = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  enum class Mode { kSame, kChannel, kLast } mode;
  std::int64_t inner = 1;  // contiguous run sharing one b element (channel mode)
  std::int64_t period = 0;
  if (sa == sb) {
    mode = Mode::kSame;
  } else if (sb.size() == 1 && sa.size() == 4 && sa[1] == sb[0]) {
    mode = Mode::kChannel;
    inner = sa[2] * sa[3];
    period = sa[1];
  } else if (sb.size() == 1 && !sa.empty() && sa.size() != 4 && sa.back() == sb[0]) {
    mode = Mode::kLast;
    period = sb[0];
  } else {
    throw ShapeError("add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  }
  BasicTensor<T> out(sa);
  auto o = out.data();
  const auto x = a.data();
  const auto y = b.data();
  const auto n = static_cast<std::int64_t>(o.size());
  switch (mode) {
    case Mode::kSame:
      for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      break;
    case Mode::kChannel:
      for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[(i / inner) % period];
      break;
    case Mode::kLast:
      for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i % period];
      break;
  }
  if (recording<T>({&a, &b})) {
    finish(out, "add", [a, b, out, mode, inner, period]() mutable {
      if (!out.has_grad()) return;
      const auto go = out.grad_view();
      if (a.requires_grad()) accumulate(a, go);
      if (b.requires_grad()) {
        auto gb = b.grad();
        const auto n = static_cast<std::int64_t>(go.size());
        switch (mode) {
          case Mode::kSame:
            for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i];
            break;
          case Mode::kChannel:
            for (std::int64_t i = 0; i < n; ++i) gb[(i / inner) % period] += go[i];
            break;
          case Mode::kLast:
            for (std::int64_t i = 0; i < n; ++i) gb[i % period] += go[i];
            break;
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool scalar_b = b.numel() == 1 && a.shape() != b.shape();
  if (!scalar_b && a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[scalar_b ? 0 : i];
  if (recording<T>({&a, &b})) {
    finish(out, "mul", [a, b, out, scalar_b]() mutable {
      if (!out.has_grad()) return;
      const auto go = out.grad_view();
      const auto x = a.data();
      const auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[scalar_b ? 0 : i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        if (scalar_b) {
          T acc = 0;
          for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * x[i];
          gb[0] += acc;
        } else {
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  const auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (recording<T>({&a})) {
    finish(out, "scale", [a, out, factor]() mutable {
      if (!out.has_grad()) return;
      const auto go = out.grad_view();
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                     shape_str(sb));
  }
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa.back();
  const bool shared_b = sb.size() == 2;
  if (!shared_b && !(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0])) {
    throw ShapeError("matmul: unsupported operand shapes " + shape_str(sa) + " x " + shape_str(sb));
  }
  if (sb[sb.size() - 2] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::int64_t n = sb.back();
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  BasicTensor<T> out(out_shape);
  count_flops(static_cast<std::uint64_t>(2 * batch * m * k * n));
  if (shared_b) {
    CMapMat<T> am(a.data().data(), batch * m, k);
    CMapMat<T> bm(b.data().data(), k, n);
    MapMat<T> om(out.data().data(), batch * m, n);
    om.noalias() = am * bm;
  } else {
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      CMapMat<T> am(a.data().data() + bi * m * k, m, k);
      CMapMat<T> bm(b.data().data() + bi * k * n, k, n);
      MapMat<T> om(out.data().data() + bi * m * n, m, n);
      om.noalias() = am * bm;
    }
  }
  if (recording<T>({&a, &b})) {
    finish(out, "matmul", [a, b, out, shared_b, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      if (shared_b) {
        CMapMat<T> gom(go, batch * m, n);
        if (a.requires_grad()) {
          MapMat<T> ga(a.grad().data(), batch * m, k);
          ga.noalias() += gom * CMapMat<T>(b.data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          MapMat<T> gb(b.grad().data(), k, n);
          gb.noalias() += CMapMat<T>(a.data().data(), batch * m, k).transpose() * gom;
        }
      } else {
        for (std::int64_t bi = 0; bi < batch; ++bi) {
          CMapMat<T> gom(go + bi * m * n, m, n);
          if (a.requires_grad()) {
            MapMat<T> ga(a.grad().data() + bi * m * k, m, k);
            ga.noalias() += gom * CMapMat<T>(b.data().data() + bi * k * n, k, n).transpose();
          }
          if (b.requires_grad()) {
            MapMat<T> gb(b.grad().data() + bi * k * n, k, n);
            gb.noalias() += CMapMat<T>(a.data().data() + bi * m * k, m, k).transpose() * gom;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& a) {
  const auto& sa = a.shape();
  if (sa.size() < 2) throw ShapeError("transpose_last2: rank < 2 in " + shape_str(sa));
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t n = sa.back();
  const std::int64_t batch = a.numel() / std::max<std::int64_t>(1, m * n);
  Shape os = sa;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  BasicTensor<T> out(os);
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    MapMat<T>(out.data().data() + bi * m * n, n, m) =
        CMapMat<T>(a.data().data() + bi * m * n, m, n).transpose();
  }
  if (recording<T>({&a})) {
    finish(out, "transpose_last2", [a, out, batch, m, n]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      T* ga = a.grad().data();
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        MapMat<T>(ga + bi * m * n, m, n) += CMapMat<T>(go + bi * m * n, n, m).transpose();
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dParams p) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " != weight input channels " + std::to_string(weight.dim(1)) + " (input " +
                     shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ")");
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
             0, 0, p.stride, p.padding};
  g.ho = out_extent(g.h, g.kh, p.stride, p.padding, "conv2d");
  g.wo = out_extent(g.w, g.kw, p.stride, p.padding, "conv2d");
  BasicTensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::int64_t ckk = g.cin * g.kh * g.kw;
  const std::int64_t hw_out = g.ho * g.wo;
  count_flops(static_cast<std::uint64_t>(2 * g.n * g.cout * ckk * hw_out));
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk * hw_out));
  CMapMat<T> wm(weight.data().data(), g.cout, ckk);
  for (std::int64_t ni = 0; ni < g.n; ++ni) {
    const T* src = x.data().data() + ni * g.cin * g.h * g.w;
    const T* colp = src;
    if (!g.pointwise()) {
      im2col(src, g, col.data());
      colp = col.data();
    }
    MapMat<T> om(out.data().data() + ni * g.cout * hw_out, g.cout, hw_out);
    om.noalias() = wm * CMapMat<T>(colp, ckk, hw_out);
  }
  if (recording<T>({&x, &weight})) {
    finish(out, "conv2d", [x, weight, out, g]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t ckk = g.cin * g.kh * g.kw;
      const std::int64_t hw_out = g.ho * g.wo;
      std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk * hw_out));
      std::vector<T> dcol(static_cast<std::size_t>(ckk * hw_out));
      const T* go = out.grad_view().data();
      for (std::int64_t ni = 0; ni < g.n; ++ni) {
        CMapMat<T> gom(go + ni * g.cout * hw_out, g.cout, hw_out);
        const T* src = x.data().data() + ni * g.cin * g.h * g.w;
        if (weight.requires_grad()) {
          const T* colp = src;
          if (!g.pointwise()) {
            im2col(src, g, col.data());
            colp = col.data();
          }
          MapMat<T> gw(weight.grad().data(), g.cout, ckk);
          gw.noalias() += gom * CMapMat<T>(colp, ckk, hw_out).transpose();
        }
        if (x.requires_grad()) {
          T* gx = x.grad().data() + ni * g.cin * g.h * g.w;
          CMapMat<T> wm(weight.data().data(), g.cout, ckk);
          if (g.pointwise()) {
            MapMat<T>(gx, ckk, hw_out).noalias() += wm.transpose() * gom;
          } else {
            MapMat<T>(dcol.data(), ckk, hw_out).noalias() = wm.transpose() * gom;
            col2im_add(dcol.data(), g, gx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                Conv2dParams p) {
  require_rank(x.shape(), 4, "depthwise_conv2d input");
  require_rank(weight.shape(), 4, "depthwise_conv2d weight");
  if (weight.dim(0) != x.dim(1) || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) +
                     " incompatible with input " + shape_str(x.shape()) + " (expected [" +
                     std::to_string(x.dim(1)) + "x1xKxK])");
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(1), weight.dim(2), weight.dim(3),
             0, 0, p.stride, p.padding};
  g.ho = out_extent(g.h, g.kh, p.stride, p.padding, "depthwise_conv2d");
  g.wo = out_extent(g.w, g.kw, p.stride, p.padding, "depthwise_conv2d");
  BasicTensor<T> out(Shape{g.n, g.cin, g.ho, g.wo});
  count_flops(static_cast<std::uint64_t>(2 * g.n * g.cin * g.kh * g.kw * g.ho * g.wo));
  const T* xs = x.data().data();
  const T* ws = weight.data().data();
  T* os = out.data().data();
  for (std::int64_t ni = 0; ni < g.n; ++ni) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const T* plane = xs + (ni * g.cin + c) * g.h * g.w;
      const T* kern = ws + c * g.kh * g.kw;
      T* oplane = os + (ni * g.cin + c) * g.ho * g.wo;
      for (std::int64_t oy = 0; oy < g.ho; ++oy) {
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          T acc = 0;
          for (std::int64_t ky = 0; ky < g.kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.w) continue;
              acc += plane[iy * g.w + ix] * kern[ky * g.kw + kx];
            }
          }
          oplane[oy * g.wo + ox] = acc;
        }
      }
    }
  }
  if (recording<T>({&x, &weight})) {
    finish(out, "depthwise_conv2d", [x, weight, out, g]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      const T* xs = x.data().data();
      const T* ws = weight.data().data();
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      T* gw = weight.requires_grad() ? weight.grad().data() : nullptr;
      for (std::int64_t ni = 0; ni < g.n; ++ni) {
        for (std::int64_t c = 0; c < g.cin; ++c) {
          const std::int64_t base = (ni * g.cin + c) * g.h * g.w;
          const T* gplane = go + (ni * g.cin + c) * g.ho * g.wo;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const T d = gplane[oy * g.wo + ox];
              for (std::int64_t ky = 0; ky < g.kh; ++ky) {
                const std::int64_t iy = oy * g.stride - g.pad + ky;
                if (iy < 0 || iy >= g.h) continue;
                for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                  const std::int64_t ix = ox * g.stride - g.pad + kx;
                  if (ix < 0 || ix >= g.w) continue;
                  const std::int64_t xi = base + iy * g.w + ix;
                  const std::int64_t wi = c * g.kh * g.kw + ky * g.kw + kx;
                  if (gw) gw[wi] += d * xs[xi];
                  if (gx) gx[xi] += d * ws[wi];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, int window) {
  require_rank(x.shape(), 4, "maxpool2d");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window <= 0 || h % window != 0 || w % window != 0) {
    throw ShapeError("maxpool2d: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by window " + std::to_string(window));
  }
  const std::int64_t ho = h / window, wo = w / window;
  BasicTensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(out.numel()));
  const T* xs = x.data().data();
  T* os = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = xs + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        std::int64_t best = (oy * window) * w + ox * window;
        for (int dy = 0; dy < window; ++dy) {
          for (int dx = 0; dx < window; ++dx) {
            const std::int64_t idx = (oy * window + dy) * w + ox * window + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::int64_t o = p * ho * wo + oy * wo + ox;
        os[o] = plane[best];
        argmax[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(best);
      }
    }
  }
  if (recording<T>({&x})) {
    finish(out, "maxpool2d",
           [x, out, argmax = std::move(argmax), plane_in = h * w, plane_out = ho * wo]() mutable {
             if (!out.has_grad()) return;
             const auto go = out.grad_view();
             auto gx = x.grad();
             for (std::size_t o = 0; o < go.size(); ++o) {
               const auto p = static_cast<std::int64_t>(o) / plane_out;
               gx[static_cast<std::size_t>(p * plane_in + argmax[o])] += go[o];
             }
           });
  }
  return out;
}

template <typename T>
BasicTensor<T> nearest_upsample2x(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "nearest_upsample2x");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  BasicTensor<T> out(Shape{n, c, 2 * h, 2 * w});
  const T* xs = x.data().data();
  T* os = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      const T* in_row = xs + p * h * w + (y / 2) * w;
      T* out_row = os + p * 4 * h * w + y * 2 * w;
      for (std::int64_t xo = 0; xo < 2 * w; ++xo) out_row[xo] = in_row[xo / 2];
    }
  }
  if (recording<T>({&x})) {
    finish(out, "nearest_upsample2x", [x, out, n, c, h, w]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      T* gx = x.grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        for (std::int64_t y = 0; y < 2 * h; ++y) {
          T* g_row = gx + p * h * w + (y / 2) * w;
          const T* o_row = go + p * 4 * h * w + y * 2 * w;
          for (std::int64_t xo = 0; xo < 2 * w; ++xo) g_row[xo / 2] += o_row[xo];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] > T(0) ? v[i] : T(0);
  if (recording<T>({&x})) {
    finish(out, "relu", [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto go = out.grad_view();
      const auto v = x.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (v[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  BasicTensor<T> out(x.shape());
  auto o = out.data();
  const auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * v[i] * (T(1) + std::erf(v[i] * kInvSqrt2));
  if (recording<T>({&x})) {
    finish(out, "gelu", [x, out]() mutable {
      if (!out.has_grad()) return;
      constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
      const auto go = out.grad_view();
      const auto v = x.data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(v[i] * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v[i] * v[i]);
        gx[i] += go[i] * (cdf + v[i] * pdf);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = k == 0 ? 0 : x.numel() / k;
  BasicTensor<T> out(x.shape());
  const T* xs = x.data().data();
  T* os = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xs + r * k;
    T* o = os + r * k;
    const T mx = *std::max_element(in, in + k);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::int64_t j = 0; j < k; ++j) o[j] /= total;
  }
  if (recording<T>({&x})) {
    finish(out, "softmax_lastdim", [x, out, rows, k]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      const T* y = std::as_const(out).data().data();
      T* gx = x.grad().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::int64_t j = 0; j < k; ++j) dot += go[r * k + j] * y[r * k + j];
        for (std::int64_t j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (go[r * k + j] - dot);
      }
    });
  }
  return out;
}

namespace {

// Shared kernel for group norm (groups over channel blocks) and layer norm
// (one group per row). `segments` rows of length `len` are normalized; the
// affine parameter index of element j in segment s is affine_index(s, j).
template <typename T, typename AffineIndex>
BasicTensor<T> normalize(const char* name, const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, std::int64_t segments, std::int64_t len,
                         T eps, AffineIndex affine_index) {
  BasicTensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(segments));
  const T* xs = x.data().data();
  T* os = out.data().data();
  const T* gs = gamma.defined() ? gamma.data().data() : nullptr;
  const T* bs = beta.defined() ? beta.data().data() : nullptr;
  for (std::int64_t s = 0; s < segments; ++s) {
    const T* in = xs + s * len;
    double m = 0;
    for (std::int64_t j = 0; j < len; ++j) m += in[j];
    m /= static_cast<double>(len);
    double var = 0;
    for (std::int64_t j = 0; j < len; ++j) var += (in[j] - m) * (in[j] - m);
    var /= static_cast<double>(len);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[static_cast<std::size_t>(s)] = r;
    for (std::int64_t j = 0; j < len; ++j) {
      const T xh = static_cast<T>(in[j] - m) * r;
      xhat[static_cast<std::size_t>(s * len + j)] = xh;
      const auto a = affine_index(s, j);
      os[s * len + j] = xh * (gs ? gs[a] : T(1)) + (bs ? bs[a] : T(0));
    }
  }
  const BasicTensor<T>* g_ptr = gamma.defined() ? &gamma : nullptr;
  const BasicTensor<T>* b_ptr = beta.defined() ? &beta : nullptr;
  if (recording<T>({&x, g_ptr, b_ptr})) {
    finish(out, name,
           [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), segments, len,
            affine_index]() mutable {
             if (!out.has_grad()) return;
             const T* go = out.grad_view().data();
             const T* gs = gamma.defined() ? gamma.data().data() : nullptr;
             T* ggamma = gamma.defined() && gamma.requires_grad() ? gamma.grad().data() : nullptr;
             T* gbeta = beta.defined() && beta.requires_grad() ? beta.grad().data() : nullptr;
             T* gx = x.requires_grad() ? x.grad().data() : nullptr;
             std::vector<T> dxhat(static_cast<std::size_t>(len));
             for (std::int64_t s = 0; s < segments; ++s) {
               T sum_d = 0, sum_dx = 0;
               for (std::int64_t j = 0; j < len; ++j) {
                 const auto i = static_cast<std::size_t>(s * len + j);
                 const auto a = affine_index(s, j);
                 if (ggamma) ggamma[a] += go[i] * xhat[i];
                 if (gbeta) gbeta[a] += go[i];
                 const T d = go[i] * (gs ? gs[a] : T(1));
                 dxhat[static_cast<std::size_t>(j)] = d;
                 sum_d += d;
                 sum_dx += d * xhat[i];
               }
               if (!gx) continue;
               const T r = rstd[static_cast<std::size_t>(s)];
               const T inv_len = T(1) / static_cast<T>(len);
               for (std::int64_t j = 0; j < len; ++j) {
                 const auto i = static_cast<std::size_t>(s * len + j);
                 gx[i] += r * (dxhat[static_cast<std::size_t>(j)] - inv_len * (sum_d + xhat[i] * sum_dx));
               }
             }
           });
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> groupnorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, int groups, T eps) {
  if (x.rank() < 2) throw ShapeError("groupnorm: expected [N, C, ...], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (groups <= 0 || c % groups != 0) {
    throw ShapeError("groupnorm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  for (const auto* p : {&gamma, &beta}) {
    if (p->defined() && p->shape() != Shape{c}) {
      throw ShapeError("groupnorm: affine parameter shape " + shape_str(p->shape()) +
                       " != [" + std::to_string(c) + "]");
    }
  }
  const std::int64_t spatial = c == 0 ? 0 : x.numel() / (n * c);
  const std::int64_t per_group = c / groups;
  const std::int64_t len = per_group * spatial;
  return normalize<T>("groupnorm", x, gamma, beta, n * groups, len, eps,
                      [groups, per_group, spatial](std::int64_t s, std::int64_t j) {
                        return (s % groups) * per_group + j / spatial;
                      });
}

template <typename T>
BasicTensor<T> layernorm_lastdim(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                 const BasicTensor<T>& beta, T eps) {
  if (x.rank() == 0) throw ShapeError("layernorm_lastdim: scalar input");
  const std::int64_t len = x.shape().back();
  for (const auto* p : {&gamma, &beta}) {
    if (p->defined() && p->shape() != Shape{len}) {
      throw ShapeError("layernorm_lastdim: affine parameter shape " + shape_str(p->shape()) +
                       " != [" + std::to_string(len) + "]");
    }
  }
  return normalize<T>("layernorm_lastdim", x, gamma, beta, len == 0 ? 0 : x.numel() / len, len,
                      eps, [](std::int64_t, std::int64_t j) { return j; });
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0] &&
                  std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2);
  if (!ok) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::int64_t n = sa[0];
  const std::int64_t inner = n == 0 ? 0 : shape_numel(Shape(sa.begin() + 2, sa.end()));
  const std::int64_t la = sa[1] * inner, lb = sb[1] * inner;
  Shape os = sa;
  os[1] = sa[1] + sb[1];
  BasicTensor<T> out(os);
  T* o = out.data().data();
  for (std::int64_t ni = 0; ni < n; ++ni) {
    std::copy_n(a.data().data() + ni * la, la, o + ni * (la + lb));
    std::copy_n(b.data().data() + ni * lb, lb, o + ni * (la + lb) + la);
  }
  if (recording<T>({&a, &b})) {
    finish(out, "concat_channels", [a, b, out, n, la, lb]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      T* ga = a.requires_grad() ? a.grad().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad().data() : nullptr;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* src = go + ni * (la + lb);
        if (ga) for (std::int64_t i = 0; i < la; ++i) ga[ni * la + i] += src[i];
        if (gb) for (std::int64_t i = 0; i < lb; ++i) gb[ni * lb + i] += src[la + i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (recording<T>({&x})) {
    finish(out, "reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      accumulate(x, out.grad_view());
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{n, c});
  const T* xs = x.data().data();
  T* os = out.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += xs[p * hw + i];
    os[p] = acc / static_cast<T>(hw);
  }
  if (recording<T>({&x})) {
    finish(out, "global_avg_pool", [x, out, n, c, hw]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad_view().data();
      T* gx = x.grad().data();
      for (std::int64_t p = 0; p < n * c; ++p) {
        const T d = go[p] / static_cast<T>(hw);
        for (std::int64_t i = 0; i < hw; ++i) gx[p * hw + i] += d;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto out = BasicTensor<T>::scalar(acc);
  if (recording<T>({&x})) {
    finish(out, "sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T d = out.grad_view()[0];
      for (auto& g : x.grad()) g += d;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

#define DYNAROUTE_INSTANTIATE(T)                                                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                        \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> transpose_last2(const BasicTensor<T>&);                                 \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, Conv2dParams);     \
  template BasicTensor<T> depthwise_conv2d(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                           Conv2dParams);                                         \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, int);                                  \
  template BasicTensor<T> nearest_upsample2x(const BasicTensor<T>&);                              \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                            \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                            \
  template BasicTensor<T> softmax_lastdim(const BasicTensor<T>&);                                 \
  template BasicTensor<T> groupnorm(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                    const BasicTensor<T>&, int, T);                               \
  template BasicTensor<T> layernorm_lastdim(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                            const BasicTensor<T>&, T);                            \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                  \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                 \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                             \
  template BasicTensor<T> mean(const BasicTensor<T>&);

DYNAROUTE_INSTANTIATE(float)
DYNAROUTE_INSTANTIATE(double)
#undef DYNAROUTE_INSTANTIATE

}  // namespace dynaroute::ops

namespace dynaroute {

namespace {
constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::kAdd, "add"},
    {OpKind::kMul, "mul"},
    {OpKind::kMatmul, "matmul"},
    {OpKind::kConv2d, "conv2d"},
    {OpKind::kDepthwiseConv2d, "depthwise_conv2d"},
    {OpKind::kMaxPool2d, "maxpool2d"},
    {OpKind::kNearestUpsample2x, "nearest_upsample2x"},
    {OpKind::kRelu, "relu"},
    {OpKind::kGelu, "gelu"},
    {OpKind::kSoftmaxLastdim, "softmax_lastdim"},
    {OpKind::kGroupNorm, "groupnorm"},
    {OpKind::kConcatChannels, "concat_channels"},
    {OpKind::kReshape, "reshape"},
};

template <typename T>
void require_inputs(std::span<const BasicTensor<T>> inputs, std::size_t lo, std::size_t hi,
                    OpKind kind) {
  if (inputs.size() < lo || inputs.size() > hi) {
    throw ShapeError(std::string(op_kind_name(kind)) + ": expected " + std::to_string(lo) +
                     (lo == hi ? "" : "-" + std::to_string(hi)) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
}
}  // namespace

std::optional<OpKind> parse_op_kind(std::string_view name) {
  for (const auto& [kind, n] : kOpNames) {
    if (n == name) return kind;
  }
  return std::nullopt;
}

std::string_view op_kind_name(OpKind kind) {
  for (const auto& [k, n] : kOpNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

template <typename T>
BasicTensor<T> forward_primitive(OpKind kind, std::span<const BasicTensor<T>> in,
                                 const OpAttrs& attrs) {
  const ops::Conv2dParams conv{attrs.stride, attrs.padding};
  switch (kind) {
    case OpKind::kAdd:
      require_inputs(in, 2, 2, kind);
      return ops::add(in[0], in[1]);
    case OpKind::kMul:
      require_inputs(in, 2, 2, kind);
      return ops::mul(in[0], in[1]);
    case OpKind::kMatmul:
      require_inputs(in, 2, 2, kind);
      return ops::matmul(in[0], in[1]);
    case OpKind::kConv2d:
      require_inputs(in, 2, 2, kind);
      return ops::conv2d(in[0], in[1], conv);
    case OpKind::kDepthwiseConv2d:
      require_inputs(in, 2, 2, kind);
      return ops::depthwise_conv2d(in[0], in[1], conv);
    case OpKind::kMaxPool2d:
      require_inputs(in, 1, 1, kind);
      return ops::maxpool2d(in[0], attrs.window);
    case OpKind::kNearestUpsample2x:
      require_inputs(in, 1, 1, kind);
      return ops::nearest_upsample2x(in[0]);
    case OpKind::kRelu:
      require_inputs(in, 1, 1, kind);
      return ops::relu(in[0]);
    case OpKind::kGelu:
      require_inputs(in, 1, 1, kind);
      return ops::gelu(in[0]);
    case OpKind::kSoftmaxLastdim:
      require_inputs(in, 1, 1, kind);
      return ops::softmax_lastdim(in[0]);
    case OpKind::kGroupNorm: {
      require_inputs(in, 1, 3, kind);
      const BasicTensor<T> none;
      return ops::groupnorm(in[0], in.size() > 1 ? in[1] : none, in.size() > 2 ? in[2] : none,
                            attrs.groups, static_cast<T>(attrs.eps));
    }
    case OpKind::kConcatChannels:
      require_inputs(in, 2, 2, kind);
      return ops::concat_channels(in[0], in[1]);
    case OpKind::kReshape:
      require_inputs(in, 1, 1, kind);
      return ops::reshape(in[0], attrs.shape);
  }
  throw UnsupportedOpError("unsupported op kind " + std::to_string(static_cast<int>(kind)));
}

template <typename T>
BasicTensor<T> forward_primitive(std::string_view kind, std::span<const BasicTensor<T>> inputs,
                                 const OpAttrs& attrs) {
  const auto k = parse_op_kind(kind);
  if (!k) throw UnsupportedOpError("unsupported op kind '" + std::string(kind) + "'");
  return forward_primitive<T>(*k, inputs, attrs);
}

template BasicTensor<float> forward_primitive(OpKind, std::span<const BasicTensor<float>>,
                                              const OpAttrs&);
template BasicTensor<double> forward_primitive(OpKind, std::span<const BasicTensor<double>>,
                                               const OpAttrs&);
template BasicTensor<float> forward_primitive(std::string_view, std::span<const BasicTensor<float>>,
                                              const OpAttrs&);
template BasicTensor<double> forward_primitive(std::string_view,
                                               std::span<const BasicTensor<double>>, const OpAttrs&);

}  // namespace dynaroute
