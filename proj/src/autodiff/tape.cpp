#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "muffin/autodiff.hpp"
#include "muffin/error.hpp"
#include "muffin/spectral.hpp"

namespace muffin::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Complex = spectral::Complex;

std::atomic<std::uint64_t> next_serial{1};

double* grad_of(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

std::span<Complex> as_complex(std::vector<double>& v) {
  return {reinterpret_cast<Complex*>(v.data()), v.size() / 2};
}

// Numpy-style broadcasting of two shapes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;  // per output axis, 0 where broadcast
  std::vector<std::size_t> b_stride;
  bool same = false;
  bool b_suffix = false;  // b's elements repeat every b.size() outputs

  std::size_t a_index(std::size_t i) const { return index(i, a_stride); }
  std::size_t b_index(std::size_t i) const { return index(i, b_stride); }

  std::size_t index(std::size_t flat, const std::vector<std::size_t>& stride) const {
    std::size_t idx = 0;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      const std::size_t coord = flat % out[ax];
      flat /= out[ax];
      idx += coord * stride[ax];
    }
    return idx;
  }
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape ap(rank - a.size(), 1), bp(rank - b.size(), 1);
  ap.insert(ap.end(), a.begin(), a.end());
  bp.insert(bp.end(), b.begin(), b.end());
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1)
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    bc.out[i] = std::max(ap[i], bp[i]);
  }
  const auto sa = contiguous_strides(ap), sb = contiguous_strides(bp);
  bc.a_stride.resize(rank);
  bc.b_stride.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    bc.a_stride[i] = ap[i] == 1 ? 0 : sa[i];
    bc.b_stride[i] = bp[i] == 1 ? 0 : sb[i];
  }
  // b is a pure trailing block of the output when a == out and b's leading
  // padded axes are all 1.
  if (ap == bc.out) {
    std::size_t lead = 0;
    while (lead < rank && bp[lead] == 1) ++lead;
    bc.b_suffix = std::equal(bp.begin() + lead, bp.end(), bc.out.begin() + lead);
  }
  return bc;
}

// Visits (out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, std::size_t total, std::size_t b_size, F&& f) {
  if (bc.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
  } else if (bc.b_suffix) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i % b_size);
  } else {
    for (std::size_t i = 0; i < total; ++i) f(i, bc.a_index(i), bc.b_index(i));
  }
}

// Outer/axis/inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

Tape::Tape(bool record) : record_(record), serial_(next_serial.fetch_add(1)) {}

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!record_) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor Tape::emit(Shape shape, std::vector<double> values, bool needs_grad) {
  Tensor out(std::move(shape), std::move(values), needs_grad);
  if (needs_grad) out.node_->producer = serial_;
  return out;
}

void Tape::clear() {
  entries_.clear();
  serial_ = next_serial.fetch_add(1);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (loss.node().producer != serial_ || entries_.empty())
    throw StateError("loss was not produced by this tape (backward before forward?)");
  loss.node().grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  clear();
}

// ---------------------------------------------------------------- arithmetic

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const Broadcast bc = plan_broadcast(a.shape(), b.shape());
  const std::size_t total = element_count(bc.out);
  std::vector<double> v(total);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for_each_broadcast(bc, total, b.size(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = av[ia] + bv[ib]; });
  const bool g = wants_grad({&a, &b});
  Tensor out = emit(bc.out, std::move(v), g);
  if (g) {
    record([bc, total, a = a.handle(), b = b.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      const double* go = o->grad.data();
      double* ga = a->requires_grad ? grad_of(*a) : nullptr;
      double* gb = b->requires_grad ? grad_of(*b) : nullptr;
      for_each_broadcast(bc, total, b->value.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += go[i];
        if (gb) gb[ib] += go[i];
      });
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const Broadcast bc = plan_broadcast(a.shape(), b.shape());
  const std::size_t total = element_count(bc.out);
  std::vector<double> v(total);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for_each_broadcast(bc, total, b.size(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { v[i] = av[ia] * bv[ib]; });
  const bool g = wants_grad({&a, &b});
  Tensor out = emit(bc.out, std::move(v), g);
  if (g) {
    record([bc, total, a = a.handle(), b = b.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      const double* go = o->grad.data();
      double* ga = a->requires_grad ? grad_of(*a) : nullptr;
      double* gb = b->requires_grad ? grad_of(*b) : nullptr;
      const double* av = a->value.data();
      const double* bv = b->value.data();
      for_each_broadcast(bc, total, b->value.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += go[i] * bv[ib];
        if (gb) gb[ib] += go[i] * av[ia];
      });
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double factor) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x *= factor;
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([factor, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += factor * o->grad[i];
    });
  }
  return out;
}

Tensor Tape::add_scalar(const Tensor& a, double offset) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x += offset;
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
    });
  }
  return out;
}

// ------------------------------------------------------------ linear algebra

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0))
    throw ShapeError("matmul of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t k = b.dim(0), n = b.dim(1), rows = a.size() / k;
  std::vector<double> v(rows * n);
  MapMat(v.data(), rows, n).noalias() =
      ConstMapMat(a.values().data(), rows, k) * ConstMapMat(b.values().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  const bool g = wants_grad({&a, &b});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([rows, k, n, a = a.handle(), b = b.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      ConstMapMat go(o->grad.data(), rows, n);
      if (a->requires_grad)
        MapMat(grad_of(*a), rows, k).noalias() += go * ConstMapMat(b->value.data(), k, n).transpose();
      if (b->requires_grad)
        MapMat(grad_of(*b), k, n).noalias() += ConstMapMat(a->value.data(), rows, k).transpose() * go;
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> v(r * c);
  MapMat(v.data(), c, r) = ConstMapMat(a.values().data(), r, c).transpose();
  const bool g = wants_grad({&a});
  Tensor out = emit({c, r}, std::move(v), g);
  if (g) {
    record([r, c, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      MapMat(grad_of(*a), r, c) += ConstMapMat(o->grad.data(), c, r).transpose();
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  if (element_count(shape) != a.size())
    throw ShapeError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  std::vector<double> v(a.values().begin(), a.values().end());
  const bool g = wants_grad({&a});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
    });
  }
  return out;
}

Tensor Tape::concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts.front().shape();
  const AxisSplit base = split_axis(shape, axis);
  std::size_t extent = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat rank mismatch");
    extent += s[axis];
    s[axis] = shape[axis];
    if (s != shape)
      throw ShapeError("concat shape mismatch: " + shape_string(p.shape()) + " vs " +
                       shape_string(parts.front().shape()));
  }
  shape[axis] = extent;
  std::vector<double> v(element_count(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    const double* src = p.values().data();
    for (std::size_t o = 0; o < base.outer; ++o)
      std::copy_n(src + o * len * base.inner, len * base.inner,
                  v.data() + (o * extent + offset) * base.inner);
    offset += len;
  }
  bool g = false;
  for (const auto& p : parts) g = g || (record_ && p.requires_grad());
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    std::vector<Handle> handles;
    for (const auto& p : parts) handles.push_back(p.handle());
    record([handles, offsets, extent, axis, outer = base.outer, inner = base.inner, o = out.handle()] {
      if (o->grad.empty()) return;
      for (std::size_t i = 0; i < handles.size(); ++i) {
        Node& p = *handles[i];
        if (!p.requires_grad) continue;
        const std::size_t len = p.shape[axis];
        double* gp = grad_of(p);
        for (std::size_t r = 0; r < outer; ++r) {
          const double* src = o->grad.data() + (r * extent + offsets[i]) * inner;
          double* dst = gp + r * len * inner;
          for (std::size_t j = 0; j < len * inner; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  if (start + length > sp.extent)
    throw IndexError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis of length " + std::to_string(sp.extent));
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> v(element_count(shape));
  const double* src = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(src + (o * sp.extent + start) * sp.inner, length * sp.inner,
                v.data() + o * length * sp.inner);
  const bool g = wants_grad({&a});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([sp, start, length, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t r = 0; r < sp.outer; ++r) {
        const double* src = o->grad.data() + r * length * sp.inner;
        double* dst = ga + (r * sp.extent + start) * sp.inner;
        for (std::size_t j = 0; j < length * sp.inner; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor Tape::pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  const std::size_t extent = sp.extent + before + after;
  Shape shape = a.shape();
  shape[axis] = extent;
  std::vector<double> v(element_count(shape), 0.0);
  const double* src = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(src + o * sp.extent * sp.inner, sp.extent * sp.inner,
                v.data() + (o * extent + before) * sp.inner);
  const bool g = wants_grad({&a});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([sp, extent, before, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t r = 0; r < sp.outer; ++r) {
        const double* src = o->grad.data() + (r * extent + before) * sp.inner;
        double* dst = ga + r * sp.extent * sp.inner;
        for (std::size_t j = 0; j < sp.extent * sp.inner; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- pointwise

Tensor Tape::sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = av[i];
    // Branch keeps exp() from overflowing for large |x|.
    v[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) {
        const double y = o->value[i];
        ga[i] += o->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& a) {
  std::vector<double> v(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gelu_value(av[i]);
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i] * gelu_slope(a->value[i]);
    });
  }
  return out;
}

Tensor Tape::log(const Tensor& a) {
  std::vector<double> v(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(av[i] > 0.0)) throw NumericError("log of non-positive value");
    v[i] = std::log(av[i]);
  }
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i] / a->value[i];
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax needs at least one axis");
  const std::size_t width = a.shape().back(), rows = a.size() / width;
  std::vector<double> v(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * width;
    double* y = v.data() + r * width;
    const double mx = *std::max_element(x, x + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  const bool g = wants_grad({&a});
  Tensor out = emit(a.shape(), std::move(v), g);
  if (g) {
    record([rows, width, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o->value.data() + r * width;
        const double* gy = o->grad.data() + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < width; ++j) ga[r * width + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ normalization

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t width = x.shape().back(), rows = x.size() / width;
  if (gamma.size() != width || beta.size() != width)
    throw ShapeError("layer_norm affine parameters must have length " + std::to_string(width));
  std::vector<double> v(x.size()), xhat(x.size()), inv_std(rows);
  const auto xv = x.values();
  const auto gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * width + j] = h;
      v[r * width + j] = h * gv[j] + bv[j];
    }
  }
  const bool g = wants_grad({&x, &gamma, &beta});
  Tensor out = emit(x.shape(), std::move(v), g);
  if (g) {
    record([rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std), x = x.handle(),
            gm = gamma.handle(), bt = beta.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* gx = x->requires_grad ? grad_of(*x) : nullptr;
      double* gg = gm->requires_grad ? grad_of(*gm) : nullptr;
      double* gb = bt->requires_grad ? grad_of(*bt) : nullptr;
      const double inv_w = 1.0 / static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* go = o->grad.data() + r * width;
        const double* h = xhat.data() + r * width;
        double mean_g = 0.0, mean_gh = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          const double gh = go[j] * gm->value[j];
          mean_g += gh;
          mean_gh += gh * h[j];
          if (gg) gg[j] += go[j] * h[j];
          if (gb) gb[j] += go[j];
        }
        if (!gx) continue;
        mean_g *= inv_w;
        mean_gh *= inv_w;
        for (std::size_t j = 0; j < width; ++j) {
          const double gh = go[j] * gm->value[j];
          gx[r * width + j] += inv_std[r] * (gh - mean_g - h[j] * mean_gh);
        }
      }
    });
  }
  return out;
}

Tensor Tape::batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           BatchNormStats& stats, bool train) {
  if (x.rank() != 3) throw ShapeError("batch_norm_1d expects (batch, length, channels)");
  const std::size_t channels = x.dim(2), groups = x.size() / channels;
  if (gamma.size() != channels || beta.size() != channels || stats.mean.size() != channels)
    throw ShapeError("batch_norm_1d parameters must have length " + std::to_string(channels));
  const auto xv = x.values();
  std::vector<double> mean(channels, 0.0), inv_std(channels);
  if (train) {
    std::vector<double> var(channels, 0.0);
    for (std::size_t r = 0; r < groups; ++r)
      for (std::size_t c = 0; c < channels; ++c) mean[c] += xv[r * channels + c];
    for (double& m : mean) m /= static_cast<double>(groups);
    for (std::size_t r = 0; r < groups; ++r)
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = xv[r * channels + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < channels; ++c) {
      const double biased = var[c] / static_cast<double>(groups);
      const double unbiased = groups > 1 ? var[c] / static_cast<double>(groups - 1) : biased;
      inv_std[c] = 1.0 / std::sqrt(biased + stats.eps);
      stats.mean[c] = (1.0 - stats.momentum) * stats.mean[c] + stats.momentum * mean[c];
      stats.var[c] = (1.0 - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.var[c] + stats.eps);
    }
  }
  std::vector<double> v(x.size()), xhat(x.size());
  const auto gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < groups; ++r)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = r * channels + c;
      xhat[i] = (xv[i] - mean[c]) * inv_std[c];
      v[i] = xhat[i] * gv[c] + bv[c];
    }
  const bool g = wants_grad({&x, &gamma, &beta});
  Tensor out = emit(x.shape(), std::move(v), g);
  if (g) {
    record([train, groups, channels, xhat = std::move(xhat), inv_std = std::move(inv_std),
            x = x.handle(), gm = gamma.handle(), bt = beta.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      const double* go = o->grad.data();
      double* gx = x->requires_grad ? grad_of(*x) : nullptr;
      double* gg = gm->requires_grad ? grad_of(*gm) : nullptr;
      double* gb = bt->requires_grad ? grad_of(*bt) : nullptr;
      std::vector<double> mean_g(channels, 0.0), mean_gh(channels, 0.0);
      for (std::size_t r = 0; r < groups; ++r)
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t i = r * channels + c;
          if (gg) gg[c] += go[i] * xhat[i];
          if (gb) gb[c] += go[i];
          const double gh = go[i] * gm->value[c];
          mean_g[c] += gh;
          mean_gh[c] += gh * xhat[i];
        }
      if (!gx) return;
      const double inv_n = 1.0 / static_cast<double>(groups);
      for (std::size_t r = 0; r < groups; ++r)
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t i = r * channels + c;
          const double gh = go[i] * gm->value[c];
          gx[i] += train ? inv_std[c] * (gh - mean_g[c] * inv_n - xhat[i] * mean_gh[c] * inv_n)
                         : inv_std[c] * gh;
        }
    });
  }
  return out;
}

Tensor Tape::dropout(const Tensor& x, double rate, bool train, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!train || rate == 0.0) {
    // Identity, but still a distinct node so callers can treat it uniformly.
    return scale(x, 1.0);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = unit(rng) >= rate ? keep_scale : 0.0;
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * mask[i];
  const bool g = wants_grad({&x});
  Tensor out = emit(x.shape(), std::move(v), g);
  if (g) {
    record([mask = std::move(mask), x = x.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* gx = grad_of(*x);
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += o->grad[i] * mask[i];
    });
  }
  return out;
}

Tensor Tape::conv1d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3 || kernel.rank() != 3 || kernel.dim(1) != x.dim(2))
    throw ShapeError("conv1d of " + shape_string(x.shape()) + " with kernel " +
                     shape_string(kernel.shape()));
  const std::size_t width = kernel.dim(2);
  if (width % 2 == 0) throw ShapeError("conv1d kernel width must be odd");
  const std::size_t batch = x.dim(0), len = x.dim(1), cin = x.dim(2), cout = kernel.dim(0);
  const std::size_t half = width / 2, patch = cin * width, rows = batch * len;

  // im2col: cols[(b, l), c * width + j] = x[b, l + j - half, c]
  std::vector<double> cols(rows * patch, 0.0);
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l) {
      double* row = cols.data() + (b * len + l) * patch;
      for (std::size_t j = 0; j < width; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + j) - static_cast<std::ptrdiff_t>(half);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* xr = xv.data() + (b * len + static_cast<std::size_t>(src)) * cin;
        for (std::size_t c = 0; c < cin; ++c) row[c * width + j] = xr[c];
      }
    }
  std::vector<double> v(rows * cout);
  MapMat(v.data(), rows, cout).noalias() =
      ConstMapMat(cols.data(), rows, patch) * ConstMapMat(kernel.values().data(), cout, patch).transpose();
  const bool g = wants_grad({&x, &kernel});
  Tensor out = emit({batch, len, cout}, std::move(v), g);
  if (g) {
    record([batch, len, cin, cout, width, half, patch, rows, cols = std::move(cols), x = x.handle(),
            k = kernel.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      ConstMapMat go(o->grad.data(), rows, cout);
      if (k->requires_grad)
        MapMat(grad_of(*k), cout, patch).noalias() += go.transpose() * ConstMapMat(cols.data(), rows, patch);
      if (!x->requires_grad) return;
      RowMat dcols = go * ConstMapMat(k->value.data(), cout, patch);
      double* gx = grad_of(*x);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < len; ++l) {
          const double* row = dcols.data() + (b * len + l) * patch;
          for (std::size_t j = 0; j < width; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + j) - static_cast<std::ptrdiff_t>(half);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            double* xr = gx + (b * len + static_cast<std::size_t>(src)) * cin;
            for (std::size_t c = 0; c < cin; ++c) xr[c] += row[c * width + j];
          }
        }
    });
  }
  return out;
}

// --------------------------------------------------------------- reductions

Tensor Tape::sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  const bool g = wants_grad({&a});
  Tensor out = emit({}, {total}, g);
  if (g) {
    record([a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t i = 0; i < a->value.size(); ++i) ga[i] += o->grad[0];
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor Tape::mean_axis(const Tensor& a, std::size_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> v(sp.outer * sp.inner, 0.0);
  const auto av = a.values();
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        v[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i] * inv;
  const bool g = wants_grad({&a});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([sp, inv, a = a.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = grad_of(*a);
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t e = 0; e < sp.extent; ++e)
          for (std::size_t i = 0; i < sp.inner; ++i)
            ga[(r * sp.extent + e) * sp.inner + i] += o->grad[r * sp.inner + i] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------- embedding

Tensor Tape::embedding(const Tensor& table, std::span<const std::size_t> ids, Shape prefix) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (element_count(prefix) != ids.size())
    throw ShapeError("embedding ids do not fill shape " + shape_string(prefix));
  const std::size_t vocab = table.dim(0), dim = table.dim(1);
  std::vector<double> v(ids.size() * dim);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw IndexError("embedding id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy_n(tv.data() + ids[i] * dim, dim, v.data() + i * dim);
  }
  prefix.push_back(dim);
  const bool g = wants_grad({&table});
  Tensor out = emit(std::move(prefix), std::move(v), g);
  if (g) {
    record([dim, ids = std::vector<std::size_t>(ids.begin(), ids.end()), t = table.handle(),
            o = out.handle()] {
      if (o->grad.empty()) return;
      double* gt = grad_of(*t);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = o->grad.data() + i * dim;
        double* dst = gt + ids[i] * dim;
        for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------ spectral

Tensor Tape::rfft(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("rfft expects (batch, n, d), got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  const std::size_t m = spectral::half_spectrum_bins(n);
  std::vector<double> v(batch * m * d * 2);
  spectral::rfft(x.values(), as_complex(v), batch, n, d);
  const bool g = wants_grad({&x});
  Tensor out = emit({batch, m, d, 2}, std::move(v), g);
  if (g) {
    record([batch, n, d, x = x.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      std::vector<double> gx(x->value.size());
      spectral::rfft_grad(as_complex(o->grad), gx, batch, n, d);
      double* dst = grad_of(*x);
      for (std::size_t i = 0; i < gx.size(); ++i) dst[i] += gx[i];
    });
  }
  return out;
}

Tensor Tape::irfft(const Tensor& s, std::size_t n) {
  if (s.rank() != 4 || s.dim(3) != 2 || s.dim(1) != spectral::half_spectrum_bins(n))
    throw ShapeError("irfft of " + shape_string(s.shape()) + " to length " + std::to_string(n));
  const std::size_t batch = s.dim(0), d = s.dim(2);
  std::vector<double> v(batch * n * d);
  spectral::irfft(as_complex(s.node().value), v, batch, n, d);
  const bool g = wants_grad({&s});
  Tensor out = emit({batch, n, d}, std::move(v), g);
  if (g) {
    record([batch, n, d, s = s.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      std::vector<double> gs(s->value.size());
      spectral::irfft_grad(o->grad, as_complex(gs), batch, n, d);
      double* dst = grad_of(*s);
      for (std::size_t i = 0; i < gs.size(); ++i) dst[i] += gs[i];
    });
  }
  return out;
}

Tensor Tape::cmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() < 1 || a.shape().back() != 2 || b.shape().back() != 2)
    throw ShapeError("cmul operands need a trailing (re, im) axis");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size())))
    throw ShapeError("cmul cannot broadcast " + shape_string(bs) + " onto " + shape_string(as));
  const std::size_t pairs = a.size() / 2, bpairs = b.size() / 2;
  std::vector<double> v(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t j = i % bpairs;
    const double ar = av[2 * i], ai = av[2 * i + 1], br = bv[2 * j], bi = bv[2 * j + 1];
    v[2 * i] = ar * br - ai * bi;
    v[2 * i + 1] = ar * bi + ai * br;
  }
  const bool g = wants_grad({&a, &b});
  Tensor out = emit(as, std::move(v), g);
  if (g) {
    record([pairs, bpairs, a = a.handle(), b = b.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* ga = a->requires_grad ? grad_of(*a) : nullptr;
      double* gb = b->requires_grad ? grad_of(*b) : nullptr;
      const double* av = a->value.data();
      const double* bv = b->value.data();
      const double* go = o->grad.data();
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t j = i % bpairs;
        const double gr = go[2 * i], gi = go[2 * i + 1];
        if (ga) {
          ga[2 * i] += gr * bv[2 * j] + gi * bv[2 * j + 1];
          ga[2 * i + 1] += -gr * bv[2 * j + 1] + gi * bv[2 * j];
        }
        if (gb) {
          gb[2 * j] += gr * av[2 * i] + gi * av[2 * i + 1];
          gb[2 * j + 1] += -gr * av[2 * i + 1] + gi * av[2 * i];
        }
      }
    });
  }
  return out;
}

Tensor Tape::amplitude(const Tensor& s) {
  if (s.rank() < 1 || s.shape().back() != 2)
    throw ShapeError("amplitude needs a trailing (re, im) axis");
  Shape shape(s.shape().begin(), s.shape().end() - 1);
  const std::size_t pairs = s.size() / 2;
  std::vector<double> v(pairs);
  const auto sv = s.values();
  for (std::size_t i = 0; i < pairs; ++i) v[i] = std::hypot(sv[2 * i], sv[2 * i + 1]);
  const bool g = wants_grad({&s});
  Tensor out = emit(std::move(shape), std::move(v), g);
  if (g) {
    record([pairs, s = s.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* gs = grad_of(*s);
      for (std::size_t i = 0; i < pairs; ++i) {
        const double a = o->value[i];
        if (a == 0.0) continue;  // subgradient 0 at the origin
        gs[2 * i] += o->grad[i] * s->value[2 * i] / a;
        gs[2 * i + 1] += o->grad[i] * s->value[2 * i + 1] / a;
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                           bool mask_padding) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy expects (rows, classes) logits and one target per row");
  const std::size_t rows = logits.dim(0), width = logits.dim(1);
  const std::size_t first = mask_padding ? 1 : 0;
  if (rows == 0 || width <= first) throw ShapeError("cross_entropy on an empty logit matrix");
  for (std::size_t t : targets) {
    if (t >= width) throw IndexError("target " + std::to_string(t) + " outside logit width");
    if (t < first) throw ContractError("target is the masked padding class");
  }
  const auto lv = logits.values();
  std::vector<double> probs(rows * width, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = lv.data() + r * width;
    double mx = z[first];
    for (std::size_t j = first; j < width; ++j) mx = std::max(mx, z[j]);
    double acc = 0.0;
    for (std::size_t j = first; j < width; ++j) acc += std::exp(z[j] - mx);
    const double lse = mx + std::log(acc);
    total += lse - z[targets[r]];
    for (std::size_t j = first; j < width; ++j) probs[r * width + j] = std::exp(z[j] - lse);
  }
  const double loss = total / static_cast<double>(rows);
  const bool g = wants_grad({&logits});
  Tensor out = emit({}, {loss}, g);
  if (g) {
    record([rows, width, probs = std::move(probs), tg = std::vector<std::size_t>(targets.begin(), targets.end()),
            l = logits.handle(), o = out.handle()] {
      if (o->grad.empty()) return;
      double* gl = grad_of(*l);
      const double s = o->grad[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) gl[r * width + j] += s * probs[r * width + j];
        gl[r * width + tg[r]] -= s;
      }
    });
  }
  return out;
}

}  // namespace muffin::ad
