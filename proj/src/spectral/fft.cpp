#include "muffin/fft.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "muffin/error.hpp"

namespace muffin::spectral {

namespace {

std::vector<std::size_t> factorize(std::size_t n) {
  std::vector<std::size_t> out;
  // Radix 4 first keeps the recursion shallow for powers of two.
  while (n % 4 == 0) {
    out.push_back(4);
    n /= 4;
  }
  for (std::size_t p = 2; p * p <= n; ++p) {
    while (n % p == 0) {
      out.push_back(p);
      n /= p;
    }
  }
  if (n > 1) out.push_back(n);
  return out;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

struct FftPlan::Bluestein {
  std::size_t padded = 0;
  std::vector<Complex> chirp;       // exp(-i pi k^2 / n), k < n
  std::vector<Complex> kernel_fft;  // FFT of conj chirp, wrapped to `padded`
  std::unique_ptr<FftPlan> inner;
};

FftPlan::FftPlan(std::size_t n) : n_(n) {
  if (n == 0) throw ConfigError("FFT length must be positive");
  twiddles_.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    twiddles_[j] = Complex(std::cos(angle), std::sin(angle));
  }
  factors_ = factorize(n);
  if (n > 1 && factors_.back() > kMaxDirectRadix) {
    auto b = std::make_unique<Bluestein>();
    b->padded = next_pow2(2 * n - 1);
    b->chirp.resize(n);
    const std::size_t two_n = 2 * n;
    for (std::size_t k = 0; k < n; ++k) {
      // k^2 mod 2n keeps the phase argument small.
      const std::size_t k2 = (k * k) % two_n;
      const double angle = -std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
      b->chirp[k] = Complex(std::cos(angle), std::sin(angle));
    }
    b->inner = std::make_unique<FftPlan>(b->padded);
    b->kernel_fft.assign(b->padded, Complex(0.0, 0.0));
    b->kernel_fft[0] = std::conj(b->chirp[0]);
    for (std::size_t k = 1; k < n; ++k) {
      b->kernel_fft[k] = std::conj(b->chirp[k]);
      b->kernel_fft[b->padded - k] = std::conj(b->chirp[k]);
    }
    b->inner->forward(b->kernel_fft);
    bluestein_ = std::move(b);
  }
}

FftPlan::~FftPlan() = default;
FftPlan::FftPlan(FftPlan&&) noexcept = default;
FftPlan& FftPlan::operator=(FftPlan&&) noexcept = default;

void FftPlan::forward(std::span<Complex> data) const { transform(data, 1, false); }
void FftPlan::backward(std::span<Complex> data) const { transform(data, 1, true); }
void FftPlan::forward_many(std::span<Complex> data, std::size_t width) const { transform(data, width, false); }
void FftPlan::backward_many(std::span<Complex> data, std::size_t width) const { transform(data, width, true); }

namespace {

// Plain complex product; std::complex operator* adds NaN recovery we never need.
inline Complex cmul(Complex a, Complex b) {
  return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

}  // namespace

void FftPlan::transform(std::span<Complex> data, std::size_t width, bool inverse) const {
  if (data.size() != n_ * width) throw ShapeError("FFT buffer length does not match plan");
  if (n_ == 1 || width == 0) return;

  if (bluestein_) {
    const auto& b = *bluestein_;
    std::vector<Complex> work(b.padded);
    for (std::size_t col = 0; col < width; ++col) {
      std::fill(work.begin(), work.end(), Complex(0.0, 0.0));
      // The inverse transform is conj(F(conj(x))).
      for (std::size_t k = 0; k < n_; ++k) {
        const Complex x = data[k * width + col];
        work[k] = cmul(inverse ? std::conj(x) : x, b.chirp[k]);
      }
      b.inner->forward(work);
      for (std::size_t k = 0; k < b.padded; ++k) work[k] = cmul(work[k], b.kernel_fft[k]);
      b.inner->backward(work);
      const double scale = 1.0 / static_cast<double>(b.padded);
      for (std::size_t k = 0; k < n_; ++k) {
        const Complex y = cmul(work[k] * scale, b.chirp[k]);
        data[k * width + col] = inverse ? std::conj(y) : y;
      }
    }
    return;
  }

  thread_local std::vector<Complex> input;
  input.assign(data.begin(), data.end());
  mixed_radix(data.data(), input.data(), 1, 0, inverse, width);
}

void FftPlan::mixed_radix(Complex* out, const Complex* in, std::size_t fstride, std::size_t level,
                          bool inverse, std::size_t width) const {
  const std::size_t radix = factors_[level];
  const std::size_t remaining = n_ / fstride / radix;
  Complex* const out_begin = out;
  if (remaining == 1) {
    for (std::size_t q = 0; q < radix; ++q)
      std::copy_n(in + q * fstride * width, width, out + q * width);
  } else {
    for (std::size_t q = 0; q < radix; ++q) {
      mixed_radix(out, in, fstride * radix, level + 1, inverse, width);
      out += remaining * width;
      in += fstride * width;
    }
  }
  butterfly(out_begin, fstride, radix, remaining, inverse, width);
}

// Each logical element is a row of `width` independent channels.
void FftPlan::butterfly(Complex* out, std::size_t fstride, std::size_t radix, std::size_t span_len,
                        bool inverse, std::size_t width) const {
  auto tw = [&](std::size_t idx) {
    const Complex w = twiddles_[idx];  // idx < n
    return inverse ? std::conj(w) : w;
  };
  auto row = [&](std::size_t idx) { return out + idx * width; };

  if (radix == 2) {
    for (std::size_t u = 0; u < span_len; ++u) {
      const Complex w1 = tw(u * fstride);
      Complex* a = row(u);
      Complex* b = row(u + span_len);
      for (std::size_t c = 0; c < width; ++c) {
        const Complex t = cmul(b[c], w1);
        b[c] = a[c] - t;
        a[c] += t;
      }
    }
    return;
  }
  if (radix == 4) {
    const double sign = inverse ? 1.0 : -1.0;  // multiply by -i forward, +i inverse
    for (std::size_t u = 0; u < span_len; ++u) {
      const Complex w1 = tw(u * fstride), w2 = tw(2 * u * fstride), w3 = tw(3 * u * fstride);
      Complex* r0 = row(u);
      Complex* r1 = row(u + span_len);
      Complex* r2 = row(u + 2 * span_len);
      Complex* r3 = row(u + 3 * span_len);
      for (std::size_t c = 0; c < width; ++c) {
        const Complex a0 = r0[c];
        const Complex a1 = cmul(r1[c], w1);
        const Complex a2 = cmul(r2[c], w2);
        const Complex a3 = cmul(r3[c], w3);
        const Complex s02 = a0 + a2, d02 = a0 - a2;
        const Complex s13 = a1 + a3, diff = a1 - a3;
        const Complex d13(-sign * diff.imag(), sign * diff.real());
        r0[c] = s02 + s13;
        r1[c] = d02 + d13;
        r2[c] = s02 - s13;
        r3[c] = d02 - d13;
      }
    }
    return;
  }

  // Generic radix: direct DFT over the `radix` interleaved sub-results.
  thread_local std::vector<Complex> scratch;
  scratch.resize(radix * width);
  Complex w[kMaxDirectRadix];
  for (std::size_t u = 0; u < span_len; ++u) {
    for (std::size_t q = 0; q < radix; ++q) std::copy_n(row(u + q * span_len), width, scratch.data() + q * width);
    for (std::size_t q1 = 0; q1 < radix; ++q1) {
      const std::size_t k = u + q1 * span_len;
      const std::size_t step = (k * fstride) % n_;
      for (std::size_t q = 1, idx = step; q < radix; ++q) {
        w[q] = tw(idx);
        idx += step;
        if (idx >= n_) idx -= n_;
      }
      Complex* dst = row(k);
      for (std::size_t c = 0; c < width; ++c) {
        Complex acc = scratch[c];
        for (std::size_t q = 1; q < radix; ++q) acc += cmul(scratch[q * width + c], w[q]);
        dst[c] = acc;
      }
    }
  }
}

const FftPlan& plan_for(std::size_t n) {
  thread_local std::unordered_map<std::size_t, std::unique_ptr<FftPlan>> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, std::make_unique<FftPlan>(n)).first;
  return *it->second;
}

}  // namespace muffin::spectral
