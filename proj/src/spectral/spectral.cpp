#include "muffin/spectral.hpp"

#include <cmath>
#include <string>

#include "muffin/error.hpp"

namespace muffin::spectral {

namespace {

void check_sizes(std::size_t real_size, std::size_t complex_size, std::size_t batch, std::size_t n,
                 std::size_t channels) {
  if (n == 0) throw ShapeError("transform length must be positive");
  if (real_size != batch * n * channels)
    throw ShapeError("real buffer holds " + std::to_string(real_size) + " values, expected " +
                     std::to_string(batch * n * channels));
  const std::size_t m = half_spectrum_bins(n);
  if (complex_size != batch * m * channels)
    throw ShapeError("spectrum buffer holds " + std::to_string(complex_size) + " bins, expected " +
                     std::to_string(batch * m * channels));
}

// Weight of bin k in the Hermitian completion: DC and Nyquist appear once,
// every other bin twice.
double bin_multiplicity(std::size_t k, std::size_t n) {
  if (k == 0) return 1.0;
  if (n % 2 == 0 && k == n / 2) return 1.0;
  return 2.0;
}

}  // namespace

void rfft(std::span<const double> x, std::span<Complex> out, std::size_t batch, std::size_t n,
          std::size_t channels) {
  check_sizes(x.size(), out.size(), batch, n, channels);
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("rfft input contains a non-finite value");

  const FftPlan& plan = plan_for(n);
  const std::size_t m = half_spectrum_bins(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  // Two real channels share one complex sequence: z = x + i y.
  const std::size_t width = (channels + 1) / 2;
  std::vector<Complex> z(n * width);

  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data() + b * n * channels;
    Complex* ob = out.data() + b * m * channels;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < width; ++p) {
        const std::size_t c = 2 * p;
        z[j * width + p] = Complex(xb[j * channels + c], c + 1 < channels ? xb[j * channels + c + 1] : 0.0);
      }
    plan.forward_many(z, width);
    for (std::size_t k = 0; k < m; ++k) {
      const Complex* zk_row = z.data() + k * width;
      const Complex* zr_row = z.data() + ((n - k) % n) * width;
      for (std::size_t p = 0; p < width; ++p) {
        const std::size_t c = 2 * p;
        const Complex zk = zk_row[p];
        const Complex zr = std::conj(zr_row[p]);
        ob[k * channels + c] = 0.5 * (zk + zr) * scale;
        if (c + 1 < channels) ob[k * channels + c + 1] = Complex(0.0, -0.5) * (zk - zr) * scale;
      }
    }
  }
}

void irfft(std::span<const Complex> s, std::span<double> out, std::size_t batch, std::size_t n,
           std::size_t channels) {
  check_sizes(out.size(), s.size(), batch, n, channels);
  const FftPlan& plan = plan_for(n);
  const std::size_t m = half_spectrum_bins(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));

  auto hermitian = [&](const Complex* sb, std::size_t c, std::size_t k) -> Complex {
    if (k < m) {
      const Complex v = sb[k * channels + c];
      if (bin_multiplicity(k, n) == 1.0) return Complex(v.real(), 0.0);
      return v;
    }
    return std::conj(sb[(n - k) * channels + c]);
  };

  const std::size_t width = (channels + 1) / 2;
  std::vector<Complex> z(n * width);
  for (std::size_t b = 0; b < batch; ++b) {
    const Complex* sb = s.data() + b * m * channels;
    double* ob = out.data() + b * n * channels;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t p = 0; p < width; ++p) {
        const std::size_t c = 2 * p;
        const Complex xk = hermitian(sb, c, k);
        const Complex yk = c + 1 < channels ? hermitian(sb, c + 1, k) : Complex(0.0, 0.0);
        z[k * width + p] = Complex(xk.real() - yk.imag(), xk.imag() + yk.real());
      }
    plan.backward_many(z, width);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < width; ++p) {
        const std::size_t c = 2 * p;
        ob[j * channels + c] = z[j * width + p].real() * scale;
        if (c + 1 < channels) ob[j * channels + c + 1] = z[j * width + p].imag() * scale;
      }
  }
}

void rfft_grad(std::span<const Complex> grad_bins, std::span<double> grad_x, std::size_t batch,
               std::size_t n, std::size_t channels) {
  check_sizes(grad_x.size(), grad_bins.size(), batch, n, channels);
  const std::size_t m = half_spectrum_bins(n);
  std::vector<Complex> scaled(grad_bins.begin(), grad_bins.end());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < m; ++k) {
      const double w = bin_multiplicity(k, n);
      for (std::size_t c = 0; c < channels; ++c) scaled[(b * m + k) * channels + c] /= w;
    }
  irfft(scaled, grad_x, batch, n, channels);
}

void irfft_grad(std::span<const double> grad_out, std::span<Complex> grad_bins, std::size_t batch,
                std::size_t n, std::size_t channels) {
  check_sizes(grad_out.size(), grad_bins.size(), batch, n, channels);
  const std::size_t m = half_spectrum_bins(n);
  rfft(grad_out, grad_bins, batch, n, channels);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < m; ++k) {
      const double w = bin_multiplicity(k, n);
      for (std::size_t c = 0; c < channels; ++c) grad_bins[(b * m + k) * channels + c] *= w;
    }
}

Spectrum rfft(const RealBlock& x) {
  if (x.length == 0) throw ShapeError("rfft needs at least one position");
  Spectrum s;
  s.n = x.length;
  s.bins = ComplexBlock(x.batch, half_spectrum_bins(x.length), x.channels);
  rfft(x.values, s.bins.values, x.batch, x.length, x.channels);
  return s;
}

RealBlock irfft(const Spectrum& s, std::size_t n) {
  if (n == 0 || s.m() != half_spectrum_bins(n))
    throw ShapeError("spectrum has " + std::to_string(s.m()) + " bins but length " +
                     std::to_string(n) + " needs " + std::to_string(half_spectrum_bins(n)));
  RealBlock out(s.bins.batch, n, s.bins.channels);
  irfft(s.bins.values, out.values, s.bins.batch, n, s.bins.channels);
  return out;
}

BandLayout make_band_layout(std::size_t m, std::size_t bands) {
  if (bands < 1 || bands > m)
    throw ConfigError("band count " + std::to_string(bands) + " must lie in [1, " +
                      std::to_string(m) + "]");
  BandLayout layout;
  layout.bins = m;
  layout.starts.reserve(bands);
  layout.sizes.reserve(bands);
  for (std::size_t t = 1; t <= bands; ++t) {
    const std::size_t lo = ((t - 1) * m) / bands;
    const std::size_t hi = (t * m) / bands;
    layout.starts.push_back(lo);
    layout.sizes.push_back(hi - lo);
  }
  return layout;
}

ComplexBlock slice_band(const Spectrum& s, const BandLayout& layout, std::size_t band) {
  if (band >= layout.bands())
    throw IndexError("band " + std::to_string(band) + " out of range for " +
                     std::to_string(layout.bands()) + " bands");
  if (s.m() != layout.bins) throw ShapeError("spectrum bin count does not match band layout");
  const auto& in = s.bins;
  ComplexBlock out(in.batch, layout.sizes[band], in.channels);
  const std::size_t start = layout.starts[band];
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t k = 0; k < out.length; ++k)
      for (std::size_t c = 0; c < in.channels; ++c) out.at(b, k, c) = in.at(b, start + k, c);
  return out;
}

Spectrum zero_pad_band(const ComplexBlock& b, const BandLayout& layout, std::size_t band,
                       std::size_t n) {
  if (band >= layout.bands())
    throw IndexError("band " + std::to_string(band) + " out of range for " +
                     std::to_string(layout.bands()) + " bands");
  if (b.length != layout.sizes[band])
    throw ShapeError("band holds " + std::to_string(b.length) + " bins, layout expects " +
                     std::to_string(layout.sizes[band]));
  if (half_spectrum_bins(n) != layout.bins)
    throw ShapeError("length " + std::to_string(n) + " is incompatible with band layout");
  Spectrum s;
  s.n = n;
  s.bins = ComplexBlock(b.batch, layout.bins, b.channels);
  const std::size_t start = layout.starts[band];
  for (std::size_t i = 0; i < b.batch; ++i)
    for (std::size_t k = 0; k < b.length; ++k)
      for (std::size_t c = 0; c < b.channels; ++c) s.bins.at(i, start + k, c) = b.at(i, k, c);
  return s;
}

RealBlock amplitude(const Spectrum& s) {
  RealBlock out(s.bins.batch, s.bins.length, s.bins.channels);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::abs(s.bins.values[i]);
  return out;
}

}  // namespace muffin::spectral
