#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "muffin/fft.hpp"

namespace muffin::spectral {

// Dense (batch, length, channels) block, channels fastest.
template <typename T>
struct Block {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t channels = 0;
  std::vector<T> values;

  Block() = default;
  Block(std::size_t b, std::size_t l, std::size_t c)
      : batch(b), length(l), channels(c), values(b * l * c) {}

  std::size_t index(std::size_t b, std::size_t l, std::size_t c) const {
    return (b * length + l) * channels + c;
  }
  T& at(std::size_t b, std::size_t l, std::size_t c) { return values[index(b, l, c)]; }
  const T& at(std::size_t b, std::size_t l, std::size_t c) const { return values[index(b, l, c)]; }
};

using RealBlock = Block<double>;
using ComplexBlock = Block<Complex>;

// Non-redundant half spectrum of a real signal of length n, transformed along
// the length axis independently for every (batch, channel).
struct Spectrum {
  ComplexBlock bins;  // (batch, m, channels)
  std::size_t n = 0;

  std::size_t m() const noexcept { return bins.length; }
};

constexpr std::size_t half_spectrum_bins(std::size_t n) noexcept { return n / 2 + 1; }

// Contiguous partition of m bins into K bands. Band t (0-based) covers
// [starts[t], starts[t] + sizes[t]).
struct BandLayout {
  std::size_t bins = 0;
  std::vector<std::size_t> starts;
  std::vector<std::size_t> sizes;

  std::size_t bands() const noexcept { return sizes.size(); }
  std::size_t end(std::size_t t) const { return starts.at(t) + sizes.at(t); }
};

// Unitary (1/sqrt(n)) real-input DFT; returns bins 0..floor(n/2).
Spectrum rfft(const RealBlock& x);
// Inverse of rfft under the same convention. The imaginary parts of the DC
// bin (and of the Nyquist bin for even n) do not contribute to the output.
RealBlock irfft(const Spectrum& s, std::size_t n);

BandLayout make_band_layout(std::size_t m, std::size_t bands);
// Bands are 0-based here.
ComplexBlock slice_band(const Spectrum& s, const BandLayout& layout, std::size_t band);
Spectrum zero_pad_band(const ComplexBlock& b, const BandLayout& layout, std::size_t band,
                       std::size_t n);
RealBlock amplitude(const Spectrum& s);

// Raw kernels over flat (batch, length, channels) buffers. These back the
// autodiff primitives; the adjoints are the exact transposes of the forward
// real-linear maps and therefore serve directly as gradient rules.
void rfft(std::span<const double> x, std::span<Complex> out, std::size_t batch, std::size_t n,
          std::size_t channels);
void irfft(std::span<const Complex> s, std::span<double> out, std::size_t batch, std::size_t n,
           std::size_t channels);
// Gradient of rfft: maps d(loss)/d(re, im of bins) to d(loss)/dx.
void rfft_grad(std::span<const Complex> grad_bins, std::span<double> grad_x, std::size_t batch,
               std::size_t n, std::size_t channels);
// Gradient of irfft: maps d(loss)/d(output) to d(loss)/d(re, im of bins).
void irfft_grad(std::span<const double> grad_out, std::span<Complex> grad_bins, std::size_t batch,
                std::size_t n, std::size_t channels);

}  // namespace muffin::spectral
