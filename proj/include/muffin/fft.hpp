#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace muffin::spectral {

using Complex = std::complex<double>;

// Unnormalized complex DFT of a fixed length. Lengths whose prime factors are
// all small run as a mixed-radix Cooley-Tukey decomposition; anything with a
// large prime factor is routed through Bluestein's chirp-z convolution.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);
  ~FftPlan();
  FftPlan(FftPlan&&) noexcept;
  FftPlan& operator=(FftPlan&&) noexcept;

  std::size_t size() const noexcept { return n_; }
  bool uses_bluestein() const noexcept { return bluestein_ != nullptr; }
  const std::vector<std::size_t>& factors() const noexcept { return factors_; }

  // X[k] = sum_j x[j] exp(-2 pi i jk/n), in place.
  void forward(std::span<Complex> data) const;
  // x[j] = sum_k X[k] exp(+2 pi i jk/n), in place (no 1/n).
  void backward(std::span<Complex> data) const;
  // Transforms `width` interleaved sequences at once: element j of sequence c
  // lives at data[j * width + c].
  void forward_many(std::span<Complex> data, std::size_t width) const;
  void backward_many(std::span<Complex> data, std::size_t width) const;

 private:
  struct Bluestein;

  void transform(std::span<Complex> data, std::size_t width, bool inverse) const;
  void mixed_radix(Complex* out, const Complex* in, std::size_t fstride, std::size_t level,
                   bool inverse, std::size_t width) const;
  void butterfly(Complex* out, std::size_t fstride, std::size_t radix, std::size_t span_len,
                 bool inverse, std::size_t width) const;

  std::size_t n_ = 0;
  std::vector<std::size_t> factors_;
  std::vector<Complex> twiddles_;  // exp(-2 pi i j/n)
  std::unique_ptr<Bluestein> bluestein_;
};

// Plans are cached per thread, keyed by length.
const FftPlan& plan_for(std::size_t n);

// Largest prime factor handled by direct mixed-radix butterflies.
inline constexpr std::size_t kMaxDirectRadix = 31;

}  // namespace muffin::spectral
