#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace beamloc {

/// Real-input FFT of fixed size backed by FFTW. Instances are not shareable
/// across threads; plan creation is serialized internally.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(RealFft&&) noexcept;
  RealFft& operator=(RealFft&&) noexcept;
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const;
  std::size_t bins() const { return size() / 2 + 1; }

  /// in.size() == size(), out.size() == bins().
  void forward(std::span<const double> in, std::span<std::complex<double>> out);
  /// Inverse including the 1/n normalization.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Periodic Hann window, w[n] = 0.5 - 0.5 cos(2 pi n / N).
std::vector<double> periodic_hann(std::size_t n);

}  // namespace beamloc
