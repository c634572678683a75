#pragma once

#include <cmath>
#include <numbers>
#include <span>

namespace beamloc::dsp {

/// Direct-form-I biquad with RBJ cookbook designs.
class Biquad {
 public:
  static Biquad lowpass(double fc, double q, double fs) { return design(fc, q, fs, Kind::lowpass); }
  static Biquad highpass(double fc, double q, double fs) { return design(fc, q, fs, Kind::highpass); }
  /// Constant 0 dB peak gain band-pass.
  static Biquad bandpass(double fc, double q, double fs) { return design(fc, q, fs, Kind::bandpass); }

  double process(double x) {
    const double y = b0_ * x + b1_ * x1_ + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }
  void process(std::span<double> x) {
    for (double& v : x) v = process(v);
  }

 private:
  enum class Kind { lowpass, highpass, bandpass };

  static Biquad design(double fc, double q, double fs, Kind kind) {
    const double w0 = 2.0 * std::numbers::pi * fc / fs;
    const double cw = std::cos(w0);
    const double alpha = std::sin(w0) / (2.0 * q);
    double b0 = 0, b1 = 0, b2 = 0;
    switch (kind) {
      case Kind::lowpass:
        b0 = b2 = (1.0 - cw) / 2.0;
        b1 = 1.0 - cw;
        break;
      case Kind::highpass:
        b0 = b2 = (1.0 + cw) / 2.0;
        b1 = -(1.0 + cw);
        break;
      case Kind::bandpass:
        b0 = alpha;
        b1 = 0.0;
        b2 = -alpha;
        break;
    }
    const double a0 = 1.0 + alpha;
    Biquad f;
    f.b0_ = b0 / a0;
    f.b1_ = b1 / a0;
    f.b2_ = b2 / a0;
    f.a1_ = -2.0 * cw / a0;
    f.a2_ = (1.0 - alpha) / a0;
    return f;
  }

  double b0_ = 1, b1_ = 0, b2_ = 0, a1_ = 0, a2_ = 0;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

inline double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

}  // namespace beamloc::dsp
