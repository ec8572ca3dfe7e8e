#include "pomni/sigproc/sigproc.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace pomni {
namespace {

constexpr long kMaxRatioTerm = 1000;
constexpr long kTapsPerPhase = 64;
constexpr double kKaiserBeta = 8.0;

long integral_rate(double r, const char* which) {
  if (!(r > 0.0) || r != std::floor(r) || r > 1e9) {
    throw FilterError(std::string("resample: ") + which + " rate " + std::to_string(r) +
                      " is not a positive integer");
  }
  return static_cast<long>(r);
}

// Windowed-sinc low-pass, cutoff in cycles per (upsampled) sample, DC gain `gain`.
Eigen::VectorXd kaiser_sinc(long taps, double cutoff, double gain) {
  Eigen::VectorXd h(taps);
  const double half = static_cast<double>(taps - 1) / 2.0;
  const double norm = std::cyl_bessel_i(0.0, kKaiserBeta);
  for (long i = 0; i < taps; ++i) {
    const double m = static_cast<double>(i) - half;
    const double arg = 2.0 * cutoff * m;
    const double sinc = m == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
    const double r = m / half;
    const double w = std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / norm;
    h[i] = 2.0 * cutoff * sinc * w;
  }
  return h * (gain / h.sum());
}

// Reflection without edge repeat: index -1 maps to 1, n maps to n - 2.
Eigen::Index reflect(Eigen::Index i, Eigen::Index n) {
  if (n == 1) return 0;
  const Eigen::Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Signal resample(const Signal& x, double from, double to) {
  const long f = integral_rate(from, "source");
  const long t = integral_rate(to, "target");
  const long g = std::gcd(f, t);
  const long up = t / g;
  const long down = f / g;
  if (up > kMaxRatioTerm || down > kMaxRatioTerm) {
    throw FilterError("resample: ratio " + std::to_string(up) + "/" + std::to_string(down) + " exceeds " +
                      std::to_string(kMaxRatioTerm));
  }
  if (up == down) return x;

  const long phases = std::max(up, down);
  const long half = kTapsPerPhase / 2 * phases;
  const Eigen::VectorXd h = kaiser_sinc(2 * half + 1, 0.5 / static_cast<double>(phases), static_cast<double>(up));

  const Eigen::Index n = x.cols();
  const Eigen::Index out_len = (n * up + down - 1) / down;
  Signal y(x.rows(), out_len);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    for (Eigen::Index m = 0; m < out_len; ++m) {
      // centre of output m on the upsampled grid, kernel index k = pos - i*up
      const long pos = static_cast<long>(m) * down + half;
      long i_lo = pos - 2 * half;
      i_lo = i_lo >= 0 ? (i_lo + up - 1) / up : -((-i_lo) / up);
      const long i_hi = pos >= 0 ? pos / up : -((-pos + up - 1) / up);
      double acc = 0.0;
      for (long i = i_lo; i <= i_hi; ++i) acc += h[pos - i * up] * x(c, reflect(i, n));
      y(c, m) = acc;
    }
  }
  return y;
}

}  // namespace pomni
