#include "pomni/sigproc/sigproc.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <string>

namespace pomni {
namespace {

using cd = std::complex<double>;

void check_edge(const char* what, double freq, double rate) {
  if (!(rate > 0.0) || !(freq > 0.0) || !(freq < rate / 2.0)) {
    throw FilterError(std::string(what) + ": frequency " + std::to_string(freq) + " Hz outside (0, " +
                      std::to_string(rate / 2.0) + ") at rate " + std::to_string(rate));
  }
}

// Bilinear-transformed Butterworth with poles paired into biquads; a real
// pole (odd order) becomes a first-order section.
Sos butter(int order, double cutoff, double rate, bool highpass) {
  if (order < 1) throw FilterError("butterworth: order must be >= 1");
  check_edge(highpass ? "highpass" : "lowpass", cutoff, rate);
  const double fs2 = 2.0 * rate;
  const double warped = fs2 * std::tan(std::numbers::pi * cutoff / rate);
  const double zero = highpass ? 1.0 : -1.0;
  const cd ref = highpass ? cd(-1.0, 0.0) : cd(1.0, 0.0);

  Sos sos;
  for (int k = 0; k < (order + 1) / 2; ++k) {
    const cd proto = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    const cd s = highpass ? warped / proto : warped * proto;
    const cd z = (fs2 + s) / (fs2 - s);
    Biquad q{};
    if (std::abs(z.imag()) < 1e-12) {
      q = {1.0, -zero, 0.0, -z.real(), 0.0};
    } else {
      q = {1.0, -2.0 * zero, zero * zero, -2.0 * z.real(), std::norm(z)};
    }
    // unity gain at DC (low-pass) or Nyquist (high-pass)
    const cd num = q.b0 + q.b1 / ref + q.b2 / (ref * ref);
    const cd den = 1.0 + q.a1 / ref + q.a2 / (ref * ref);
    const double g = std::abs(den / num);
    q.b0 *= g;
    q.b1 *= g;
    q.b2 *= g;
    sos.push_back(q);
  }
  return sos;
}

// Direct form II transposed over one row, state (z0, z1) per section.
void sosfilt_row(const Sos& sos, Eigen::Ref<Eigen::VectorXd> x, std::vector<double> state) {
  for (Eigen::Index n = 0; n < x.size(); ++n) {
    double v = x[n];
    for (std::size_t s = 0; s < sos.size(); ++s) {
      const Biquad& q = sos[s];
      double& z0 = state[2 * s];
      double& z1 = state[2 * s + 1];
      const double y = q.b0 * v + z0;
      z0 = q.b1 * v - q.a1 * y + z1;
      z1 = q.b2 * v - q.a2 * y;
      v = y;
    }
    x[n] = v;
  }
}

// Steady-state states for a unit step, scaled through the cascade.
std::vector<double> step_state(const Sos& sos) {
  std::vector<double> zi(2 * sos.size());
  double scale = 1.0;
  for (std::size_t s = 0; s < sos.size(); ++s) {
    const Biquad& q = sos[s];
    const double g = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    const double z1 = q.b2 - q.a2 * g;
    const double z0 = q.b1 - q.a1 * g + z1;
    zi[2 * s] = scale * z0;
    zi[2 * s + 1] = scale * z1;
    scale *= g;
  }
  return zi;
}

std::vector<double> scaled(std::vector<double> v, double s) {
  for (double& x : v) x *= s;
  return v;
}

}  // namespace

Sos butter_lowpass(int order, double cutoff, double rate) { return butter(order, cutoff, rate, false); }
Sos butter_highpass(int order, double cutoff, double rate) { return butter(order, cutoff, rate, true); }

Biquad iir_notch(double freq, double q, double rate) {
  check_edge("notch", freq, rate);
  const double w0 = 2.0 * std::numbers::pi * freq / rate;
  const double bw = w0 / q;
  const double gain = 1.0 / (1.0 + std::tan(bw / 2.0));
  return {gain, -2.0 * gain * std::cos(w0), gain, -2.0 * gain * std::cos(w0), 2.0 * gain - 1.0};
}

double sos_gain(const Sos& sos, double freq, double rate) {
  const cd zi = std::polar(1.0, -2.0 * std::numbers::pi * freq / rate);  // z^-1
  cd h = 1.0;
  for (const auto& q : sos) h *= (q.b0 + q.b1 * zi + q.b2 * zi * zi) / (1.0 + q.a1 * zi + q.a2 * zi * zi);
  return std::abs(h);
}

Signal sosfiltfilt(const Sos& sos, const Signal& x) {
  const Eigen::Index n = x.cols();
  Signal out(x.rows(), n);
  if (n == 0 || sos.empty()) return x;
  Eigen::Index pad = 3 * (2 * static_cast<Eigen::Index>(sos.size()) + 1);
  pad = std::min(pad, n - 1);
  const auto zi = step_state(sos);
  Eigen::VectorXd ext(n + 2 * pad);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const auto row = x.row(c);
    for (Eigen::Index i = 0; i < pad; ++i) {
      ext[i] = 2.0 * row[0] - row[pad - i];
      ext[pad + n + i] = 2.0 * row[n - 1] - row[n - 2 - i];
    }
    ext.segment(pad, n) = row.transpose();
    sosfilt_row(sos, ext, scaled(zi, ext[0]));
    ext.reverseInPlace();
    sosfilt_row(sos, ext, scaled(zi, ext[0]));
    ext.reverseInPlace();
    out.row(c) = ext.segment(pad, n).transpose();
  }
  return out;
}

Signal bandpass(const Signal& x, double low, double high, double rate) {
  if (!(low < high)) {
    throw FilterError("bandpass: low edge " + std::to_string(low) + " not below high edge " + std::to_string(high));
  }
  Sos sos = butter_highpass(4, low, rate);
  for (const auto& q : butter_lowpass(4, high, rate)) sos.push_back(q);
  return sosfiltfilt(sos, x);
}

Signal notch(const Signal& x, const std::vector<double>& freqs, double rate) {
  Signal y = x;
  for (double f : freqs) y = sosfiltfilt(Sos{iir_notch(f, 30.0, rate)}, y);
  return y;
}

}  // namespace pomni
