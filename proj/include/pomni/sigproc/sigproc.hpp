#pragma once

#include "pomni/sigproc/modality.hpp"

#include <Eigen/Core>

#include <stdexcept>
#include <vector>

namespace pomni {

/// channels x time, one row per channel.
using Signal = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class FilterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One biquad, a0 normalized to 1: b0 b1 b2 / a1 a2.
struct Biquad {
  double b0, b1, b2, a1, a2;
};
using Sos = std::vector<Biquad>;

/// Digital Butterworth sections via bilinear transform with prewarping.
Sos butter_lowpass(int order, double cutoff, double rate);
Sos butter_highpass(int order, double cutoff, double rate);
/// Second-order notch with quality factor q.
Biquad iir_notch(double freq, double q, double rate);

/// Magnitude response of a section cascade at `freq` Hz (single pass).
double sos_gain(const Sos& sos, double freq, double rate);

/// Forward-backward filtering of each row with odd-extension padding and
/// steady-state initial conditions.
Signal sosfiltfilt(const Sos& sos, const Signal& x);

/// Zero-phase 4th-order Butterworth band-pass (high-pass then low-pass).
Signal bandpass(const Signal& x, double low, double high, double rate);
/// Zero-phase Q=30 notch at each frequency; an empty list is the identity.
Signal notch(const Signal& x, const std::vector<double>& freqs, double rate);

/// Polyphase rational resampling (Kaiser-windowed sinc, beta 8, 64 taps per
/// phase, reflect-padded edges). Rates must be integers whose reduced ratio
/// has numerator and denominator <= 1000. Output length ceil(n * to / from).
Signal resample(const Signal& x, double from, double to);

/// Microvolts to model units.
inline Signal scale_normalize(const Signal& x) { return x / 100.0; }

/// Patches in channel-major order: patch i covers channel i / per_channel,
/// within-channel position i % per_channel.
struct PatchGrid {
  Modality modality = Modality::EEG;
  int channels = 0;
  int patch = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> patches;  // N x P
  std::vector<int> channel;
  std::vector<int> time;

  int count() const { return static_cast<int>(patches.rows()); }
  int per_channel() const { return channels > 0 ? count() / channels : 0; }
};

/// Throws std::invalid_argument when the length is not a multiple of P.
PatchGrid patchify(const Signal& x, Modality modality, int patch);
Signal unpatchify(const PatchGrid& grid);

/// Drops trailing samples so the length is a multiple of `patch`.
Signal trim_to_patches(const Signal& x, int patch);

/// Full front end: band-pass and notch at the source rate, resample to the
/// target rate, scale, trim to whole patches.
Signal preprocess(const Signal& x, double source_rate, const ModalitySpec& spec);

/// |DFT| bins 0..P/2 of a real patch, no normalization.
Eigen::VectorXd fourier_amplitude(const Eigen::VectorXd& patch);
/// (x - mean) / (std + 1e-5), population std.
Eigen::VectorXd zscore(const Eigen::VectorXd& x);
/// z-scored Fourier amplitude, length P/2 + 1. P must be even.
Eigen::VectorXd fourier_amplitude_target(const Eigen::VectorXd& patch);
inline Eigen::VectorXd zscore_target(const Eigen::VectorXd& patch) { return zscore(patch); }

/// Reconstruction target for a modality: Fourier amplitude for EEG/EMG,
/// z-scored raw patch for EOG/ECG. One row per patch.
Eigen::MatrixXd reconstruction_targets(const PatchGrid& grid);
int target_width(Modality m, int patch);

}  // namespace pomni
