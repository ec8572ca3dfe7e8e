#include "pomni/sigproc/sigproc.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <string>

namespace pomni {

PatchGrid patchify(const Signal& x, Modality modality, int patch) {
  if (patch <= 0 || x.cols() % patch != 0) {
    throw std::invalid_argument("patchify: length " + std::to_string(x.cols()) + " is not a multiple of patch size " +
                                std::to_string(patch));
  }
  PatchGrid g;
  g.modality = modality;
  g.channels = static_cast<int>(x.rows());
  g.patch = patch;
  const int per = static_cast<int>(x.cols() / patch);
  g.patches.resize(static_cast<Eigen::Index>(g.channels) * per, patch);
  for (int c = 0; c < g.channels; ++c) {
    for (int t = 0; t < per; ++t) {
      g.patches.row(static_cast<Eigen::Index>(c) * per + t) = x.row(c).segment(static_cast<Eigen::Index>(t) * patch, patch);
      g.channel.push_back(c);
      g.time.push_back(t);
    }
  }
  return g;
}

Signal unpatchify(const PatchGrid& grid) {
  const int per = grid.per_channel();
  Signal x(grid.channels, static_cast<Eigen::Index>(per) * grid.patch);
  for (int i = 0; i < grid.count(); ++i) {
    x.row(grid.channel[static_cast<std::size_t>(i)])
        .segment(static_cast<Eigen::Index>(grid.time[static_cast<std::size_t>(i)]) * grid.patch, grid.patch) =
        grid.patches.row(i);
  }
  return x;
}

Signal trim_to_patches(const Signal& x, int patch) {
  const Eigen::Index keep = x.cols() - x.cols() % patch;
  return x.leftCols(keep);
}

Signal preprocess(const Signal& x, double source_rate, const ModalitySpec& spec) {
  Signal y = bandpass(x, spec.band_low, spec.band_high, source_rate);
  y = notch(y, spec.notches, source_rate);
  y = resample(y, source_rate, spec.rate);
  return trim_to_patches(scale_normalize(y), spec.patch);
}

Eigen::VectorXd fourier_amplitude(const Eigen::VectorXd& patch) {
  Eigen::FFT<double> fft;
  std::vector<double> in(patch.data(), patch.data() + patch.size());
  std::vector<std::complex<double>> out;
  fft.fwd(out, in);
  const Eigen::Index bins = patch.size() / 2 + 1;
  Eigen::VectorXd amp(bins);
  for (Eigen::Index k = 0; k < bins; ++k) amp[k] = std::abs(out[static_cast<std::size_t>(k)]);
  return amp;
}

Eigen::VectorXd zscore(const Eigen::VectorXd& x) {
  const double mean = x.mean();
  const double sd = std::sqrt((x.array() - mean).square().mean());
  return (x.array() - mean) / (sd + 1e-5);
}

Eigen::VectorXd fourier_amplitude_target(const Eigen::VectorXd& patch) {
  if (patch.size() % 2 != 0) {
    throw std::invalid_argument("fourier_amplitude_target: odd patch length " + std::to_string(patch.size()));
  }
  return zscore(fourier_amplitude(patch));
}

int target_width(Modality m, int patch) {
  return (m == Modality::EEG || m == Modality::EMG) ? patch / 2 + 1 : patch;
}

Eigen::MatrixXd reconstruction_targets(const PatchGrid& grid) {
  Eigen::MatrixXd out(grid.count(), target_width(grid.modality, grid.patch));
  const bool spectral = grid.modality == Modality::EEG || grid.modality == Modality::EMG;
  for (int i = 0; i < grid.count(); ++i) {
    const Eigen::VectorXd p = grid.patches.row(i).transpose();
    out.row(i) = (spectral ? fourier_amplitude_target(p) : zscore_target(p)).transpose();
  }
  return out;
}

}  // namespace pomni
