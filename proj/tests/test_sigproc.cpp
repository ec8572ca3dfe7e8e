#include "pomni/sigproc/sigproc.hpp"
#include "support/spectral.hpp"

#include <doctest.h>

using namespace pomni;
using namespace pomni::testing;
using Approx = doctest::Approx;

namespace {

Signal row(const Eigen::VectorXd& v) { return v.transpose(); }
Eigen::VectorXd flat(const Signal& s) { return s.row(0).transpose(); }

double db(double ratio) { return 20.0 * std::log10(ratio); }

}  // namespace

TEST_CASE("alignment factors follow patch durations") {
  const auto eeg = default_spec(Modality::EEG);
  CHECK(alignment_factor(eeg, eeg) == 1);
  CHECK(alignment_factor(default_spec(Modality::EOG), eeg) == 2);
  CHECK(alignment_factor(default_spec(Modality::ECG), eeg) == 5);
  CHECK(alignment_factor(default_spec(Modality::EMG), eeg) == 5);
  ModalitySpec odd = default_spec(Modality::ECG);
  odd.patch = 300;
  CHECK_THROWS_AS(alignment_factor(odd, eeg), std::invalid_argument);
}

TEST_CASE("default specs satisfy band and notch limits") {
  for (Modality m : kAllModalities) {
    const auto s = default_spec(m);
    CHECK(s.band_low > 0.0);
    CHECK(s.band_low < s.band_high);
    CHECK(s.band_high < s.rate / 2.0);
    for (double f : s.notches) CHECK(f < 1000.0 / 2.0);
    CHECK(parse_modality(modality_name(m)) == m);
  }
  CHECK(parse_modality("ECG") == Modality::ECG);
  CHECK_FALSE(parse_modality("ppg").has_value());
}

TEST_CASE("band-pass keeps an in-band tone") {
  // long record: the 0.1 Hz edge settles slowly
  const auto y = bandpass(row(sine(10.0, 200.0, 20000)), 0.1, 75.0, 200.0);
  const double a = tone_amplitude(flat(y), 10.0, 200.0, 4000);
  CHECK(a >= 0.71);
  CHECK(a <= 1.0 + 1e-6);
}

TEST_CASE("band-pass removes DC") {
  const auto y = bandpass(Signal::Constant(1, 4000, 1.0), 0.1, 75.0, 200.0);
  CHECK(flat(y).segment(1000, 2000).cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("band-pass of zeros is zero") {
  const auto y = bandpass(Signal::Zero(2, 500), 0.5, 60.0, 500.0);
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("band-pass attenuates one octave outside the band by 20 dB") {
  const double rate = 1000.0;
  for (auto [low, high] : {std::pair{5.0, 50.0}, std::pair{0.5, 60.0}, std::pair{5.0, 200.0}}) {
    CAPTURE(low);
    CAPTURE(high);
    const Eigen::Index n = low < 1.0 ? 40000 : 8000;
    const Eigen::Index trim = n / 4;
    const double centre = std::sqrt(low * high);
    const double pass = tone_amplitude(flat(bandpass(row(sine(centre, rate, n)), low, high, rate)), centre, rate, trim);
    CHECK(db(pass) >= -3.0);
    const double above = tone_amplitude(flat(bandpass(row(sine(2 * high, rate, n)), low, high, rate)), 2 * high, rate, trim);
    CHECK(db(above) <= -20.0);
    const double below = tone_amplitude(flat(bandpass(row(sine(low / 2, rate, n)), low, high, rate)), low / 2, rate, trim);
    CHECK(db(below) <= -20.0);
  }
}

TEST_CASE("band edges at or above Nyquist are rejected") {
  CHECK_THROWS_AS(bandpass(Signal::Zero(1, 100), 0.1, 100.0, 200.0), FilterError);
  CHECK_THROWS_AS(bandpass(Signal::Zero(1, 100), 0.0, 50.0, 200.0), FilterError);
  CHECK_THROWS_AS(notch(Signal::Zero(1, 100), {150.0}, 200.0), FilterError);
}

TEST_CASE("notch removes the line frequency and spares neighbours") {
  const double rate = 500.0;
  const auto hum = notch(row(sine(50.0, rate, 5000)), {50.0}, rate);
  const double residual = tone_amplitude(flat(hum), 50.0, rate, 1000);
  CHECK(residual < 0.04);
  CHECK(db(residual) <= -30.0);
  for (double f : {10.0, 40.0, 60.0}) {
    CAPTURE(f);
    const auto y = notch(row(sine(f, rate, 5000)), {50.0}, rate);
    CHECK(std::abs(db(tone_amplitude(flat(y), f, rate, 1000))) <= 1.0);
  }
}

TEST_CASE("empty notch list is the identity") {
  const Signal x = row(sine(13.0, 500.0, 300));
  CHECK(notch(x, {}, 500.0) == x);
}

TEST_CASE("filters are linear and zero-phase") {
  const double rate = 200.0;
  const Signal a = row(sine(7.0, rate, 1200) + 0.3 * sine(31.0, rate, 1200, 1.0, 0.4));
  const Signal b = row(sine(3.0, rate, 1200, 2.0, 1.1));
  auto f = [&](const Signal& s) { return notch(bandpass(s, 0.1, 75.0, rate), {50.0}, rate); };
  const Signal lhs = f(2.5 * a - 0.7 * b);
  const Signal rhs = 2.5 * f(a) - 0.7 * f(b);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-5);

  const Eigen::VectorXd raw = sine(10.0, rate, 1200);
  const Eigen::VectorXd out = flat(f(row(raw)));
  int best_lag = 99;
  double best = -1e300;
  for (int lag = -10; lag <= 10; ++lag) {
    double acc = 0.0;
    for (Eigen::Index i = 200; i < 1000; ++i) acc += raw[i] * out[i + lag];
    if (acc > best) {
      best = acc;
      best_lag = lag;
    }
  }
  CHECK(best_lag == 0);
}

TEST_CASE("resampling preserves a tone") {
  struct Case {
    double from, to, freq;
  };
  for (const Case c : {Case{1000, 500, 5}, Case{1000, 200, 75}, Case{200, 500, 75}, Case{500, 200, 79},
                       Case{1000, 500, 190}, Case{256, 200, 60}}) {
    CAPTURE(c.from);
    CAPTURE(c.to);
    CAPTURE(c.freq);
    const Eigen::Index n = static_cast<Eigen::Index>(c.from * 4);
    const Signal y = resample(row(sine(c.freq, c.from, n, 1.0, 0.3)), c.from, c.to);
    const Eigen::VectorXd ref = sine(c.freq, c.to, y.cols(), 1.0, 0.3);
    const Eigen::Index m = y.cols() - 200;
    const double rms = std::sqrt((flat(y).segment(100, m) - ref.segment(100, m)).squaredNorm() / static_cast<double>(m));
    CHECK(rms < 0.02);
  }
}

TEST_CASE("resampling length, identity and parameter errors") {
  const Signal x = row(sine(3.0, 1000.0, 1234));
  CHECK(resample(x, 1000, 1000) == x);
  for (Eigen::Index n : {1, 7, 100, 1001, 2345}) {
    for (auto [from, to] : {std::pair{1000.0, 500.0}, std::pair{1000.0, 200.0}, std::pair{200.0, 500.0}, std::pair{441.0, 480.0}}) {
      const auto y = resample(Signal::Zero(1, n), from, to);
      CHECK(std::abs(static_cast<double>(y.cols()) - std::round(static_cast<double>(n) * to / from)) <= 1.0);
    }
  }
  CHECK_THROWS_AS(resample(x, 1000, 200.5), FilterError);
  CHECK_THROWS_AS(resample(x, 1009, 1000), FilterError);
  CHECK_THROWS_AS(resample(x, 0, 1000), FilterError);
}

TEST_CASE("scaling divides microvolts by 100") {
  Signal x(1, 3);
  x << 250.0, 0.0, -100.0;
  const Signal y = scale_normalize(x);
  CHECK(y(0, 0) == Approx(2.5));
  CHECK(y(0, 1) == 0.0);
  CHECK(y(0, 2) == Approx(-1.0));
}

TEST_CASE("patchify counts, order and inverse") {
  Signal eeg = Signal::Random(2, 400);
  const auto g = patchify(eeg, Modality::EEG, 200);
  CHECK(g.count() == 4);
  CHECK(g.channel == std::vector<int>{0, 0, 1, 1});
  CHECK(g.time == std::vector<int>{0, 1, 0, 1});
  CHECK(g.patches.row(3) == eeg.row(1).segment(200, 200));
  CHECK(unpatchify(g) == eeg);
  CHECK(patchify(Signal::Zero(1, 500), Modality::ECG, 100).count() == 5);
  CHECK_THROWS_AS(patchify(Signal::Zero(2, 401), Modality::EEG, 200), std::invalid_argument);
  CHECK(trim_to_patches(Signal::Zero(2, 401), 200).cols() == 400);
}

TEST_CASE("Fourier amplitude agrees with a direct DFT") {
  Eigen::VectorXd c = Eigen::VectorXd::Constant(100, 0.7);
  const auto dc = fourier_amplitude(c);
  CHECK(dc[0] == Approx(70.0));
  CHECK(dc.tail(dc.size() - 1).cwiseAbs().maxCoeff() < 1e-9);

  for (int k : {1, 7, 25, 49}) {
    Eigen::VectorXd x(100);
    for (int t = 0; t < 100; ++t) x[t] = std::cos(2.0 * std::numbers::pi * k * t / 100.0);
    const auto amp = fourier_amplitude(x);
    const auto ref = direct_dft_magnitude(x);
    REQUIRE(amp.size() == 51);
    CHECK((amp - ref).cwiseAbs().maxCoeff() < 1e-6);
    for (int b = 0; b < 51; ++b) {
      if (b != k) CHECK(std::abs(amp[b]) < 1e-6);
    }
    CHECK(amp[k] == Approx(50.0));
  }
  const Eigen::VectorXd r = Eigen::VectorXd::Random(200);
  CHECK((fourier_amplitude(r) - direct_dft_magnitude(r)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(fourier_amplitude(r) == fourier_amplitude(-r));
}

TEST_CASE("z-scored targets") {
  const Eigen::VectorXd r = 30.0 * Eigen::VectorXd::Random(200);
  const auto t = fourier_amplitude_target(r);
  CHECK(t.size() == 101);
  CHECK(std::abs(t.mean()) < 1e-5);
  CHECK(std::sqrt((t.array() - t.mean()).square().mean()) == Approx(1.0).epsilon(1e-5));
  CHECK(zscore_target(Eigen::VectorXd::Constant(10, 3.0)).cwiseAbs().maxCoeff() == 0.0);
  Eigen::VectorXd pm(2);
  pm << -1.0, 1.0;
  const auto z = zscore_target(pm);
  CHECK(z[0] == Approx(-1.0 / (1.0 + 1e-5)));
  CHECK(z[1] == Approx(1.0 / (1.0 + 1e-5)));
  CHECK_THROWS_AS(fourier_amplitude_target(Eigen::VectorXd::Zero(101)), std::invalid_argument);
  CHECK(target_width(Modality::EEG, 200) == 101);
  CHECK(target_width(Modality::ECG, 100) == 100);
  CHECK(target_width(Modality::EMG, 100) == 51);
}

TEST_CASE("preprocess yields whole patches at the target rate") {
  const Signal raw = 50.0 * row(sine(10.0, 1000.0, 2000));
  const auto eeg = preprocess(raw, 1000.0, default_spec(Modality::EEG));
  CHECK(eeg.cols() == 400);
  const auto ecg = preprocess(raw, 1000.0, default_spec(Modality::ECG));
  CHECK(ecg.cols() == 1000);
  CHECK(tone_amplitude(flat(eeg), 10.0, 200.0, 80) == Approx(0.5).epsilon(0.05));
}
