#include "latchkit/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "latchkit/ops.hpp"
#include "latchkit/training.hpp"

LATCHKIT_BEGIN_NAMESPACE

double control_distance(ControlKind kind, const Tensor& extracted, const Tensor& target) {
  if (extracted.shape() != target.shape())
    throw ShapeError(std::string(kind_name(kind)) + " track " + to_string(extracted.shape()) +
                     " does not match target " + to_string(target.shape()));
  NoGradGuard ng;
  if (kind == ControlKind::kIntensity) return ops::mse(extracted, target).item();
  return ops::bce_prob(extracted, target).item();
}

std::map<ControlKind, double> alignment(const Tensor& wave, const std::vector<ControlTrack>& targets) {
  NoGradGuard ng;
  std::map<ControlKind, double> out;
  for (const auto& t : targets) out[t.kind] = control_distance(t.kind, extract(t.kind, wave), t.values);
  return out;
}

namespace {

constexpr int kFft = 512;
constexpr int kFftHop = 256;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const Eigen::MatrixXd& filterbank() {
  static const Eigen::MatrixXd fb = [] {
    const int bins = kFft / 2 + 1;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(bins, kBands);
    const double top = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kBands + 2);
    for (int i = 0; i < kBands + 2; ++i) edges[size_t(i)] = mel_to_hz(top * i / (kBands + 1));
    for (int b = 0; b < kBands; ++b) {
      const double lo = edges[size_t(b)], mid = edges[size_t(b + 1)], hi = edges[size_t(b + 2)];
      for (int k = 0; k < bins; ++k) {
        const double f = double(k) * kSampleRate / kFft;
        if (f > lo && f < hi) m(k, b) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      }
    }
    return m;
  }();
  return fb;
}

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Gaussian fit(const std::vector<std::vector<double>>& x) {
  if (x.size() < 2) throw InvalidArgument("frechet distance needs at least two feature vectors per set");
  const auto d = Eigen::Index(x[0].size());
  Eigen::MatrixXd m(Eigen::Index(x.size()), d);
  for (size_t i = 0; i < x.size(); ++i) {
    if (Eigen::Index(x[i].size()) != d) throw ShapeError("frechet distance: feature lengths differ");
    for (Eigen::Index j = 0; j < d; ++j) m(Eigen::Index(i), j) = x[i][size_t(j)];
  }
  Gaussian g;
  g.mean = m.colwise().mean();
  Eigen::MatrixXd c = m.rowwise() - g.mean.transpose();
  g.cov = c.transpose() * c / double(x.size() - 1);
  return g;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

std::vector<double> band_energies(std::span<const real> wave) {
  if (wave.size() < size_t(kFft)) throw ShapeError("band energies need at least 512 samples");
  NoGradGuard ng;
  Tensor mag = stft_magnitude(Tensor::from({int64_t(wave.size())}, std::vector<real>(wave.begin(), wave.end())),
                              kFft, kFftHop);
  const auto frames = mag.dim(0), bins = mag.dim(1);
  Eigen::MatrixXd power(frames, bins);
  auto v = mag.data();
  for (Eigen::Index f = 0; f < frames; ++f)
    for (Eigen::Index k = 0; k < bins; ++k) {
      const double a = v[size_t(f * bins + k)];
      power(f, k) = a * a;
    }
  Eigen::MatrixXd bands = ((power * filterbank()).array() + 1e-10).log().matrix();
  Eigen::VectorXd mean = bands.colwise().mean();
  return {mean.data(), mean.data() + mean.size()};
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  const Gaussian ga = fit(a), gb = fit(b);
  if (ga.mean.size() != gb.mean.size()) throw ShapeError("frechet distance: feature lengths differ");
  const Eigen::MatrixXd ra = psd_sqrt(ga.cov);
  const Eigen::MatrixXd cross = psd_sqrt(ra * gb.cov * ra);
  const double d = (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sign_test_p(int wins, int trials) {
  if (trials < 0 || wins < 0 || wins > trials) throw InvalidArgument("sign test: need 0 <= wins <= trials");
  double p = 0;
  for (int k = wins; k <= trials; ++k)
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) -
                  trials * std::log(2.0));
  return std::min(p, 1.0);
}

LATCHKIT_END_NAMESPACE
