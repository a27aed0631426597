#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "vsep/dsp.hpp"
#include "vsep/metrics.hpp"

using namespace vsep;

namespace {

// Orthonormal sine references on a common length.
std::vector<Waveform> orthonormal_refs(int len) {
  std::vector<Waveform> refs(2);
  for (auto& r : refs) {
    r.sample_rate = 8000.0;
    r.samples.assign(static_cast<size_t>(len), 0.0);
  }
  const double norm = std::sqrt(len / 2.0);
  for (int i = 0; i < len; ++i) {
    refs[0].samples[static_cast<size_t>(i)] = std::sin(2.0 * std::numbers::pi * 8.0 * i / len) / norm;
    refs[1].samples[static_cast<size_t>(i)] = std::sin(2.0 * std::numbers::pi * 16.0 * i / len) / norm;
  }
  return refs;
}

Waveform scaled(const Waveform& w, double c) {
  Waveform out = w;
  for (auto& v : out.samples) v *= c;
  return out;
}

}  // namespace

TEST_CASE("exact estimate caps all three ratios", "[metrics]") {
  auto refs = orthonormal_refs(256);
  auto s = bss_eval(refs[0], refs, 0);
  CHECK(s.sdr == 100.0);
  CHECK(s.sir == 100.0);
  CHECK(s.sar == 100.0);
  CHECK(s.capped());
}

TEST_CASE("interference-only estimate scores 20 dB", "[metrics]") {
  auto refs = orthonormal_refs(256);
  Waveform est = refs[0];
  for (size_t i = 0; i < est.samples.size(); ++i) est.samples[i] += 0.1 * refs[1].samples[i];
  auto s = bss_eval(est, refs, 0);
  CHECK(s.sdr == Catch::Approx(20.0).margin(0.01));
  CHECK(s.sir == Catch::Approx(20.0).margin(0.01));
  CHECK(s.sar_capped);  // no artifact component at all
  CHECK(s.sar == 100.0);
}

TEST_CASE("artifact-only estimate scores 20 dB with capped SIR", "[metrics]") {
  const int len = 256;
  auto refs = orthonormal_refs(len);
  // w orthogonal to span(s1, s2): a third sine.
  Waveform est = refs[0];
  const double norm = std::sqrt(len / 2.0);
  for (int i = 0; i < len; ++i) {
    est.samples[static_cast<size_t>(i)] += 0.1 * std::sin(2.0 * std::numbers::pi * 24.0 * i / len) / norm;
  }
  auto s = bss_eval(est, refs, 0);
  CHECK(s.sdr == Catch::Approx(20.0).margin(0.01));
  CHECK(s.sar == Catch::Approx(20.0).margin(0.01));
  CHECK(s.sir_capped);
}

TEST_CASE("bss_eval is scale invariant", "[metrics]") {
  std::mt19937_64 rng(71);
  std::normal_distribution<double> d(0.0, 0.3);
  std::vector<Waveform> refs(3);
  for (auto& r : refs) {
    r.sample_rate = 8000.0;
    r.samples.resize(400);
    for (auto& v : r.samples) v = d(rng);
  }
  Waveform est;
  est.sample_rate = 8000.0;
  est.samples.resize(400);
  for (size_t i = 0; i < est.samples.size(); ++i) {
    est.samples[i] = refs[0].samples[i] + 0.3 * refs[1].samples[i] + 0.05 * d(rng);
  }
  auto base = bss_eval(est, refs, 0);
  for (double c : {0.1, 10.0}) {
    auto s = bss_eval(scaled(est, c), refs, 0);
    CHECK(std::abs(s.sdr - base.sdr) < 1e-9);
    CHECK(std::abs(s.sir - base.sir) < 1e-9);
    CHECK(std::abs(s.sar - base.sar) < 1e-9);
  }
}

TEST_CASE("decomposition reconstructs the estimate with orthogonal parts", "[metrics]") {
  // Recompute the three components the same way bss_eval defines them and
  // verify exactness and orthogonality.
  std::mt19937_64 rng(72);
  std::normal_distribution<double> d(0.0, 0.5);
  const int len = 300;
  std::vector<Waveform> refs(2);
  for (auto& r : refs) {
    r.sample_rate = 8000.0;
    r.samples.resize(static_cast<size_t>(len));
    for (auto& v : r.samples) v = d(rng);
  }
  Waveform est;
  est.sample_rate = 8000.0;
  est.samples.resize(static_cast<size_t>(len));
  for (auto& v : est.samples) v = d(rng);

  auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  };

  const double coef = dot(est.samples, refs[0].samples) / dot(refs[0].samples, refs[0].samples);
  std::vector<double> s_target(est.samples.size());
  for (size_t i = 0; i < est.samples.size(); ++i) s_target[i] = coef * refs[0].samples[i];

  // Projection onto span via the normal equations.
  const double g00 = dot(refs[0].samples, refs[0].samples);
  const double g01 = dot(refs[0].samples, refs[1].samples);
  const double g11 = dot(refs[1].samples, refs[1].samples);
  const double r0 = dot(refs[0].samples, est.samples);
  const double r1 = dot(refs[1].samples, est.samples);
  const double det = g00 * g11 - g01 * g01;
  const double c0 = (g11 * r0 - g01 * r1) / det;
  const double c1 = (g00 * r1 - g01 * r0) / det;
  std::vector<double> e_interf(est.samples.size()), e_artif(est.samples.size());
  for (size_t i = 0; i < est.samples.size(); ++i) {
    const double p = c0 * refs[0].samples[i] + c1 * refs[1].samples[i];
    e_interf[i] = p - s_target[i];
    e_artif[i] = est.samples[i] - p;
  }
  double recon_err = 0.0, est_norm = 0.0;
  for (size_t i = 0; i < est.samples.size(); ++i) {
    const double recon = s_target[i] + e_interf[i] + e_artif[i];
    recon_err += (recon - est.samples[i]) * (recon - est.samples[i]);
    est_norm += est.samples[i] * est.samples[i];
  }
  CHECK(std::sqrt(recon_err / est_norm) < 1e-10);
  const double n_t = std::sqrt(dot(s_target, s_target));
  const double n_i = std::sqrt(dot(e_interf, e_interf));
  const double n_a = std::sqrt(dot(e_artif, e_artif));
  CHECK(std::abs(dot(s_target, e_artif)) < 1e-10 * n_t * n_a);
  CHECK(std::abs(dot(e_interf, e_artif)) < 1e-10 * n_i * n_a);

  // And bss_eval agrees with the hand-computed ratios.
  auto s = bss_eval(est, refs, 0);
  double err_total = 0.0;
  for (size_t i = 0; i < est.samples.size(); ++i) {
    err_total += (e_interf[i] + e_artif[i]) * (e_interf[i] + e_artif[i]);
  }
  CHECK(s.sdr == Catch::Approx(10.0 * std::log10(dot(s_target, s_target) / err_total)).margin(1e-9));
}

TEST_CASE("ideal binary masks reach the oracle SDR floor on disjoint tones", "[metrics]") {
  const int clip = kDefaultClipLen;
  std::vector<Waveform> tones(2);
  for (int k = 0; k < 2; ++k) {
    tones[static_cast<size_t>(k)].sample_rate = kDefaultSampleRate;
    tones[static_cast<size_t>(k)].samples.resize(static_cast<size_t>(clip));
    const double f = k == 0 ? 500.0 : 2000.0;
    for (int i = 0; i < clip; ++i) {
      tones[static_cast<size_t>(k)].samples[static_cast<size_t>(i)] =
          0.3 * std::sin(2.0 * std::numbers::pi * f * i / kDefaultSampleRate);
    }
  }
  auto mixture = mix(tones);
  auto spec = stft(mixture, kDefaultWindowLen, kDefaultHopLen);
  std::vector<MagnitudeSpectrogram> mags;
  for (const auto& t : tones) mags.push_back(magnitude(stft(t, kDefaultWindowLen, kDefaultHopLen)));
  for (int k = 0; k < 2; ++k) {
    auto mask = ideal_binary_mask(mags, k);
    RealGrid soft(mask.bits.rows, mask.bits.cols);
    for (std::int64_t i = 0; i < mask.bits.size(); ++i) soft.v[i] = mask.bits.v[i];
    auto est = istft(apply_mask(soft, spec));
    std::vector<Waveform> refs = tones;
    for (auto& r : refs) r.samples.resize(est.samples.size());
    CHECK(bss_eval(est, refs, k).sdr > 20.0);
  }
}

TEST_CASE("degenerate references are rejected", "[metrics]") {
  std::vector<Waveform> refs(2);
  refs[0].sample_rate = refs[1].sample_rate = 8000.0;
  refs[0].samples.assign(100, 0.0);  // zero energy target
  refs[1].samples.assign(100, 0.1);
  Waveform est = refs[1];
  REQUIRE_THROWS_WITH(bss_eval(est, refs, 0), Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("aggregate averages per metric over uncapped entries", "[metrics]") {
  EvalScores a;
  a.sdr = 10.0;
  a.sir = 12.0;
  a.sar = 9.0;
  auto single = aggregate({a});
  CHECK(single.mean_sdr == 10.0);
  CHECK(single.mean_sir == 12.0);
  CHECK(single.count == 1);

  EvalScores b;
  b.sdr = 20.0;
  b.sir = 100.0;
  b.sir_capped = true;
  b.sar = 15.0;
  auto two = aggregate({a, b});
  CHECK(two.mean_sdr == 15.0);
  CHECK(two.mean_sir == 12.0);  // capped entry excluded per metric
  CHECK(two.sir_capped == 1);
  CHECK(two.mean_sar == 12.0);

  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> u(-5.0, 25.0);
  std::vector<EvalScores> many(17);
  double sum = 0.0;
  for (auto& s : many) {
    s.sdr = u(rng);
    s.sir = u(rng);
    s.sar = u(rng);
    sum += s.sdr;
  }
  CHECK(aggregate(many).mean_sdr == Catch::Approx(sum / 17.0).margin(1e-12));

  REQUIRE_THROWS_AS(aggregate({}), ValueError);
}
