#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "vsep/common.hpp"
#include "vsep/dsp.hpp"

namespace vsep {

// A ratio whose denominator underflows is capped at +100 dB (and -100 dB for
// a vanishing numerator) so aggregates stay finite.
struct EvalScores {
  double sdr = 0.0;
  double sir = 0.0;
  double sar = 0.0;
  bool sdr_capped = false;
  bool sir_capped = false;
  bool sar_capped = false;

  bool capped() const { return sdr_capped || sir_capped || sar_capped; }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double energy(const std::vector<double>& a) { return dot(a, a); }

// Solves the small (N<=4) Gram system with partial pivoting.
inline std::vector<double> solve(std::vector<std::vector<double>> m, std::vector<double> rhs) {
  const size_t n = rhs.size();
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    }
    if (std::abs(m[piv][col]) < 1e-300) throw ValueError("degenerate reference");
    std::swap(m[col], m[piv]);
    std::swap(rhs[col], rhs[piv]);
    for (size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
      rhs[r] -= f * rhs[col];
    }
  }
  std::vector<double> x(n);
  for (size_t i = n; i-- > 0;) {
    double acc = rhs[i];
    for (size_t c = i + 1; c < n; ++c) acc -= m[i][c] * x[c];
    x[i] = acc / m[i][i];
  }
  return x;
}

inline double ratio_db(double num, double den, bool* capped) {
  if (den <= num * 1e-20) {
    *capped = true;
    return 100.0;
  }
  if (num <= den * 1e-20) {
    *capped = true;
    return -100.0;
  }
  *capped = false;
  return 10.0 * std::log10(num / den);
}

}  // namespace detail

// Projection-based (filter-free) BSS-eval decomposition:
//   s_target = projection of the estimate onto the target reference,
//   e_interf = projection onto span(references) minus s_target,
//   e_artif  = estimate minus its span projection.
inline EvalScores bss_eval(const Waveform& estimate, const std::vector<Waveform>& references,
                           int target_index) {
  if (references.empty()) throw ValueError("bss_eval: no references");
  if (target_index < 0 || target_index >= static_cast<int>(references.size())) {
    throw ValueError("bss_eval: target index out of range");
  }
  const auto len = estimate.size();
  for (const auto& r : references) {
    if (r.size() != len) throw ValueError("bss_eval: length mismatch");
    if (r.sample_rate != estimate.sample_rate) throw ValueError("bss_eval: sample rate mismatch");
  }
  const size_t n_ref = references.size();
  const auto& est = estimate.samples;
  const auto& tgt = references[static_cast<size_t>(target_index)].samples;

  const double tgt_energy = detail::energy(tgt);
  if (tgt_energy <= 0.0) throw ValueError("degenerate reference");

  // s_target
  const double coef = detail::dot(est, tgt) / tgt_energy;
  std::vector<double> s_target(est.size());
  for (size_t i = 0; i < est.size(); ++i) s_target[i] = coef * tgt[i];

  // Projection onto the span of all references via the Gram system.
  std::vector<std::vector<double>> gram(n_ref, std::vector<double>(n_ref));
  std::vector<double> rhs(n_ref);
  for (size_t a = 0; a < n_ref; ++a) {
    for (size_t b = 0; b <= a; ++b) {
      gram[a][b] = gram[b][a] = detail::dot(references[a].samples, references[b].samples);
    }
    rhs[a] = detail::dot(references[a].samples, est);
  }
  const auto coefs = detail::solve(gram, rhs);
  std::vector<double> p_all(est.size(), 0.0);
  for (size_t r = 0; r < n_ref; ++r) {
    for (size_t i = 0; i < est.size(); ++i) p_all[i] += coefs[r] * references[r].samples[i];
  }

  std::vector<double> e_interf(est.size()), e_artif(est.size()), s_plus_i(est.size()),
      err_total(est.size());
  for (size_t i = 0; i < est.size(); ++i) {
    e_interf[i] = p_all[i] - s_target[i];
    e_artif[i] = est[i] - p_all[i];
    s_plus_i[i] = s_target[i] + e_interf[i];
    err_total[i] = e_interf[i] + e_artif[i];
  }

  EvalScores s;
  const double target_e = detail::energy(s_target);
  s.sdr = detail::ratio_db(target_e, detail::energy(err_total), &s.sdr_capped);
  s.sir = detail::ratio_db(target_e, detail::energy(e_interf), &s.sir_capped);
  s.sar = detail::ratio_db(detail::energy(s_plus_i), detail::energy(e_artif), &s.sar_capped);
  return s;
}

// Per-metric arithmetic mean over uncapped entries, with cap counts reported
// separately.
struct EvalSummary {
  double mean_sdr = 0.0, mean_sir = 0.0, mean_sar = 0.0;
  int count = 0;
  int sdr_uncapped = 0, sir_uncapped = 0, sar_uncapped = 0;
  int sdr_capped = 0, sir_capped = 0, sar_capped = 0;
};

inline EvalSummary aggregate(const std::vector<EvalScores>& scores) {
  if (scores.empty()) throw ValueError("aggregate: empty score list");
  EvalSummary s;
  s.count = static_cast<int>(scores.size());
  for (const auto& e : scores) {
    if (e.sdr_capped) {
      ++s.sdr_capped;
    } else {
      s.mean_sdr += e.sdr;
      ++s.sdr_uncapped;
    }
    if (e.sir_capped) {
      ++s.sir_capped;
    } else {
      s.mean_sir += e.sir;
      ++s.sir_uncapped;
    }
    if (e.sar_capped) {
      ++s.sar_capped;
    } else {
      s.mean_sar += e.sar;
      ++s.sar_uncapped;
    }
  }
  if (s.sdr_uncapped) s.mean_sdr /= s.sdr_uncapped;
  if (s.sir_uncapped) s.mean_sir /= s.sir_uncapped;
  if (s.sar_uncapped) s.mean_sar /= s.sar_uncapped;
  return s;
}

inline nlohmann::json eval_scores_to_json(const EvalScores& s) {
  return {{"sdr", s.sdr},           {"sir", s.sir},           {"sar", s.sar},
          {"sdr_capped", s.sdr_capped}, {"sir_capped", s.sir_capped}, {"sar_capped", s.sar_capped}};
}

inline nlohmann::json eval_summary_to_json(const EvalSummary& s) {
  return {{"mean_sdr", s.mean_sdr},
          {"mean_sir", s.mean_sir},
          {"mean_sar", s.mean_sar},
          {"count", s.count},
          {"cap_counts",
           {{"sdr", s.sdr_capped}, {"sir", s.sir_capped}, {"sar", s.sar_capped}}}};
}

}  // namespace vsep
