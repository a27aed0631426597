#pragma once

// Gradient and oracle self-tests behind the `check` CLI command. Each check
// compares a production path against an independent reference kernel or a
// hand-derived constant; the full Catch2 suites run richer versions of the
// same checks.

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vsep/autodiff.hpp"
#include "vsep/checkpoint.hpp"
#include "vsep/cost.hpp"
#include "vsep/data.hpp"
#include "vsep/dsp.hpp"
#include "vsep/losses.hpp"
#include "vsep/metrics.hpp"
#include "vsep/model.hpp"
#include "vsep/reference.hpp"
#include "vsep/train.hpp"

namespace vsep::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline ad::TensorPtr random_tensor(std::mt19937_64& rng, std::vector<int> shape,
                                   double scale = 1.0) {
  auto t = ad::make_tensor(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t->data) v = d(rng);
  return t;
}

inline ModelConfig micro_config() {
  ModelConfig mc;
  mc.category_count = 2;
  mc.vision_channels = {2, 2, 2, 2};
  mc.unet_channels = {2, 2};
  mc.slow_layers = 5;
  mc.fast_layers = 5;
  mc.slow_alpha = 2;
  mc.fast_alpha = 1;
  mc.image_size = 16;
  return mc;
}

}  // namespace detail

inline CheckResult check_forward_oracles(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    std::uniform_int_distribution<int> d_c(1, 3), d_hw(5, 9), d_k(1, 3);
    const int n = 2, c = d_c(rng), h = d_hw(rng), w = d_hw(rng), o = d_c(rng), k = d_k(rng);
    const int stride = 1 + trial % 2, pad = trial % 2, dil = 1 + trial % 2;
    if (h + 2 * pad < dil * (k - 1) + 1) continue;
    ad::Graph g;
    auto x = detail::random_tensor(rng, {n, c, h, w});
    auto wt = detail::random_tensor(rng, {o, c, k, k});
    auto b = detail::random_tensor(rng, {o});
    auto y = ad::conv2d(g, x, wt, b, stride, pad, dil);
    auto y_ref = ref::conv2d(x->data, {n, c, h, w}, wt->data, o, k, &b->data, stride, pad, dil);
    worst = std::max(worst, detail::max_abs_diff(y->data, y_ref));

    auto wt2 = detail::random_tensor(rng, {c, o, k, k});
    auto y2 = ad::conv_transpose2d(g, x, wt2, b, stride, pad % k);
    auto y2_ref = ref::conv_transpose2d(x->data, {n, c, h, w}, wt2->data, o, k, &b->data, stride,
                                        pad % k);
    worst = std::max(worst, detail::max_abs_diff(y2->data, y2_ref));

    auto gamma = detail::random_tensor(rng, {c});
    auto beta = detail::random_tensor(rng, {c});
    auto rm = ad::make_tensor({c});
    auto rv = ad::make_tensor({c}, 1.0);
    auto bn = ad::batchnorm2d(g, x, gamma, beta, rm, rv, true);
    auto bn_ref = ref::batchnorm2d_train(x->data, {n, c, h, w}, gamma->data, beta->data);
    worst = std::max(worst, detail::max_abs_diff(bn->data, bn_ref));

    auto mp = ad::max_pool2d(g, x, 2, 1);
    auto mp_ref = ref::max_pool2d(x->data, {n, c, h, w}, 2, 1);
    worst = std::max(worst, detail::max_abs_diff(mp->data, mp_ref));

    auto a = detail::random_tensor(rng, {3, 4});
    auto bb = detail::random_tensor(rng, {4, 5});
    auto mm = ad::matmul(g, a, bb);
    auto mm_ref = ref::matmul(a->data, 3, 4, bb->data, 5);
    worst = std::max(worst, detail::max_abs_diff(mm->data, mm_ref));

    auto e = detail::random_tensor(rng, {1, c});
    auto f = detail::random_tensor(rng, {c, h, w});
    auto av = avga(g, e, f);
    auto av_ref = ref::avga(e->data, f->data, c, h, w);
    worst = std::max(worst, detail::max_abs_diff(av->data, av_ref));
  }
  std::ostringstream os;
  os << "max |diff| = " << worst;
  return {"forward-oracles", worst < 1e-12, os.str()};
}

inline CheckResult check_op_gradients(std::uint64_t seed) {
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(trial)));
    ad::Graph g;
    auto x = detail::random_tensor(rng, {2, 2, 6, 6});
    x->requires_grad = true;
    auto w = detail::random_tensor(rng, {3, 2, 3, 3}, 0.5);
    w->requires_grad = true;
    auto b = detail::random_tensor(rng, {3}, 0.5);
    b->requires_grad = true;
    auto wt = detail::random_tensor(rng, {2, 3, 2, 2}, 0.5);
    wt->requires_grad = true;
    auto gamma = detail::random_tensor(rng, {3}, 0.3);
    for (auto& v : gamma->data) v += 1.0;
    gamma->requires_grad = true;
    auto beta = detail::random_tensor(rng, {3}, 0.3);
    beta->requires_grad = true;
    auto targets = ad::make_tensor({2, 3, 6, 6});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : targets->data) v = u(rng) < 0.5 ? 0.0 : 1.0;
    auto rm = ad::make_tensor({3});
    auto rv = ad::make_tensor({3}, 1.0);

    auto loss_fn = [&] {
      auto y = ad::conv2d(g, x, w, b, 1, 1, 1);
      y = ad::batchnorm2d(g, y, gamma, beta, rm, rv, true);
      y = ad::leaky_relu(g, y, 0.2);
      auto z = ad::conv_transpose2d(g, y, wt, nullptr, 1, 0);
      z = ad::time_mean_pool(g, z, 2);
      z = ad::time_repeat(g, z, 2);
      auto p = ad::spatial_avg_pool(g, y);
      auto att = ad::matmul(g, p, ad::outer(g, b, gamma));
      auto extra = ad::sum_all(g, ad::mul(g, att, att));
      auto bce = ad::bce_with_logits(g, y, targets);
      return ad::add(g, bce, ad::mul_scalar(g, extra, 0.01));
    };
    worst = std::max(worst, ad::check_gradients(g, loss_fn, {x, w, b, wt, gamma, beta}));
  }
  std::ostringstream os;
  os << "max rel err = " << worst;
  return {"op-gradients", worst < 1e-4, os.str()};
}

inline CheckResult check_model_gradients(std::uint64_t seed) {
  double worst = 0.0;
  for (int trial = 0; trial < 2; ++trial) {
    std::mt19937_64 rng(mix_seed(seed, 77 + static_cast<std::uint64_t>(trial)));
    auto mc = detail::micro_config();
    SlowFastModel model(mc, mix_seed(seed, static_cast<std::uint64_t>(trial)));
    auto& g = model.graph();
    auto mix = detail::random_tensor(rng, {1, 1, 32, 32}, 0.5);
    for (auto& v : mix->data) v = std::abs(v);
    auto img0 = detail::random_tensor(rng, {1, 3, 16, 16}, 0.3);
    auto img1 = detail::random_tensor(rng, {1, 3, 16, 16}, 0.3);
    BinaryMask m0, m1;
    m0.bits = Grid<std::uint8_t>(32, 32);
    m1.bits = Grid<std::uint8_t>(32, 32);
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::int64_t i = 0; i < m0.bits.size(); ++i) {
      m0.bits.v[i] = static_cast<std::uint8_t>(bit(rng));
      m1.bits.v[i] = 1 - m0.bits.v[i];
    }
    LossWeights lw;
    // Running-stat normalization keeps the pass smooth for the
    // finite-difference probe; the batch-statistics backward path is covered
    // by the per-op gradient checks.
    auto loss_fn = [&] {
      std::vector<ForwardResult> fr;
      fr.push_back(model.forward(mix, img0, BnMode::Running));
      fr.push_back(model.forward(mix, img1, BnMode::Running));
      std::vector<PairTerms> pairs;
      pairs.push_back(PairTerms{fr[0].vf.embedding, fr[1].vf.embedding, fr[0].vf.fmap, 0});
      pairs.push_back(PairTerms{fr[1].vf.embedding, fr[0].vf.embedding, fr[1].vf.fmap, 1});
      auto sep = separation_loss(g, fr, {m0, m1});
      auto con = contrast_loss(g, pairs, lw);
      return total_loss(g, sep, con.loss);
    };
    worst = std::max(worst, ad::check_gradients(g, loss_fn, g.trainable()));
  }
  std::ostringstream os;
  os << "max rel err = " << worst;
  return {"model-gradients", worst < 1e-4, os.str()};
}

inline CheckResult check_stft(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.3);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const int window = 32 << (trial % 3);
    const int hop = window / (2 + trial % 2);
    Waveform w;
    w.sample_rate = 8000;
    w.samples.resize(static_cast<size_t>(window * 8 + hop * 3));
    for (auto& v : w.samples) v = d(rng);
    auto back = istft(stft(w, window, hop));
    double num = 0.0, den = 0.0;
    for (int i = window; i < static_cast<int>(back.samples.size()) - window; ++i) {
      const double diff = back.samples[static_cast<size_t>(i)] - w.samples[static_cast<size_t>(i)];
      num += diff * diff;
      den += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i)];
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  // Pure tone at an exact bin: energy confined to that row +- 1.
  {
    const int window = 64, hop = 16, bin = 7;
    Waveform w;
    w.sample_rate = 8000;
    w.samples.resize(64 + 16 * 12);
    for (size_t i = 0; i < w.samples.size(); ++i) {
      w.samples[i] = std::cos(2.0 * std::numbers::pi * bin * static_cast<double>(i) / window);
    }
    auto s = stft(w, window, hop);
    for (int t = 0; t < s.bins.cols; ++t) {
      const double peak = std::abs(s.bins.at(bin, t));
      for (int r = 0; r < s.bins.rows; ++r) {
        if (std::abs(r - bin) <= 1) continue;
        if (std::abs(s.bins.at(r, t)) > 1e-6 * peak) {
          return {"stft", false, "tone leakage beyond adjacent bins"};
        }
      }
    }
  }
  std::ostringstream os;
  os << "max round-trip rel err = " << worst;
  return {"stft", worst < 1e-6, os.str()};
}

inline CheckResult check_mask_and_metrics(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Orthonormal constructions.
  const int len = 256;
  std::vector<Waveform> refs(2);
  for (auto& r : refs) {
    r.sample_rate = 8000;
    r.samples.assign(len, 0.0);
  }
  for (int i = 0; i < len; ++i) {
    refs[0].samples[static_cast<size_t>(i)] =
        std::sin(2.0 * std::numbers::pi * 8.0 * i / len) / std::sqrt(len / 2.0);
    refs[1].samples[static_cast<size_t>(i)] =
        std::sin(2.0 * std::numbers::pi * 16.0 * i / len) / std::sqrt(len / 2.0);
  }
  Waveform est = refs[0];
  for (int i = 0; i < len; ++i) est.samples[static_cast<size_t>(i)] += 0.1 * refs[1].samples[static_cast<size_t>(i)];
  auto s = bss_eval(est, refs, 0);
  if (std::abs(s.sdr - 20.0) > 0.01 || std::abs(s.sir - 20.0) > 0.01 || !s.sar_capped) {
    return {"metrics", false, "interference construction mismatch"};
  }
  // Scale invariance.
  Waveform est10 = est;
  for (auto& v : est10.samples) v *= 10.0;
  auto s10 = bss_eval(est10, refs, 0);
  if (std::abs(s10.sdr - s.sdr) > 1e-9) return {"metrics", false, "not scale invariant"};

  // Ideal-mask oracle floor on band-disjoint tones.
  const int clip = kDefaultClipLen;
  std::vector<Waveform> tones(2);
  for (int k = 0; k < 2; ++k) {
    tones[static_cast<size_t>(k)].sample_rate = 8000;
    tones[static_cast<size_t>(k)].samples.resize(static_cast<size_t>(clip));
    const double f = k == 0 ? 500.0 : 2000.0;
    for (int i = 0; i < clip; ++i) {
      tones[static_cast<size_t>(k)].samples[static_cast<size_t>(i)] =
          0.3 * std::sin(2.0 * std::numbers::pi * f * i / 8000.0);
    }
  }
  auto mixture = mix(tones);
  auto mix_spec = stft(mixture, kDefaultWindowLen, kDefaultHopLen);
  std::vector<MagnitudeSpectrogram> mags;
  for (const auto& t : tones) mags.push_back(magnitude(stft(t, kDefaultWindowLen, kDefaultHopLen)));
  double worst_sdr = 1e9;
  for (int k = 0; k < 2; ++k) {
    auto mask = ideal_binary_mask(mags, k);
    RealGrid soft(mask.bits.rows, mask.bits.cols);
    for (std::int64_t i = 0; i < mask.bits.size(); ++i) soft.v[i] = mask.bits.v[i];
    auto est_w = istft(apply_mask(soft, mix_spec));
    std::vector<Waveform> trimmed = tones;
    for (auto& t : trimmed) t.samples.resize(est_w.samples.size());
    worst_sdr = std::min(worst_sdr, bss_eval(est_w, trimmed, k).sdr);
  }
  std::ostringstream os;
  os << "ideal-mask SDR floor = " << worst_sdr;
  (void)rng;
  return {"metrics", worst_sdr > 20.0, os.str()};
}

inline CheckResult check_loss_constants(std::uint64_t) {
  ad::Graph g;
  auto e0 = ad::tensor_of({1, 3}, {0.2, -0.4, 0.7});
  auto le0 = embedding_contrast(g, e0, e0, 1);
  if (std::abs(le0->data[0]) > 1e-12) return {"loss-constants", false, "positive identical != 0"};
  auto le1 = embedding_contrast(g, e0, e0, 0);
  const double expected = 0.5 * std::pow(1.0 - std::sqrt(std::exp(-9.0)), 2.0);
  if (std::abs(le1->data[0] - expected) > 1e-6) {
    return {"loss-constants", false, "negative identical != hinge constant"};
  }
  // Zero logits against binary targets: separation loss is 2*N*ln2.
  const int n_sources = 3;
  std::vector<ForwardResult> fr(n_sources);
  std::vector<BinaryMask> masks(n_sources);
  for (int n = 0; n < n_sources; ++n) {
    StreamOutput so;
    so.logits_full = ad::make_tensor({1, 1, 8, 8});
    so.mask = ad::sigmoid(g, so.logits_full);
    fr[static_cast<size_t>(n)].first = so;
    fr[static_cast<size_t>(n)].second = so;
    masks[static_cast<size_t>(n)].bits = Grid<std::uint8_t>(8, 8, static_cast<std::uint8_t>(n % 2));
  }
  auto sep = separation_loss(g, fr, masks);
  const double want = 2.0 * n_sources * std::log(2.0);
  if (std::abs(sep->data[0] - want) > 1e-9) {
    return {"loss-constants", false, "zero-logit separation != 2*N*ln2"};
  }
  return {"loss-constants", true, "hinge constant and 2*N*ln2 baseline match"};
}

inline CheckResult check_cost(std::uint64_t seed) {
  auto mc = detail::micro_config();
  // Closed form: conv 3x3, I=2, O=4 has 4*2*3*3+4 = 76 parameters.
  CostReport probe;
  vsep::detail::walk_plan({{LayerPlan::Kind::Conv, "m", "l", 2, 4, 3, 1, 1, 1}}, {2, 8, 8}, true,
                          probe);
  if (probe.params_total != 76 || probe.macs_total != 2LL * 4 * 3 * 3 * 8 * 8) {
    return {"cost", false, "closed-form conv cost mismatch"};
  }
  // Analytic parameter count equals the live registry.
  SlowFastModel model(mc, seed);
  long long live = 0;
  for (const auto& e : model.graph().registry()) {
    if (e.trainable) live += e.tensor->numel();
  }
  if (live != count_params(mc)) return {"cost", false, "registry walk != analytic params"};
  // Instrumented forward equals the analytic MAC count.
  ad::macs::CountGuard guard;
  {
    ad::NoGradGuard ng(model.graph());
    auto mix = ad::make_tensor({1, 1, 32, 32}, 0.1);
    auto img = ad::make_tensor({1, 3, 16, 16}, 0.2);
    model.forward(mix, img, false);
  }
  if (ad::macs::counter != count_macs(mc, 32, 32)) {
    return {"cost", false, "instrumented forward != analytic MACs"};
  }
  // Alpha sweeps keep parameters constant.
  auto mc4 = mc;
  mc4.slow_alpha = 4;
  if (count_params(mc4) != count_params(mc)) return {"cost", false, "params vary with alpha"};
  return {"cost", true, "closed forms, registry walk, and instrumented MACs agree"};
}

inline CheckResult check_persistence(std::uint64_t seed) {
  namespace fs = std::filesystem;
  auto mc = detail::micro_config();
  SlowFastModel a(mc, seed);
  const auto path = (fs::temp_directory_path() / "vsep_selftest_ckpt.bin").string();
  save_checkpoint(a.graph(), path);
  SlowFastModel b(mc, seed + 1);
  load_checkpoint(b.graph(), path);
  for (size_t i = 0; i < a.graph().registry().size(); ++i) {
    const auto& ta = *a.graph().registry()[i].tensor;
    const auto& tb = *b.graph().registry()[i].tensor;
    for (size_t j = 0; j < ta.data.size(); ++j) {
      if (ta.data[j] != tb.data[j]) return {"persistence", false, "round trip not bit-exact"};
    }
  }
  fs::remove(path);
  // SGD hand recurrence.
  ad::Graph g;
  auto p = g.parameter("p", {1});
  p->data[0] = 1.0;
  OptimizerState st;
  st.lr = 0.1;
  double vp = 0.0, pp = 1.0;
  for (int i = 0; i < 3; ++i) {
    p->ensure_grad();
    p->grad[0] = 0.5;
    sgd_step(g, st);
    vp = 0.9 * vp + (0.5 + 1e-4 * pp);
    pp -= 0.1 * vp;
  }
  if (std::abs(p->data[0] - pp) > 1e-15) return {"persistence", false, "SGD recurrence mismatch"};
  return {"persistence", true, "checkpoint bit-exact, SGD recurrence matches"};
}

inline std::vector<CheckResult> run_all(std::uint64_t seed) {
  return {
      check_forward_oracles(seed),   check_op_gradients(seed), check_model_gradients(seed),
      check_stft(seed),              check_mask_and_metrics(seed), check_loss_constants(seed),
      check_cost(seed),              check_persistence(seed),
  };
}

}  // namespace vsep::selftest
