// Acceptance suite: one criterion per invocation (or "all"). Each criterion
// prints a single PASS/FAIL line with its measured numbers; the exit code is
// nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vsep/cost.hpp"
#include "vsep/data.hpp"
#include "vsep/losses.hpp"
#include "vsep/metrics.hpp"
#include "vsep/model.hpp"
#include "vsep/reference.hpp"
#include "vsep/train.hpp"

namespace fs = std::filesystem;
using namespace vsep;

namespace {

// ---------------------------------------------------------------------------
// Shared run shapes
// ---------------------------------------------------------------------------

// Micro model for gradient checks: smallest shapes whose encoder bottleneck
// is still a healthy 2x2 plane.
ModelConfig micro_model() {
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

// Trend-scale dataset: ~1 s clips analyzed at 32 x 256 so that alpha = 16
// still leaves a whole bottleneck column.
DataConfig trend_data_config() {
  DataConfig dc;
  dc.categories = 4;
  dc.per_category_train = 12;
  dc.per_category_test = 4;
  dc.clip_len = 62 + 255 * 30;
  dc.image_size = 32;
  return dc;
}

StftConfig trend_stft() { return {62, 30}; }

ModelConfig trend_model(int slow_alpha, bool dual_stream) {
  ModelConfig mc;
  mc.category_count = 4;
  mc.vision_channels = {8, 16, 24, 4};
  mc.unet_channels = {12, 24, 48};
  mc.slow_layers = 5;
  mc.fast_layers = dual_stream ? 5 : 0;
  mc.slow_alpha = slow_alpha;
  mc.fast_alpha = 1;
  mc.image_size = 32;
  return mc;
}

// Training-run budgets. The paper-default lr of 1e-3 assumes far longer
// schedules than the desk budget allows; these runs use 1e-2.
constexpr double kRunLr = 1e-2;
constexpr int kTrendSteps = 700;
constexpr int kTrendSeeds = 5;

const char* tmp_root() { return "acceptance_tmp"; }

Dataset trend_dataset() {
  const auto dir = std::string(tmp_root()) + "/trend_data";
  if (!fs::exists(dir + "/manifest.json")) {
    Dataset::generate(trend_data_config(), 42, dir, 2);
  }
  return Dataset::load(dir + "/manifest.json");
}

TrainConfig trend_train_config(std::uint64_t seed, int slow_alpha, bool dual,
                               bool contrast_on = true) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.steps = kTrendSteps;
  tc.lr = kRunLr;
  tc.seed = seed;
  tc.n_sources = 2;
  tc.eval_mixtures = 16;
  tc.stft = trend_stft();
  tc.model = trend_model(slow_alpha, dual);
  if (!contrast_on) tc.weights.r1 = tc.weights.r2 = 0.0;
  return tc;
}

double trained_mean_sdr(const Dataset& data, const TrainConfig& tc) {
  auto result = train(tc, data, "");
  return evaluate(*result.model, data, tc).model_summary.mean_sdr;
}

double seed_mean_sdr(const Dataset& data, int slow_alpha, bool dual, bool contrast_on,
                     std::ostream& log) {
  double total = 0.0;
  for (int s = 0; s < kTrendSeeds; ++s) {
    auto tc = trend_train_config(100 + static_cast<std::uint64_t>(s), slow_alpha, dual,
                                 contrast_on);
    const double sdr = trained_mean_sdr(data, tc);
    log << " seed" << s << "=" << sdr;
    total += sdr;
  }
  log << " |";
  return total / kTrendSeeds;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

bool criterion_1_gradients(std::ostream& out) {
  double worst_op = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + static_cast<std::uint64_t>(seed));
    ad::Graph g;
    auto rnd = [&](std::vector<int> shape, double scale) {
      auto t = ad::make_tensor(std::move(shape));
      std::normal_distribution<double> d(0.0, scale);
      for (auto& v : t->data) v = d(rng);
      t->requires_grad = true;
      t->ensure_grad();
      return t;
    };
    auto x = rnd({2, 2, 6, 6}, 1.0);
    auto w = rnd({3, 2, 3, 3}, 0.5);
    auto b = rnd({3}, 0.5);
    auto wt = rnd({3, 2, 2, 2}, 0.5);
    auto gamma = rnd({3}, 0.2);
    for (auto& v : gamma->data) v += 1.0;
    auto beta = rnd({3}, 0.2);
    auto e = rnd({1, 3}, 0.7);
    auto rm = ad::make_tensor({3});
    auto rv = ad::make_tensor({3}, 1.0);
    auto targets = ad::make_tensor({2, 3, 6, 6});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : targets->data) v = u(rng) < 0.5 ? 0.0 : 1.0;
    auto loss_fn = [&] {
      auto y = ad::conv2d(g, x, w, b, 1, 1, seed % 2 + 1);
      y = ad::batchnorm2d(g, y, gamma, beta, rm, rv, seed % 2 == 0);
      y = ad::leaky_relu(g, y, 0.2);
      auto z = ad::conv_transpose2d(g, y, wt, nullptr, 2, 1);
      auto pool = ad::max_pool2d(g, z, 2, 2);
      auto tm = ad::time_repeat(g, ad::time_mean_pool(g, y, 3), 3);
      auto bce = ad::bce_with_logits(g, tm, targets);
      auto att = ad::matmul(g, ad::outer(g, e, e), ad::reshape(g, ad::narrow(
          g, ad::spatial_avg_pool(g, z), 0, 1), {3, 1}));
      auto hinge = ad::relu(g, ad::add_scalar(g, ad::sqrt_elem(g, ad::add_scalar(
          g, ad::sum_all(g, ad::mul(g, att, att)), std::exp(-9.0))), -0.4));
      auto lp = ad::bce_prob(g, ad::sigmoid(g, ad::max_all(g, pool)), 1.0);
      auto total = ad::add(g, bce, ad::mul_scalar(g, ad::sum_all(g, ad::mul(g, hinge, hinge)), 0.1));
      return ad::add(g, total, ad::mul_scalar(g, lp, 0.05));
    };
    worst_op = std::max(worst_op, ad::check_gradients(g, loss_fn, {x, w, b, wt, gamma, beta, e}));
  }

  double worst_model = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(900 + static_cast<std::uint64_t>(seed));
    SlowFastModel model(micro_model(), 40 + static_cast<std::uint64_t>(seed));
    auto& g = model.graph();
    std::uniform_real_distribution<double> u(0.0, 1.5);
    auto mix = ad::make_tensor({1, 1, 32, 32});
    for (auto& v : mix->data) v = u(rng);
    auto img0 = ad::make_tensor({1, 3, 16, 16});
    auto img1 = ad::make_tensor({1, 3, 16, 16});
    for (auto& v : img0->data) v = 0.4 * u(rng);
    for (auto& v : img1->data) v = 0.4 * u(rng);
    BinaryMask m0, m1;
    m0.bits = Grid<std::uint8_t>(32, 32);
    m1.bits = Grid<std::uint8_t>(32, 32);
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::int64_t i = 0; i < m0.bits.size(); ++i) {
      m0.bits.v[i] = static_cast<std::uint8_t>(bit(rng));
      m1.bits.v[i] = 1 - m0.bits.v[i];
    }
    LossWeights lw;
    // Full forward + Eq.8-and-Eq.2-style total under running-stat
    // normalization (smooth for the probe; the batch-statistics backward is
    // covered by the per-op checks above).
    auto loss_fn = [&] {
      std::vector<ForwardResult> fr;
      fr.push_back(model.forward(mix, img0, BnMode::Running));
      fr.push_back(model.forward(mix, img1, BnMode::Running));
      std::vector<PairTerms> pairs;
      pairs.push_back(PairTerms{fr[0].vf.embedding, fr[1].vf.embedding, fr[0].vf.fmap, 0});
      pairs.push_back(PairTerms{fr[1].vf.embedding, fr[0].vf.embedding, fr[1].vf.fmap, 1});
      auto sep = separation_loss(g, fr, {m0, m1});
      return total_loss(g, sep, contrast_loss(g, pairs, lw).loss);
    };
    worst_model = std::max(worst_model, ad::check_gradients(g, loss_fn, g.trainable()));
  }

  out << "op max rel err " << worst_op << ", end-to-end max rel err " << worst_model
      << " (threshold 1e-4, 20 seeds each)";
  return worst_op < 1e-4 && worst_model < 1e-4;
}

bool criterion_2_forward_oracles(std::ostream& out) {
  double worst = 0.0;
  std::mt19937_64 rng(600);
  std::normal_distribution<double> d(0.0, 1.0);
  auto rnd = [&](std::vector<int> shape) {
    auto t = ad::make_tensor(std::move(shape));
    for (auto& v : t->data) v = d(rng);
    return t;
  };
  auto track = [&](double diff) { worst = std::max(worst, diff); };
  auto max_diff = [](const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  };

  for (int trial = 0; trial < 12; ++trial) {
    ad::Graph g;
    const int n = 1 + trial % 3, c = 1 + trial % 4, h = 5 + trial, w = 16 - trial;
    const int o = 1 + (trial + 1) % 4, k = 1 + trial % 3;
    const int stride = 1 + trial % 2, pad = trial % 2, dil = 1 + trial % 2;
    if (h + 2 * pad < dil * (k - 1) + 1) continue;
    auto x = rnd({n, c, h, w});
    auto wt = rnd({o, c, k, k});
    auto b = rnd({o});
    track(max_diff(ad::conv2d(g, x, wt, b, stride, pad, dil)->data,
                   ref::conv2d(x->data, {n, c, h, w}, wt->data, o, k, &b->data, stride, pad, dil)));

    auto wt2 = rnd({c, o, k, k});
    track(max_diff(ad::conv_transpose2d(g, x, wt2, b, stride, pad % k)->data,
                   ref::conv_transpose2d(x->data, {n, c, h, w}, wt2->data, o, k, &b->data, stride,
                                         pad % k)));

    auto gamma = rnd({c});
    auto beta = rnd({c});
    auto rm = ad::make_tensor({c});
    auto rv = ad::make_tensor({c}, 1.0);
    track(max_diff(ad::batchnorm2d(g, x, gamma, beta, rm, rv, true)->data,
                   ref::batchnorm2d_train(x->data, {n, c, h, w}, gamma->data, beta->data)));

    if (h >= 2 && w >= 2) {
      track(max_diff(ad::max_pool2d(g, x, 2, 1)->data,
                     ref::max_pool2d(x->data, {n, c, h, w}, 2, 1)));
    }

    auto a = rnd({4, 3});
    auto bb = rnd({3, 4});
    track(max_diff(ad::matmul(g, a, bb)->data, ref::matmul(a->data, 4, 3, bb->data, 4)));

    auto e = rnd({1, c});
    auto f = rnd({c, h, w});
    track(max_diff(avga(g, e, f)->data, ref::avga(e->data, f->data, c, h, w)));
  }
  out << "max |op - oracle| = " << worst << " (threshold 1e-12)";
  return worst < 1e-12;
}

bool criterion_3_stft(std::ostream& out) {
  std::mt19937_64 rng(700);
  std::normal_distribution<double> d(0.0, 0.3);
  std::uniform_int_distribution<int> wexp(4, 7);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int window = 1 << wexp(rng);
    std::uniform_int_distribution<int> hops(1, window / 2);
    const int hop = hops(rng);
    Waveform w;
    w.sample_rate = 8000.0;
    w.samples.resize(static_cast<size_t>(window * 6 + hop * 7));
    for (auto& v : w.samples) v = d(rng);
    auto back = istft(stft(w, window, hop));
    double num = 0.0, den = 0.0;
    for (size_t i = static_cast<size_t>(window); i + static_cast<size_t>(window) < back.samples.size(); ++i) {
      const double diff = back.samples[i] - w.samples[i];
      num += diff * diff;
      den += w.samples[i] * w.samples[i];
    }
    worst = std::max(worst, std::sqrt(num / den));
  }

  bool tone_ok = true;
  {
    const int window = 64, hop = 16, bin = 9;
    Waveform w;
    w.sample_rate = 8000.0;
    w.samples.resize(64 + 16 * 10);
    for (size_t i = 0; i < w.samples.size(); ++i) {
      w.samples[i] = std::cos(2.0 * std::numbers::pi * bin * static_cast<double>(i) / window);
    }
    auto s = stft(w, window, hop);
    for (int t = 0; t < s.bins.cols && tone_ok; ++t) {
      double peak = 0.0;
      int argmax = 0;
      for (int r = 0; r < s.bins.rows; ++r) {
        if (std::abs(s.bins.at(r, t)) > peak) {
          peak = std::abs(s.bins.at(r, t));
          argmax = r;
        }
      }
      if (argmax != bin) tone_ok = false;
      for (int r = 0; r < s.bins.rows; ++r) {
        if (std::abs(r - bin) > 1 && std::abs(s.bins.at(r, t)) > 1e-6 * peak) tone_ok = false;
      }
    }
  }
  out << "max round-trip rel err over 50 framings = " << worst
      << " (threshold 1e-6), tone concentration " << (tone_ok ? "ok" : "violated");
  return worst < 1e-6 && tone_ok;
}

bool criterion_4_mask_ceiling(std::ostream& out) {
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
  auto spec = stft(mix(tones), kDefaultWindowLen, kDefaultHopLen);
  std::vector<MagnitudeSpectrogram> mags;
  for (const auto& t : tones) mags.push_back(magnitude(stft(t, kDefaultWindowLen, kDefaultHopLen)));
  double worst = 1e300;
  for (int k = 0; k < 2; ++k) {
    auto mask = ideal_binary_mask(mags, k);
    RealGrid soft(mask.bits.rows, mask.bits.cols);
    for (std::int64_t i = 0; i < mask.bits.size(); ++i) soft.v[i] = mask.bits.v[i];
    auto est = istft(apply_mask(soft, spec));
    std::vector<Waveform> refs = tones;
    for (auto& r : refs) r.samples.resize(est.samples.size());
    worst = std::min(worst, bss_eval(est, refs, k).sdr);
  }
  out << "ideal-binary-mask SDR floor = " << worst << " dB (threshold 20)";
  return worst > 20.0;
}

bool criterion_5_metric_algebra(std::ostream& out) {
  const int len = 256;
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

  Waveform interf = refs[0];
  for (int i = 0; i < len; ++i) interf.samples[static_cast<size_t>(i)] += 0.1 * refs[1].samples[static_cast<size_t>(i)];
  auto s1 = bss_eval(interf, refs, 0);
  const double err1 = std::max(std::abs(s1.sdr - 20.0), std::abs(s1.sir - 20.0));

  Waveform artif = refs[0];
  for (int i = 0; i < len; ++i) {
    artif.samples[static_cast<size_t>(i)] += 0.1 * std::sin(2.0 * std::numbers::pi * 24.0 * i / len) / norm;
  }
  auto s2 = bss_eval(artif, refs, 0);
  const double err2 = std::max(std::abs(s2.sdr - 20.0), std::abs(s2.sar - 20.0));

  double scale_err = 0.0;
  for (double c : {0.1, 10.0}) {
    Waveform scaled = interf;
    for (auto& v : scaled.samples) v *= c;
    auto s = bss_eval(scaled, refs, 0);
    scale_err = std::max({scale_err, std::abs(s.sdr - s1.sdr), std::abs(s.sir - s1.sir)});
  }
  out << "construction errors " << err1 << " / " << err2 << " dB (threshold 0.01), scale drift "
      << scale_err << " dB (threshold 1e-9), capped " << s1.sar_capped << "/" << s2.sir_capped;
  return err1 < 0.01 && err2 < 0.01 && scale_err < 1e-9 && s1.sar_capped && s2.sir_capped;
}

bool criterion_6_contrast_constants(std::ostream& out) {
  ad::Graph g;
  auto e = ad::tensor_of({1, 3}, {0.3, -0.1, 0.9});
  const double v_pos = embedding_contrast(g, e, e, 1)->data[0];
  auto far = ad::tensor_of({1, 3}, {2.3, -0.1, 0.9});
  const double v_far = embedding_contrast(g, e, far, 0)->data[0];
  const double v_neg = embedding_contrast(g, e, e, 0)->data[0];
  const double want = 0.5 * std::pow(1.0 - std::sqrt(std::exp(-9.0)), 2.0);

  const int n_sources = 3;
  std::vector<ForwardResult> fr(static_cast<size_t>(n_sources));
  std::vector<BinaryMask> masks(static_cast<size_t>(n_sources));
  std::mt19937_64 rng(800);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int n = 0; n < n_sources; ++n) {
    StreamOutput so;
    so.logits_full = ad::make_tensor({1, 1, 16, 16});
    so.mask = ad::sigmoid(g, so.logits_full);
    fr[static_cast<size_t>(n)].first = so;
    fr[static_cast<size_t>(n)].second = so;
    masks[static_cast<size_t>(n)].bits = Grid<std::uint8_t>(16, 16);
    for (auto& b : masks[static_cast<size_t>(n)].bits.v) b = static_cast<std::uint8_t>(bit(rng));
  }
  const double sep = separation_loss(g, fr, masks)->data[0];
  const double sep_want = 2.0 * n_sources * std::log(2.0);

  out << "L_e cases: " << v_pos << ", " << v_far << ", " << v_neg << " (want 0, 0, " << want
      << " +- 1e-6); zero-logit separation " << sep << " (want " << sep_want << " +- 1e-9)";
  return std::abs(v_pos) < 1e-6 && std::abs(v_far) < 1e-6 && std::abs(v_neg - want) < 1e-6 &&
         std::abs(sep - sep_want) < 1e-9;
}

bool criterion_7_learning(std::ostream& out) {
  const auto dir = std::string(tmp_root()) + "/c7_data";
  if (!fs::exists(dir + "/manifest.json")) {
    DataConfig dc;
    dc.categories = 4;
    dc.per_category_train = 12;
    dc.per_category_test = 4;
    Dataset::generate(dc, 42, dir, 2);
  }
  auto data = Dataset::load(dir + "/manifest.json");

  TrainConfig tc;
  tc.batch_size = 1;
  tc.steps = 2000;
  tc.lr = kRunLr;
  tc.seed = 1;
  tc.n_sources = 2;
  tc.eval_mixtures = 16;
  tc.model = ModelConfig{};  // default architecture: 7/7 layers, alpha 2/1

  auto result = train(tc, data, "");
  auto report = evaluate(*result.model, data, tc);
  const double gap = report.model_summary.mean_sdr - report.baseline_summary.mean_sdr;
  out << "mean test SDR " << report.model_summary.mean_sdr << " dB vs copy-paste "
      << report.baseline_summary.mean_sdr << " dB after " << tc.steps << " steps; gap " << gap
      << " (threshold 5)";
  return gap >= 5.0;
}

bool criterion_8a_alpha_trend(std::ostream& out) {
  auto data = trend_dataset();
  std::ostringstream detail;
  std::map<int, double> means;
  for (int alpha : {1, 4, 16}) {
    detail << " alpha" << alpha << ":";
    means[alpha] = seed_mean_sdr(data, alpha, false, true, detail);
  }
  out << "single-stream seed-mean SDR: alpha1 " << means[1] << ", alpha4 " << means[4]
      << ", alpha16 " << means[16] << " dB; need alpha1 >= alpha4 >= alpha16 [" << detail.str()
      << " ]";
  return means[1] >= means[4] && means[4] >= means[16];
}

bool criterion_8b_dual_vs_single(std::ostream& out) {
  auto data = trend_dataset();
  std::ostringstream detail;
  detail << " dual:";
  const double dual = seed_mean_sdr(data, 2, true, true, detail);
  detail << " single1:";
  const double single1 = seed_mean_sdr(data, 1, false, true, detail);
  detail << " single2:";
  const double single2 = seed_mean_sdr(data, 2, false, true, detail);
  out << "dual(2,1) " << dual << " dB vs single alpha1 " << single1 << " dB and single alpha2 "
      << single2 << " dB; need dual >= alpha1 - 0.5 and dual >= alpha2 [" << detail.str() << " ]";
  return dual >= single1 - 0.5 && dual >= single2;
}

bool criterion_8c_contrast_gap(std::ostream& out) {
  auto data = trend_dataset();
  std::ostringstream detail;
  detail << " on:";
  const double on = seed_mean_sdr(data, 2, false, true, detail);
  detail << " off:";
  const double off = seed_mean_sdr(data, 2, false, false, detail);
  out << "contrast-on " << on << " dB vs contrast-off " << off << " dB; gap " << (on - off)
      << " (need >= 0) [" << detail.str() << " ]";
  return on >= off;
}

bool criterion_9_cost(std::ostream& out) {
  // Every shipped config file: analytic counts equal the instrumented
  // forward, exactly.
  const std::string config_dir = VSEP_CONFIG_DIR;
  auto load_model = [&](const std::string& name) {
    std::ifstream f(config_dir + "/" + name);
    if (!f) throw IoError("missing shipped config: " + name);
    nlohmann::json j;
    f >> j;
    return model_config_from_json(j);
  };
  std::vector<std::pair<ModelConfig, std::pair<int, int>>> shipped;
  shipped.push_back({load_model("default.json"), {128, 64}});
  for (int alpha : {1, 2, 4, 8, 16}) {
    shipped.push_back({load_model("small-alpha" + std::to_string(alpha) + ".json"), {32, 256}});
  }
  for (int depth : {5, 7, 9}) {
    shipped.push_back({load_model("depth" + std::to_string(depth) + ".json"), {32, 256}});
  }
  shipped.push_back({load_model("slowfast-small.json"), {32, 256}});
  shipped.push_back({load_model("fastslow-small.json"), {32, 256}});

  bool instrumented_ok = true;
  for (const auto& [cfg, shape] : shipped) {
    SlowFastModel model(cfg, 7);
    ad::macs::CountGuard guard;
    {
      ad::NoGradGuard ng(model.graph());
      auto mix = ad::make_tensor({1, 1, shape.first, shape.second}, 0.1);
      auto img = ad::make_tensor({1, 3, cfg.image_size, cfg.image_size}, 0.2);
      model.forward(mix, img, false);
    }
    long long live_params = 0;
    for (const auto& e : model.graph().registry()) {
      if (e.trainable) live_params += e.tensor->numel();
    }
    if (ad::macs::counter != count_macs(cfg, shape.first, shape.second) ||
        live_params != count_params(cfg)) {
      instrumented_ok = false;
    }
  }

  // Alpha sweep: params constant, MACs strictly decreasing.
  std::vector<ModelConfig> sweep;
  for (int alpha : {1, 2, 4, 8, 16}) {
    sweep.push_back(load_model("small-alpha" + std::to_string(alpha) + ".json"));
  }
  auto table = cost_table(sweep, 32, 256);

  out << "instrumented == analytic on " << shipped.size() << " configs: "
      << (instrumented_ok ? "yes" : "NO") << "; alpha sweep params constant: "
      << (table.params_constant ? "yes" : "NO") << ", MACs strictly decreasing: "
      << (table.macs_strictly_decreasing ? "yes" : "NO");
  return instrumented_ok && table.params_constant && table.macs_strictly_decreasing;
}

bool criterion_10_determinism(std::ostream& out) {
  const auto root = std::string(tmp_root()) + "/c10";
  fs::remove_all(root);
  DataConfig dc;
  dc.categories = 3;
  dc.per_category_train = 3;
  dc.per_category_test = 2;
  dc.image_size = 16;
  auto data = Dataset::generate(dc, 9, root + "/data", 1);

  TrainConfig tc;
  tc.batch_size = 1;
  tc.steps = 4;
  tc.lr = 1e-3;
  tc.seed = 3;
  tc.n_sources = 2;
  tc.eval_mixtures = 2;
  tc.model = micro_model();
  tc.model.category_count = 3;
  tc.model.vision_channels = {2, 2, 2, 3};
  tc.model.unet_channels = {2, 3};

  auto r1 = train(tc, data, root + "/run1");
  auto r2 = train(tc, data, root + "/run2");
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  const bool traces_equal =
      slurp(root + "/run1/train_log.ndjson") == slurp(root + "/run2/train_log.ndjson") &&
      !slurp(root + "/run1/train_log.ndjson").empty();
  const bool ckpt_equal = slurp(root + "/run1/ckpt.bin") == slurp(root + "/run2/ckpt.bin");

  auto report1 = evaluate(*r1.model, data, tc);
  SlowFastModel restored(tc.model, 999);
  load_checkpoint(restored.graph(), root + "/run1/ckpt.bin");
  auto report2 = evaluate(restored, data, tc);
  const bool eval_equal =
      eval_report_to_json(report1).dump() == eval_report_to_json(report2).dump();

  out << "same-seed traces bitwise-identical: " << (traces_equal ? "yes" : "NO")
      << ", checkpoints identical: " << (ckpt_equal ? "yes" : "NO")
      << ", checkpoint round-trip evaluation bitwise: " << (eval_equal ? "yes" : "NO");
  return traces_equal && ckpt_equal && eval_equal;
}

}  // namespace

int main(int argc, char** argv) {
  std::map<std::string, std::pair<std::string, std::function<bool(std::ostream&)>>> criteria = {
      {"1", {"gradient soundness", criterion_1_gradients}},
      {"2", {"forward-oracle equality", criterion_2_forward_oracles}},
      {"3", {"STFT fidelity", criterion_3_stft}},
      {"4", {"ideal-mask oracle ceiling", criterion_4_mask_ceiling}},
      {"5", {"metric algebra", criterion_5_metric_algebra}},
      {"6", {"contrastive constants", criterion_6_contrast_constants}},
      {"7", {"learning signal", criterion_7_learning}},
      {"8a", {"alpha resolution trend", criterion_8a_alpha_trend}},
      {"8b", {"dual-stream vs single-stream", criterion_8b_dual_vs_single}},
      {"8c", {"contrastive objective gain", criterion_8c_contrast_gap}},
      {"9", {"cost accounting", criterion_9_cost}},
      {"10", {"determinism and persistence", criterion_10_determinism}},
  };

  std::vector<std::string> selected;
  if (argc < 2 || std::string(argv[1]) == "all") {
    for (const auto& [id, entry] : criteria) selected.push_back(id);
  } else {
    for (int i = 1; i < argc; ++i) {
      if (!criteria.count(argv[i])) {
        std::cerr << "unknown criterion: " << argv[i] << "\n";
        return 2;
      }
      selected.push_back(argv[i]);
    }
  }

  fs::create_directories(tmp_root());
  bool all_pass = true;
  for (const auto& id : selected) {
    const auto& [name, fn] = criteria[id];
    std::ostringstream detail;
    bool pass = false;
    const auto start = std::chrono::steady_clock::now();
    try {
      pass = fn(detail);
    } catch (const std::exception& e) {
      detail << "exception: " << e.what();
    }
    const auto secs =
        std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - start)
            .count();
    std::cout << (pass ? "PASS" : "FAIL") << " criterion-" << id << " (" << name << ", " << secs
              << "s): " << detail.str() << "\n";
    all_pass = all_pass && pass;
  }
  return all_pass ? 0 : 1;
}
