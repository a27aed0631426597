#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vsep/checkpoint.hpp"
#include "vsep/common.hpp"
#include "vsep/data.hpp"
#include "vsep/losses.hpp"
#include "vsep/metrics.hpp"
#include "vsep/model.hpp"

namespace vsep {

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient: v <- momentum*v + (g + wd*p); p <- p - lr*v.
struct OptimizerState {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::map<const ad::Tensor*, std::vector<double>> velocity;
};

inline void sgd_step(ad::Graph& g, OptimizerState& st) {
  for (const auto& e : g.registry()) {
    if (!e.trainable) continue;
    auto& p = *e.tensor;
    p.ensure_grad();
    auto& v = st.velocity[&p];
    if (v.size() != p.data.size()) v.assign(p.data.size(), 0.0);
    for (size_t i = 0; i < p.data.size(); ++i) {
      if (!std::isfinite(p.grad[i])) {
        throw Error("sgd_step: non-finite gradient in " + e.name);
      }
      v[i] = st.momentum * v[i] + (p.grad[i] + st.weight_decay * p.data[i]);
      p.data[i] -= st.lr * v[i];
    }
    p.zero_grad();
  }
}

struct TrainConfig {
  int batch_size = 10;
  int steps = 200;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  int eval_every = 0;  // 0: checkpoint only at the end
  int n_sources = 2;
  int eval_mixtures = 16;
  LossWeights weights;
  ModelConfig model;
  StftConfig stft;

  void validate() const {
    if (batch_size < 1) throw ValueError("batch_size must be >= 1");
    if (steps < 0) throw ValueError("steps must be >= 0");
    if (n_sources < 2 || n_sources > 4) throw ValueError("n_sources must be in [2,4]");
    if (eval_mixtures < 1) throw ValueError("eval_mixtures must be >= 1");
    model.validate();
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  j["n_sources"] = c.n_sources;
  j["eval_mixtures"] = c.eval_mixtures;
  j["loss_weights"] = {{"r1", c.weights.r1}, {"r2", c.weights.r2}, {"margin", c.weights.margin}};
  j["model"] = model_config_to_json(c.model);
  j["stft"] = {{"window_len", c.stft.window_len}, {"hop_len", c.stft.hop_len}};
  return j;
}

// "model" may be an inline object or a path (relative to base_dir) to a
// model config JSON file.
inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          const std::string& base_dir = ".") {
  static const std::set<std::string> known = {"batch_size", "steps",        "lr",
                                              "seed",       "eval_every",   "n_sources",
                                              "eval_mixtures", "loss_weights", "model",
                                              "stft"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ValueError("unknown train config field: " + it.key());
  }
  TrainConfig c;
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("steps")) c.steps = j.at("steps").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int>();
  if (j.contains("n_sources")) c.n_sources = j.at("n_sources").get<int>();
  if (j.contains("eval_mixtures")) c.eval_mixtures = j.at("eval_mixtures").get<int>();
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    static const std::set<std::string> wk = {"r1", "r2", "margin"};
    for (auto it = w.begin(); it != w.end(); ++it) {
      if (!wk.count(it.key())) throw ValueError("unknown loss_weights field: " + it.key());
    }
    if (w.contains("r1")) c.weights.r1 = w.at("r1").get<double>();
    if (w.contains("r2")) c.weights.r2 = w.at("r2").get<double>();
    if (w.contains("margin")) c.weights.margin = w.at("margin").get<double>();
  }
  if (j.contains("model")) {
    if (j.at("model").is_string()) {
      const auto path =
          std::filesystem::path(base_dir) / j.at("model").get<std::string>();
      std::ifstream f(path);
      if (!f) throw IoError("cannot open model config: " + path.string());
      nlohmann::json mj;
      try {
        f >> mj;
      } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed model config " + path.string() + ": " + e.what());
      }
      c.model = model_config_from_json(mj);
    } else {
      c.model = model_config_from_json(j.at("model"));
    }
  }
  if (j.contains("stft")) {
    const auto& s = j.at("stft");
    static const std::set<std::string> sk = {"window_len", "hop_len"};
    for (auto it = s.begin(); it != s.end(); ++it) {
      if (!sk.count(it.key())) throw ValueError("unknown stft config field: " + it.key());
    }
    if (s.contains("window_len")) c.stft.window_len = s.at("window_len").get<int>();
    if (s.contains("hop_len")) c.stft.hop_len = s.at("hop_len").get<int>();
  }
  c.validate();
  return c;
}

struct StepLog {
  int step = 0;
  double l_sep = 0.0;
  double l_e = 0.0;    // unweighted mean embedding term
  double l_m = 0.0;    // unweighted mean localization term
  double total = 0.0;  // l_sep + r1*l_e + r2*l_m
};

inline nlohmann::json step_log_to_json(const StepLog& s) {
  return {{"step", s.step}, {"l_sep", s.l_sep}, {"l_e", s.l_e}, {"l_M", s.l_m},
          {"total", s.total}};
}

struct TrainResult {
  std::unique_ptr<SlowFastModel> model;
  std::vector<StepLog> logs;
  std::string checkpoint_path;
};

namespace detail {

inline ad::TensorPtr stack_images(const std::vector<Sample>& samples, int image_size) {
  if (samples.empty()) throw ValueError("stack_images: no samples");
  auto out = ad::make_tensor({static_cast<int>(samples.size()), 3, image_size, image_size});
  std::int64_t off = 0;
  for (const auto& s : samples) {
    auto one = image_tensor(s.image, image_size);
    std::copy(one->data.begin(), one->data.end(), out->data.begin() + off);
    off += one->numel();
  }
  return out;
}

// Draws n distinct categories, then one item per category, uniformly.
inline std::vector<const ManifestItem*> draw_mixture_items(const Dataset& data,
                                                           const std::string& split, int n,
                                                           std::mt19937_64& rng) {
  const int cats = data.config().categories;
  if (n > cats) throw ValueError("n_sources exceeds category count");
  std::vector<int> order(static_cast<size_t>(cats));
  for (int i = 0; i < cats; ++i) order[static_cast<size_t>(i)] = i;
  for (int i = cats - 1; i > 0; --i) {
    std::uniform_int_distribution<int> d(0, i);
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(d(rng))]);
  }
  std::vector<const ManifestItem*> picked;
  for (int i = 0; i < n; ++i) {
    auto pool = data.split_items(split, order[static_cast<size_t>(i)]);
    if (pool.empty()) throw ValueError("no items for category in split " + split);
    std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
    picked.push_back(pool[d(rng)]);
  }
  return picked;
}

}  // namespace detail

// Runs the optimization loop: per mixture, one forward per source, the
// separation objective plus the two visual contrastive objectives, one
// backward; gradients accumulate over the batch before each SGD step.
// Single-threaded and fully deterministic for a given seed.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const std::string& out_dir = "") {
  cfg.validate();
  if (cfg.n_sources > data.config().categories) {
    throw ValueError("n_sources exceeds dataset categories");
  }
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  TrainResult result;
  result.model = std::make_unique<SlowFastModel>(cfg.model, mix_seed(cfg.seed, 0x4d4f44454cULL));
  auto& model = *result.model;
  auto& g = model.graph();

  OptimizerState opt;
  opt.lr = cfg.lr;

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x545241494eULL));
  const bool contrast_on = cfg.weights.r1 != 0.0 || cfg.weights.r2 != 0.0;
  PartnerSampler partner_sampler;
  if (contrast_on) {
    partner_sampler = [&data](int category, std::mt19937_64& r) {
      auto pool = data.split_items("train", category);
      if (pool.empty()) throw ValueError("no partner items for category");
      std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
      return data.sample(*pool[d(r)]);
    };
  }

  const int image_size = cfg.model.image_size;
  for (int step = 0; step < cfg.steps; ++step) {
    StepLog log;
    log.step = step;
    g.clear_tape();
    for (int b = 0; b < cfg.batch_size; ++b) {
      auto picked = detail::draw_mixture_items(data, "train", cfg.n_sources, rng);
      std::vector<Sample> samples;
      for (auto* mi : picked) samples.push_back(data.sample(*mi));
      auto item = build_mixture(std::move(samples), cfg.stft, partner_sampler, rng,
                                data.config().categories);

      auto mix_mag = spectrogram_tensor(magnitude(item.mixture_spec));
      auto images = detail::stack_images(item.sources, image_size);
      auto fwd = model.forward_sources(mix_mag, images, true);

      std::vector<PairTerms> pair_terms;
      if (!item.contrast_pairs.empty()) {
        auto partner_images = detail::stack_images(item.partners, image_size);
        auto partner_vf = model.vision_forward(partner_images, true);
        for (size_t i = 0; i < item.contrast_pairs.size(); ++i) {
          const auto& pair = item.contrast_pairs[i];
          pair_terms.push_back(PairTerms{
              ad::narrow(g, fwd.vf.embedding, pair.anchor_index, 1),
              ad::narrow(g, partner_vf.embedding, static_cast<int>(i), 1),
              ad::narrow(g, fwd.vf.fmap, pair.anchor_index, 1), pair.label});
        }
      }

      auto sep = separation_loss(g, fwd, item.gt_masks);
      auto contrast = contrast_loss(g, pair_terms, cfg.weights);
      auto total = total_loss(g, sep, contrast.loss);
      if (!std::isfinite(total->data[0])) {
        throw Error("train: non-finite loss at step " + std::to_string(step) +
                    " (l_sep=" + std::to_string(sep->data[0]) +
                    ", contrast=" + std::to_string(contrast.loss->data[0]) + ")");
      }
      log.l_sep += sep->data[0];
      log.l_e += contrast.mean_embedding;
      log.l_m += contrast.mean_localization;
      log.total += total->data[0];
      g.backward(ad::mul_scalar(g, total, 1.0 / cfg.batch_size));
    }
    sgd_step(g, opt);
    log.l_sep /= cfg.batch_size;
    log.l_e /= cfg.batch_size;
    log.l_m /= cfg.batch_size;
    log.total /= cfg.batch_size;
    result.logs.push_back(log);

    if (!out_dir.empty() && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      save_checkpoint(g, (fs::path(out_dir) / ("ckpt-" + std::to_string(step + 1) + ".bin")).string());
    }
  }

  if (!out_dir.empty()) {
    result.checkpoint_path = (fs::path(out_dir) / "ckpt.bin").string();
    save_checkpoint(g, result.checkpoint_path);
    std::ofstream f(fs::path(out_dir) / "train_log.ndjson");
    if (!f) throw IoError("cannot write training log in " + out_dir);
    for (const auto& s : result.logs) f << step_log_to_json(s).dump() << "\n";
  }
  return result;
}

struct EvalItemResult {
  int mixture_index = 0;
  std::string source_id;
  int source_category = 0;
  EvalScores model_scores;
  EvalScores baseline_scores;  // copy-paste: the mixture scored as estimate
};

struct EvalReport {
  EvalSummary model_summary;
  EvalSummary baseline_summary;
  std::vector<EvalItemResult> items;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["aggregate"] = eval_summary_to_json(r.model_summary);
  j["copy_paste_baseline"] = eval_summary_to_json(r.baseline_summary);
  j["items"] = nlohmann::json::array();
  for (const auto& it : r.items) {
    j["items"].push_back({{"mixture", it.mixture_index},
                          {"source", it.source_id},
                          {"category", it.source_category},
                          {"scores", eval_scores_to_json(it.model_scores)},
                          {"copy_paste", eval_scores_to_json(it.baseline_scores)}});
  }
  return j;
}

// Inference over deterministic test mixtures: the N sources of each mixture
// run as one batched pass (normalization statistics pool over them, matching
// training), each mask multiplies the mixture spectrogram, and the waveform
// comes back through the inverse STFT with the mixture phase. The copy-paste
// baseline (mixture as estimate) is scored identically. Mixture selection
// depends only on the dataset seed, so different training seeds are
// evaluated on identical mixtures.
inline EvalReport evaluate(SlowFastModel& model, const Dataset& data, const TrainConfig& cfg) {
  auto& g = model.graph();
  ad::NoGradGuard no_grad(g);

  std::mt19937_64 rng(mix_seed(data.seed(), 0x4556414cULL));
  EvalReport report;
  std::vector<EvalScores> model_scores, baseline_scores;

  for (int m = 0; m < cfg.eval_mixtures; ++m) {
    auto picked = detail::draw_mixture_items(data, "test", cfg.n_sources, rng);
    std::vector<Sample> samples;
    for (auto* mi : picked) samples.push_back(data.sample(*mi));
    auto item = build_mixture(std::move(samples), cfg.stft, nullptr, rng,
                              data.config().categories);

    auto mix_mag = spectrogram_tensor(magnitude(item.mixture_spec));
    const int est_len = (item.mixture_spec.bins.cols - 1) * item.mixture_spec.hop_len +
                        item.mixture_spec.window_len;

    std::vector<Waveform> refs;
    for (const auto& src : item.sources) {
      Waveform r = src.waveform;
      r.samples.resize(static_cast<size_t>(est_len));
      refs.push_back(std::move(r));
    }
    // Copy-paste baseline: the mixture as its own estimate, resynthesized
    // through the same analysis chain (the all-ones mask), so model and
    // baseline differ only by their masks.
    Waveform copy_paste = istft(item.mixture_spec);
    copy_paste.samples.resize(static_cast<size_t>(est_len));

    auto images = detail::stack_images(item.sources, cfg.model.image_size);
    auto fwd = model.forward_sources(mix_mag, images, false);
    const auto& mask_b = fwd.final_output().mask;
    const std::int64_t plane =
        static_cast<std::int64_t>(mask_b->dim(2)) * mask_b->dim(3);

    for (size_t n = 0; n < item.sources.size(); ++n) {
      RealGrid mask(mask_b->dim(2), mask_b->dim(3));
      std::copy_n(mask_b->data.begin() + static_cast<std::int64_t>(n) * plane, plane,
                  mask.v.begin());
      auto est = istft(apply_mask(mask, item.mixture_spec));
      est.samples.resize(static_cast<size_t>(est_len));

      EvalItemResult ir;
      ir.mixture_index = m;
      ir.source_id = item.sources[n].id;
      ir.source_category = item.sources[n].category;
      ir.model_scores = bss_eval(est, refs, static_cast<int>(n));
      ir.baseline_scores = bss_eval(copy_paste, refs, static_cast<int>(n));
      model_scores.push_back(ir.model_scores);
      baseline_scores.push_back(ir.baseline_scores);
      report.items.push_back(std::move(ir));
    }
  }
  report.model_summary = aggregate(model_scores);
  report.baseline_summary = aggregate(baseline_scores);
  return report;
}

}  // namespace vsep
