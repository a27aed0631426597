#pragma once

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vsep/autodiff.hpp"
#include "vsep/common.hpp"
#include "vsep/dsp.hpp"

namespace vsep {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Stream depths come in {5,7,9}; a depth of 0 disables that stream and the
// remaining one runs as a plain single-spectrogram masking network.
struct ModelConfig {
  int category_count = 4;                       // C_V = C_S
  std::vector<int> vision_channels = {};        // 4 stages; default {16,32,64,C}
  int slow_layers = 7;
  int fast_layers = 7;
  int slow_alpha = 2;
  int fast_alpha = 1;
  std::string ordering = "slow-first";          // or "fast-first"
  std::vector<int> unet_channels = {16, 32, 64};  // prefix, padded with C per depth
  int image_size = 64;

  bool slow_enabled() const { return slow_layers > 0; }
  bool fast_enabled() const { return fast_layers > 0; }
  bool dual_stream() const { return slow_enabled() && fast_enabled(); }
  bool slow_first() const { return ordering == "slow-first"; }

  std::vector<int> vision_schedule() const {
    if (vision_channels.empty()) return {16, 32, 64, category_count};
    return vision_channels;
  }

  // Encoder channel schedule for a stream of the given depth; the prefix is
  // padded with C so the bottleneck always carries C channels for the
  // attention fusion.
  std::vector<int> unet_schedule(int depth) const {
    std::vector<int> s = unet_channels;
    if (static_cast<int>(s.size()) > depth) {
      throw ValueError("unet_channels longer than stream depth");
    }
    while (static_cast<int>(s.size()) < depth) s.push_back(category_count);
    if (s.back() != category_count) {
      throw ValueError("unet_channels must end at category_count for the bottleneck");
    }
    return s;
  }

  void validate() const {
    if (category_count < 1) throw ValueError("category_count must be >= 1");
    auto ok_depth = [](int d) { return d == 0 || d == 5 || d == 7 || d == 9; };
    if (!ok_depth(slow_layers) || !ok_depth(fast_layers)) {
      throw ValueError("stream depth must be one of {0,5,7,9}");
    }
    if (!slow_enabled() && !fast_enabled()) throw ValueError("both streams disabled");
    if (slow_alpha < 1 || fast_alpha < 1) throw ValueError("alpha must be >= 1");
    if (ordering != "slow-first" && ordering != "fast-first") {
      throw ValueError("ordering must be slow-first or fast-first");
    }
    if (dual_stream()) {
      if (slow_first() && !(fast_alpha < slow_alpha)) {
        throw ValueError("slow-first ordering requires fast_alpha < slow_alpha");
      }
      if (!slow_first() && !(slow_alpha < fast_alpha)) {
        throw ValueError("fast-first ordering requires slow_alpha < fast_alpha");
      }
    }
    if (image_size < 16 || image_size % 16 != 0) {
      throw ValueError("image_size must be a positive multiple of 16");
    }
    const auto vs = vision_schedule();
    if (vs.size() != 4) throw ValueError("vision_channels must list 4 stages");
    for (int c : vs) {
      if (c < 1) throw ValueError("vision_channels entries must be positive");
    }
    if (vs.back() != category_count) {
      throw ValueError("last vision channel must equal category_count");
    }
    for (int c : unet_channels) {
      if (c < 1) throw ValueError("unet_channels entries must be positive");
    }
    if (slow_enabled()) (void)unet_schedule(slow_layers);
    if (fast_enabled()) (void)unet_schedule(fast_layers);
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["category_count"] = c.category_count;
  j["vision_channels"] = c.vision_schedule();
  j["slow_layers"] = c.slow_layers;
  j["fast_layers"] = c.fast_layers;
  j["slow_alpha"] = c.slow_alpha;
  j["fast_alpha"] = c.fast_alpha;
  j["ordering"] = c.ordering;
  j["unet_channels"] = c.unet_channels;
  j["image_size"] = c.image_size;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "category_count", "vision_channels", "slow_layers", "fast_layers", "slow_alpha",
      "fast_alpha",     "ordering",        "unet_channels", "image_size"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ValueError("unknown model config field: " + it.key());
    }
  }
  ModelConfig c;
  if (j.contains("category_count")) c.category_count = j.at("category_count").get<int>();
  if (j.contains("vision_channels")) c.vision_channels = j.at("vision_channels").get<std::vector<int>>();
  if (j.contains("slow_layers")) c.slow_layers = j.at("slow_layers").get<int>();
  if (j.contains("fast_layers")) c.fast_layers = j.at("fast_layers").get<int>();
  if (j.contains("slow_alpha")) c.slow_alpha = j.at("slow_alpha").get<int>();
  if (j.contains("fast_alpha")) c.fast_alpha = j.at("fast_alpha").get<int>();
  if (j.contains("ordering")) c.ordering = j.at("ordering").get<std::string>();
  if (j.contains("unet_channels")) c.unet_channels = j.at("unet_channels").get<std::vector<int>>();
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Layer plans: the single description both the live network and the cost
// accounting are built from, so the two cannot drift apart.
// ---------------------------------------------------------------------------

struct LayerPlan {
  enum class Kind { Conv, Deconv, BatchNorm, Activation, Avga, Resample, GlobalPool };
  Kind kind = Kind::Conv;
  std::string module;
  std::string name;
  int in_c = 0, out_c = 0, k = 0, stride = 1, pad = 0, dilation = 1;
  int alpha = 1;          // Resample only
  bool upsample = false;  // Resample direction
};

inline std::vector<LayerPlan> vision_plan(const ModelConfig& cfg) {
  const auto ch = cfg.vision_schedule();
  std::vector<LayerPlan> plan;
  int in_c = 3;
  for (int i = 0; i < 4; ++i) {
    const bool dilated = i == 3;  // last stage trades receptive field via dilation
    plan.push_back({LayerPlan::Kind::Conv, "vision", "stage" + std::to_string(i), in_c, ch[i], 3,
                    2, dilated ? 2 : 1, dilated ? 2 : 1});
    plan.push_back({LayerPlan::Kind::BatchNorm, "vision", "stage" + std::to_string(i) + ".bn", ch[i],
                    ch[i]});
    plan.push_back({LayerPlan::Kind::Activation, "vision", "stage" + std::to_string(i) + ".act",
                    ch[i], ch[i]});
    in_c = ch[i];
  }
  plan.push_back({LayerPlan::Kind::GlobalPool, "vision", "pool", in_c, in_c});
  return plan;
}

// Encoder: first four stages stride 2 (k=4), deeper stages stride 1 (k=3), so
// the bottleneck sits at exactly 1/16 spatial resolution for every depth.
// Decoder mirrors the encoder with skip connections; the final layer emits
// one logit channel with no norm or activation.
inline std::vector<LayerPlan> unet_plan(const ModelConfig& cfg, const std::string& module,
                                        int depth, int in_channels, int alpha) {
  const auto sched = cfg.unet_schedule(depth);
  std::vector<LayerPlan> plan;
  plan.push_back({LayerPlan::Kind::Resample, module, "phi", in_channels, in_channels, 0, 1, 0, 1,
                  alpha, false});
  int in_c = in_channels;
  for (int i = 0; i < depth; ++i) {
    const bool down = i < 4;
    plan.push_back({LayerPlan::Kind::Conv, module, "enc" + std::to_string(i), in_c, sched[i],
                    down ? 4 : 3, down ? 2 : 1, 1, 1});
    plan.push_back({LayerPlan::Kind::BatchNorm, module, "enc" + std::to_string(i) + ".bn",
                    sched[i], sched[i]});
    plan.push_back({LayerPlan::Kind::Activation, module, "enc" + std::to_string(i) + ".act",
                    sched[i], sched[i]});
    in_c = sched[i];
  }
  plan.push_back({LayerPlan::Kind::Avga, module, "avga", sched[depth - 1], sched[depth - 1]});
  int prev = sched[depth - 1];
  for (int j = 0; j < depth; ++j) {
    const int mirror = depth - 1 - j;
    const bool up = mirror < 4;
    const bool last = j == depth - 1;
    const int dec_in = j == 0 ? prev : prev + sched[mirror];  // skip from encoder stage `mirror`
    const int dec_out = last ? 1 : sched[mirror == 0 ? 0 : mirror - 1];
    plan.push_back({up ? LayerPlan::Kind::Deconv : LayerPlan::Kind::Conv, module,
                    "dec" + std::to_string(j), dec_in, dec_out, up ? 4 : 3, up ? 2 : 1, 1, 1});
    if (!last) {
      plan.push_back({LayerPlan::Kind::BatchNorm, module, "dec" + std::to_string(j) + ".bn",
                      dec_out, dec_out});
      plan.push_back({LayerPlan::Kind::Activation, module, "dec" + std::to_string(j) + ".act",
                      dec_out, dec_out});
    }
    prev = dec_out;
  }
  plan.push_back({LayerPlan::Kind::Resample, module, "phi_inv", 1, 1, 0, 1, 0, 1, alpha, true});
  return plan;
}

// Plan of one full forward pass for a single source, streams in run order.
inline std::vector<LayerPlan> model_plan(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<LayerPlan> plan = vision_plan(cfg);
  auto append = [&plan](std::vector<LayerPlan> p) {
    plan.insert(plan.end(), p.begin(), p.end());
  };
  if (cfg.dual_stream()) {
    if (cfg.slow_first()) {
      append(unet_plan(cfg, "slow", cfg.slow_layers, 1, cfg.slow_alpha));
      append(unet_plan(cfg, "fast", cfg.fast_layers, 2, cfg.fast_alpha));
    } else {
      append(unet_plan(cfg, "fast", cfg.fast_layers, 1, cfg.fast_alpha));
      append(unet_plan(cfg, "slow", cfg.slow_layers, 2, cfg.slow_alpha));
    }
  } else if (cfg.slow_enabled()) {
    append(unet_plan(cfg, "slow", cfg.slow_layers, 1, cfg.slow_alpha));
  } else {
    append(unet_plan(cfg, "fast", cfg.fast_layers, 1, cfg.fast_alpha));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// AVGA and localization
// ---------------------------------------------------------------------------

// Self-attention of the visual embedding applied as a channel-mixing matrix:
// out = (e e^T) . F with F flattened to C x (H*W). Output shape equals the
// feature shape.
inline ad::TensorPtr avga(ad::Graph& g, const ad::TensorPtr& embedding,
                          const ad::TensorPtr& features) {
  const int c = static_cast<int>(embedding->numel());
  const auto& fs = features->shape;
  int fc = 0;
  std::int64_t hw = 1;
  if (features->rank() == 3) {
    fc = fs[0];
    hw = std::int64_t(fs[1]) * fs[2];
  } else if (features->rank() == 4 && fs[0] == 1) {
    fc = fs[1];
    hw = std::int64_t(fs[2]) * fs[3];
  } else {
    throw ShapeError("avga: features must be (C,H,W) or (1,C,H,W)");
  }
  if (fc != c) throw ShapeError("avga: channel mismatch");
  auto attn = ad::outer(g, embedding, embedding);
  auto flat = ad::reshape(g, features, {c, static_cast<int>(hw)});
  auto mixed = ad::matmul(g, attn, flat);
  return ad::reshape(g, mixed, fs);
}

struct LocalizationMap {
  ad::TensorPtr map;    // (H',W') post-sigmoid, for visualization
  ad::TensorPtr score;  // scalar max over positions, for the loss
};

// Per-position channel inner product between an embedding and a feature map,
// squashed by sigmoid and max-pooled to a scalar.
inline LocalizationMap localization_map(ad::Graph& g, const ad::TensorPtr& embedding,
                                        const ad::TensorPtr& fmap) {
  const int c = static_cast<int>(embedding->numel());
  const auto& fs = fmap->shape;
  int fc = 0, h = 0, w = 0;
  if (fmap->rank() == 3) {
    fc = fs[0];
    h = fs[1];
    w = fs[2];
  } else if (fmap->rank() == 4 && fs[0] == 1) {
    fc = fs[1];
    h = fs[2];
    w = fs[3];
  } else {
    throw ShapeError("localization_map: fmap must be (C,H,W) or (1,C,H,W)");
  }
  if (fc != c) throw ShapeError("localization_map: channel mismatch");
  auto e = ad::reshape(g, embedding, {1, c});
  auto flat = ad::reshape(g, fmap, {c, h * w});
  auto inner = ad::matmul(g, e, flat);
  auto map = ad::reshape(g, ad::sigmoid(g, inner), {h, w});
  auto score = ad::max_all(g, map);
  return {map, score};
}

// ---------------------------------------------------------------------------
// Network blocks
// ---------------------------------------------------------------------------

// Normalization statistics source for a forward pass. Training updates the
// running buffers; inference normalizes with the statistics of the current
// batched sources without touching state (per-mixture statistics vary too
// widely at this scale for running averages to stand in for them); Running
// uses the stored averages, which keeps the pass smooth for
// finite-difference probing.
enum class BnMode { Train, Batch, Running };

namespace detail {

struct ConvBlock {
  ad::TensorPtr w, b, bn_gamma, bn_beta, bn_rmean, bn_rvar;
  bool transpose = false;
  bool has_bn = true;
  bool has_act = true;
  int stride = 1, pad = 0, dilation = 1;

  ad::TensorPtr forward(ad::Graph& g, const ad::TensorPtr& x, BnMode mode) const {
    auto y = transpose ? ad::conv_transpose2d(g, x, w, b, stride, pad)
                       : ad::conv2d(g, x, w, b, stride, pad, dilation);
    if (has_bn) {
      switch (mode) {
        case BnMode::Train:
          y = ad::batchnorm2d(g, y, bn_gamma, bn_beta, bn_rmean, bn_rvar, true);
          break;
        case BnMode::Batch:  // batch statistics, zero momentum: state untouched
          y = ad::batchnorm2d(g, y, bn_gamma, bn_beta, bn_rmean, bn_rvar, true, 0.0);
          break;
        case BnMode::Running:
          y = ad::batchnorm2d(g, y, bn_gamma, bn_beta, bn_rmean, bn_rvar, false);
          break;
      }
    }
    if (has_act) y = ad::leaky_relu(g, y, 0.2);
    return y;
  }
};

// Instantiates parameters for the Conv/Deconv + BatchNorm + Activation rows
// of a plan, in plan order.
inline std::vector<ConvBlock> build_blocks(ad::Graph& g, const std::vector<LayerPlan>& plan,
                                           std::mt19937_64& rng) {
  std::vector<ConvBlock> blocks;
  for (size_t i = 0; i < plan.size(); ++i) {
    const auto& row = plan[i];
    if (row.kind != LayerPlan::Kind::Conv && row.kind != LayerPlan::Kind::Deconv) continue;
    ConvBlock blk;
    blk.transpose = row.kind == LayerPlan::Kind::Deconv;
    blk.stride = row.stride;
    blk.pad = row.pad;
    blk.dilation = row.dilation;
    const std::string base = row.module + "." + row.name;
    const std::vector<int> wshape = blk.transpose
                                        ? std::vector<int>{row.in_c, row.out_c, row.k, row.k}
                                        : std::vector<int>{row.out_c, row.in_c, row.k, row.k};
    blk.w = g.parameter(base + ".w", wshape);
    ad::fill_normal(rng, blk.w, std::sqrt(2.0 / (double(row.in_c) * row.k * row.k)));
    blk.b = g.parameter(base + ".b", {row.out_c});
    blk.has_bn = i + 1 < plan.size() && plan[i + 1].kind == LayerPlan::Kind::BatchNorm;
    if (blk.has_bn) {
      blk.bn_gamma = g.parameter(base + ".bn.gamma", {row.out_c});
      ad::fill_value(blk.bn_gamma, 1.0);
      blk.bn_beta = g.parameter(base + ".bn.beta", {row.out_c});
      blk.bn_rmean = g.buffer(base + ".bn.running_mean", {row.out_c}, 0.0);
      blk.bn_rvar = g.buffer(base + ".bn.running_var", {row.out_c}, 1.0);
    }
    const size_t act_at = i + (blk.has_bn ? 2 : 1);
    blk.has_act = act_at < plan.size() && plan[act_at].kind == LayerPlan::Kind::Activation;
    blocks.push_back(std::move(blk));
  }
  return blocks;
}

}  // namespace detail

struct VisionFeatures {
  ad::TensorPtr fmap;       // (1, C, H/16, W/16)
  ad::TensorPtr embedding;  // (1, C), the spatial mean of fmap
};

struct StreamOutput {
  ad::TensorPtr logits_full;  // (1,1,H_S,W_S) pre-sigmoid
  ad::TensorPtr mask;         // sigmoid(logits), in (0,1)
  ad::TensorPtr sep_mag;      // mask * |X_mix| per bin
};

struct ForwardResult {
  VisionFeatures vf;
  StreamOutput first;
  std::optional<StreamOutput> second;

  const StreamOutput& final_output() const { return second ? *second : first; }
};

// Result of one batched pass where the N sources of a mixture travel the
// streams together; batch-norm statistics then pool over the sources, which
// is what keeps the per-source attention signal alive during training.
struct BatchedForward {
  int sources = 1;
  VisionFeatures vf;   // (N,C,...) per-source rows
  StreamOutput first;  // batched (N,1,H,W) tensors
  std::optional<StreamOutput> second;

  const StreamOutput& final_output() const { return second ? *second : first; }
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

class SlowFastModel {
 public:
  SlowFastModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(splitmix64(seed));
    vision_ = detail::build_blocks(graph_, vision_plan(cfg_), rng);
    // Larger initial output scale so the quadratic attention e*e^T carries
    // usable signal from the first steps.
    ad::fill_value(vision_.back().bn_gamma, 2.0);
    const bool dual = cfg_.dual_stream();
    auto build_stream = [&](const std::string& module, int depth, int in_c, int alpha) {
      return detail::build_blocks(graph_, unet_plan(cfg_, module, depth, in_c, alpha), rng);
    };
    if (dual) {
      if (cfg_.slow_first()) {
        slow_ = build_stream("slow", cfg_.slow_layers, 1, cfg_.slow_alpha);
        fast_ = build_stream("fast", cfg_.fast_layers, 2, cfg_.fast_alpha);
      } else {
        fast_ = build_stream("fast", cfg_.fast_layers, 1, cfg_.fast_alpha);
        slow_ = build_stream("slow", cfg_.slow_layers, 2, cfg_.slow_alpha);
      }
    } else if (cfg_.slow_enabled()) {
      slow_ = build_stream("slow", cfg_.slow_layers, 1, cfg_.slow_alpha);
    } else {
      fast_ = build_stream("fast", cfg_.fast_layers, 1, cfg_.fast_alpha);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ad::Graph& graph() { return graph_; }
  const ad::Graph& graph() const { return graph_; }

  VisionFeatures vision_forward(const ad::TensorPtr& image, BnMode mode) {
    if (image->rank() != 4 || image->dim(1) != 3 || image->dim(2) != cfg_.image_size ||
        image->dim(3) != cfg_.image_size) {
      throw ShapeError("vision_forward: image must be (N,3,S,S) with S = image_size");
    }
    ad::TensorPtr x = image;
    for (const auto& blk : vision_) x = blk.forward(graph_, x, mode);
    VisionFeatures vf;
    vf.fmap = x;
    vf.embedding = ad::spatial_avg_pool(graph_, x);
    return vf;
  }

  VisionFeatures vision_forward(const ad::TensorPtr& image, bool training) {
    return vision_forward(image, training ? BnMode::Train : BnMode::Batch);
  }

  // First-position stream: masks the mixture directly.
  StreamOutput slow_forward(const ad::TensorPtr& mix_mag, const VisionFeatures& vf, BnMode mode) {
    if (!cfg_.slow_enabled()) throw ValueError("slow stream disabled");
    return run_first(slow_, cfg_.slow_alpha, mix_mag, vf, mode);
  }
  StreamOutput slow_forward(const ad::TensorPtr& mix_mag, const VisionFeatures& vf,
                            bool training) {
    return slow_forward(mix_mag, vf, training ? BnMode::Train : BnMode::Batch);
  }

  // Second-position stream: refines the first stream's logits residually.
  StreamOutput fast_forward(const ad::TensorPtr& mix_mag, const StreamOutput& first,
                            const VisionFeatures& vf, BnMode mode) {
    if (!cfg_.fast_enabled()) throw ValueError("fast stream disabled");
    return run_second(fast_, cfg_.fast_alpha, mix_mag, first, vf, mode);
  }
  StreamOutput fast_forward(const ad::TensorPtr& mix_mag, const StreamOutput& first,
                            const VisionFeatures& vf, bool training) {
    return fast_forward(mix_mag, first, vf, training ? BnMode::Train : BnMode::Batch);
  }

  ForwardResult forward(const ad::TensorPtr& mix_mag, const ad::TensorPtr& image, BnMode mode) {
    if (image->dim(0) != 1 || mix_mag->dim(0) != 1) {
      throw ShapeError("forward: single-source path expects batch 1");
    }
    const auto b = forward_sources(mix_mag, image, mode);
    ForwardResult r;
    r.vf = b.vf;
    r.first = b.first;
    r.second = b.second;
    return r;
  }
  ForwardResult forward(const ad::TensorPtr& mix_mag, const ad::TensorPtr& image, bool training) {
    return forward(mix_mag, image, training ? BnMode::Train : BnMode::Batch);
  }

  // One batched pass for the N sources of a mixture: the sources share the
  // mixture input and travel the streams together.
  BatchedForward forward_sources(const ad::TensorPtr& mix_mag, const ad::TensorPtr& images,
                                 BnMode mode) {
    if (mix_mag->rank() != 4 || mix_mag->dim(0) != 1 || mix_mag->dim(1) != 1) {
      throw ShapeError("forward_sources: mixture must be (1,1,H_S,W_S)");
    }
    const int n = images->dim(0);
    auto mix_b = tile_batch(mix_mag, n);
    BatchedForward r;
    r.sources = n;
    r.vf = vision_forward(images, mode);
    if (cfg_.dual_stream()) {
      if (cfg_.slow_first()) {
        r.first = run_first(slow_, cfg_.slow_alpha, mix_b, r.vf, mode);
        r.second = run_second(fast_, cfg_.fast_alpha, mix_b, r.first, r.vf, mode);
      } else {
        r.first = run_first(fast_, cfg_.fast_alpha, mix_b, r.vf, mode);
        r.second = run_second(slow_, cfg_.slow_alpha, mix_b, r.first, r.vf, mode);
      }
    } else if (cfg_.slow_enabled()) {
      r.first = run_first(slow_, cfg_.slow_alpha, mix_b, r.vf, mode);
    } else {
      r.first = run_first(fast_, cfg_.fast_alpha, mix_b, r.vf, mode);
    }
    return r;
  }
  BatchedForward forward_sources(const ad::TensorPtr& mix_mag, const ad::TensorPtr& images,
                                 bool training) {
    return forward_sources(mix_mag, images, training ? BnMode::Train : BnMode::Batch);
  }

  // Zeroes the logit-emitting layer of every stream; used by tests that pin
  // the sigma(0) = 0.5 baseline.
  void zero_final_logit_layers() {
    for (auto* stream : {&slow_, &fast_}) {
      if (stream->empty()) continue;
      auto& blk = stream->back();
      ad::fill_value(blk.w, 0.0);
      ad::fill_value(blk.b, 0.0);
    }
  }

 private:
  // Plain data tiling of a constant (1,C,H,W) input along the batch axis.
  static ad::TensorPtr tile_batch(const ad::TensorPtr& x, int n) {
    if (n == 1) return x;
    auto out = ad::make_tensor({n, x->dim(1), x->dim(2), x->dim(3)});
    const std::int64_t span = x->numel();
    for (int i = 0; i < n; ++i) {
      std::copy_n(x->data.begin(), span, out->data.begin() + i * span);
    }
    return out;
  }

  ad::TensorPtr unet_pass(const std::vector<detail::ConvBlock>& blocks, int depth, int alpha,
                          const ad::TensorPtr& log_spec, const VisionFeatures& vf, BnMode mode) {
    check_spec_dims(log_spec, alpha);
    ad::TensorPtr x = ad::time_mean_pool(graph_, log_spec, alpha);
    std::vector<ad::TensorPtr> skips;
    for (int i = 0; i < depth; ++i) {
      x = blocks[static_cast<size_t>(i)].forward(graph_, x, mode);
      skips.push_back(x);
    }
    const int n = x->dim(0);
    if (n == 1) {
      x = avga(graph_, vf.embedding, x);
    } else {
      std::vector<ad::TensorPtr> attended;
      for (int i = 0; i < n; ++i) {
        auto e_i = ad::narrow(graph_, vf.embedding, i, 1);
        auto f_i = ad::narrow(graph_, x, i, 1);
        attended.push_back(avga(graph_, e_i, f_i));
      }
      x = ad::concat(graph_, attended, 0);
    }
    for (int j = 0; j < depth; ++j) {
      if (j > 0) x = ad::concat(graph_, {x, skips[static_cast<size_t>(depth - 1 - j)]}, 1);
      x = blocks[static_cast<size_t>(depth + j)].forward(graph_, x, mode);
    }
    return ad::time_repeat(graph_, x, alpha);
  }

  StreamOutput run_first(const std::vector<detail::ConvBlock>& blocks, int alpha,
                         const ad::TensorPtr& mix_mag, const VisionFeatures& vf, BnMode mode) {
    auto log_mix = ad::log1p_compress(graph_, mix_mag);
    StreamOutput out;
    out.logits_full =
        unet_pass(blocks, static_cast<int>(blocks.size()) / 2, alpha, log_mix, vf, mode);
    out.mask = ad::sigmoid(graph_, out.logits_full);
    out.sep_mag = ad::mul(graph_, out.mask, mix_mag);
    return out;
  }

  StreamOutput run_second(const std::vector<detail::ConvBlock>& blocks, int alpha,
                          const ad::TensorPtr& mix_mag, const StreamOutput& first,
                          const VisionFeatures& vf, BnMode mode) {
    if (first.logits_full->shape != mix_mag->shape) {
      throw ShapeError("fast_forward: first-stream output does not match mixture");
    }
    auto log_mix = ad::log1p_compress(graph_, mix_mag);
    auto log_sep = ad::log1p_compress(graph_, first.sep_mag);
    auto stacked = ad::concat(graph_, {log_mix, log_sep}, 1);
    auto residual =
        unet_pass(blocks, static_cast<int>(blocks.size()) / 2, alpha, stacked, vf, mode);
    StreamOutput out;
    out.logits_full = ad::add(graph_, first.logits_full, residual);
    out.mask = ad::sigmoid(graph_, out.logits_full);
    out.sep_mag = ad::mul(graph_, out.mask, mix_mag);
    return out;
  }

  void check_spec_dims(const ad::TensorPtr& spec, int alpha) const {
    if (spec->rank() != 4) throw ShapeError("stream input must be (N,C,H_S,W_S)");
    const int h = spec->dim(2), w = spec->dim(3);
    if (h % 16 != 0) throw ShapeError("H_S must be divisible by 16");
    if (w % (16 * alpha) != 0) throw ShapeError("W_S must be divisible by 16*alpha");
  }

  ModelConfig cfg_;
  ad::Graph graph_;
  std::vector<detail::ConvBlock> vision_;
  std::vector<detail::ConvBlock> slow_;
  std::vector<detail::ConvBlock> fast_;
};

// Wraps a magnitude grid as a constant (1,1,H,W) network input.
inline ad::TensorPtr spectrogram_tensor(const MagnitudeSpectrogram& m) {
  auto t = ad::make_tensor({1, 1, m.bins.rows, m.bins.cols});
  t->data.assign(m.bins.v.begin(), m.bins.v.end());
  return t;
}

// Reads a (1,1,H,W) or (H,W) mask tensor back into a grid.
inline RealGrid mask_grid(const ad::TensorPtr& mask) {
  int h = 0, w = 0;
  if (mask->rank() == 4 && mask->dim(0) == 1 && mask->dim(1) == 1) {
    h = mask->dim(2);
    w = mask->dim(3);
  } else if (mask->rank() == 2) {
    h = mask->dim(0);
    w = mask->dim(1);
  } else {
    throw ShapeError("mask_grid: expected (1,1,H,W) or (H,W)");
  }
  RealGrid g(h, w);
  g.v = mask->data;
  return g;
}

}  // namespace vsep
