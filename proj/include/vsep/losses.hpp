#pragma once

#include <cmath>
#include <vector>

#include "vsep/autodiff.hpp"
#include "vsep/common.hpp"
#include "vsep/dsp.hpp"
#include "vsep/model.hpp"

namespace vsep {

struct LossWeights {
  double r1 = 0.1;      // embedding objective
  double r2 = 0.1;      // localization objective
  double margin = 1.0;  // embedding hinge margin
};

// (anchor source n, sampled partner m, y = 1 iff same category)
struct ContrastivePair {
  int anchor_index = 0;
  int partner_index = 0;
  int label = 0;
};

// The stabilizer inside the hinge's square root is the literal constant
// exp(-9).
inline double contrast_epsilon() { return std::exp(-9.0); }

// Margin loss on squared embedding distance: positives are pulled together,
// negatives pushed beyond the margin.
inline ad::TensorPtr embedding_contrast(ad::Graph& g, const ad::TensorPtr& e_m,
                                        const ad::TensorPtr& e_n, int y, double margin = 1.0) {
  if (e_m->numel() != e_n->numel()) throw ShapeError("embedding_contrast: length mismatch");
  auto diff = ad::sub(g, e_m, e_n);
  auto dist = ad::sum_all(g, ad::mul(g, diff, diff));
  if (y != 0) {
    return ad::mul_scalar(g, dist, 0.5);
  }
  auto root = ad::sqrt_elem(g, ad::add_scalar(g, dist, contrast_epsilon()));
  auto hinge = ad::relu(g, ad::add_scalar(g, ad::mul_scalar(g, root, -1.0), margin));
  return ad::mul_scalar(g, ad::mul(g, hinge, hinge), 0.5);
}

// BCE between the max-pooled localization response of (partner embedding,
// anchor feature map) and the pair label. The response is already
// post-sigmoid, so this is probability-space BCE.
inline ad::TensorPtr localization_contrast(ad::Graph& g, const ad::TensorPtr& e_m,
                                           const ad::TensorPtr& f_n, int y) {
  auto loc = localization_map(g, e_m, f_n);
  return ad::bce_prob(g, loc.score, static_cast<double>(y));
}

// One resolved contrastive pair: the anchor n's embedding and feature map
// plus the partner m's embedding.
struct PairTerms {
  ad::TensorPtr e_anchor;
  ad::TensorPtr e_partner;
  ad::TensorPtr fmap_anchor;
  int label = 0;
};

struct ContrastResult {
  ad::TensorPtr loss;        // mean over pairs of r1*L_e + r2*L_M
  double mean_embedding = 0.0;     // unweighted mean L_e, for logging
  double mean_localization = 0.0;  // unweighted mean L_M, for logging
  bool empty = false;        // no pairs: loss is 0 (contrast-off ablation)
};

inline ContrastResult contrast_loss(ad::Graph& g, const std::vector<PairTerms>& pairs,
                                    const LossWeights& w) {
  ContrastResult res;
  if (pairs.empty()) {
    res.loss = ad::make_tensor({1});
    res.empty = true;
    return res;
  }
  ad::TensorPtr total;
  for (const auto& p : pairs) {
    auto le = embedding_contrast(g, p.e_partner, p.e_anchor, p.label, w.margin);
    auto lm = localization_contrast(g, p.e_partner, p.fmap_anchor, p.label);
    res.mean_embedding += le->data[0];
    res.mean_localization += lm->data[0];
    auto term = ad::add(g, ad::mul_scalar(g, le, w.r1), ad::mul_scalar(g, lm, w.r2));
    total = total ? ad::add(g, total, term) : term;
  }
  res.loss = ad::mul_scalar(g, total, 1.0 / static_cast<double>(pairs.size()));
  res.mean_embedding /= static_cast<double>(pairs.size());
  res.mean_localization /= static_cast<double>(pairs.size());
  return res;
}

inline ad::TensorPtr mask_target_tensor(const BinaryMask& mask) {
  auto t = ad::make_tensor({1, 1, mask.bits.rows, mask.bits.cols});
  for (std::int64_t i = 0; i < mask.bits.size(); ++i) {
    t->data[i] = static_cast<double>(mask.bits.v[i]);
  }
  return t;
}

// Sum over sources of per-stream mean BCE against the ground-truth masks,
// on pre-sigmoid logits at full resolution. Single-stream results contribute
// one term, dual-stream results two.
inline ad::TensorPtr separation_loss(ad::Graph& g, const std::vector<ForwardResult>& per_source,
                                     const std::vector<BinaryMask>& gt_masks) {
  if (per_source.size() != gt_masks.size()) {
    throw ShapeError("separation_loss: source/mask count mismatch");
  }
  if (per_source.empty()) throw ValueError("separation_loss: no sources");
  ad::TensorPtr total;
  for (size_t n = 0; n < per_source.size(); ++n) {
    auto target = mask_target_tensor(gt_masks[n]);
    auto term = ad::bce_with_logits(g, per_source[n].first.logits_full, target);
    if (per_source[n].second) {
      term = ad::add(g, term, ad::bce_with_logits(g, per_source[n].second->logits_full, target));
    }
    total = total ? ad::add(g, total, term) : term;
  }
  return total;
}

inline ad::TensorPtr total_loss(ad::Graph& g, const ad::TensorPtr& sep,
                                const ad::TensorPtr& contrast) {
  return ad::add(g, sep, contrast);
}

inline ad::TensorPtr stacked_mask_targets(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw ValueError("stacked_mask_targets: no masks");
  const int h = masks[0].bits.rows, w = masks[0].bits.cols;
  auto t = ad::make_tensor({static_cast<int>(masks.size()), 1, h, w});
  std::int64_t off = 0;
  for (const auto& m : masks) {
    if (m.bits.rows != h || m.bits.cols != w) throw ShapeError("stacked_mask_targets: shape mismatch");
    for (std::int64_t i = 0; i < m.bits.size(); ++i) t->data[off + i] = m.bits.v[i];
    off += m.bits.size();
  }
  return t;
}

// Batched form of the same objective: the batched mean BCE times N equals
// the sum over per-source mean BCEs.
inline ad::TensorPtr separation_loss(ad::Graph& g, const BatchedForward& fwd,
                                     const std::vector<BinaryMask>& gt_masks) {
  if (static_cast<int>(gt_masks.size()) != fwd.sources) {
    throw ShapeError("separation_loss: source/mask count mismatch");
  }
  const double n = static_cast<double>(fwd.sources);
  auto targets = stacked_mask_targets(gt_masks);
  auto term = ad::mul_scalar(g, ad::bce_with_logits(g, fwd.first.logits_full, targets), n);
  if (fwd.second) {
    auto second = ad::mul_scalar(g, ad::bce_with_logits(g, fwd.second->logits_full, targets), n);
    term = ad::add(g, term, second);
  }
  return term;
}

}  // namespace vsep
