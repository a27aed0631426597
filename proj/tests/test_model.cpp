#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "vsep/cost.hpp"
#include "vsep/model.hpp"
#include "vsep/reference.hpp"

using namespace vsep;

namespace {

ModelConfig micro_config() {
  ModelConfig mc;
  mc.category_count = 2;
  mc.vision_channels = {2, 3, 4, 2};
  mc.unet_channels = {3, 4};
  mc.slow_layers = 5;
  mc.fast_layers = 5;
  mc.slow_alpha = 2;
  mc.fast_alpha = 1;
  mc.image_size = 16;
  return mc;
}

ad::TensorPtr randn(std::mt19937_64& rng, std::vector<int> shape, double scale = 1.0) {
  auto t = ad::make_tensor(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t->data) v = d(rng);
  return t;
}

ad::TensorPtr random_spec(std::mt19937_64& rng, int h, int w) {
  auto t = ad::make_tensor({1, 1, h, w});
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (auto& v : t->data) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("model config validation", "[model]") {
  ModelConfig mc = micro_config();
  REQUIRE_NOTHROW(mc.validate());

  auto bad = mc;
  bad.slow_layers = 6;
  REQUIRE_THROWS_AS(bad.validate(), ValueError);

  bad = mc;
  bad.slow_layers = 0;
  bad.fast_layers = 0;
  REQUIRE_THROWS_AS(bad.validate(), ValueError);

  bad = mc;
  bad.slow_alpha = 1;  // slow-first needs fast_alpha < slow_alpha
  REQUIRE_THROWS_AS(bad.validate(), ValueError);

  bad = mc;
  bad.ordering = "fast-first";
  REQUIRE_THROWS_AS(bad.validate(), ValueError);  // needs slow_alpha < fast_alpha
  bad.slow_alpha = 1;
  bad.fast_alpha = 2;
  REQUIRE_NOTHROW(bad.validate());

  bad = mc;
  bad.vision_channels = {2, 3, 4, 5};  // last must equal category_count
  REQUIRE_THROWS_AS(bad.validate(), ValueError);

  bad = mc;
  bad.image_size = 20;
  REQUIRE_THROWS_AS(bad.validate(), ValueError);

  // Single-stream configs need no alpha ordering.
  auto solo = mc;
  solo.fast_layers = 0;
  solo.slow_alpha = 1;
  REQUIRE_NOTHROW(solo.validate());
}

TEST_CASE("model config JSON round trip rejects unknown fields", "[model]") {
  auto mc = micro_config();
  auto j = model_config_to_json(mc);
  auto back = model_config_from_json(j);
  CHECK(back.category_count == mc.category_count);
  CHECK(back.slow_alpha == mc.slow_alpha);
  CHECK(back.ordering == mc.ordering);
  CHECK(back.unet_channels == mc.unet_channels);

  j["mystery_field"] = 42;
  REQUIRE_THROWS_WITH(model_config_from_json(j),
                      Catch::Matchers::ContainsSubstring("unknown model config field"));
}

TEST_CASE("avga mixes channels through the embedding outer product", "[model]") {
  ad::Graph g;
  std::mt19937_64 rng(21);

  // A unit basis embedding keeps its own channel and zeroes the rest.
  const int c = 4, h = 3, w = 5;
  auto f = randn(rng, {c, h, w});
  auto e = ad::make_tensor({1, c});
  e->data[2] = 1.0;
  auto out = avga(g, e, f);
  REQUIRE(out->shape == f->shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < h * w; ++i) {
      const double want = ch == 2 ? f->data[2 * h * w + i] : 0.0;
      CHECK(out->data[ch * h * w + i] == Catch::Approx(want).margin(1e-15));
    }
  }

  // Zero embedding zeroes everything.
  auto e0 = ad::make_tensor({1, c});
  auto out0 = avga(g, e0, f);
  for (double v : out0->data) CHECK(v == 0.0);

  // Random case against the nested-loop oracle.
  auto er = randn(rng, {1, c});
  auto outr = avga(g, er, f);
  auto want = ref::avga(er->data, f->data, c, h, w);
  for (std::int64_t i = 0; i < outr->numel(); ++i) {
    CHECK(outr->data[i] == Catch::Approx(want[static_cast<size_t>(i)]).margin(1e-12));
  }

  // Bilinearity: scaling the embedding by s scales the output by s^2.
  auto es = ad::make_tensor({1, c});
  for (int i = 0; i < c; ++i) es->data[i] = 2.5 * er->data[i];
  auto outs = avga(g, es, f);
  for (std::int64_t i = 0; i < outr->numel(); ++i) {
    CHECK(outs->data[i] == Catch::Approx(6.25 * outr->data[i]).margin(1e-9));
  }

  auto bad_e = ad::make_tensor({1, c + 1});
  REQUIRE_THROWS_AS(avga(g, bad_e, f), ShapeError);
}

TEST_CASE("avga output dims equal input feature dims", "[model]") {
  ad::Graph g;
  std::mt19937_64 rng(22);
  for (auto [c, h, w] : {std::array<int, 3>{1, 1, 1}, {3, 2, 7}, {8, 4, 4}}) {
    auto f = randn(rng, {c, h, w});
    auto e = randn(rng, {1, c});
    CHECK(avga(g, e, f)->shape == f->shape);
  }
}

TEST_CASE("vision embedding is the exact spatial mean of the feature map", "[model]") {
  auto mc = micro_config();
  SlowFastModel model(mc, 31);
  std::mt19937_64 rng(32);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);
  auto vf = model.vision_forward(img, true);
  REQUIRE(vf.fmap->shape == std::vector<int>{1, 2, 1, 1});
  REQUIRE(vf.embedding->shape == std::vector<int>{1, 2});
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0;
    const int plane = vf.fmap->dim(2) * vf.fmap->dim(3);
    for (int i = 0; i < plane; ++i) mean += vf.fmap->data[c * plane + i];
    mean /= plane;
    CHECK(vf.embedding->data[c] == Catch::Approx(mean).margin(1e-12));
  }

  auto wrong = randn(rng, {1, 3, 32, 32}, 0.4);
  REQUIRE_THROWS_AS(model.vision_forward(wrong, true), ShapeError);
}

TEST_CASE("zero-initialized final vision layer gives zero embedding", "[model]") {
  auto mc = micro_config();
  SlowFastModel model(mc, 33);
  // Zero the last vision conv (weights and bias); with beta = 0 the batch
  // norm keeps the output at zero, so the embedding vanishes.
  auto w = model.graph().find("vision.stage3.w");
  auto b = model.graph().find("vision.stage3.b");
  REQUIRE(w);
  REQUIRE(b);
  ad::fill_value(w, 0.0);
  ad::fill_value(b, 0.0);
  auto img = ad::make_tensor({1, 3, 16, 16}, 0.0);
  auto vf = model.vision_forward(img, true);
  for (double v : vf.embedding->data) CHECK(v == 0.0);
}

TEST_CASE("slow stream shapes and the phi identity cases", "[model]") {
  std::mt19937_64 rng(34);
  const int h = 32, w = 64;

  // alpha 1: a plain full-resolution masking network.
  auto mc1 = micro_config();
  mc1.fast_layers = 0;
  mc1.slow_alpha = 1;
  SlowFastModel m1(mc1, 35);
  auto spec = random_spec(rng, h, w);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);
  auto vf = m1.vision_forward(img, true);
  auto out1 = m1.slow_forward(spec, vf, true);
  REQUIRE(out1.logits_full->shape == std::vector<int>{1, 1, h, w});

  // alpha 2: logits repeat in pairs along time.
  auto mc2 = micro_config();
  mc2.fast_layers = 0;
  mc2.slow_alpha = 2;
  SlowFastModel m2(mc2, 36);
  auto vf2 = m2.vision_forward(img, true);
  auto out2 = m2.slow_forward(spec, vf2, true);
  REQUIRE(out2.logits_full->shape == std::vector<int>{1, 1, h, w});
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; c += 2) {
      CHECK(out2.logits_full->data[r * w + c] == out2.logits_full->data[r * w + c + 1]);
    }
  }

  // Zero final decoder layer: logits 0 and mask exactly one half.
  m2.zero_final_logit_layers();
  auto out3 = m2.slow_forward(spec, vf2, true);
  for (std::int64_t i = 0; i < out3.logits_full->numel(); ++i) {
    CHECK(out3.logits_full->data[i] == 0.0);
    CHECK(out3.mask->data[i] == 0.5);
  }

  // Divisibility violation.
  auto bad_spec = random_spec(rng, h, 48);
  REQUIRE_THROWS_AS(m2.slow_forward(bad_spec, vf2, true), ShapeError);
}

TEST_CASE("zero fast residual leaves the slow mask untouched", "[model]") {
  std::mt19937_64 rng(37);
  auto mc = micro_config();
  SlowFastModel model(mc, 38);
  // Zero only the fast stream's logit layer.
  auto w = model.graph().find("fast.dec4.w");
  auto b = model.graph().find("fast.dec4.b");
  REQUIRE(w);
  REQUIRE(b);
  ad::fill_value(w, 0.0);
  ad::fill_value(b, 0.0);

  auto spec = random_spec(rng, 32, 64);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);
  auto fwd = model.forward(spec, img, true);
  REQUIRE(fwd.second.has_value());
  for (std::int64_t i = 0; i < fwd.first.mask->numel(); ++i) {
    CHECK(fwd.second->logits_full->data[i] == fwd.first.logits_full->data[i]);
    CHECK(fwd.second->mask->data[i] == fwd.first.mask->data[i]);
  }
}

TEST_CASE("zero slow logits leave the fast mask as the sigmoid of its residual", "[model]") {
  std::mt19937_64 rng(39);
  auto mc = micro_config();
  SlowFastModel model(mc, 40);
  auto w = model.graph().find("slow.dec4.w");
  auto b = model.graph().find("slow.dec4.b");
  REQUIRE(w);
  REQUIRE(b);
  ad::fill_value(w, 0.0);
  ad::fill_value(b, 0.0);

  auto spec = random_spec(rng, 32, 64);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);
  auto fwd = model.forward(spec, img, true);
  for (std::int64_t i = 0; i < fwd.first.logits_full->numel(); ++i) {
    CHECK(fwd.first.logits_full->data[i] == 0.0);
  }
  for (std::int64_t i = 0; i < fwd.second->mask->numel(); ++i) {
    const double z = fwd.second->logits_full->data[i];
    CHECK(fwd.second->mask->data[i] == Catch::Approx(1.0 / (1.0 + std::exp(-z))).margin(1e-15));
  }
}

TEST_CASE("full forward is deterministic and respects mask bounds", "[model]") {
  std::mt19937_64 rng(41);
  auto mc = micro_config();
  auto spec = random_spec(rng, 32, 64);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);

  auto run = [&](std::uint64_t seed) {
    SlowFastModel model(mc, seed);
    auto fwd = model.forward(spec, img, true);
    return fwd.final_output();
  };
  auto a = run(77);
  auto b = run(77);
  CHECK(a.mask->data == b.mask->data);  // bitwise

  for (std::int64_t i = 0; i < a.mask->numel(); ++i) {
    CHECK(a.mask->data[i] > 0.0);
    CHECK(a.mask->data[i] < 1.0);
    CHECK(a.sep_mag->data[i] <= spec->data[i]);
  }
}

TEST_CASE("both orderings run with symmetric roles", "[model]") {
  std::mt19937_64 rng(42);
  auto spec = random_spec(rng, 32, 64);
  auto img = randn(rng, {1, 3, 16, 16}, 0.4);

  auto mc = micro_config();  // slow-first, alpha_s=2, alpha_f=1
  SlowFastModel sf(mc, 43);
  auto r1 = sf.forward(spec, img, true);
  REQUIRE(r1.second.has_value());

  auto mc2 = micro_config();
  mc2.ordering = "fast-first";
  mc2.slow_alpha = 1;
  mc2.fast_alpha = 2;
  SlowFastModel fs(mc2, 44);
  auto r2 = fs.forward(spec, img, true);
  REQUIRE(r2.second.has_value());
  CHECK(r2.final_output().mask->shape == r1.final_output().mask->shape);
}

TEST_CASE("batched source forward matches per-source forward on running stats", "[model]") {
  std::mt19937_64 rng(45);
  auto mc = micro_config();
  SlowFastModel model(mc, 46);
  auto spec = random_spec(rng, 32, 64);
  auto img0 = randn(rng, {1, 3, 16, 16}, 0.4);
  auto img1 = randn(rng, {1, 3, 16, 16}, 0.4);
  auto images = ad::make_tensor({2, 3, 16, 16});
  std::copy(img0->data.begin(), img0->data.end(), images->data.begin());
  std::copy(img1->data.begin(), img1->data.end(), images->data.begin() + img0->numel());

  // Running-stat normalization is per-sample, so the batched pass must agree
  // with the per-source passes exactly.
  auto batched = model.forward_sources(spec, images, BnMode::Running);
  auto solo0 = model.forward(spec, img0, BnMode::Running);
  auto solo1 = model.forward(spec, img1, BnMode::Running);
  const std::int64_t plane = solo0.final_output().mask->numel();
  for (std::int64_t i = 0; i < plane; ++i) {
    CHECK(batched.final_output().mask->data[i] ==
          Catch::Approx(solo0.final_output().mask->data[i]).margin(1e-12));
    CHECK(batched.final_output().mask->data[plane + i] ==
          Catch::Approx(solo1.final_output().mask->data[i]).margin(1e-12));
  }

  // Batch-statistics inference is deterministic and state preserving.
  auto rm_before = model.graph().find("slow.enc0.bn.running_mean")->data;
  auto a = model.forward_sources(spec, images, false);
  auto b = model.forward_sources(spec, images, false);
  CHECK(a.final_output().mask->data == b.final_output().mask->data);
  CHECK(model.graph().find("slow.enc0.bn.running_mean")->data == rm_before);
}

TEST_CASE("parameter counts are invariant in alpha", "[model]") {
  auto count_live = [](const ModelConfig& mc) {
    SlowFastModel model(mc, 47);
    long long total = 0;
    for (const auto& e : model.graph().registry()) {
      if (e.trainable) total += e.tensor->numel();
    }
    return total;
  };
  auto mc = micro_config();
  const auto base = count_live(mc);
  for (int alpha : {4, 8}) {
    auto cfg = mc;
    cfg.slow_alpha = alpha;
    CHECK(count_live(cfg) == base);
  }
  auto cfg2 = mc;
  cfg2.fast_alpha = 1;
  cfg2.slow_alpha = 16;
  CHECK(count_live(cfg2) == base);
}

TEST_CASE("localization map responds to embedding-feature alignment", "[model]") {
  ad::Graph g;
  std::mt19937_64 rng(48);
  const int c = 3, h = 2, w = 2;

  // A feature map broadcasting the embedding itself: constant sigma(|e|^2).
  auto e = randn(rng, {1, c});
  auto f = ad::make_tensor({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < h * w; ++i) f->data[ch * h * w + i] = e->data[ch];
  }
  auto loc = localization_map(g, e, f);
  REQUIRE(loc.map->shape == std::vector<int>{h, w});
  double norm2 = 0.0;
  for (int i = 0; i < c; ++i) norm2 += e->data[i] * e->data[i];
  const double want = 1.0 / (1.0 + std::exp(-norm2));
  for (double v : loc.map->data) CHECK(v == Catch::Approx(want).margin(1e-12));
  CHECK(loc.score->data[0] == Catch::Approx(want).margin(1e-12));

  // Zero embedding: the map sits at one half everywhere.
  auto e0 = ad::make_tensor({1, c});
  auto loc0 = localization_map(g, e0, f);
  for (double v : loc0.map->data) CHECK(v == 0.5);

  // Random case against a plain loop.
  auto er = randn(rng, {1, c});
  auto fr = randn(rng, {c, h, w});
  auto locr = localization_map(g, er, fr);
  double best = -1.0;
  for (int i = 0; i < h * w; ++i) {
    double inner = 0.0;
    for (int ch = 0; ch < c; ++ch) inner += er->data[ch] * fr->data[ch * h * w + i];
    const double sig = 1.0 / (1.0 + std::exp(-inner));
    best = std::max(best, sig);
    CHECK(locr.map->data[i] == Catch::Approx(sig).margin(1e-12));
  }
  CHECK(locr.score->data[0] == Catch::Approx(best).margin(1e-12));

  auto bad = randn(rng, {1, c + 2});
  REQUIRE_THROWS_AS(localization_map(g, bad, fr), ShapeError);
}
