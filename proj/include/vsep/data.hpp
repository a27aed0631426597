#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "vsep/autodiff.hpp"
#include "vsep/common.hpp"
#include "vsep/dsp.hpp"
#include "vsep/losses.hpp"
#include "vsep/ppm.hpp"
#include "vsep/wav.hpp"

namespace vsep {

struct Sample {
  Waveform waveform;
  Image image;
  int category = 0;
  std::string id;
};

struct StftConfig {
  int window_len = kDefaultWindowLen;
  int hop_len = kDefaultHopLen;
};

namespace detail {

// Up to eight visually distinct base colors; categories are color-coded so
// the vision net has an easy categorical cue.
inline std::array<std::uint8_t, 3> category_color(int category) {
  static constexpr std::uint8_t palette[8][3] = {
      {200, 45, 45},  {45, 200, 45},  {45, 45, 200},  {210, 210, 40},
      {200, 45, 200}, {45, 200, 200}, {230, 140, 30}, {140, 30, 230},
  };
  return {palette[category % 8][0], palette[category % 8][1], palette[category % 8][2]};
}

struct Band {
  double lo, hi;
  double width() const { return hi - lo; }
};

// The spectrum [250 Hz, 0.95*nyquist] is tiled into categories+1 slots. Each
// category owns the central 90% of its private slot; the top slot is shared
// by every category. Dense private tiling keeps most spectrogram rows
// dominated by exactly one source, while the small shared band carries the
// temporally gated content that only a fine-temporal-resolution model can
// assign correctly.
inline Band slot_band(int slot_index, int slots_total, double sample_rate) {
  const double lo_all = 250.0;
  const double hi_all = 0.95 * (sample_rate / 2.0);
  const double slot = (hi_all - lo_all) / slots_total;
  const double lo = lo_all + slot_index * slot + 0.05 * slot;
  return {lo, lo + 0.9 * slot};
}

inline Band category_band(int category, int categories_total, double sample_rate) {
  return slot_band(category, categories_total + 1, sample_rate);
}

inline Band shared_band(int categories_total, double sample_rate) {
  return slot_band(categories_total, categories_total + 1, sample_rate);
}

}  // namespace detail

// Deterministic per-(category, seed) toy source: a few in-band partials with
// jittered positions under a deep few-Hz tremolo envelope, plus a
// color-coded image with a textured patch and seeded noise. The tremolo is
// what a coarse-temporal-resolution model genuinely loses.
inline Sample generate_category(int category, std::uint64_t seed, int clip_len,
                                double sample_rate, int image_size = 64,
                                int categories_total = 4) {
  if (category < 0 || category >= categories_total) {
    throw ValueError("generate_category: category out of range");
  }
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Sample s;
  s.category = category;

  const auto band = detail::category_band(category, categories_total, sample_rate);
  const auto shared = detail::shared_band(categories_total, sample_rate);
  constexpr int kPrivate = 8;
  constexpr int kShared = 3;
  constexpr int kPartials = kPrivate + kShared;
  constexpr double kSharedGain = 0.45;  // keeps cross-category energy overlap under 5%
  double freq[kPartials], amp[kPartials], phase[kPartials];
  for (int p = 0; p < kPrivate; ++p) {
    // A dense comb across the private band with jittered positions.
    freq[p] = band.lo + ((p + 0.5) / kPrivate + 0.05 * (unit(rng) - 0.5)) * band.width();
    amp[p] = 0.4 + 0.6 * unit(rng);
    phase[p] = 2.0 * std::numbers::pi * unit(rng);
  }
  for (int q = 0; q < kShared; ++q) {
    const int p = kPrivate + q;
    freq[p] = shared.lo + ((q + 0.5) / kShared + 0.04 * (unit(rng) - 0.5)) * shared.width();
    amp[p] = kSharedGain * (0.4 + 0.6 * unit(rng));
    phase[p] = 2.0 * std::numbers::pi * unit(rng);
  }
  // Two independent tremolos drive the sample. Private partials get a shallow
  // form (their masks stay essentially static), shared partials a deep form:
  // in the shared band the dominant source flips with the envelopes, and a
  // model can only assign those bins by tracking the gating over time. The
  // private bands reveal each source's envelope state, so the assignment is
  // learnable at full temporal resolution and lost under heavy downsampling.
  double env_hz[2], env_phase[2];
  for (int e = 0; e < 2; ++e) {
    env_hz[e] = 4.0 + 12.0 * unit(rng);
    env_phase[e] = 2.0 * std::numbers::pi * unit(rng);
  }

  s.waveform.sample_rate = sample_rate;
  s.waveform.samples.resize(static_cast<size_t>(clip_len));
  double peak = 0.0;
  for (int i = 0; i < clip_len; ++i) {
    const double t = i / sample_rate;
    double deep[2], shallow[2];
    for (int e = 0; e < 2; ++e) {
      const double trem = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * env_hz[e] * t + env_phase[e]);
      deep[e] = 0.04 + 0.96 * trem * trem;
      shallow[e] = 0.55 + 0.45 * trem;
    }
    double v = 0.0;
    for (int p = 0; p < kPartials; ++p) {
      const double env = p < kPrivate ? shallow[p % 2] : deep[p % 2];
      v += env * amp[p] * std::sin(2.0 * std::numbers::pi * freq[p] * t + phase[p]);
    }
    s.waveform.samples[static_cast<size_t>(i)] = v;
    peak = std::max(peak, std::abs(v));
  }
  const double scale = peak > 0.0 ? 0.22 / peak : 0.0;
  for (auto& v : s.waveform.samples) v *= scale;

  // Image: base color, a textured patch at a random position, seeded noise.
  s.image.width = image_size;
  s.image.height = image_size;
  s.image.rgb.resize(static_cast<size_t>(image_size) * image_size * 3);
  const auto base = detail::category_color(category);
  const auto accent = detail::category_color((category + 3) % 8);
  const int patch = image_size / 4;
  const int px = static_cast<int>(unit(rng) * (image_size - patch));
  const int py = static_cast<int>(unit(rng) * (image_size - patch));
  std::uniform_int_distribution<int> noise(-12, 12);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const bool in_patch = x >= px && x < px + patch && y >= py && y < py + patch;
      const bool checker = ((x / 2) + (y / 2)) % 2 == 0;
      for (int c = 0; c < 3; ++c) {
        int v = in_patch ? (checker ? accent[static_cast<size_t>(c)] : 245)
                         : base[static_cast<size_t>(c)];
        v += noise(rng);
        v = std::clamp(v, 0, 255);
        s.image.rgb[(static_cast<size_t>(y) * image_size + x) * 3 + static_cast<size_t>(c)] =
            static_cast<std::uint8_t>(v);
      }
    }
  }
  return s;
}

// Nearest-neighbor resize to (1,3,S,S) in [0,1].
inline ad::TensorPtr image_tensor(const Image& img, int target_size) {
  if (img.width < 1 || img.height < 1) throw ValueError("image_tensor: empty image");
  auto t = ad::make_tensor({1, 3, target_size, target_size});
  for (int y = 0; y < target_size; ++y) {
    const int sy = std::min(img.height - 1, y * img.height / target_size);
    for (int x = 0; x < target_size; ++x) {
      const int sx = std::min(img.width - 1, x * img.width / target_size);
      for (int c = 0; c < 3; ++c) {
        t->data[(static_cast<std::int64_t>(c) * target_size + y) * target_size + x] =
            img.rgb[(static_cast<size_t>(sy) * img.width + sx) * 3 + static_cast<size_t>(c)] /
            255.0;
      }
    }
  }
  return t;
}

struct MixtureItem {
  Waveform mixture;
  ComplexSpectrogram mixture_spec;
  std::vector<Sample> sources;
  std::vector<BinaryMask> gt_masks;
  std::vector<Sample> partners;  // one sampled partner frame per source
  std::vector<ContrastivePair> contrast_pairs;
};

// Supplies a partner frame of the requested category for contrastive pairs.
using PartnerSampler = std::function<Sample(int category, std::mt19937_64& rng)>;

// Mixes 2..4 sources, computes per-source magnitudes and the ground-truth
// masks, and (when a partner sampler is given) draws one contrastive pair per
// source: fair coin for positive/negative, then uniform within the chosen
// category set.
inline MixtureItem build_mixture(std::vector<Sample> samples, const StftConfig& stft_cfg,
                                 const PartnerSampler& partner_sampler, std::mt19937_64& rng,
                                 int categories_total) {
  const int n = static_cast<int>(samples.size());
  if (n < 2 || n > 4) throw ValueError("build_mixture: need 2..4 sources");
  MixtureItem item;
  std::vector<Waveform> waves;
  for (const auto& s : samples) waves.push_back(s.waveform);
  item.mixture = mix(waves);
  item.mixture_spec = stft(item.mixture, stft_cfg.window_len, stft_cfg.hop_len);

  std::vector<MagnitudeSpectrogram> mags;
  mags.reserve(samples.size());
  for (const auto& s : samples) {
    mags.push_back(magnitude(stft(s.waveform, stft_cfg.window_len, stft_cfg.hop_len)));
  }
  for (int i = 0; i < n; ++i) item.gt_masks.push_back(ideal_binary_mask(mags, i));

  if (partner_sampler) {
    std::uniform_int_distribution<int> coin(0, 1);
    for (int i = 0; i < n; ++i) {
      const int y = coin(rng);
      int category = samples[static_cast<size_t>(i)].category;
      if (y == 0) {
        if (categories_total < 2) throw ValueError("build_mixture: need >= 2 categories");
        std::uniform_int_distribution<int> other(0, categories_total - 2);
        int pick = other(rng);
        if (pick >= category) ++pick;
        category = pick;
      }
      item.partners.push_back(partner_sampler(category, rng));
      item.contrast_pairs.push_back({i, i, y});
    }
  }
  item.sources = std::move(samples);
  return item;
}

// ---------------------------------------------------------------------------
// Dataset generation and manifests
// ---------------------------------------------------------------------------

struct DataConfig {
  int categories = 4;
  int per_category_train = 12;
  int per_category_test = 4;
  int clip_len = kDefaultClipLen;
  double sample_rate = kDefaultSampleRate;
  int image_size = 64;

  void validate() const {
    if (categories < 2 || categories > 8) throw ValueError("categories must be in [2,8]");
    if (per_category_train < 1 || per_category_test < 1) {
      throw ValueError("per-category item counts must be positive");
    }
    if (clip_len < 2) throw ValueError("clip_len too small");
    if (sample_rate <= 0) throw ValueError("sample_rate must be positive");
    if (image_size < 16) throw ValueError("image_size too small");
  }
};

inline nlohmann::json data_config_to_json(const DataConfig& c) {
  return {{"categories", c.categories},
          {"per_category_train", c.per_category_train},
          {"per_category_test", c.per_category_test},
          {"clip_len", c.clip_len},
          {"sample_rate", c.sample_rate},
          {"image_size", c.image_size}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"categories",    "per_category_train",
                                              "per_category_test", "clip_len",
                                              "sample_rate",   "image_size"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ValueError("unknown data config field: " + it.key());
  }
  DataConfig c;
  if (j.contains("categories")) c.categories = j.at("categories").get<int>();
  if (j.contains("per_category_train")) c.per_category_train = j.at("per_category_train").get<int>();
  if (j.contains("per_category_test")) c.per_category_test = j.at("per_category_test").get<int>();
  if (j.contains("clip_len")) c.clip_len = j.at("clip_len").get<int>();
  if (j.contains("sample_rate")) c.sample_rate = j.at("sample_rate").get<double>();
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  c.validate();
  return c;
}

struct ManifestItem {
  std::string id;
  int category = 0;
  std::string wav_path;    // relative to the manifest directory
  std::string image_path;  // relative to the manifest directory
  std::string split;       // "train" | "test"
};

// File-backed toy dataset. Items are generated independently from per-item
// seeds, so parallel generation is deterministic regardless of scheduling;
// loads go through an in-memory cache.
class Dataset {
 public:
  static Dataset generate(const DataConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                          int workers = 1) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "wav");
    fs::create_directories(fs::path(out_dir) / "img");

    Dataset d;
    d.cfg_ = cfg;
    d.seed_ = seed;
    d.root_ = out_dir;
    struct Pending {
      ManifestItem item;
      std::uint64_t item_seed;
    };
    std::vector<Pending> pending;
    for (int split_tag = 0; split_tag < 2; ++split_tag) {
      const std::string split = split_tag == 0 ? "train" : "test";
      const int per = split_tag == 0 ? cfg.per_category_train : cfg.per_category_test;
      for (int cat = 0; cat < cfg.categories; ++cat) {
        for (int idx = 0; idx < per; ++idx) {
          ManifestItem mi;
          mi.id = "c" + std::to_string(cat) + "-" + split + "-" + std::to_string(idx);
          mi.category = cat;
          mi.split = split;
          mi.wav_path = "wav/" + mi.id + ".wav";
          mi.image_path = "img/" + mi.id + ".ppm";
          const std::uint64_t item_seed = mix_seed(
              seed, (static_cast<std::uint64_t>(split_tag + 1) << 40) ^
                        (static_cast<std::uint64_t>(cat) << 20) ^ static_cast<std::uint64_t>(idx));
          pending.push_back({mi, item_seed});
        }
      }
    }

    std::vector<Sample> generated(pending.size());
    const int nthreads = std::max(1, workers);
    auto work = [&](int t) {
      for (size_t i = static_cast<size_t>(t); i < pending.size(); i += nthreads) {
        generated[i] = generate_category(pending[i].item.category, pending[i].item_seed,
                                         cfg.clip_len, cfg.sample_rate, cfg.image_size,
                                         cfg.categories);
      }
    };
    if (nthreads == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < nthreads; ++t) pool.emplace_back(work, t);
      for (auto& th : pool) th.join();
    }

    for (size_t i = 0; i < pending.size(); ++i) {
      save_wav(generated[i].waveform, (fs::path(out_dir) / pending[i].item.wav_path).string());
      save_ppm(generated[i].image, (fs::path(out_dir) / pending[i].item.image_path).string());
      d.items_.push_back(pending[i].item);
    }

    nlohmann::json j;
    j["seed"] = seed;
    j["config"] = data_config_to_json(cfg);
    j["items"] = nlohmann::json::array();
    for (const auto& it : d.items_) {
      j["items"].push_back({{"id", it.id},
                            {"category", it.category},
                            {"wav", it.wav_path},
                            {"image", it.image_path},
                            {"split", it.split}});
    }
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + out_dir);
    f << j.dump(2) << "\n";
    return d;
  }

  static Dataset load(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw IoError("cannot open manifest: " + manifest_path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed manifest " + manifest_path + ": " + e.what());
    }
    Dataset d;
    d.cfg_ = data_config_from_json(j.at("config"));
    d.seed_ = j.at("seed").get<std::uint64_t>();
    d.root_ = std::filesystem::path(manifest_path).parent_path().string();
    for (const auto& item : j.at("items")) {
      ManifestItem mi;
      mi.id = item.at("id").get<std::string>();
      mi.category = item.at("category").get<int>();
      mi.wav_path = item.at("wav").get<std::string>();
      mi.image_path = item.at("image").get<std::string>();
      mi.split = item.at("split").get<std::string>();
      d.items_.push_back(mi);
    }
    return d;
  }

  const DataConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<ManifestItem>& items() const { return items_; }

  std::vector<const ManifestItem*> split_items(const std::string& split, int category = -1) const {
    std::vector<const ManifestItem*> out;
    for (const auto& it : items_) {
      if (it.split == split && (category < 0 || it.category == category)) out.push_back(&it);
    }
    return out;
  }

  // Loads (and caches) the 16-bit-quantized sample exactly as stored on disk,
  // so in-memory use after generate() matches a later load() bit for bit.
  const Sample& sample(const ManifestItem& item) const {
    auto it = cache_.find(item.id);
    if (it != cache_.end()) return it->second;
    namespace fs = std::filesystem;
    Sample s;
    s.waveform = load_wav((fs::path(root_) / item.wav_path).string());
    s.image = load_ppm((fs::path(root_) / item.image_path).string());
    s.category = item.category;
    s.id = item.id;
    return cache_.emplace(item.id, std::move(s)).first->second;
  }

 private:
  DataConfig cfg_;
  std::uint64_t seed_ = 0;
  std::string root_;
  std::vector<ManifestItem> items_;
  mutable std::map<std::string, Sample> cache_;
};

}  // namespace vsep
