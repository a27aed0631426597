#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vsep/common.hpp"
#include "vsep/model.hpp"

namespace vsep {

struct CostRow {
  std::string module;
  std::string layer;
  long long params = 0;
  long long macs = 0;
};

struct CostReport {
  long long params_total = 0;
  long long macs_total = 0;
  std::vector<CostRow> rows;
};

namespace detail {

struct ShapeWalk {
  int c = 0, h = 0, w = 0;
};

// Params: conv O*I*K*K + O, batchnorm 2*C (running stats ignored).
// MACs: conv I*O*K*K*H_out*W_out; transposed conv at its gradient-equivalent
// conv cost I*O*K*K*H_in*W_in; AVGA counted as its two matrix products;
// norms, activations, pooling, and resampling count 0.
inline void walk_plan(const std::vector<LayerPlan>& plan, ShapeWalk s, bool count_macs,
                      CostReport& report) {
  for (const auto& row : plan) {
    CostRow out{row.module, row.name, 0, 0};
    switch (row.kind) {
      case LayerPlan::Kind::Conv: {
        out.params = static_cast<long long>(row.out_c) * row.in_c * row.k * row.k + row.out_c;
        const int ho = (s.h + 2 * row.pad - row.dilation * (row.k - 1) - 1) / row.stride + 1;
        const int wo = (s.w + 2 * row.pad - row.dilation * (row.k - 1) - 1) / row.stride + 1;
        if (count_macs) {
          if (ho <= 0 || wo <= 0) throw ShapeError("cost: non-positive conv output extent");
          out.macs = static_cast<long long>(row.in_c) * row.out_c * row.k * row.k * ho * wo;
        }
        s.c = row.out_c;
        s.h = ho;
        s.w = wo;
        break;
      }
      case LayerPlan::Kind::Deconv: {
        out.params = static_cast<long long>(row.in_c) * row.out_c * row.k * row.k + row.out_c;
        if (count_macs) {
          out.macs = static_cast<long long>(row.in_c) * row.out_c * row.k * row.k * s.h * s.w;
        }
        s.c = row.out_c;
        s.h = (s.h - 1) * row.stride - 2 * row.pad + row.k;
        s.w = (s.w - 1) * row.stride - 2 * row.pad + row.k;
        break;
      }
      case LayerPlan::Kind::BatchNorm:
        out.params = 2LL * row.out_c;
        break;
      case LayerPlan::Kind::Avga:
        if (count_macs) {
          const long long c = row.out_c;
          out.macs = c * c + c * c * static_cast<long long>(s.h) * s.w;
        }
        break;
      case LayerPlan::Kind::Resample:
        if (count_macs) {
          if (!row.upsample) {
            if (s.w % row.alpha != 0) throw ShapeError("cost: resolution mismatch");
            s.w /= row.alpha;
          } else {
            s.w *= row.alpha;
          }
        }
        break;
      case LayerPlan::Kind::Activation:
      case LayerPlan::Kind::GlobalPool:
        break;
    }
    // Decoder rows consume skip concatenations; trust the planned in_c.
    if (row.kind == LayerPlan::Kind::Conv || row.kind == LayerPlan::Kind::Deconv) {
      s.c = row.out_c;
    }
    report.rows.push_back(out);
    report.params_total += out.params;
    report.macs_total += out.macs;
  }
}

inline std::vector<std::pair<std::vector<LayerPlan>, ShapeWalk>> module_walks(
    const ModelConfig& cfg, int spec_h, int spec_w) {
  cfg.validate();
  std::vector<std::pair<std::vector<LayerPlan>, ShapeWalk>> out;
  out.push_back({vision_plan(cfg), {3, cfg.image_size, cfg.image_size}});
  auto stream = [&](const std::string& module, int depth, int in_c, int alpha) {
    out.push_back({unet_plan(cfg, module, depth, in_c, alpha), {in_c, spec_h, spec_w}});
  };
  if (cfg.dual_stream()) {
    if (cfg.slow_first()) {
      stream("slow", cfg.slow_layers, 1, cfg.slow_alpha);
      stream("fast", cfg.fast_layers, 2, cfg.fast_alpha);
    } else {
      stream("fast", cfg.fast_layers, 1, cfg.fast_alpha);
      stream("slow", cfg.slow_layers, 2, cfg.slow_alpha);
    }
  } else if (cfg.slow_enabled()) {
    stream("slow", cfg.slow_layers, 1, cfg.slow_alpha);
  } else {
    stream("fast", cfg.fast_layers, 1, cfg.fast_alpha);
  }
  return out;
}

}  // namespace detail

// Full per-layer breakdown for one forward pass of a single source.
inline CostReport cost_report(const ModelConfig& cfg, int spec_h, int spec_w) {
  CostReport report;
  for (auto& [plan, shape] : detail::module_walks(cfg, spec_h, spec_w)) {
    detail::walk_plan(plan, shape, true, report);
  }
  return report;
}

inline long long count_params(const ModelConfig& cfg) {
  CostReport report;
  // Shapes are irrelevant for parameters; use any legal extent.
  for (auto& [plan, shape] : detail::module_walks(cfg, 16, 16 * 16)) {
    detail::walk_plan(plan, shape, false, report);
  }
  return report.params_total;
}

inline long long count_macs(const ModelConfig& cfg, int spec_h, int spec_w) {
  return cost_report(cfg, spec_h, spec_w).macs_total;
}

struct CostTable {
  struct Entry {
    ModelConfig cfg;
    CostReport report;
  };
  std::vector<Entry> entries;
  bool params_constant = true;
  bool macs_strictly_decreasing = true;
};

inline CostTable cost_table(const std::vector<ModelConfig>& cfgs, int spec_h, int spec_w) {
  CostTable t;
  for (const auto& cfg : cfgs) {
    t.entries.push_back({cfg, cost_report(cfg, spec_h, spec_w)});
  }
  for (size_t i = 1; i < t.entries.size(); ++i) {
    if (t.entries[i].report.params_total != t.entries[0].report.params_total) {
      t.params_constant = false;
    }
    if (t.entries[i].report.macs_total >= t.entries[i - 1].report.macs_total) {
      t.macs_strictly_decreasing = false;
    }
  }
  return t;
}

inline nlohmann::json cost_report_to_json(const CostReport& r) {
  nlohmann::json j;
  j["params_total"] = r.params_total;
  j["macs_total"] = r.macs_total;
  j["per_module"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    j["per_module"].push_back({{"module", row.module},
                               {"layer", row.layer},
                               {"params", row.params},
                               {"macs", row.macs}});
  }
  return j;
}

inline nlohmann::json cost_table_to_json(const CostTable& t) {
  nlohmann::json j;
  j["configs"] = nlohmann::json::array();
  for (const auto& e : t.entries) {
    nlohmann::json row;
    row["model"] = model_config_to_json(e.cfg);
    row["params_total"] = e.report.params_total;
    row["macs_total"] = e.report.macs_total;
    j["configs"].push_back(row);
  }
  j["params_constant"] = t.params_constant;
  j["macs_strictly_decreasing"] = t.macs_strictly_decreasing;
  return j;
}

inline std::string format_cost_table(const CostTable& t) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-4s %-6s %-6s %-8s %-8s %14s %14s\n", "#", "slow", "fast",
                "alpha_s", "alpha_f", "params", "macs");
  out += line;
  for (size_t i = 0; i < t.entries.size(); ++i) {
    const auto& e = t.entries[i];
    std::snprintf(line, sizeof(line), "%-4zu %-6d %-6d %-8d %-8d %14lld %14lld\n", i,
                  e.cfg.slow_layers, e.cfg.fast_layers, e.cfg.slow_alpha, e.cfg.fast_alpha,
                  e.report.params_total, e.report.macs_total);
    out += line;
  }
  return out;
}

}  // namespace vsep
