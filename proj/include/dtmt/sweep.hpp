#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtmt/experiment.hpp"

namespace dtmt {

enum class SweepAxis { depth, cell, ablation, ablation_all, pe };

inline std::optional<SweepAxis> sweep_axis_from_name(const std::string& s) {
  if (s == "depth") return SweepAxis::depth;
  if (s == "cell") return SweepAxis::cell;
  if (s == "ablation") return SweepAxis::ablation;
  if (s == "ablation-all") return SweepAxis::ablation_all;
  if (s == "pe") return SweepAxis::pe;
  return std::nullopt;
}

inline const char* sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::depth: return "depth";
    case SweepAxis::cell: return "cell";
    case SweepAxis::ablation: return "ablation";
    case SweepAxis::ablation_all: return "ablation-all";
    case SweepAxis::pe: return "pe";
  }
  return "?";
}

struct SweepMember {
  std::string label;
  RunConfig config;
};

/// Replaces one transition module with its shallow counterpart: a plain
/// GRU with no T-GRUs above it.
inline void make_shallow(ModelConfig& m, char module) {
  switch (module) {
    case 'e': m.enc_cell = CellKind::gru; m.enc_depth = 0; break;
    case 'q': m.query_cell = CellKind::gru; m.query_depth = 0; break;
    case 'd': m.dec_cell = CellKind::gru; m.dec_depth = 0; break;
    default: throw ContractError(std::string("unknown transition module '") + module + "'");
  }
}

inline void set_depth(ModelConfig& m, std::size_t k) { m.enc_depth = m.query_depth = m.dec_depth = k; }

/// Configuration matrix of one sweep axis, derived from `base`.
///  depth:        DTMT#0 … DTMT#4
///  cell:         gru and lgru bottoms at the base depths
///  ablation:     full, -enc, -query, -dec
///  ablation-all: full and all seven non-empty module subsets made shallow
///  pe:           DTMT#0 … DTMT#4, each without and with positional encoding
inline std::vector<SweepMember> sweep_members(const RunConfig& base, SweepAxis axis) {
  std::vector<SweepMember> out;
  auto add = [&](std::string label, auto&& edit) {
    RunConfig c = base;
    edit(c.model);
    out.push_back({std::move(label), std::move(c)});
  };
  switch (axis) {
    case SweepAxis::depth:
      for (std::size_t k = 0; k <= 4; ++k) add("dtmt" + std::to_string(k), [k](ModelConfig& m) { set_depth(m, k); });
      break;
    case SweepAxis::cell:
      for (CellKind kind : {CellKind::gru, CellKind::lgru}) {
        add(cell_kind_name(kind), [kind](ModelConfig& m) { m.enc_cell = m.query_cell = m.dec_cell = kind; });
      }
      break;
    case SweepAxis::ablation:
      add("full", [](ModelConfig&) {});
      add("-enc", [](ModelConfig& m) { make_shallow(m, 'e'); });
      add("-query", [](ModelConfig& m) { make_shallow(m, 'q'); });
      add("-dec", [](ModelConfig& m) { make_shallow(m, 'd'); });
      break;
    case SweepAxis::ablation_all:
      add("full", [](ModelConfig&) {});
      for (unsigned mask = 1; mask < 8; ++mask) {
        std::string label;
        const char* names[] = {"-enc", "-query", "-dec"};
        const char mods[] = {'e', 'q', 'd'};
        for (int b = 0; b < 3; ++b)
          if (mask & (1u << b)) label += names[b];
        add(label, [&](ModelConfig& m) {
          for (int b = 0; b < 3; ++b)
            if (mask & (1u << b)) make_shallow(m, mods[b]);
        });
      }
      break;
    case SweepAxis::pe:
      for (std::size_t k = 0; k <= 4; ++k) {
        for (bool pe : {false, true}) {
          add("dtmt" + std::to_string(k) + (pe ? "+pe" : "-pe"), [k, pe](ModelConfig& m) {
            set_depth(m, k);
            m.positional_encoding = pe;
          });
        }
      }
      break;
  }
  return out;
}

struct SweepRow {
  std::string axis;
  std::string label;
  std::uint64_t seed = 0;
  ModelConfig model;
  std::size_t params = 0;
  std::int64_t steps = 0;
  std::optional<double> final_metric;
  std::optional<double> best_metric;
  std::string status = "ok";
};

inline const char* sweep_header() {
  return "axis\tlabel\tseed\tenc\tquery\tdec\tpe\tparams\tsteps\tfinal_metric\tbest_metric\tstatus";
}

inline std::string format_sweep_row(const SweepRow& r) {
  auto block = [](CellKind c, std::size_t d) { return std::string(cell_kind_name(c)) + "+" + std::to_string(d); };
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("NA"); };
  return r.axis + "\t" + r.label + "\t" + std::to_string(r.seed) + "\t" + block(r.model.enc_cell, r.model.enc_depth) +
         "\t" + block(r.model.query_cell, r.model.query_depth) + "\t" + block(r.model.dec_cell, r.model.dec_depth) +
         "\t" + (r.model.positional_encoding ? "on" : "off") + "\t" + std::to_string(r.params) + "\t" +
         std::to_string(r.steps) + "\t" + opt(r.final_metric) + "\t" + opt(r.best_metric) + "\t" + r.status;
}

/// Runs every member for `seeds` consecutive training seeds starting at the
/// base seed. Each member trains into out_dir/<label>-s<seed>. A failing
/// member is recorded with its error and the sweep moves on.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, SweepAxis axis, std::size_t seeds = 1,
                                       const std::function<void(const SweepRow&)>& on_row = {}) {
  if (seeds == 0) throw ConfigError("sweep: seeds must be >= 1");
  std::vector<SweepRow> rows;
  for (const auto& member : sweep_members(base, axis)) {
    for (std::size_t s = 0; s < seeds; ++s) {
      RunConfig c = member.config;
      c.train.seed = base.train.seed + s;
      c.out_dir = (std::filesystem::path(base.out_dir) / (member.label + "-s" + std::to_string(c.train.seed))).string();
      SweepRow row;
      row.axis = sweep_axis_name(axis);
      row.label = member.label;
      row.seed = c.train.seed;
      row.model = c.model;
      try {
        const TrainResult r = run_training(c);
        const TaskData data = load_data(c);
        row.params = count_model_params(resolved_model(c, data.src_vocab, data.tgt_vocab));
        row.steps = r.steps;
        row.final_metric = r.final_metric;
        row.best_metric = r.best_metric;
      } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
          if (ch == '\t' || ch == '\n') ch = ' ';
        row.status = "failed: " + msg;
      }
      rows.push_back(row);
      if (on_row) on_row(row);
    }
  }
  return rows;
}

}  // namespace dtmt
