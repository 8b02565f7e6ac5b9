#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dtmt/data.hpp"
#include "dtmt/decode.hpp"
#include "dtmt/model.hpp"
#include "dtmt/optim.hpp"

namespace dtmt {

struct DecodeConfig {
  std::size_t beam_size = 4;
  double alpha = 0.6;
  LengthNorm length_norm = LengthNorm::gnmt;
};

/// Everything needed to reproduce a run. Vocabulary sizes inside `model`
/// are filled from the data, not from the file.
struct RunConfig {
  TaskSpec task;
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::string data_dir;  // empty: synthetic task
  std::string out_dir = "run";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_value(const std::string& s, std::string& out) {
  out = s;
  return true;
}
inline bool parse_value(const std::string& s, double& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size() && std::isfinite(out);
}
template <typename I>
  requires std::is_integral_v<I>
bool parse_value(const std::string& s, I& out) {
  if (std::is_unsigned_v<I> && !s.empty() && s[0] == '-') return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}
inline bool parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "off") return out = false, true;
  return false;
}

template <typename E>
bool parse_enum(const std::string& s, E& out, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, v] : names) {
    if (s == n) return out = v, true;
  }
  return false;
}
inline bool parse_value(const std::string& s, TaskKind& o) {
  return parse_enum(s, o, {{"copy", TaskKind::copy}, {"reverse", TaskKind::reverse}, {"lexsub", TaskKind::lexsub}});
}
inline bool parse_value(const std::string& s, CellKind& o) {
  return parse_enum(s, o, {{"gru", CellKind::gru}, {"lgru", CellKind::lgru}});
}
inline bool parse_value(const std::string& s, InitialState& o) {
  return parse_enum(s, o, {{"zero", InitialState::zero}, {"mean_annotation", InitialState::mean_annotation}});
}
inline bool parse_value(const std::string& s, ValidMetric& o) {
  return parse_enum(s, o, {{"accuracy", ValidMetric::accuracy}, {"exact", ValidMetric::exact}, {"bleu", ValidMetric::bleu}});
}
inline bool parse_value(const std::string& s, LengthNorm& o) {
  return parse_enum(s, o, {{"gnmt", LengthNorm::gnmt}, {"length", LengthNorm::length}});
}

inline std::string show(const std::string& v) { return v; }
inline std::string show(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
template <typename I>
  requires std::is_integral_v<I>
std::string show(I v) {
  if constexpr (std::is_same_v<I, bool>) {
    return v ? "true" : "false";
  } else {
    return std::to_string(v);
  }
}
inline std::string show(TaskKind v) { return task_name(v); }
inline std::string show(CellKind v) { return cell_kind_name(v); }
inline std::string show(InitialState v) { return v == InitialState::zero ? "zero" : "mean_annotation"; }
inline std::string show(ValidMetric v) { return valid_metric_name(v); }
inline std::string show(LengthNorm v) { return v == LengthNorm::gnmt ? "gnmt" : "length"; }

}  // namespace detail

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<bool(RunConfig&, const std::string&)> set;
};

template <typename Access>
ConfigField make_field(std::string key, Access access) {
  return {std::move(key),
          [access](const RunConfig& c) { return detail::show(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& v) {
            auto tmp = access(c);
            if (!detail::parse_value(v, tmp)) return false;
            access(c) = tmp;
            return true;
          }};
}

/// Every configuration key, in snapshot order.
inline const std::vector<ConfigField>& config_fields() {
  using R = RunConfig;
  static const std::vector<ConfigField> fields = {
      make_field("task", [](R& c) -> auto& { return c.task.kind; }),
      make_field("vocab_size", [](R& c) -> auto& { return c.task.vocab_size; }),
      make_field("min_len", [](R& c) -> auto& { return c.task.min_len; }),
      make_field("max_len", [](R& c) -> auto& { return c.task.max_len; }),
      make_field("train_size", [](R& c) -> auto& { return c.task.train_size; }),
      make_field("valid_size", [](R& c) -> auto& { return c.task.valid_size; }),
      make_field("test_size", [](R& c) -> auto& { return c.task.test_size; }),
      make_field("data_seed", [](R& c) -> auto& { return c.task.seed; }),
      make_field("data_dir", [](R& c) -> auto& { return c.data_dir; }),
      make_field("out_dir", [](R& c) -> auto& { return c.out_dir; }),

      make_field("emb_dim", [](R& c) -> auto& { return c.model.emb_dim; }),
      make_field("hidden_dim", [](R& c) -> auto& { return c.model.hidden_dim; }),
      make_field("enc_depth", [](R& c) -> auto& { return c.model.enc_depth; }),
      make_field("query_depth", [](R& c) -> auto& { return c.model.query_depth; }),
      make_field("dec_depth", [](R& c) -> auto& { return c.model.dec_depth; }),
      make_field("enc_cell", [](R& c) -> auto& { return c.model.enc_cell; }),
      make_field("query_cell", [](R& c) -> auto& { return c.model.query_cell; }),
      make_field("dec_cell", [](R& c) -> auto& { return c.model.dec_cell; }),
      make_field("heads", [](R& c) -> auto& { return c.model.heads; }),
      make_field("layer_norm", [](R& c) -> auto& { return c.model.layer_norm; }),
      make_field("layer_norm_candidate", [](R& c) -> auto& { return c.model.layer_norm_candidate; }),
      make_field("positional_encoding", [](R& c) -> auto& { return c.model.positional_encoding; }),
      make_field("dropout_embedding", [](R& c) -> auto& { return c.model.dropout_embedding; }),
      make_field("dropout_output", [](R& c) -> auto& { return c.model.dropout_output; }),
      make_field("dropout_candidate", [](R& c) -> auto& { return c.model.dropout_candidate; }),
      make_field("label_smoothing", [](R& c) -> auto& { return c.model.label_smoothing; }),
      make_field("share_embeddings", [](R& c) -> auto& { return c.model.share_embeddings; }),
      make_field("initial_state", [](R& c) -> auto& { return c.model.initial_state; }),

      make_field("learning_rate", [](R& c) -> auto& { return c.train.learning_rate; }),
      make_field("warmup_steps", [](R& c) -> auto& { return c.train.warmup_steps; }),
      make_field("decay_start", [](R& c) -> auto& { return c.train.decay_start; }),
      make_field("decay_end", [](R& c) -> auto& { return c.train.decay_end; }),
      make_field("replicas", [](R& c) -> auto& { return c.train.replicas; }),
      make_field("adam_beta1", [](R& c) -> auto& { return c.train.adam_beta1; }),
      make_field("adam_beta2", [](R& c) -> auto& { return c.train.adam_beta2; }),
      make_field("adam_eps", [](R& c) -> auto& { return c.train.adam_eps; }),
      make_field("init_range", [](R& c) -> auto& { return c.train.init_range; }),
      make_field("clip_norm", [](R& c) -> auto& { return c.train.clip_norm; }),
      make_field("batch_tokens", [](R& c) -> auto& { return c.train.batch_tokens; }),
      make_field("max_steps", [](R& c) -> auto& { return c.train.max_steps; }),
      make_field("valid_interval", [](R& c) -> auto& { return c.train.valid_interval; }),
      make_field("log_interval", [](R& c) -> auto& { return c.train.log_interval; }),
      make_field("patience", [](R& c) -> auto& { return c.train.patience; }),
      make_field("target_metric", [](R& c) -> auto& { return c.train.target_metric; }),
      make_field("valid_metric", [](R& c) -> auto& { return c.train.valid_metric; }),
      make_field("valid_beam", [](R& c) -> auto& { return c.train.valid_beam; }),
      make_field("threads", [](R& c) -> auto& { return c.train.threads; }),
      make_field("seed", [](R& c) -> auto& { return c.train.seed; }),

      make_field("beam_size", [](R& c) -> auto& { return c.decode.beam_size; }),
      make_field("alpha", [](R& c) -> auto& { return c.decode.alpha; }),
      make_field("length_norm", [](R& c) -> auto& { return c.decode.length_norm; }),
  };
  return fields;
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Closest known key within edit distance 3, or empty.
inline std::string suggest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = 4;
  for (const auto& f : config_fields()) {
    const std::size_t d = edit_distance(key, f.key);
    if (d < best_d) {
      best_d = d;
      best = f.key;
    }
  }
  return best;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

/// Sets one key; `where` prefixes error messages ("file:line" or "--set").
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value, const std::string& where) {
  const ConfigField* f = find_field(key);
  if (!f) {
    std::string msg = where + ": unknown key '" + key + "'";
    const std::string s = suggest_key(key);
    if (!s.empty()) msg += " (did you mean '" + s + "'?)";
    throw ConfigError(msg);
  }
  if (!f->set(c, value)) throw ConfigError(where + ": invalid value '" + value + "' for key '" + key + "'");
}

/// Parses "key = value" lines; '#' starts a comment. Duplicate keys are errors.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw ConfigError(where + ": duplicate key '" + key + "'");
    }
    seen.push_back(key);
    apply_setting(c, key, value, where);
  }
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  RunConfig c;
  apply_config_text(c, text, source);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Applies "key=value" overrides, e.g. from --set flags.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set " + o + ": expected key=value");
    apply_setting(c, detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)), "--set " + o);
  }
}

/// Every key with its resolved value; reloading gives an equal RunConfig.
inline std::string config_snapshot(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

inline bool same_config(const RunConfig& a, const RunConfig& b) {
  for (const auto& f : config_fields())
    if (f.get(a) != f.get(b)) return false;
  return true;
}

}  // namespace dtmt
