#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "dtmt/checkpoint.hpp"
#include "dtmt/data.hpp"
#include "dtmt/decode.hpp"
#include "dtmt/metrics.hpp"
#include "dtmt/model.hpp"
#include "dtmt/optim.hpp"

namespace dtmt {

/// Runs f(i) for i in [0, n) on up to `threads` threads. Work is split by
/// index, so callers that write to slot i get the same result for any
/// thread count.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t t = std::min(threads, n);
  std::vector<std::exception_ptr> errors(t);
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += t) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline Sentence strip_eos(Sentence s) {
  if (!s.empty() && s.back() == Vocabulary::eos) s.pop_back();
  return s;
}

/// Decodes every source (greedy when beam == 1) and returns hypotheses without eos.
inline std::vector<Sentence> decode_all(Model& m, const std::vector<Sentence>& sources, std::size_t beam,
                                        std::size_t threads = 1, double alpha = 0.6,
                                        LengthNorm norm = LengthNorm::gnmt) {
  std::vector<Sentence> out(sources.size());
  parallel_for(sources.size(), threads, [&](std::size_t i) {
    if (beam == 1) {
      out[i] = strip_eos(translate_greedy(m, sources[i]).tokens);
    } else {
      BeamOptions o;
      o.beam_size = beam;
      o.alpha = alpha;
      o.norm = norm;
      out[i] = strip_eos(translate(m, sources[i], o).tokens);
    }
  });
  return out;
}

/// Validation score: token accuracy or exact match as fractions, BLEU in [0, 100].
inline double score_hypotheses(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs, ValidMetric metric) {
  switch (metric) {
    case ValidMetric::accuracy: return token_accuracy(hyps, refs);
    case ValidMetric::exact: return exact_match(hyps, refs);
    case ValidMetric::bleu: return bleu4(hyps, refs);
  }
  return 0.0;
}

inline double evaluate(Model& m, const std::vector<Example>& data, ValidMetric metric, std::size_t beam,
                       std::size_t threads = 1) {
  if (data.empty()) throw ContractError("evaluate: empty data set");
  std::vector<Sentence> src, refs;
  for (const auto& ex : data) {
    src.push_back(ex.src);
    refs.push_back(strip_eos(ex.tgt));
  }
  return score_hypotheses(decode_all(m, src, beam, threads), refs, metric);
}

// ---------------------------------------------------------------------------
// Gradient of one batch
// ---------------------------------------------------------------------------

/// Token-weighted mean loss of a batch; gradients are added to
/// Parameter::grad. Sentence gradients are summed in batch order whatever
/// the thread count. `step` seeds the dropout masks.
inline double batch_gradients(Model& m, const std::vector<Example>& data, const std::vector<std::size_t>& batch,
                              std::int64_t step, std::uint64_t seed, std::size_t threads = 1) {
  if (batch.empty()) throw ContractError("empty batch");
  std::size_t total_tokens = 0;
  for (auto i : batch) {
    for (auto t : data[i].tgt) total_tokens += t != Vocabulary::pad ? 1 : 0;
  }
  auto run = [&](std::size_t k, Graph& g, Rng& rng) {
    ForwardContext fc{Mode::train, &rng};
    const Example& ex = data[batch[k]];
    TeacherForcedResult r = forward_teacher_forced(g, m, ex.src, ex.tgt, fc);
    return scale(r.loss, static_cast<double>(r.scored_tokens) / static_cast<double>(total_tokens));
  };
  auto rng_for = [&](std::size_t k) {
    return Rng(derive_seed(seed, {0xd209, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(k)}));
  };

  double loss = 0.0;
  if (threads <= 1) {
    for (std::size_t k = 0; k < batch.size(); ++k) {
      Graph g;
      Rng rng = rng_for(k);
      Var l = run(k, g, rng);
      g.backward(l);
      loss += l.value().item();
    }
    return loss;
  }

  ParamStore& ps = m.params();
  std::unordered_map<const Parameter*, std::size_t> index;
  for (std::size_t p = 0; p < ps.size(); ++p) index.emplace(&ps[p], p);
  std::vector<std::vector<std::optional<Tensor>>> grads(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    Graph g;
    Rng rng = rng_for(k);
    Var l = run(k, g, rng);
    g.backward(l, false);
    losses[k] = l.value().item();
    grads[k].resize(ps.size());
    g.for_each_param_grad([&](const Parameter& p, const Tensor& gr) { grads[k][index.at(&p)] = gr; });
  });
  for (std::size_t k = 0; k < batch.size(); ++k) {
    for (std::size_t p = 0; p < ps.size(); ++p)
      if (grads[k][p]) ps[p].grad += *grads[k][p];
    loss += losses[k];
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::int64_t step = 0;
  double lr = 0.0;
  std::optional<double> train_loss;
  std::optional<double> val_metric;
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* metrics_header() { return "step\tlr\ttrain_loss\tval_metric"; }

inline std::string format_metrics_row(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("NA"); };
  return std::to_string(r.step) + "\t" + format_number(r.lr) + "\t" + opt(r.train_loss) + "\t" + opt(r.val_metric);
}

struct TrainOutputs {
  std::string checkpoint;  // empty: nothing written; optimizer state goes to checkpoint + ".optim"
  std::string metrics;     // empty: no TSV
  bool resume = false;     // continue from an existing checkpoint and optimizer state
};

enum class StopReason { max_steps, patience, target };

inline const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::max_steps: return "max_steps";
    case StopReason::patience: return "patience";
    case StopReason::target: return "target";
  }
  return "?";
}

struct TrainResult {
  std::int64_t steps = 0;
  double baseline_metric = 0.0;
  double best_metric = 0.0;
  double final_metric = 0.0;
  std::int64_t validations = 0;
  StopReason reason = StopReason::max_steps;
  std::vector<MetricsRow> rows;
};

inline std::string optimizer_path(const std::string& checkpoint) { return checkpoint + ".optim"; }

/// Trains `m` on data.train, validating on data.valid. Fresh runs start
/// with a step-0 validation that sets the early-stopping baseline. A
/// checkpoint (and its optimizer state) is written at every validation and
/// at the end; a numeric failure propagates and leaves the last one intact.
inline TrainResult train_loop(Model& m, const TaskData& data, const TrainConfig& cfg, const TrainOutputs& out = {},
                              const std::function<void(const MetricsRow&)>& on_row = {}) {
  cfg.validate();
  if (data.train.empty()) throw DataError("training corpus is empty");
  if (data.valid.empty()) throw DataError("validation corpus is empty");
  ParamStore& ps = m.params();

  AdamState adam = AdamState::for_params(ps);
  TrainProgress progress;
  TrainResult result;
  const bool resuming = out.resume && !out.checkpoint.empty() && std::filesystem::exists(out.checkpoint);
  if (resuming) {
    auto ts = read_container(out.checkpoint);
    check_vocab_hashes(ts, data.src_vocab, data.tgt_vocab);
    load_params(ps, ts);
    load_optimizer_state(optimizer_path(out.checkpoint), ps, adam, progress);
  } else {
    init_params(ps, cfg.seed, cfg.init_range);
  }
  ps.zero_grad();

  std::ofstream tsv;
  if (!out.metrics.empty()) {
    const bool append = resuming && std::filesystem::exists(out.metrics);
    tsv.open(out.metrics, append ? std::ios::app : std::ios::trunc);
    if (!tsv) throw DataError("cannot write metrics '" + out.metrics + "'");
    if (!append) tsv << metrics_header() << '\n';
  }
  auto emit = [&](const MetricsRow& r) {
    result.rows.push_back(r);
    if (tsv.is_open()) tsv << format_metrics_row(r) << '\n' << std::flush;
    if (on_row) on_row(r);
  };
  auto save = [&] {
    if (out.checkpoint.empty()) return;
    save_checkpoint(out.checkpoint, ps, data.src_vocab, data.tgt_vocab);
    save_optimizer_state(optimizer_path(out.checkpoint), ps, adam, progress);
  };
  auto validate = [&] { return evaluate(m, data.valid, cfg.valid_metric, cfg.valid_beam, cfg.threads); };

  if (!resuming) {
    const double base = validate();
    progress.best_metric = base;
    result.baseline_metric = base;
    emit({0, lr_schedule(0, cfg), std::nullopt, base});
    save();
  }
  result.best_metric = progress.best_metric;
  result.final_metric = progress.best_metric;

  const auto batches = make_batches(data.train, cfg.batch_tokens);
  BatchSchedule schedule(batches.size(), cfg.seed);

  double window_loss = 0.0;
  std::int64_t window_steps = 0;
  for (std::int64_t k = progress.step; k < cfg.max_steps; ++k) {
    const double lr = lr_schedule(k, cfg);
    const double loss = batch_gradients(m, data.train, batches[schedule.batch_at(k)], k, cfg.seed, cfg.threads);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(k + 1));
    clip_grad_norm(ps, cfg.clip_norm);
    adam_step(ps, adam, lr, cfg);
    ps.zero_grad();
    window_loss += loss;
    ++window_steps;

    const std::int64_t step = k + 1;
    progress.step = step;
    // the last step is always scored, but only interval validations feed early stopping
    const bool on_interval = step % cfg.valid_interval == 0;
    const bool do_valid = on_interval || step == cfg.max_steps;
    if (!do_valid && step % cfg.log_interval != 0) continue;

    MetricsRow row{step, lr, window_loss / static_cast<double>(window_steps), std::nullopt};
    window_loss = 0.0;
    window_steps = 0;
    if (do_valid) {
      const double v = validate();
      row.val_metric = v;
      result.final_metric = v;
      result.best_metric = std::max(result.best_metric, v);
      if (on_interval) {
        ++progress.validations;
        if (v > progress.best_metric) {
          progress.best_metric = v;
          progress.bad_validations = 0;
        } else {
          ++progress.bad_validations;
        }
      }
    }
    emit(row);
    if (on_interval) {
      save();
      if (cfg.target_metric > 0.0 && *row.val_metric >= cfg.target_metric) {
        result.reason = StopReason::target;
        break;
      }
      if (cfg.patience > 0 && progress.bad_validations >= cfg.patience) {
        result.reason = StopReason::patience;
        break;
      }
    }
  }

  save();
  result.steps = progress.step;
  result.validations = progress.validations;
  return result;
}

}  // namespace dtmt
