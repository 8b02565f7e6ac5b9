// dtmt: train, decode, gradcheck, params, sweep and lr-plot.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure (non-finite values, failed gradient check).
// Log verbosity: DTMT_LOG=trace|debug|info|warn|error|off (default info).

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dtmt/dtmt.hpp"

namespace {

using namespace dtmt;

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("dtmt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
  const char* env = std::getenv("DTMT_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "key=value config file");
    cmd->add_option("-s,--set", overrides, "override one key (key=value), repeatable");
  }
  RunConfig resolve() const {
    RunConfig c = path.empty() ? RunConfig{} : load_config(path);
    apply_overrides(c, overrides);
    return c;
  }
};

std::ostream& open_output(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw DataError("cannot write '" + path + "'");
  return file;
}

int cmd_train(const ConfigArgs& args, bool resume) {
  const RunConfig c = args.resolve();
  spdlog::info("training {} task into {}", c.data_dir.empty() ? task_name(c.task.kind) : c.data_dir.c_str(), c.out_dir);
  const TrainResult r = run_training(c, resume, [](const MetricsRow& row) {
    if (row.val_metric) {
      spdlog::info("step {} lr {:.3g} loss {} valid {:.6f}", row.step, row.lr,
                   row.train_loss ? format_number(*row.train_loss) : "NA", *row.val_metric);
    } else {
      spdlog::debug("step {} lr {:.3g} loss {:.6f}", row.step, row.lr, row.train_loss.value_or(0.0));
    }
  });
  spdlog::info("stopped after {} steps ({}); final {} {:.6f}, best {:.6f}", r.steps, stop_reason_name(r.reason),
               valid_metric_name(c.train.valid_metric), r.final_metric, r.best_metric);
  std::cout << "steps\t" << r.steps << "\nstop\t" << stop_reason_name(r.reason) << "\nfinal_metric\t"
            << format_number(r.final_metric) << "\nbest_metric\t" << format_number(r.best_metric) << "\n";
  return 0;
}

struct DecodeArgs {
  std::string checkpoint, input, output, src_vocab, tgt_vocab;
  std::optional<std::size_t> beam;
  std::optional<double> alpha;
  std::string norm;
};

int cmd_decode(const ConfigArgs& cargs, const DecodeArgs& a) {
  RunConfig c = cargs.resolve();
  if (a.beam) c.decode.beam_size = *a.beam;
  if (a.alpha) c.decode.alpha = *a.alpha;
  if (!a.norm.empty()) apply_setting(c, "length_norm", a.norm, "--length-norm");
  if (c.decode.beam_size == 0) throw ConfigError("--beam must be >= 1");
  const RunPaths p = run_paths(c);

  // vocabularies: explicit files, then the run directory, then the data
  auto pick = [](const std::string& given, const std::string& in_run) {
    if (!given.empty()) return given;
    return std::filesystem::exists(in_run) ? in_run : std::string();
  };
  const std::string sv = pick(a.src_vocab, p.src_vocab()), tv = pick(a.tgt_vocab, p.tgt_vocab());
  Vocabulary src, tgt;
  if (!sv.empty() && !tv.empty()) {
    src = Vocabulary::load(sv);
    tgt = Vocabulary::load(tv);
  } else {
    const TaskData d = load_data(c);
    src = sv.empty() ? d.src_vocab : Vocabulary::load(sv);
    tgt = tv.empty() ? d.tgt_vocab : Vocabulary::load(tv);
  }
  Model m = load_model(c, a.checkpoint.empty() ? p.checkpoint() : a.checkpoint, src, tgt);

  const auto lines = read_lines(a.input);
  std::vector<Sentence> sources;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    sources.push_back(src.encode(lines[i]));
    if (sources.back().empty()) throw DataError(a.input + ":" + std::to_string(i + 1) + ": empty line");
  }
  const auto hyps = decode_all(m, sources, c.decode.beam_size, c.train.threads, c.decode.alpha, c.decode.length_norm);
  std::ofstream file;
  std::ostream& out = open_output(a.output, file);
  for (const auto& h : hyps) out << tgt.decode(h) << '\n';
  spdlog::info("decoded {} sentences (beam {}, alpha {})", hyps.size(), c.decode.beam_size, c.decode.alpha);
  return 0;
}

int cmd_gradcheck(const GradcheckConfig& g, const std::string& fault) {
  if (!fault.empty()) {
    const auto op = op_from_name(fault);
    if (!op || *op == Op::leaf) throw ConfigError("--inject-fault: unknown op '" + fault + "'");
    set_fault_injection(*op);
    spdlog::warn("backward of op '{}' deliberately corrupted", fault);
  }
  const GradcheckReport r = run_gradcheck(g);
  clear_fault_injection();
  std::cout << "kind\tname\tsize\tmax_rel_err\tresult\n";
  for (const auto& e : r.ops) {
    std::cout << "op\t" << e.name << '\t' << e.size << '\t' << format_number(e.rel_err) << '\t'
              << (e.pass ? "PASS" : "FAIL") << '\n';
  }
  for (const auto& e : r.params) {
    std::cout << "param\t" << e.name << '\t' << e.size << '\t' << format_number(e.rel_err) << '\t'
              << (e.pass ? "PASS" : "FAIL") << '\n';
  }
  for (const auto& e : r.ops)
    if (!e.pass) spdlog::error("gradient check failed for op '{}' (rel err {:.3g})", e.name, e.rel_err);
  spdlog::info("{} parameter tensors, max rel err {:.3g}", r.params.size(), r.max_param_error());
  return r.passed() ? 0 : kNumeric;
}

int cmd_params(const ConfigArgs& args) {
  const RunConfig c = args.resolve();
  const TaskData d = load_data(c);
  const ModelConfig mc = resolved_model(c, d.src_vocab, d.tgt_vocab);
  const Model m(mc);
  const ParamBreakdown b = param_breakdown(m);
  std::cout << "component\tparams\n";
  for (const auto& [name, n] : b.components) std::cout << name << '\t' << n << '\n';
  std::cout << "total\t" << b.total << '\n';
  std::cout << "tensors\t" << b.tensors << '\n';
  if (b.total != count_model_params(mc)) throw ContractError("parameter enumeration disagrees with closed form");
  return 0;
}

int cmd_sweep(const ConfigArgs& args, const std::string& axis_name, std::size_t seeds, const std::string& output) {
  const RunConfig c = args.resolve();
  const auto axis = sweep_axis_from_name(axis_name);
  if (!axis) throw ConfigError("--axis must be one of depth, cell, ablation, ablation-all, pe");
  std::ofstream file;
  std::ostream& out = open_output(output, file);
  out << sweep_header() << '\n' << std::flush;
  std::size_t failed = 0;
  run_sweep(c, *axis, seeds, [&](const SweepRow& r) {
    out << format_sweep_row(r) << '\n' << std::flush;
    if (r.status != "ok") {
      ++failed;
      spdlog::warn("member {} (seed {}) {}", r.label, r.seed, r.status);
    } else {
      spdlog::info("member {} (seed {}) final {:.6f}", r.label, r.seed, *r.final_metric);
    }
  });
  if (failed) spdlog::warn("{} member run(s) failed", failed);
  return 0;
}

int cmd_lr_plot(const ConfigArgs& args, std::int64_t from, std::int64_t to, std::int64_t every,
                const std::string& output) {
  const RunConfig c = args.resolve();
  c.train.validate();
  if (from < 0 || to < from || every <= 0) throw ConfigError("lr-plot: need 0 <= from <= to and every > 0");
  std::ofstream file;
  std::ostream& out = open_output(output, file);
  out << "step\tlr\n";
  for (std::int64_t t = from; t <= to; t += every) out << t << '\t' << format_number(lr_schedule(t, c.train)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Deep-transition recurrent translation models"};
  app.require_subcommand(1);

  ConfigArgs train_args, decode_cfg, params_args, sweep_args, lr_args;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train a model; writes checkpoint, metrics and config snapshot");
  train_args.attach(train);
  train->add_flag("--resume", resume, "continue from the checkpoint in out_dir");

  DecodeArgs dargs;
  std::size_t beam_value = 0;
  double alpha_value = 0.0;
  auto* decode = app.add_subcommand("decode", "beam-decode one sentence per line");
  decode_cfg.attach(decode);
  decode->add_option("--checkpoint", dargs.checkpoint, "checkpoint (default: out_dir/model.dtck)");
  decode->add_option("-i,--input", dargs.input, "source sentences, one per line")->required();
  decode->add_option("-o,--output", dargs.output, "output file (default stdout)");
  auto* beam_opt = decode->add_option("--beam", beam_value, "beam size (default 4; 1 = greedy)");
  auto* alpha_opt = decode->add_option("--alpha", alpha_value, "length penalty exponent (default 0.6)");
  decode->add_option("--length-norm", dargs.norm, "gnmt or length");
  decode->add_option("--src-vocab", dargs.src_vocab, "source vocabulary file");
  decode->add_option("--tgt-vocab", dargs.tgt_vocab, "target vocabulary file");

  GradcheckConfig gc;
  std::string fault;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and parameter tensor");
  grad->add_option("--seed", gc.seed, "random seed");
  grad->add_option("--hidden-dim", gc.hidden_dim, "hidden width d");
  grad->add_option("--emb-dim", gc.emb_dim, "embedding width");
  grad->add_option("--vocab", gc.vocab, "vocabulary size including reserved tokens");
  grad->add_option("--heads", gc.heads, "attention heads");
  grad->add_option("--depth", gc.depth, "transition depth of every module");
  grad->add_option("--eps", gc.eps, "finite-difference step");
  grad->add_option("--tol", gc.tol, "relative error tolerance");
  bool no_ln = false;
  grad->add_flag("--no-layer-norm", no_ln, "disable per-gate layer normalisation");
  grad->add_option("--inject-fault", fault, "corrupt the backward rule of one op (test fixture)");

  auto* params = app.add_subcommand("params", "per-component and total parameter counts");
  params_args.attach(params);

  std::string axis, sweep_out;
  std::size_t seeds = 1;
  auto* sweep = app.add_subcommand("sweep", "train a configuration matrix and tabulate validation metrics");
  sweep_args.attach(sweep);
  sweep->add_option("--axis", axis, "depth, cell, ablation, ablation-all or pe")->required();
  sweep->add_option("--seeds", seeds, "training seeds per member");
  sweep->add_option("-o,--output", sweep_out, "summary TSV (default stdout)");

  std::int64_t from = 0, to = 64000, every = 100;
  std::string lr_out;
  auto* lr = app.add_subcommand("lr-plot", "learning-rate schedule as TSV");
  lr_args.attach(lr);
  lr->add_option("--from", from, "first step");
  lr->add_option("--to", to, "last step");
  lr->add_option("--every", every, "step interval");
  lr->add_option("-o,--output", lr_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return cmd_train(train_args, resume);
    if (*decode) {
      if (beam_opt->count()) dargs.beam = beam_value;
      if (alpha_opt->count()) dargs.alpha = alpha_value;
      return cmd_decode(decode_cfg, dargs);
    }
    if (*grad) {
      gc.layer_norm = !no_ln;
      return cmd_gradcheck(gc, fault);
    }
    if (*params) return cmd_params(params_args);
    if (*sweep) return cmd_sweep(sweep_args, axis, seeds, sweep_out);
    if (*lr) return cmd_lr_plot(lr_args, from, to, every, lr_out);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  }
  return kUsage;
}
