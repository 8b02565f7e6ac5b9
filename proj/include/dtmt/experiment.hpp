#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "dtmt/checkpoint.hpp"
#include "dtmt/config.hpp"
#include "dtmt/data.hpp"
#include "dtmt/model.hpp"
#include "dtmt/train.hpp"

namespace dtmt {

/// Files of a training run inside RunConfig::out_dir.
struct RunPaths {
  std::filesystem::path dir;
  std::string checkpoint() const { return (dir / "model.dtck").string(); }
  std::string metrics() const { return (dir / "metrics.tsv").string(); }
  std::string snapshot() const { return (dir / "config.snapshot").string(); }
  std::string src_vocab() const { return (dir / "src.vocab").string(); }
  std::string tgt_vocab() const { return (dir / "tgt.vocab").string(); }
};

inline RunPaths run_paths(const RunConfig& c) { return {std::filesystem::path(c.out_dir)}; }

/// Synthetic corpus from the task spec, or parallel files from data_dir:
/// {train,valid,test}.{src,tgt}, with {src,tgt}.vocab when present (else
/// built from the training side). The test split is optional.
inline TaskData load_data(const RunConfig& c) {
  if (c.data_dir.empty()) return generate_task(c.task);
  namespace fs = std::filesystem;
  const fs::path d(c.data_dir);
  auto file = [&](const char* n) { return (d / n).string(); };
  TaskData t;
  t.src_vocab = fs::exists(file("src.vocab")) ? Vocabulary::load(file("src.vocab")) : build_vocabulary(file("train.src"));
  t.tgt_vocab = fs::exists(file("tgt.vocab")) ? Vocabulary::load(file("tgt.vocab")) : build_vocabulary(file("train.tgt"));
  t.train = read_corpus(file("train.src"), file("train.tgt"), t.src_vocab, t.tgt_vocab);
  t.valid = read_corpus(file("valid.src"), file("valid.tgt"), t.src_vocab, t.tgt_vocab);
  if (fs::exists(file("test.src"))) t.test = read_corpus(file("test.src"), file("test.tgt"), t.src_vocab, t.tgt_vocab);
  return t;
}

inline ModelConfig resolved_model(const RunConfig& c, const Vocabulary& src, const Vocabulary& tgt) {
  ModelConfig m = c.model;
  m.src_vocab = src.size();
  m.tgt_vocab = tgt.size();
  m.validate();
  return m;
}

/// Trains per the config and writes checkpoint, optimizer state, metrics
/// TSV, config snapshot and vocabularies into out_dir.
inline TrainResult run_training(const RunConfig& c, bool resume = false,
                                const std::function<void(const MetricsRow&)>& on_row = {}) {
  c.train.validate();
  const TaskData data = load_data(c);
  Model m(resolved_model(c, data.src_vocab, data.tgt_vocab));
  const RunPaths p = run_paths(c);
  std::filesystem::create_directories(p.dir);
  {
    std::ofstream snap(p.snapshot(), std::ios::trunc);
    if (!snap) throw DataError("cannot write '" + p.snapshot() + "'");
    snap << config_snapshot(c);
  }
  data.src_vocab.save(p.src_vocab());
  data.tgt_vocab.save(p.tgt_vocab());
  return train_loop(m, data, c.train, TrainOutputs{p.checkpoint(), p.metrics(), resume}, on_row);
}

/// Model rebuilt from a config and checkpoint; vocabulary hashes must match.
inline Model load_model(const RunConfig& c, const std::string& checkpoint, const Vocabulary& src, const Vocabulary& tgt) {
  Model m(resolved_model(c, src, tgt));
  const auto ts = read_container(checkpoint);
  check_vocab_hashes(ts, src, tgt);
  load_params(m.params(), ts);
  return m;
}

}  // namespace dtmt
