#pragma once

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <numeric>
#include <string>
#include <vector>

#include "dtmt/dtmt.hpp"
#include "oracle.hpp"

namespace testing_support {

using namespace dtmt;

/// Every parameter uniform in [-range, range], layer-norm gains in
/// [0.5, 1.5]; unlike init_params, gains and biases are not left at 1/0.
inline void randomize(ParamStore& ps, std::uint64_t seed, double range = 0.5) {
  Rng rng(seed);
  for (auto& p : ps) {
    const bool gain = is_layer_norm_gain(p->name);
    for (auto& v : p->value.span()) v = gain ? rng.uniform(0.5, 1.5) : rng.uniform(-range, range);
  }
}

inline Tensor random_vector(Rng& rng, std::size_t n, double range = 1.0) {
  Tensor t(Shape{n});
  for (auto& v : t.span()) v = rng.uniform(-range, range);
  return t;
}

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double range = 1.0) {
  Tensor t(Shape{r, c});
  for (auto& v : t.span()) v = rng.uniform(-range, range);
  return t;
}

inline double max_diff(const std::vector<double>& a, const Tensor& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Small synthetic corpus.
inline TaskData toy_task(TaskKind kind = TaskKind::copy, std::size_t vocab = 8, std::size_t train = 64,
                         std::size_t valid = 16, std::uint64_t seed = 1, std::size_t min_len = 3,
                         std::size_t max_len = 6) {
  TaskSpec ts;
  ts.kind = kind;
  ts.vocab_size = vocab;
  ts.min_len = min_len;
  ts.max_len = max_len;
  ts.train_size = train;
  ts.valid_size = valid;
  ts.test_size = 0;
  ts.seed = seed;
  return generate_task(ts);
}

inline ModelConfig toy_model(std::size_t vocab, std::size_t depth = 1, std::size_t d = 8, std::size_t heads = 2) {
  ModelConfig c = ModelConfig::dtmt(depth, vocab, vocab);
  c.emb_dim = d;
  c.hidden_dim = d;
  c.heads = heads;
  return c;
}

inline bool tensors_bitwise_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !bitwise_equal(a[i].value, b[i].value)) return false;
  }
  return true;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Fresh empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dtmt-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testing_support
