#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dtmt/parameters.hpp"
#include "dtmt/random.hpp"

namespace dtmt {

enum class ValidMetric { accuracy, exact, bleu };

inline const char* valid_metric_name(ValidMetric m) {
  switch (m) {
    case ValidMetric::accuracy: return "accuracy";
    case ValidMetric::exact: return "exact";
    case ValidMetric::bleu: return "bleu";
  }
  return "?";
}

struct TrainConfig {
  // schedule: lr0 · min(1 + t(n-1)/(np), n, n·(2n)^((s - n t)/(e - s)))
  double learning_rate = 1e-3;
  std::int64_t warmup_steps = 500;
  std::int64_t decay_start = 8000;
  std::int64_t decay_end = 64000;
  std::int64_t replicas = 1;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  double init_range = 0.08;
  double clip_norm = 5.0;  // global L2 norm; 0 disables

  std::size_t batch_tokens = 1024;
  std::int64_t max_steps = 3000;
  std::int64_t valid_interval = 500;
  std::int64_t log_interval = 100;
  std::int64_t patience = 0;       // validations without improvement before stopping; 0 disables
  double target_metric = 0.0;      // stop once validation reaches this; 0 disables
  ValidMetric valid_metric = ValidMetric::accuracy;
  std::size_t valid_beam = 1;      // 1 = greedy
  std::size_t threads = 1;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
    if (warmup_steps <= 0) fail("warmup_steps must be > 0");
    if (decay_start <= 0 || decay_start >= decay_end) fail("need 0 < decay_start < decay_end");
    if (replicas < 1) fail("replicas must be >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam betas must lie in [0,1)");
    if (!(adam_eps > 0)) fail("adam_eps must be > 0");
    if (!(init_range > 0)) fail("init_range must be > 0");
    if (clip_norm < 0) fail("clip_norm must be >= 0");
    if (batch_tokens == 0) fail("batch_tokens must be > 0");
    if (max_steps < 0) fail("max_steps must be >= 0");
    if (valid_interval <= 0 || log_interval <= 0) fail("intervals must be > 0");
    if (patience < 0) fail("patience must be >= 0");
    if (valid_beam == 0) fail("valid_beam must be >= 1");
    if (threads == 0) fail("threads must be >= 1");
  }
};

/// Warmup / plateau / exponential-decay learning rate at step t.
inline double lr_schedule(std::int64_t t, const TrainConfig& c) {
  const double n = static_cast<double>(c.replicas);
  const double p = static_cast<double>(c.warmup_steps);
  const double s = static_cast<double>(c.decay_start);
  const double e = static_cast<double>(c.decay_end);
  const double td = static_cast<double>(t);
  const double warm = 1.0 + td * (n - 1.0) / (n * p);
  const double decay = n * std::pow(2.0 * n, (s - n * td) / (e - s));
  return c.learning_rate * std::min({warm, n, decay});
}

struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState for_params(const ParamStore& ps) {
    AdamState s;
    for (const auto& p : ps) {
      s.m.push_back(Tensor::zeros_like(p->value));
      s.v.push_back(Tensor::zeros_like(p->value));
    }
    return s;
  }
};

/// Throws NumericError naming the first parameter whose gradient is not finite.
inline void check_finite_grads(const ParamStore& ps) {
  for (const auto& p : ps) {
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in tensor '" + p->name + "'");
  }
}

inline double global_grad_norm(const ParamStore& ps) {
  double s = 0.0;
  for (const auto& p : ps)
    for (double g : p->grad.span()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& ps, double max_norm) {
  const double norm = global_grad_norm(ps);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : ps) p->grad *= f;
  }
  return norm;
}

/// One bias-corrected Adam update from Parameter::grad.
inline void adam_step(ParamStore& ps, AdamState& st, double lr, const TrainConfig& c) {
  if (st.m.size() != ps.size() || st.v.size() != ps.size()) throw ContractError("adam: state does not match parameters");
  check_finite_grads(ps);
  ++st.step;
  const double b1 = c.adam_beta1, b2 = c.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Parameter& p = ps[k];
    Tensor& m = st.m[k];
    Tensor& v = st.v[k];
    p.value.check_same(m, "adam moments");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + c.adam_eps);
    }
  }
}

inline bool is_layer_norm_gain(const std::string& name) {
  return name.find(".ln_") != std::string::npos && name.ends_with(".gain");
}
inline bool is_layer_norm_bias(const std::string& name) {
  return name.find(".ln_") != std::string::npos && name.ends_with(".bias");
}

/// Weights uniform in [-range, range] in store order from one seeded stream;
/// layer-norm gains 1 and biases 0.
inline void init_params(ParamStore& ps, std::uint64_t seed, double range = 0.08) {
  Rng rng(derive_seed(seed, {0x1717}));
  for (auto& p : ps) {
    if (is_layer_norm_gain(p->name)) {
      p->value.fill(1.0);
    } else if (is_layer_norm_bias(p->name)) {
      p->value.fill(0.0);
    } else {
      for (auto& v : p->value.span()) v = rng.uniform(-range, range);
    }
    p->zero_grad();
  }
}

}  // namespace dtmt
