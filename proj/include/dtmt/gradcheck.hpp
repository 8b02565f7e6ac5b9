#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtmt/data.hpp"
#include "dtmt/model.hpp"
#include "dtmt/optim.hpp"

namespace dtmt {

inline std::optional<Op> op_from_name(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(Op::reshape); ++k) {
    if (name == op_name(static_cast<Op>(k))) return static_cast<Op>(k);
  }
  return std::nullopt;
}

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), zero when both vanish.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  analytic.check_same(numeric, "relative_error");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom < 1e-300 ? 0.0 : std::sqrt(diff) / denom;
}

/// Central-difference gradient of a scalar function with respect to `x`.
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double eps) {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f();
    x[i] = saved - eps;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

using LossBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Relative error per input of build(inputs) against central differences.
inline std::vector<double> check_gradients(const LossBuilder& build, std::vector<Tensor> inputs, double eps = 1e-4) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.input(t));
  g.backward(build(g, vars));

  auto eval = [&] {
    Graph h;
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(h.constant(t));
    return build(h, vs).value().item();
  };
  std::vector<double> errs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    errs.push_back(relative_error(g.grad(vars[k]), numeric_gradient(eval, inputs[k], eps)));
  }
  return errs;
}

struct GradcheckEntry {
  std::string name;
  std::size_t size = 0;
  double rel_err = 0.0;
  bool pass = true;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.span()) v = rng.uniform(lo, hi);
  return t;
}

// sum(y ⊙ w) for a fixed random w, so every output entry gets a distinct weight
inline Var weighted_sum(Graph& g, Var y, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x5e1}));
  return sum(mul(y, g.constant(random_tensor(rng, y.shape()))));
}

}  // namespace detail

/// Finite-difference check of every differentiable op on random inputs.
inline std::vector<GradcheckEntry> op_gradchecks(std::uint64_t seed = 1, double eps = 1e-4, double tol = 1e-4) {
  Rng rng(derive_seed(seed, {0x09c4}));
  auto R = [&](Shape s) { return detail::random_tensor(rng, std::move(s)); };
  struct Case {
    Op op;
    LossBuilder build;
    std::vector<Tensor> inputs;
  };
  auto ws = [seed](Graph& g, Var y) { return detail::weighted_sum(g, y, seed); };
  std::vector<Case> cases = {
      {Op::matmul, [&](Graph& g, const std::vector<Var>& v) { return ws(g, matmul(v[0], v[1])); }, {R({3, 4}), R({4, 2})}},
      {Op::add, [&](Graph& g, const std::vector<Var>& v) { return ws(g, add(v[0], v[1])); }, {R({5}), R({5})}},
      {Op::sub, [&](Graph& g, const std::vector<Var>& v) { return ws(g, sub(v[0], v[1])); }, {R({5}), R({5})}},
      {Op::mul, [&](Graph& g, const std::vector<Var>& v) { return ws(g, mul(v[0], v[1])); }, {R({5}), R({5})}},
      {Op::sigmoid, [&](Graph& g, const std::vector<Var>& v) { return ws(g, sigmoid(v[0])); }, {R({6})}},
      {Op::tanh, [&](Graph& g, const std::vector<Var>& v) { return ws(g, tanh(v[0])); }, {R({6})}},
      {Op::scale, [&](Graph& g, const std::vector<Var>& v) { return ws(g, scale(v[0], -1.7)); }, {R({4})}},
      {Op::shift, [&](Graph& g, const std::vector<Var>& v) { return ws(g, shift(v[0], 0.3)); }, {R({4})}},
      {Op::softmax, [&](Graph& g, const std::vector<Var>& v) { return ws(g, softmax(v[0])); }, {R({6})}},
      {Op::log_softmax, [&](Graph& g, const std::vector<Var>& v) { return ws(g, log_softmax(v[0])); }, {R({6})}},
      {Op::concat, [&](Graph& g, const std::vector<Var>& v) { return ws(g, concat(v[0], v[1], 1)); }, {R({2, 3}), R({2, 5})}},
      {Op::slice, [&](Graph& g, const std::vector<Var>& v) { return ws(g, slice(v[0], 1, 3)); }, {R({2, 5})}},
      {Op::sum, [&](Graph&, const std::vector<Var>& v) { return sum(mul(v[0], v[0])); }, {R({5})}},
      {Op::layer_norm,
       [&](Graph& g, const std::vector<Var>& v) { return ws(g, sigmoid(layer_norm(v[0], v[1], v[2]))); },
       {R({6}), R({6}), R({6})}},
      {Op::row, [&](Graph& g, const std::vector<Var>& v) { return ws(g, add(row(v[0], 2), row(v[0], 0))); }, {R({4, 3})}},
      {Op::stack_rows, [&](Graph& g, const std::vector<Var>& v) { return ws(g, stack_rows({v[0], v[1], v[0]})); },
       {R({3}), R({3})}},
      {Op::tile_rows, [&](Graph& g, const std::vector<Var>& v) { return ws(g, tile_rows(v[0], 3)); }, {R({4})}},
      {Op::reshape, [&](Graph& g, const std::vector<Var>& v) { return ws(g, reshape(v[0], Shape{3, 2})); }, {R({6})}},
  };
  std::vector<GradcheckEntry> out;
  for (auto& c : cases) {
    double worst = 0.0;
    std::size_t n = 0;
    for (double e : check_gradients(c.build, c.inputs, eps)) worst = std::max(worst, e);
    for (const auto& t : c.inputs) n += t.size();
    out.push_back({op_name(c.op), n, worst, worst < tol});
  }
  return out;
}

/// Sum of teacher-forced losses (eval mode) over `batch`.
inline Var batch_loss(Graph& g, Model& m, const std::vector<Example>& batch) {
  std::optional<Var> total;
  const ForwardContext fc{};
  for (const auto& ex : batch) {
    Var l = forward_teacher_forced(g, m, ex.src, ex.tgt, fc).loss;
    total = total ? add(*total, l) : l;
  }
  if (!total) throw ContractError("gradcheck: empty batch");
  return *total;
}

/// One entry per parameter tensor, in store order.
inline std::vector<GradcheckEntry> model_gradcheck(Model& m, const std::vector<Example>& batch, double eps = 1e-4,
                                                   double tol = 1e-4) {
  ParamStore& ps = m.params();
  ps.zero_grad();
  {
    Graph g;
    g.backward(batch_loss(g, m, batch));
  }
  auto eval = [&] {
    Graph g;
    g.set_grad_enabled(false);
    return batch_loss(g, m, batch).value().item();
  };
  std::vector<GradcheckEntry> out;
  for (auto& p : ps) {
    const Tensor numeric = numeric_gradient(eval, p->value, eps);
    const double err = relative_error(p->grad, numeric);
    out.push_back({p->name, p->value.size(), err, err < tol});
  }
  ps.zero_grad();
  return out;
}

struct GradcheckConfig {
  std::size_t hidden_dim = 8;
  std::size_t emb_dim = 8;
  std::size_t vocab = 12;  // including reserved tokens
  std::size_t heads = 2;
  std::size_t depth = 1;
  bool layer_norm = true;
  std::size_t sentences = 2;
  double init_range = 1.0;
  double eps = 1e-4;
  double tol = 1e-4;
  std::uint64_t seed = 1;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> ops;
  std::vector<GradcheckEntry> params;

  bool passed() const {
    for (const auto* list : {&ops, &params})
      for (const auto& e : *list)
        if (!e.pass) return false;
    return true;
  }
  double max_param_error() const {
    double w = 0.0;
    for (const auto& e : params) w = std::max(w, e.rel_err);
    return w;
  }
};

inline ModelConfig gradcheck_model_config(const GradcheckConfig& c) {
  ModelConfig mc = ModelConfig::dtmt(c.depth, c.vocab, c.vocab);
  mc.emb_dim = c.emb_dim;
  mc.hidden_dim = c.hidden_dim;
  mc.heads = c.heads;
  mc.layer_norm = c.layer_norm;
  return mc;
}

/// Op-level checks plus a full-model check on a small copy-task batch.
inline GradcheckReport run_gradcheck(const GradcheckConfig& c) {
  if (c.vocab <= Vocabulary::reserved_count) throw ConfigError("gradcheck: vocab must exceed the reserved tokens");
  GradcheckReport r;
  r.ops = op_gradchecks(c.seed, c.eps, c.tol);
  Model m(gradcheck_model_config(c));
  init_params(m.params(), c.seed, c.init_range);
  TaskSpec ts;
  ts.vocab_size = c.vocab - Vocabulary::reserved_count;
  ts.min_len = 3;
  ts.max_len = 5;
  ts.train_size = c.sentences;
  ts.valid_size = 0;
  ts.test_size = 0;
  ts.seed = c.seed;
  const TaskData data = generate_task(ts);
  r.params = model_gradcheck(m, data.train, c.eps, c.tol);
  return r;
}

}  // namespace dtmt
