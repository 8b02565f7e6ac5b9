#pragma once

#include <string>

#include "dtmt/autograd.hpp"
#include "dtmt/parameters.hpp"
#include "dtmt/random.hpp"

namespace dtmt {

enum class CellKind { gru, tgru, lgru };
enum class Mode { train, eval };

inline const char* cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::gru: return "gru";
    case CellKind::tgru: return "tgru";
    case CellKind::lgru: return "lgru";
  }
  return "?";
}

/// Per-call stochastic state. Dropout masks are drawn from `rng` on every
/// step, so two steps never share a mask.
struct StepContext {
  Mode mode = Mode::eval;
  double candidate_dropout = 0.0;
  Rng* rng = nullptr;
};

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity outside train mode.
inline Var dropout(Var x, double rate, Mode mode, Rng* rng) {
  if (mode != Mode::train || rate <= 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout in train mode needs a random source");
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.span()) m = rng->uniform() < rate ? 0.0 : keep;
  return mul(x, x.graph->constant(std::move(mask)));
}

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  bool enabled() const { return gain != nullptr; }
};

/// Weights of one GRU / T-GRU / L-GRU. Matrices act on row vectors
/// (x·W), so input-side matrices are input_dim×hidden_dim. Absent matrices
/// are null: a T-GRU has no W_x*, only an L-GRU has W_x, W_xl, W_hl.
struct CellParams {
  CellKind kind = CellKind::gru;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  Parameter* w_xh = nullptr;
  Parameter* w_hh = nullptr;
  Parameter* w_xr = nullptr;
  Parameter* w_hr = nullptr;
  Parameter* w_xz = nullptr;
  Parameter* w_hz = nullptr;
  Parameter* w_x = nullptr;
  Parameter* w_xl = nullptr;
  Parameter* w_hl = nullptr;

  LayerNormParams ln_r, ln_z, ln_l, ln_candidate;

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (Parameter* p : {w_xh, w_hh, w_xr, w_hr, w_xz, w_hz, w_x, w_xl, w_hl, ln_r.gain, ln_r.bias, ln_z.gain,
                         ln_z.bias, ln_l.gain, ln_l.bias, ln_candidate.gain, ln_candidate.bias}) {
      if (p) out.push_back(p);
    }
    return out;
  }
};

struct CellOptions {
  bool layer_norm = false;
  bool layer_norm_candidate = false;
};

/// Allocates a cell's parameters in `store` under `prefix` (zero-filled; see init_params).
inline CellParams make_cell(ParamStore& store, const std::string& prefix, CellKind kind, std::size_t input_dim,
                            std::size_t hidden_dim, CellOptions opts = {}) {
  if (hidden_dim == 0 || (kind != CellKind::tgru && input_dim == 0)) {
    throw ContractError("make_cell: dimensions must be positive");
  }
  CellParams c;
  c.kind = kind;
  c.input_dim = kind == CellKind::tgru ? 0 : input_dim;
  c.hidden_dim = hidden_dim;
  const std::size_t dx = input_dim, d = hidden_dim;
  auto mat = [&](const char* n, std::size_t r) { return &store.add(prefix + "." + n, Shape{r, d}); };
  auto ln = [&](const char* n) {
    LayerNormParams p;
    p.gain = &store.add(prefix + ".ln_" + n + ".gain", Shape{d}, 1.0);
    p.bias = &store.add(prefix + ".ln_" + n + ".bias", Shape{d}, 0.0);
    return p;
  };
  if (kind != CellKind::tgru) c.w_xh = mat("W_xh", dx);
  c.w_hh = mat("W_hh", d);
  if (kind != CellKind::tgru) c.w_xr = mat("W_xr", dx);
  c.w_hr = mat("W_hr", d);
  if (kind != CellKind::tgru) c.w_xz = mat("W_xz", dx);
  c.w_hz = mat("W_hz", d);
  if (kind == CellKind::lgru) {
    c.w_x = mat("W_x", dx);
    c.w_xl = mat("W_xl", dx);
    c.w_hl = mat("W_hl", d);
  }
  if (opts.layer_norm) {
    c.ln_r = ln("r");
    c.ln_z = ln("z");
    if (kind == CellKind::lgru) c.ln_l = ln("l");
  }
  if (opts.layer_norm_candidate) c.ln_candidate = ln("candidate");
  return c;
}

/// Exact parameter count of a cell as allocated by make_cell.
inline std::size_t count_params(CellKind kind, std::size_t input_dim, std::size_t hidden_dim, bool layer_norm,
                                bool layer_norm_candidate = false) {
  const std::size_t dx = input_dim, d = hidden_dim;
  std::size_t n = 0;
  switch (kind) {
    case CellKind::gru: n = 3 * dx * d + 3 * d * d; break;
    case CellKind::tgru: n = 3 * d * d; break;
    case CellKind::lgru: n = 5 * dx * d + 4 * d * d; break;
  }
  if (layer_norm) n += (kind == CellKind::lgru ? 3 : 2) * 2 * d;
  if (layer_norm_candidate) n += 2 * d;
  return n;
}

/// Normalises a gate pre-activation and applies the learned gain and bias.
inline Var per_gate_layernorm(Var pre_activation, Var gain, Var bias) {
  return layer_norm(pre_activation, gain, bias, 1e-6);
}

namespace detail {

inline void check_vec(Var v, std::size_t n, const char* what, CellKind kind) {
  if (v.value().rank() != 1 || v.size() != n) {
    throw DimensionError(std::string(cell_kind_name(kind)) + " step: " + what + " has shape " + shape_str(v.shape()) +
                         ", expected (" + std::to_string(n) + ")");
  }
}

inline Var maybe_ln(Graph& g, Var pre, const LayerNormParams& ln) {
  if (!ln.enabled()) return pre;
  return per_gate_layernorm(pre, g.param(*ln.gain), g.param(*ln.bias));
}

// σ(LN(x·W_x + h·W_h)); the x-term is skipped when W_x is null.
inline Var gate(Graph& g, Parameter* w_x, Var* x, Parameter& w_h, Var h, const LayerNormParams& ln) {
  Var pre = matmul(h, g.param(w_h));
  if (w_x) pre = add(matmul(*x, g.param(*w_x)), pre);
  return sigmoid(maybe_ln(g, pre, ln));
}

// Shared body of all three cells.
inline Var cell_step_impl(const CellParams& p, Var* x, Var h_prev, const StepContext& ctx) {
  Graph& g = *h_prev.graph;
  check_vec(h_prev, p.hidden_dim, "h_prev", p.kind);
  if (p.kind != CellKind::tgru) {
    if (x == nullptr) throw ContractError(std::string(cell_kind_name(p.kind)) + " step needs an input");
    if (x->graph != &g) throw ContractError("cell step: input and state belong to different graphs");
    check_vec(*x, p.input_dim, "input", p.kind);
  }
  Var r = gate(g, p.w_xr, x, *p.w_hr, h_prev, p.ln_r);
  Var z = gate(g, p.w_xz, x, *p.w_hz, h_prev, p.ln_z);

  Var cand_pre = mul(r, matmul(h_prev, g.param(*p.w_hh)));
  if (p.w_xh) cand_pre = add(matmul(*x, g.param(*p.w_xh)), cand_pre);
  Var cand = tanh(maybe_ln(g, cand_pre, p.ln_candidate));
  if (p.kind == CellKind::lgru) {
    Var l = gate(g, p.w_xl, x, *p.w_hl, h_prev, p.ln_l);
    cand = add(cand, mul(l, matmul(*x, g.param(*p.w_x))));
  }
  cand = dropout(cand, ctx.candidate_dropout, ctx.mode, ctx.rng);
  return add(mul(one_minus(z), h_prev), mul(z, cand));
}

}  // namespace detail

inline Var gru_step(const CellParams& p, Var x, Var h_prev, const StepContext& ctx = {}) {
  if (p.kind != CellKind::gru) throw ContractError("gru_step called with a " + std::string(cell_kind_name(p.kind)) + " cell");
  return detail::cell_step_impl(p, &x, h_prev, ctx);
}

inline Var tgru_step(const CellParams& p, Var h_prev, const StepContext& ctx = {}) {
  if (p.kind != CellKind::tgru) throw ContractError("tgru_step called with a " + std::string(cell_kind_name(p.kind)) + " cell");
  return detail::cell_step_impl(p, nullptr, h_prev, ctx);
}

inline Var lgru_step(const CellParams& p, Var x, Var h_prev, const StepContext& ctx = {}) {
  if (p.kind != CellKind::lgru) throw ContractError("lgru_step called with a " + std::string(cell_kind_name(p.kind)) + " cell");
  return detail::cell_step_impl(p, &x, h_prev, ctx);
}

/// Dispatches on the cell kind; `x` is ignored for T-GRU.
inline Var cell_step(const CellParams& p, Var x, Var h_prev, const StepContext& ctx = {}) {
  return detail::cell_step_impl(p, p.kind == CellKind::tgru ? nullptr : &x, h_prev, ctx);
}

}  // namespace dtmt
