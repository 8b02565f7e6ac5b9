#pragma once

// Scalar-loop reference implementations. Plain loops over std::vector,
// sharing nothing with the graph code except the parameter values.

#include <cmath>
#include <vector>

#include "dtmt/dtmt.hpp"

namespace oracle {

using Vec = std::vector<double>;
using dtmt::Tensor;

inline Vec to_vec(const Tensor& t) { return Vec(t.span().begin(), t.span().end()); }

// x(k) · W(k×n)
inline Vec vecmat(const Vec& x, const Tensor& W) {
  const std::size_t k = W.dim(0), n = W.dim(1);
  Vec out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += x[i] * W.at(i, j);
    out[j] = s;
  }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec layer_norm(const Vec& v, const Tensor& gain, const Tensor& bias, double eps = 1e-6) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * (v[i] - mean) / std::sqrt(var + eps) + bias[i];
  return out;
}

inline Vec maybe_ln(const Vec& v, const dtmt::LayerNormParams& ln) {
  return ln.enabled() ? layer_norm(v, ln.gain->value, ln.bias->value) : v;
}

// σ(LN(x·Wx + h·Wh)) per element
inline Vec gate(const dtmt::Parameter* wx, const Vec* x, const dtmt::Parameter& wh, const Vec& h,
                const dtmt::LayerNormParams& ln) {
  Vec pre = vecmat(h, wh.value);
  if (wx) {
    const Vec a = vecmat(*x, wx->value);
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] = a[i] + pre[i];
  }
  pre = maybe_ln(pre, ln);
  for (auto& v : pre) v = sigmoid(v);
  return pre;
}

/// One GRU / T-GRU / L-GRU step (no dropout). x is ignored for T-GRU.
inline Vec cell(const dtmt::CellParams& p, const Vec& x, const Vec& h) {
  const bool has_x = p.kind != dtmt::CellKind::tgru;
  const Vec* xp = has_x ? &x : nullptr;
  const Vec r = gate(p.w_xr, xp, *p.w_hr, h, p.ln_r);
  const Vec z = gate(p.w_xz, xp, *p.w_hz, h, p.ln_z);
  const Vec hh = vecmat(h, p.w_hh->value);
  Vec pre(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) pre[i] = r[i] * hh[i];
  if (has_x) {
    const Vec xh = vecmat(x, p.w_xh->value);
    for (std::size_t i = 0; i < h.size(); ++i) pre[i] = xh[i] + pre[i];
  }
  pre = maybe_ln(pre, p.ln_candidate);
  Vec cand(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) cand[i] = std::tanh(pre[i]);
  if (p.kind == dtmt::CellKind::lgru) {
    const Vec l = gate(p.w_xl, &x, *p.w_hl, h, p.ln_l);
    const Vec lin = vecmat(x, p.w_x->value);
    for (std::size_t i = 0; i < h.size(); ++i) cand[i] += l[i] * lin[i];
  }
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = (1.0 - z[i]) * h[i] + z[i] * cand[i];
  return out;
}

inline Vec block(const dtmt::TransitionBlock& b, const Vec& x, const Vec& h) {
  Vec s = cell(b.bottom, x, h);
  for (const auto& t : b.transitions) s = cell(t, {}, s);
  return s;
}

struct Annotations {
  std::vector<Vec> fwd, bwd, joined;
};

inline Annotations encode(const dtmt::TransitionBlock& f, const dtmt::TransitionBlock& b, const std::vector<Vec>& emb) {
  const std::size_t n = emb.size(), d = f.hidden_dim();
  Annotations a;
  a.fwd.resize(n);
  a.bwd.resize(n);
  Vec h(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) a.fwd[j] = h = block(f, emb[j], h);
  h.assign(d, 0.0);
  for (std::size_t j = n; j-- > 0;) a.bwd[j] = h = block(b, emb[j], h);
  for (std::size_t j = 0; j < n; ++j) {
    Vec c = a.fwd[j];
    c.insert(c.end(), a.bwd[j].begin(), a.bwd[j].end());
    a.joined.push_back(c);
  }
  return a;
}

struct Attention {
  Vec context;
  std::vector<Vec> weights;  // per head
};

/// Per head: e_j = Σ_k v[k]·tanh((q·W_a)[k] + (m_j·U_a)[k]); softmax; weighted
/// sum of the head's slice; concatenation times W_o.
inline Attention attend(const dtmt::AttentionParams& p, const Vec& q, const std::vector<Vec>& mem) {
  Attention out;
  Vec joined;
  const std::size_t n = mem.size();
  for (std::size_t h = 0; h < p.head_count(); ++h) {
    const auto& hd = p.heads[h];
    const Vec qa = vecmat(q, hd.w_a->value);
    Vec e(n);
    for (std::size_t j = 0; j < n; ++j) {
      const Vec ka = vecmat(mem[j], hd.u_a->value);
      double s = 0.0;
      for (std::size_t k = 0; k < qa.size(); ++k) s += hd.v_a->value[k] * std::tanh(qa[k] + ka[k]);
      e[j] = s;
    }
    double mx = e[0];
    for (double v : e) mx = std::max(mx, v);
    double z = 0.0;
    Vec a(n);
    for (std::size_t j = 0; j < n; ++j) z += (a[j] = std::exp(e[j] - mx));
    for (auto& v : a) v /= z;
    Vec c(p.value_dim, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < p.value_dim; ++k) c[k] += a[j] * mem[j][h * p.value_dim + k];
    joined.insert(joined.end(), c.begin(), c.end());
    out.weights.push_back(a);
  }
  out.context = vecmat(joined, p.w_o->value);
  return out;
}

struct DecoderStep {
  Vec query, context, state;
};

inline DecoderStep decoder_step(const dtmt::TransitionBlock& qb, const dtmt::TransitionBlock& db,
                                const dtmt::AttentionParams& att, const Vec& y, const Vec& s_prev,
                                const std::vector<Vec>& mem) {
  DecoderStep st;
  st.query = block(qb, y, s_prev);
  st.context = attend(att, st.query, mem).context;
  st.state = block(db, st.context, st.query);
  return st;
}

/// -Σ q log softmax(logits) with q = (1-ε)·onehot + ε/V, by direct summation.
inline double smoothed_ce(const Vec& logits, std::size_t gold, double eps) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  const double V = static_cast<double>(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double q = (i == gold ? 1.0 - eps : 0.0) + eps / V;
    loss -= q * (logits[i] - lz);
  }
  return loss;
}

}  // namespace oracle
