#pragma once

#include <string>
#include <vector>

#include "dtmt/autograd.hpp"
#include "dtmt/parameters.hpp"

namespace dtmt {

/// Bidirectional source states, one [fwd; bwd] vector of width 2d per
/// position, plus the same rows stacked as an n×2d matrix.
struct EncoderAnnotations {
  std::vector<Var> states;
  Var matrix;

  std::size_t length() const { return states.size(); }
  std::size_t width() const { return states.empty() ? 0 : states.front().size(); }
};

/// Multi-head additive attention. Head h scores position j as
/// v_hᵀ tanh(q·W_h + m_j·U_h) in a memory_dim/heads space, attends over the
/// h-th contiguous slice of each annotation, and the concatenated head
/// contexts go through a memory_dim×memory_dim output projection.
struct AttentionParams {
  struct Head {
    Parameter* w_a = nullptr;  // query_dim × attn_dim
    Parameter* u_a = nullptr;  // memory_dim × attn_dim
    Parameter* v_a = nullptr;  // attn_dim
  };

  std::size_t query_dim = 0;
  std::size_t memory_dim = 0;
  std::size_t attn_dim = 0;
  std::size_t value_dim = 0;
  std::vector<Head> heads;
  Parameter* w_o = nullptr;

  std::size_t head_count() const { return heads.size(); }
};

inline AttentionParams make_attention(ParamStore& store, const std::string& prefix, std::size_t query_dim,
                                      std::size_t memory_dim, std::size_t heads) {
  if (heads == 0 || memory_dim % heads != 0) {
    throw ContractError("attention: head count " + std::to_string(heads) + " must divide memory width " +
                        std::to_string(memory_dim));
  }
  AttentionParams a;
  a.query_dim = query_dim;
  a.memory_dim = memory_dim;
  a.attn_dim = memory_dim / heads;
  a.value_dim = memory_dim / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string p = prefix + ".head" + std::to_string(h);
    AttentionParams::Head hd;
    hd.w_a = &store.add(p + ".W_a", Shape{query_dim, a.attn_dim});
    hd.u_a = &store.add(p + ".U_a", Shape{memory_dim, a.attn_dim});
    hd.v_a = &store.add(p + ".v_a", Shape{a.attn_dim});
    a.heads.push_back(hd);
  }
  a.w_o = &store.add(prefix + ".W_o", Shape{memory_dim, memory_dim});
  return a;
}

inline std::size_t count_attention_params(std::size_t query_dim, std::size_t memory_dim, std::size_t heads) {
  const std::size_t da = memory_dim / heads;
  return heads * (query_dim * da + memory_dim * da + da) + memory_dim * memory_dim;
}

/// Per-sentence projections reused by every decoder step: keys m_j·U_h and value slices.
struct AttentionMemory {
  std::size_t length = 0;
  std::vector<Var> keys;    // per head, n × attn_dim
  std::vector<Var> values;  // per head, n × value_dim
};

inline AttentionMemory prepare_memory(const AttentionParams& p, const EncoderAnnotations& ann) {
  if (ann.length() == 0) throw ContractError("attention: empty annotations");
  if (ann.width() != p.memory_dim) {
    throw DimensionError("attention: annotation width " + std::to_string(ann.width()) + " != " +
                         std::to_string(p.memory_dim));
  }
  Graph& g = *ann.matrix.graph;
  AttentionMemory m;
  m.length = ann.length();
  for (std::size_t h = 0; h < p.head_count(); ++h) {
    m.keys.push_back(matmul(ann.matrix, g.param(*p.heads[h].u_a)));
    m.values.push_back(slice(ann.matrix, h * p.value_dim, p.value_dim));
  }
  return m;
}

struct AttentionResult {
  Var context;
  Tensor weights;  // heads × n
};

inline AttentionResult attend(const AttentionParams& p, Var query, const AttentionMemory& mem) {
  if (mem.length == 0) throw ContractError("attention: empty annotations");
  if (query.value().rank() != 1 || query.size() != p.query_dim) {
    throw DimensionError("attention: query shape " + shape_str(query.shape()) + ", expected (" +
                         std::to_string(p.query_dim) + ")");
  }
  Graph& g = *query.graph;
  const std::size_t n = mem.length;
  AttentionResult res;
  res.weights = Tensor(Shape{p.head_count(), n});
  std::vector<Var> contexts;
  contexts.reserve(p.head_count());
  for (std::size_t h = 0; h < p.head_count(); ++h) {
    const auto& hd = p.heads[h];
    Var q = matmul(query, g.param(*hd.w_a));
    Var hidden = tanh(add(mem.keys[h], tile_rows(q, n)));
    Var scores = matmul(hidden, g.param(*hd.v_a));
    Var a = softmax(scores);
    for (std::size_t j = 0; j < n; ++j) res.weights.at(h, j) = a.value()[j];
    contexts.push_back(matmul(a, mem.values[h]));
  }
  res.context = matmul(concat(contexts), g.param(*p.w_o));
  return res;
}

inline AttentionResult attend(const AttentionParams& p, Var query, const EncoderAnnotations& ann) {
  return attend(p, query, prepare_memory(p, ann));
}

}  // namespace dtmt
