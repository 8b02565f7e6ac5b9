#pragma once

#include <string>
#include <vector>

#include "dtmt/attention.hpp"
#include "dtmt/cells.hpp"

namespace dtmt {

/// A bottom cell (L-GRU, or GRU for the shallow/ablated variants) followed
/// by `depth` T-GRUs, each with its own weights shared across time.
struct TransitionBlock {
  CellParams bottom;
  std::vector<CellParams> transitions;

  std::size_t depth() const { return transitions.size(); }
  std::size_t input_dim() const { return bottom.input_dim; }
  std::size_t hidden_dim() const { return bottom.hidden_dim; }
};

inline TransitionBlock make_transition_block(ParamStore& store, const std::string& prefix, CellKind bottom_kind,
                                             std::size_t input_dim, std::size_t hidden_dim, std::size_t depth,
                                             CellOptions opts = {}) {
  if (bottom_kind == CellKind::tgru) throw ContractError("transition block bottom must take an input (gru or lgru)");
  TransitionBlock b;
  b.bottom = make_cell(store, prefix + ".bottom", bottom_kind, input_dim, hidden_dim, opts);
  for (std::size_t k = 1; k <= depth; ++k) {
    b.transitions.push_back(make_cell(store, prefix + ".tgru" + std::to_string(k), CellKind::tgru, 0, hidden_dim, opts));
  }
  return b;
}

inline std::size_t count_block_params(CellKind bottom_kind, std::size_t input_dim, std::size_t hidden_dim,
                                      std::size_t depth, CellOptions opts = {}) {
  return count_params(bottom_kind, input_dim, hidden_dim, opts.layer_norm, opts.layer_norm_candidate) +
         depth * count_params(CellKind::tgru, 0, hidden_dim, opts.layer_norm, opts.layer_norm_candidate);
}

/// All states of one transition: element 0 is the bottom cell output,
/// element k the k-th T-GRU output.
inline std::vector<Var> transition_chain(const TransitionBlock& block, Var input, Var h_prev, const StepContext& ctx) {
  if (input.value().rank() != 1 || input.size() != block.input_dim()) {
    throw DimensionError("transition: input shape " + shape_str(input.shape()) + ", expected (" +
                         std::to_string(block.input_dim()) + ")");
  }
  std::vector<Var> chain;
  chain.reserve(block.depth() + 1);
  chain.push_back(cell_step(block.bottom, input, h_prev, ctx));
  for (const auto& t : block.transitions) chain.push_back(tgru_step(t, chain.back(), ctx));
  return chain;
}

inline Var transition_apply(const TransitionBlock& block, Var input, Var h_prev, const StepContext& ctx = {}) {
  return transition_chain(block, input, h_prev, ctx).back();
}

/// Bidirectional deep-transition encoder. Both directions start from a zero state.
inline EncoderAnnotations encode(const TransitionBlock& fwd, const TransitionBlock& bwd,
                                 const std::vector<Var>& embedded_source, const StepContext& ctx = {}) {
  if (embedded_source.empty()) throw ContractError("encode: empty source");
  if (fwd.hidden_dim() != bwd.hidden_dim()) throw DimensionError("encode: direction widths differ");
  Graph& g = *embedded_source.front().graph;
  const std::size_t n = embedded_source.size();
  const Var zero_f = g.constant(Tensor(Shape{fwd.hidden_dim()}));
  const Var zero_b = g.constant(Tensor(Shape{bwd.hidden_dim()}));

  std::vector<Var> forward(n), backward(n);
  Var h = zero_f;
  for (std::size_t j = 0; j < n; ++j) {
    h = transition_apply(fwd, embedded_source[j], h, ctx);
    forward[j] = h;
  }
  h = zero_b;
  for (std::size_t j = n; j-- > 0;) {
    h = transition_apply(bwd, embedded_source[j], h, ctx);
    backward[j] = h;
  }
  EncoderAnnotations ann;
  ann.states.reserve(n);
  for (std::size_t j = 0; j < n; ++j) ann.states.push_back(concat(forward[j], backward[j]));
  ann.matrix = stack_rows(ann.states);
  return ann;
}

/// One decoder step: s_{t,0..Lq} from the query transition, attention
/// context, then s_{t,Lq+1..Lq+Ld+1} from the decoder transition.
struct DecoderStepState {
  std::vector<Var> query_chain;
  Var context;
  Tensor attention_weights;
  std::vector<Var> decoder_chain;

  Var query() const { return query_chain.back(); }
  Var state() const { return decoder_chain.back(); }
};

inline DecoderStepState decoder_step(const TransitionBlock& query_block, const TransitionBlock& decoder_block,
                                     const AttentionParams& attention, const AttentionMemory& memory,
                                     Var y_prev_embedding, Var s_prev, const StepContext& ctx = {}) {
  if (decoder_block.input_dim() != attention.memory_dim) {
    throw DimensionError("decoder transition input width " + std::to_string(decoder_block.input_dim()) +
                         " must equal the context width " + std::to_string(attention.memory_dim));
  }
  DecoderStepState st;
  st.query_chain = transition_chain(query_block, y_prev_embedding, s_prev, ctx);
  AttentionResult att = attend(attention, st.query(), memory);
  st.context = att.context;
  st.attention_weights = std::move(att.weights);
  st.decoder_chain = transition_chain(decoder_block, st.context, st.query(), ctx);
  return st;
}

inline DecoderStepState decoder_step(const TransitionBlock& query_block, const TransitionBlock& decoder_block,
                                     const AttentionParams& attention, Var y_prev_embedding, Var s_prev,
                                     const EncoderAnnotations& annotations, const StepContext& ctx = {}) {
  return decoder_step(query_block, decoder_block, attention, prepare_memory(attention, annotations), y_prev_embedding,
                      s_prev, ctx);
}

}  // namespace dtmt
