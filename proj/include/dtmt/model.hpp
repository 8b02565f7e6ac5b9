#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dtmt/attention.hpp"
#include "dtmt/cells.hpp"
#include "dtmt/parameters.hpp"
#include "dtmt/transition.hpp"
#include "dtmt/vocab.hpp"

namespace dtmt {

enum class InitialState { zero, mean_annotation };

struct ModelConfig {
  std::size_t src_vocab = 0;  // including the reserved tokens
  std::size_t tgt_vocab = 0;
  std::size_t emb_dim = 64;
  std::size_t hidden_dim = 64;

  std::size_t enc_depth = 1;
  std::size_t query_depth = 1;
  std::size_t dec_depth = 1;
  CellKind enc_cell = CellKind::lgru;
  CellKind query_cell = CellKind::lgru;
  CellKind dec_cell = CellKind::lgru;

  std::size_t heads = 4;
  bool layer_norm = true;
  bool layer_norm_candidate = false;
  bool positional_encoding = true;

  double dropout_embedding = 0.0;
  double dropout_output = 0.0;
  double dropout_candidate = 0.0;
  double label_smoothing = 0.1;

  bool share_embeddings = false;
  InitialState initial_state = InitialState::zero;

  /// DTMT#depth: the same transition depth in all three modules, L-GRU bottoms.
  static ModelConfig dtmt(std::size_t depth, std::size_t src_vocab, std::size_t tgt_vocab) {
    ModelConfig c;
    c.src_vocab = src_vocab;
    c.tgt_vocab = tgt_vocab;
    c.enc_depth = c.query_depth = c.dec_depth = depth;
    return c;
  }

  CellOptions cell_options() const { return {layer_norm, layer_norm_candidate}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (src_vocab <= Vocabulary::reserved_count || tgt_vocab <= Vocabulary::reserved_count) {
      fail("vocabularies need at least one non-reserved token");
    }
    if (emb_dim == 0 || hidden_dim == 0) fail("dimensions must be positive");
    if (heads == 0 || (2 * hidden_dim) % heads != 0) fail("heads must divide 2*hidden_dim");
    if (positional_encoding && emb_dim % 2 != 0) fail("positional encoding needs an even emb_dim");
    if (enc_cell == CellKind::tgru || query_cell == CellKind::tgru || dec_cell == CellKind::tgru) {
      fail("transition bottoms must be gru or lgru");
    }
    for (double r : {dropout_embedding, dropout_output, dropout_candidate}) {
      if (!(r >= 0.0 && r < 1.0)) fail("dropout rates must lie in [0,1)");
    }
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0,1)");
    if (share_embeddings && src_vocab != tgt_vocab) fail("shared embeddings need equal vocabulary sizes");
  }
};

/// Sinusoidal position features scaled by 1/sqrt(dim).
inline Tensor positional_encoding(std::size_t pos, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ContractError("positional_encoding: dimension must be even and positive");
  Tensor pe(Shape{dim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double angle =
        static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
    pe[2 * i] = std::sin(angle) * scale;
    pe[2 * i + 1] = std::cos(angle) * scale;
  }
  return pe;
}

/// Embeddings, bidirectional encoder, query/decoder transitions, attention
/// and the readout. Parameters are created zero-filled (LN gains at one);
/// call init_params before training.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t dx = cfg_.emb_dim, d = cfg_.hidden_dim;
    const CellOptions opts = cfg_.cell_options();
    if (cfg_.share_embeddings) {
      src_embedding_ = tgt_embedding_ = &store_.add("embedding.shared", Shape{cfg_.src_vocab, dx});
    } else {
      src_embedding_ = &store_.add("embedding.src", Shape{cfg_.src_vocab, dx});
      tgt_embedding_ = &store_.add("embedding.tgt", Shape{cfg_.tgt_vocab, dx});
    }
    enc_fwd_ = make_transition_block(store_, "encoder.fwd", cfg_.enc_cell, dx, d, cfg_.enc_depth, opts);
    enc_bwd_ = make_transition_block(store_, "encoder.bwd", cfg_.enc_cell, dx, d, cfg_.enc_depth, opts);
    query_ = make_transition_block(store_, "decoder.query", cfg_.query_cell, dx, d, cfg_.query_depth, opts);
    attention_ = make_attention(store_, "attention", d, 2 * d, cfg_.heads);
    decoder_ = make_transition_block(store_, "decoder.transition", cfg_.dec_cell, 2 * d, d, cfg_.dec_depth, opts);
    if (cfg_.initial_state == InitialState::mean_annotation) {
      init_bridge_ = &store_.add("decoder.init.W", Shape{2 * d, d});
    }
    w_f_ = &store_.add("output.W_f", Shape{d + 2 * d + dx, d});
    w_out_ = &store_.add("output.W_out", Shape{d, cfg_.tgt_vocab});
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }

  Parameter& src_embedding() { return *src_embedding_; }
  Parameter& tgt_embedding() { return *tgt_embedding_; }
  const TransitionBlock& encoder_forward() const { return enc_fwd_; }
  const TransitionBlock& encoder_backward() const { return enc_bwd_; }
  const TransitionBlock& query_transition() const { return query_; }
  const TransitionBlock& decoder_transition() const { return decoder_; }
  const AttentionParams& attention() const { return attention_; }
  Parameter* init_bridge() { return init_bridge_; }
  Parameter& readout_hidden() { return *w_f_; }
  Parameter& readout_output() { return *w_out_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Parameter* src_embedding_ = nullptr;
  Parameter* tgt_embedding_ = nullptr;
  TransitionBlock enc_fwd_, enc_bwd_, query_, decoder_;
  AttentionParams attention_;
  Parameter* init_bridge_ = nullptr;
  Parameter* w_f_ = nullptr;
  Parameter* w_out_ = nullptr;
};

/// Parameter totals per component, in model construction order.
struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> components;
  std::size_t total = 0;
  std::size_t tensors = 0;
};

inline std::string param_component(const std::string& name) {
  // "encoder.fwd.bottom.W_xh" -> "encoder.fwd"; "attention.head0.W_a" -> "attention"
  auto first = name.find('.');
  const std::string head = name.substr(0, first);
  if (head == "attention" || head == "output") return head;
  auto second = name.find('.', first + 1);
  return name.substr(0, second);
}

inline ParamBreakdown param_breakdown(const Model& m) {
  ParamBreakdown b;
  for (const auto& p : m.params()) {
    const std::string comp = param_component(p->name);
    if (b.components.empty() || b.components.back().first != comp) b.components.emplace_back(comp, 0);
    b.components.back().second += p->value.size();
    b.total += p->value.size();
    ++b.tensors;
  }
  return b;
}

/// Closed-form total from the per-cell formulas, independent of the allocated store.
inline std::size_t count_model_params(const ModelConfig& c) {
  const std::size_t dx = c.emb_dim, d = c.hidden_dim;
  const CellOptions o = c.cell_options();
  std::size_t n = c.share_embeddings ? c.src_vocab * dx : (c.src_vocab + c.tgt_vocab) * dx;
  n += 2 * count_block_params(c.enc_cell, dx, d, c.enc_depth, o);
  n += count_block_params(c.query_cell, dx, d, c.query_depth, o);
  n += count_attention_params(d, 2 * d, c.heads);
  n += count_block_params(c.dec_cell, 2 * d, d, c.dec_depth, o);
  if (c.initial_state == InitialState::mean_annotation) n += 2 * d * d;
  n += (3 * d + dx) * d + d * c.tgt_vocab;
  return n;
}

// ---------------------------------------------------------------------------
// Forward computations
// ---------------------------------------------------------------------------

/// Stochastic settings for one forward pass.
struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;

  StepContext step(const ModelConfig& c) const { return {mode, c.dropout_candidate, rng}; }
};

/// Embedding lookup plus scaled positional encoding, then embedding dropout.
inline Var embed_token(Graph& g, const Model& m, Parameter& table, TokenId id, std::size_t position,
                       const ForwardContext& fc) {
  const ModelConfig& c = m.config();
  if (id >= table.value.dim(0)) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(table.value.dim(0)));
  }
  Var e = row(g.param(table), id);
  if (c.positional_encoding) e = add(e, g.constant(positional_encoding(position, c.emb_dim)));
  return dropout(e, c.dropout_embedding, fc.mode, fc.rng);
}

struct EncodedSource {
  EncoderAnnotations annotations;
  AttentionMemory memory;
  Var initial_state;
};

inline EncodedSource encode_source(Graph& g, Model& m, const Sentence& src, const ForwardContext& fc) {
  if (src.empty()) throw ContractError("empty source sentence");
  const ModelConfig& c = m.config();
  std::vector<Var> emb;
  emb.reserve(src.size());
  for (std::size_t j = 0; j < src.size(); ++j) emb.push_back(embed_token(g, m, m.src_embedding(), src[j], j, fc));
  EncodedSource es;
  es.annotations = encode(m.encoder_forward(), m.encoder_backward(), emb, fc.step(c));
  es.memory = prepare_memory(m.attention(), es.annotations);
  if (c.initial_state == InitialState::mean_annotation) {
    const std::size_t n = src.size();
    Var mean = matmul(g.constant(Tensor(Shape{n}, 1.0 / static_cast<double>(n))), es.annotations.matrix);
    es.initial_state = tanh(matmul(mean, g.param(*m.init_bridge())));
  } else {
    es.initial_state = g.constant(Tensor(Shape{c.hidden_dim}));
  }
  return es;
}

/// Readout f(s_t, c_t, y_{t-1}) = W_out · drop(tanh(W_f · [s_t; c_t; y_{t-1}])).
inline Var output_network(Graph& g, Model& m, Var state, Var context, Var y_prev_embedding, const ForwardContext& fc) {
  const ModelConfig& c = m.config();
  Var features = concat({state, context, y_prev_embedding});
  if (features.size() != m.readout_hidden().value.dim(0)) {
    throw DimensionError("output network: feature width " + std::to_string(features.size()) + ", expected " +
                         std::to_string(m.readout_hidden().value.dim(0)));
  }
  Var hidden = tanh(matmul(features, g.param(m.readout_hidden())));
  hidden = dropout(hidden, c.dropout_output, fc.mode, fc.rng);
  return matmul(hidden, g.param(m.readout_output()));
}

/// Smoothed target q = (1-eps)·onehot(gold) + eps/V; returns -Σ q·log softmax(logits).
inline Var label_smoothed_loss(Var logits, TokenId gold, double eps) {
  const std::size_t V = logits.size();
  if (logits.value().rank() != 1) throw DimensionError("label_smoothed_loss: logits must be a vector");
  if (gold >= V) throw DataError("gold id " + std::to_string(gold) + " outside vocabulary of " + std::to_string(V));
  if (!(eps >= 0.0 && eps < 1.0)) throw ContractError("label smoothing must lie in [0,1)");
  Tensor q(Shape{V}, eps / static_cast<double>(V));
  q[gold] += 1.0 - eps;
  Var lsm = log_softmax(logits);
  return scale(dot(lsm, logits.graph->constant(std::move(q))), -1.0);
}

struct DecoderState {
  Var state;
  Var y_embedding;
};

struct TeacherForcedResult {
  std::vector<Var> logits;
  Var loss;                    // mean over scored (non-pad) target positions
  std::size_t scored_tokens = 0;
};

/// Teacher-forced pass over one sentence pair. `tgt` must end with eos.
/// `smoothing` overrides the configured label smoothing when set.
inline TeacherForcedResult forward_teacher_forced(Graph& g, Model& m, const Sentence& src, const Sentence& tgt,
                                                  const ForwardContext& fc,
                                                  std::optional<double> smoothing = std::nullopt) {
  if (src.empty() || tgt.empty()) throw ContractError("teacher forcing needs non-empty source and target");
  if (tgt.back() != Vocabulary::eos) throw ContractError("target sentence must end with eos");
  const ModelConfig& c = m.config();
  for (auto id : tgt) {
    if (id >= c.tgt_vocab) throw DataError("target id " + std::to_string(id) + " outside vocabulary of " + std::to_string(c.tgt_vocab));
  }
  const double eps = smoothing.value_or(c.label_smoothing);
  EncodedSource es = encode_source(g, m, src, fc);
  const StepContext sc = fc.step(c);

  TeacherForcedResult r;
  Var s = es.initial_state;
  TokenId prev = Vocabulary::bos;
  std::optional<Var> total;
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    Var y = embed_token(g, m, m.tgt_embedding(), prev, t, fc);
    DecoderStepState st = decoder_step(m.query_transition(), m.decoder_transition(), m.attention(), es.memory, y, s, sc);
    s = st.state();
    Var logits = output_network(g, m, s, st.context, y, fc);
    r.logits.push_back(logits);
    if (tgt[t] != Vocabulary::pad) {
      Var l = label_smoothed_loss(logits, tgt[t], eps);
      total = total ? add(*total, l) : l;
      ++r.scored_tokens;
    }
    prev = tgt[t];
  }
  if (!total) throw ContractError("target has no scored positions");
  r.loss = scale(*total, 1.0 / static_cast<double>(r.scored_tokens));
  return r;
}

}  // namespace dtmt
