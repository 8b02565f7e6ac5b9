#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <vector>

#include "dtmt/model.hpp"

namespace dtmt {

enum class LengthNorm { gnmt, length };

/// Divisor applied to a hypothesis log-probability when ranking:
/// gnmt: ((5+len)/6)^alpha, length: len.
inline double length_penalty(std::size_t len, double alpha, LengthNorm norm) {
  if (norm == LengthNorm::length) return static_cast<double>(std::max<std::size_t>(len, 1));
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

/// A left-to-right next-token distribution source. `next` returns
/// log-probabilities for the token following `state` (and may cache work in
/// it); `extend` returns the state after consuming `token`.
template <typename S>
concept StepScorer = requires(S s, typename S::State st, TokenId tok) {
  { s.start() } -> std::convertible_to<typename S::State>;
  { s.next(st) } -> std::convertible_to<std::vector<double>>;
  { s.extend(st, tok) } -> std::convertible_to<typename S::State>;
};

struct BeamOptions {
  std::size_t beam_size = 4;
  double alpha = 0.6;
  LengthNorm norm = LengthNorm::gnmt;
  std::size_t max_len = 0;  // required > 0 when calling beam_search directly
  TokenId eos = Vocabulary::eos;
};

struct Hypothesis {
  Sentence tokens;       // includes eos when finished
  double logprob = 0.0;  // exact sum of the chosen tokens' log-probabilities
  double score = 0.0;    // logprob / length_penalty(tokens.size())
  bool finished = false;
};

/// Beam search with slot refilling: candidates are taken best-first, eos
/// candidates are set aside as finished until `beam_size` live hypotheses
/// remain. Search stops at max_len, when nothing is live, or when no live
/// hypothesis can still beat the best finished score (its logprob under the
/// max_len penalty). Returns the best finished hypothesis, or the best live one if
/// none finished.
template <StepScorer S>
Hypothesis beam_search(S& scorer, const BeamOptions& opt) {
  if (opt.beam_size == 0) throw ContractError("beam_size must be >= 1");
  if (opt.max_len == 0) throw ContractError("max_len must be >= 1");
  using State = typename S::State;
  struct Live {
    Hypothesis hyp;
    State state;
  };
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double logprob;
  };
  auto key = [&](const Hypothesis& h) {
    return h.logprob / length_penalty(h.tokens.size(), opt.alpha, opt.norm);
  };

  std::vector<Live> live;
  live.push_back({Hypothesis{}, scorer.start()});
  std::vector<Hypothesis> finished;

  for (std::size_t len = 1; len <= opt.max_len && !live.empty(); ++len) {
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const std::vector<double> lp = scorer.next(live[i].state);
      for (TokenId t = 0; t < lp.size(); ++t) cands.push_back({i, t, live[i].hyp.logprob + lp[t]});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.logprob > b.logprob; });

    std::vector<Live> next;
    for (const Candidate& c : cands) {
      if (next.size() == opt.beam_size) break;
      const Live& parent = live[c.parent];
      Hypothesis h;
      h.tokens = parent.hyp.tokens;
      h.tokens.push_back(c.token);
      h.logprob = c.logprob;
      h.score = key(h);
      if (c.token == opt.eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back({std::move(h), scorer.extend(parent.state, c.token)});
      }
    }
    live = std::move(next);

    if (!finished.empty() && !live.empty()) {
      double best_fin = finished.front().score;
      for (const auto& f : finished) best_fin = std::max(best_fin, f.score);
      // best key any live hypothesis can still reach
      const double widest = length_penalty(opt.max_len, opt.alpha, opt.norm);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& l : live) best_live = std::max(best_live, l.hyp.logprob / widest);
      if (best_fin >= best_live) break;
    }
  }

  const std::vector<Hypothesis>* pool = &finished;
  std::vector<Hypothesis> unfinished;
  if (finished.empty()) {
    for (auto& l : live) unfinished.push_back(l.hyp);
    pool = &unfinished;
  }
  if (pool->empty()) throw ContractError("beam search produced no hypothesis");
  // first maximum wins, so earlier-found hypotheses take ties
  const Hypothesis* best = &pool->front();
  for (const auto& h : *pool)
    if (h.score > best->score) best = &h;
  return *best;
}

/// Argmax decoding (lowest id on ties) until eos or max_len.
template <StepScorer S>
Hypothesis greedy_decode(S& scorer, std::size_t max_len, TokenId eos = Vocabulary::eos, double alpha = 0.6,
                         LengthNorm norm = LengthNorm::gnmt) {
  if (max_len == 0) throw ContractError("max_len must be >= 1");
  Hypothesis h;
  auto st = scorer.start();
  for (std::size_t len = 1; len <= max_len; ++len) {
    const std::vector<double> lp = scorer.next(st);
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.logprob += lp[best];
    if (best == eos) {
      h.finished = true;
      break;
    }
    st = scorer.extend(st, best);
  }
  h.score = h.logprob / length_penalty(h.tokens.size(), alpha, norm);
  return h;
}

/// Step scorer over a trained model for one source sentence. Owns an
/// inference graph; states are cheap handles into it.
class ModelScorer {
 public:
  struct State {
    Var s_prev;
    TokenId y_prev = Vocabulary::bos;
    std::size_t position = 0;
    std::optional<Var> s_next;  // filled by next()
  };

  ModelScorer(Model& m, const Sentence& src) : model_(m) {
    graph_.set_grad_enabled(false);
    enc_ = encode_source(graph_, model_, src, fc_);
  }

  State start() const { return State{enc_.initial_state, Vocabulary::bos, 0, std::nullopt}; }

  std::vector<double> next(State& st) {
    Var y = embed_token(graph_, model_, model_.tgt_embedding(), st.y_prev, st.position, fc_);
    const ModelConfig& c = model_.config();
    DecoderStepState ds = decoder_step(model_.query_transition(), model_.decoder_transition(), model_.attention(),
                                       enc_.memory, y, st.s_prev, fc_.step(c));
    Var logits = output_network(graph_, model_, ds.state(), ds.context, y, fc_);
    st.s_next = ds.state();
    return log_softmax_values(logits.value().span()).values();
  }

  State extend(const State& st, TokenId tok) const {
    if (!st.s_next) throw ContractError("extend called before next");
    return State{*st.s_next, tok, st.position + 1, std::nullopt};
  }

 private:
  Model& model_;
  Graph graph_;
  ForwardContext fc_{};
  EncodedSource enc_;
};

/// Default maximum output length: 2·|src| + 10.
inline std::size_t default_max_len(const Sentence& src) { return 2 * src.size() + 10; }

inline Hypothesis translate(Model& m, const Sentence& src, const BeamOptions& opt) {
  if (src.empty()) throw ContractError("cannot decode an empty source");
  ModelScorer sc(m, src);
  BeamOptions o = opt;
  if (o.max_len == 0) o.max_len = default_max_len(src);
  return beam_search(sc, o);
}

inline Hypothesis translate_greedy(Model& m, const Sentence& src, std::size_t max_len = 0) {
  if (src.empty()) throw ContractError("cannot decode an empty source");
  ModelScorer sc(m, src);
  return greedy_decode(sc, max_len == 0 ? default_max_len(src) : max_len);
}

}  // namespace dtmt
