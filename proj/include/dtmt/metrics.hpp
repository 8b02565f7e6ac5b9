#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "dtmt/tensor.hpp"

namespace dtmt {

struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

/// Clipped n-gram statistics of one hypothesis against one reference.
template <typename Tok>
void accumulate_bleu(BleuStats& st, const std::vector<Tok>& hyp, const std::vector<Tok>& ref) {
  st.hyp_len += hyp.size();
  st.ref_len += ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<Tok>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[std::vector<Tok>(ref.begin() + i, ref.begin() + i + n)];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[std::vector<Tok>(hyp.begin() + i, hyp.begin() + i + n)];
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) st.matches[n - 1] += std::min(c, it->second);
    }
    st.totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
}

/// BLEU×100 from accumulated statistics: geometric mean of the four
/// modified precisions times the brevity penalty; any zero precision gives 0.
inline double bleu_from_stats(const BleuStats& st) {
  if (st.hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (st.matches[n] == 0 || st.totals[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(st.matches[n]) / static_cast<double>(st.totals[n]));
  }
  const double c = static_cast<double>(st.hyp_len), r = static_cast<double>(st.ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_prec / 4.0);
}

/// Corpus-level BLEU-4, single reference per segment.
template <typename Tok>
double bleu4(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  if (hypotheses.empty()) throw ContractError("bleu4: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw ContractError("bleu4: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
  }
  BleuStats st;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) accumulate_bleu(st, hypotheses[i], references[i]);
  return bleu_from_stats(st);
}

/// Position-wise agreement of hypotheses with references, over reference tokens.
template <typename Tok>
double token_accuracy(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  if (hypotheses.size() != references.size()) throw ContractError("token_accuracy: corpus sizes differ");
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    for (std::size_t j = 0; j < r.size(); ++j) hit += (j < h.size() && h[j] == r[j]) ? 1 : 0;
    total += r.size();
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

template <typename Tok>
double exact_match(const std::vector<std::vector<Tok>>& hypotheses, const std::vector<std::vector<Tok>>& references) {
  if (hypotheses.size() != references.size()) throw ContractError("exact_match: corpus sizes differ");
  if (hypotheses.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) hit += hypotheses[i] == references[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(hypotheses.size());
}

}  // namespace dtmt
