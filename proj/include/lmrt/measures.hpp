#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmrt/lm.hpp"
#include "lmrt/vocab.hpp"

namespace lmrt {

// Floor applied to probabilities inside surprisal's log only; keeps scores
// finite when a serialized model rounds a probability to exact zero.
inline constexpr double kProbFloor = 1e-12;

// -ln max(p(token), floor), in nats.
double surprisal(const std::vector<double>& dist, std::int32_t token);

// -sum p ln p with 0 ln 0 := 0, in nats.
double entropy(const std::vector<double>& dist);

// Entropy restricted to the K most probable entries, computed on the
// original (unrenormalized) probabilities so K = |V| coincides with
// entropy() and the value is non-decreasing in K. Ties at the K-th rank
// break toward the lower vocabulary id. The renormalized variant divides
// the top-K mass out first.
enum class BoundedEntropyMode { kTruncated, kRenormalized };
double bounded_entropy(const std::vector<double>& dist, std::size_t k,
                       BoundedEntropyMode mode = BoundedEntropyMode::kTruncated);

// bounded_entropy for several K in one selection pass. `ks` must be
// strictly ascending, each in [1, |dist|]; `out` gets one value per K.
void bounded_entropy_sweep(const std::vector<double>& dist,
                           std::span<const std::size_t> ks,
                           std::span<double> out);

struct TokenMeasures {
  std::size_t position = 0;
  std::int32_t token = 0;
  double surprisal = 0.0;
  // surprisal at position+1; absent at the last position of a stream.
  std::optional<double> successor_surprisal;
  // Entropy of the distribution after consuming this token (over w_{t+1}).
  double entropy = 0.0;
  std::vector<double> bounded;  // parallel to ScoredCorpus::k_list
};

struct StreamMeasures {
  std::string story_id;
  std::vector<TokenMeasures> tokens;
};

struct ScoredCorpus {
  std::vector<StreamMeasures> streams;
  std::vector<std::size_t> k_list;
  std::uint64_t model_fingerprint = 0;
  std::size_t vocab_size = 0;

  std::size_t total_tokens() const;
};

// Scores every position of every stream with one model: surprisal of the
// token given its prefix, then entropy and bounded entropies of the
// distribution over the next token. Streams are scored in parallel.
ScoredCorpus score_corpus(const LanguageModel& model,
                          const std::vector<TokenStream>& streams,
                          std::vector<std::size_t> k_list);

// Monte Carlo corpus-entropy estimator: the mean of all present successor
// surprisals.
double corpus_entropy_estimate(const ScoredCorpus& scored);

// Sample Pearson correlation; throws on length mismatch, n < 2, or zero
// variance. Result clamped to [-1, 1].
double pearson_r(std::span<const double> x, std::span<const double> y);

// One row per token: story_id, position, word, surprisal,
// successor_surprisal (empty when absent), entropy, bounded_entropy_K...
// `log_scale` rescales every measure column (1.0 = nats, 1/ln 2 = bits).
void write_scores_csv(std::ostream& out, const ScoredCorpus& scored,
                      const Vocabulary& vocab, double log_scale = 1.0);

// Parses the write_scores_csv format back (vocab only used for words).
ScoredCorpus read_scores_csv(std::istream& in, const std::string& origin);

// Column extraction helpers over all streams, in stream-then-position
// order. With `successor_rows_only`, positions lacking a successor
// surprisal are skipped in *both* outputs, keeping columns aligned.
std::vector<double> surprisal_column(const ScoredCorpus& s,
                                     bool successor_rows_only = false);
std::vector<double> successor_column(const ScoredCorpus& s);
std::vector<double> entropy_column(const ScoredCorpus& s,
                                   bool successor_rows_only = false);
std::vector<double> bounded_column(const ScoredCorpus& s, std::size_t k_index,
                                   bool successor_rows_only = false);

}  // namespace lmrt
