#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "lmrt/lm.hpp"
#include "lmrt/vocab.hpp"

namespace lmrt {

inline constexpr int kMaxNgramOrder = 8;

namespace detail {

// A context of up to kMaxNgramOrder-1 ids, inline and hashable.
struct CtxKey {
  std::array<std::int32_t, kMaxNgramOrder - 1> ids{};
  std::uint8_t len = 0;

  bool operator==(const CtxKey& o) const {
    if (len != o.len) return false;
    for (std::uint8_t i = 0; i < len; ++i) {
      if (ids[i] != o.ids[i]) return false;
    }
    return true;
  }
};

struct CtxKeyHash {
  std::size_t operator()(const CtxKey& k) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t i = 0; i < k.len; ++i) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.ids[i]));
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h ^ (h >> 32));
  }
};

}  // namespace detail

// Interpolated Kneser-Ney n-gram model with a single absolute discount per
// order. The top order uses raw counts, lower orders continuation counts,
// and the base case is uniform over the vocabulary, so every distribution
// is exactly normalized and strictly positive everywhere.
class KneserNeyModel final : public LanguageModel {
 public:
  struct ContextCounts {
    std::uint64_t total = 0;
    // (continuation id, adjusted count), sorted by id.
    std::vector<std::pair<std::int32_t, std::uint32_t>> conts;
  };
  using ContextTable =
      std::unordered_map<detail::CtxKey, ContextCounts, detail::CtxKeyHash>;

  // Counts n-grams inside each stream (no cross-story grams) and assembles
  // the per-order tables. Orders below the top use distinct-left-extension
  // counts; an order-1 model is the continuation-count unigram itself.
  static KneserNeyModel train(const std::vector<TokenStream>& corpus,
                              int order, double discount,
                              Vocabulary vocab);

  // LanguageModel contract.
  const Vocabulary& vocab() const override { return vocab_; }
  ContextState initial_state() const override;
  void next_distribution(const ContextState& state,
                         std::vector<double>& probs) const override;
  double token_probability(const ContextState& state,
                           std::int32_t token) const override;
  ContextState advance(const ContextState& state,
                       std::int32_t token) const override;
  std::uint64_t fingerprint() const override { return fingerprint_; }
  std::string kind() const override { return "ngram"; }

  int order() const { return order_; }
  double discount() const { return discount_; }

  // Per-order count tables, index 0 = order 1. Exposed for serialization
  // and inspection; order-1 counts live in unigram_counts().
  const std::vector<ContextTable>& tables() const { return tables_; }
  const std::vector<std::uint32_t>& unigram_counts() const {
    return unigram_counts_;
  }

  // Rebuilds a model from stored counts (container load path).
  static KneserNeyModel from_counts(int order, double discount,
                                    Vocabulary vocab,
                                    std::vector<std::uint32_t> unigram_counts,
                                    std::vector<ContextTable> tables);

 private:
  void finalize();

  int order_ = 1;
  double discount_ = 0.75;
  Vocabulary vocab_;
  // Adjusted unigram counts (continuation counts unless this is a raw-count
  // top level, which never happens: order-1 models are continuation-based).
  std::vector<std::uint32_t> unigram_counts_;
  std::uint64_t unigram_total_ = 0;
  std::uint64_t unigram_types_ = 0;
  // tables_[k-1] holds order-k contexts for k >= 2; tables_[0] is unused.
  std::vector<ContextTable> tables_;
  std::vector<double> unigram_level_;  // cached P_1 vector
  std::uint64_t fingerprint_ = 0;
};

}  // namespace lmrt
