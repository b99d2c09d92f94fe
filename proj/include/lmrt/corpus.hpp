#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lmrt/measures.hpp"
#include "lmrt/vocab.hpp"

namespace lmrt {

struct WordRecord {
  std::string story_id;
  std::size_t sentence_index = 0;      // within story
  std::size_t word_index = 0;          // within story
  std::string surface;
  std::size_t word_length = 0;         // characters of the surface form
  std::size_t sentence_position = 0;   // index of the word within its sentence
  std::size_t token_start = 0;         // span into the story's TokenStream
  std::size_t token_len = 0;
  bool all_unk = false;                // every token mapped to UNK
};

struct RTObservation {
  std::string subject_id;
  std::string story_id;
  std::size_t word_index = 0;
  double rt_ms = 0.0;
};

// Whitespace-free word -> model tokens: trailing punctuation characters
// split off one by one, then the clitics n't and 's. "don't" -> do + n't,
// "boar!'" -> boar + ! + '.
std::vector<std::string> tokenize_word(const std::string& surface);

// words CSV: story_id, sentence_index, word_index, word.
std::vector<WordRecord> load_words_csv(const std::string& path);

// rt CSV: subject_id, story_id, word_index, rt_ms.
std::vector<RTObservation> load_rts_csv(const std::string& path);

// Loads both files and checks referential integrity: every RT row must name
// a known (story, word) pair, and (subject, story, word) must be unique.
std::pair<std::vector<WordRecord>, std::vector<RTObservation>> load_corpus(
    const std::string& words_path, const std::string& rt_path);

// Tokenizes every word, encodes against `vocab`, fills each record's
// token span / word_length / sentence_position / all_unk fields, and
// returns one continuous TokenStream per story (sentence-ending punctuation
// included; no resets inside a story).
std::vector<TokenStream> assign_spans(std::vector<WordRecord>& words,
                                      const Vocabulary& vocab);

// Regression-row exclusion: drops words whose span covers more than one
// token. The underlying TokenStream is untouched.
std::vector<WordRecord> apply_exclusions(const std::vector<WordRecord>& words);

// Add-one-smoothed log relative frequency of each word's surface form in
// the frequency corpus: ln((c+1) / (N+W)), W = |types(freq) U surfaces|.
std::vector<double> unigram_frequency(
    const std::vector<std::string>& freq_corpus_tokens,
    const std::vector<WordRecord>& words);

// Sentence-level exploratory/held-out partition: seeded shuffle, then a
// largest-remainder cut of round(fraction * n) sentences.
struct SentenceSplit {
  std::set<std::pair<std::string, std::size_t>> exploratory;
  std::set<std::pair<std::string, std::size_t>> heldout;

  bool is_exploratory(const std::string& story, std::size_t sentence) const {
    return exploratory.count({story, sentence}) > 0;
  }
};
SentenceSplit split_sentences(const std::vector<WordRecord>& words,
                              double fraction_exploratory, std::uint64_t seed);

inline constexpr const char* kPredictorNames[] = {
    "sentence_position", "word_length",         "unigram_frequency",
    "surprisal",         "successor_surprisal", "entropy"};

struct PredictorTable {
  std::vector<std::string> predictor_names;
  std::vector<std::string> subject;   // per row
  std::vector<std::string> story;     // per row
  std::vector<std::size_t> word_index;  // per row
  std::vector<std::string> word;      // per row, surface form
  std::vector<double> rt;             // per row, ms
  // Column-major predictor values, raw and z-scored, plus the transform.
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> z;
  std::vector<double> col_mean;
  std::vector<double> col_sd;

  std::size_t rows() const { return rt.size(); }
  std::size_t column(const std::string& name) const;
};

struct PredictorOptions {
  // Entropy predictor: total entropy, or bounded entropy at k_list[k_index].
  std::optional<std::size_t> bounded_k_index;
  bool exclude_all_unk_words = false;
  std::optional<double> rt_min_ms;  // off by default
  std::optional<double> rt_max_ms;
  // When set, keep only words whose sentence is on the given side.
  const SentenceSplit* split = nullptr;
  bool use_exploratory_partition = false;
  std::optional<std::vector<double>> unigram;  // aligned with `words`
};

// One row per (subject, included word): multi-token words are already gone
// (call apply_exclusions first), story-final words are dropped here because
// they have no successor surprisal. Every predictor is z-scored with the
// included rows' sample mean and (n-1) sd.
PredictorTable build_predictor_table(const std::vector<WordRecord>& words,
                                     const std::vector<RTObservation>& rts,
                                     const ScoredCorpus& scored,
                                     const PredictorOptions& options = {});

void write_predictor_csv(std::ostream& out, const PredictorTable& table);

// Aligned-words sidecar (scores output -> analyze input): story_id,
// sentence_index, word_index, word, sentence_position, token_start,
// token_len, all_unk.
void write_aligned_words_csv(std::ostream& out,
                             const std::vector<WordRecord>& words);
std::vector<WordRecord> read_aligned_words_csv(std::istream& in,
                                               const std::string& origin);

}  // namespace lmrt
