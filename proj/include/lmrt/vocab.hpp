#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lmrt {

inline constexpr const char* kUnkToken = "<unk>";

// Integer-coded word list. Id 0 is always the UNK entry; remaining ids are
// dense and ordered by (frequency desc, first occurrence asc) at build time.
class Vocabulary {
 public:
  Vocabulary() = default;

  // Keeps the (max_size - 1) most frequent word strings, everything else
  // encodes to unk. Ties broken by first occurrence in the corpus.
  static Vocabulary build(std::span<const std::string> corpus,
                          std::size_t max_size);

  // Builds directly from an entry list where entries[0] is the UNK string.
  static Vocabulary from_entries(std::vector<std::string> entries);

  std::int32_t encode_word(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? unk_id_ : it->second;
  }

  std::vector<std::int32_t> encode(std::span<const std::string> words) const;

  const std::string& word(std::int32_t id) const { return entries_.at(id); }
  bool contains(const std::string& word) const {
    return index_.find(word) != index_.end();
  }

  std::int32_t unk_id() const { return unk_id_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::int32_t unk_id_ = 0;
};

// One text, integer-coded, with sentence-start offsets. Stories are scored
// as continuous streams; boundaries mark sentences for the analysis split.
struct TokenStream {
  std::string story_id;
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> sentence_starts{0};

  std::size_t size() const { return ids.size(); }
};

// Throws InputError if the stream violates its invariants against `vocab`.
void validate_stream(const TokenStream& stream, const Vocabulary& vocab);

}  // namespace lmrt
