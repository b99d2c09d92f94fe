#include "lmrt/vocab.hpp"

#include <algorithm>

#include "lmrt/common.hpp"

namespace lmrt {

Vocabulary Vocabulary::build(std::span<const std::string> corpus,
                             std::size_t max_size) {
  if (corpus.empty()) throw InputError("build_vocabulary: empty corpus");
  if (max_size < 2) throw InputError("build_vocabulary: max_size must be >= 2");

  struct Entry {
    std::size_t count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  counts.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto [it, inserted] = counts.try_emplace(corpus[i]);
    if (inserted) it->second.first_seen = i;
    ++it->second.count;
  }

  std::vector<const std::pair<const std::string, Entry>*> ranked;
  ranked.reserve(counts.size());
  for (const auto& kv : counts) ranked.push_back(&kv);
  std::sort(ranked.begin(), ranked.end(), [](const auto* a, const auto* b) {
    if (a->second.count != b->second.count) return a->second.count > b->second.count;
    return a->second.first_seen < b->second.first_seen;
  });

  const std::size_t keep = std::min(max_size - 1, ranked.size());
  std::vector<std::string> entries;
  entries.reserve(keep + 1);
  entries.emplace_back(kUnkToken);
  for (std::size_t i = 0; i < keep; ++i) entries.push_back(ranked[i]->first);
  return from_entries(std::move(entries));
}

Vocabulary Vocabulary::from_entries(std::vector<std::string> entries) {
  if (entries.size() < 2) {
    throw InputError("vocabulary needs UNK plus at least one real word");
  }
  Vocabulary v;
  v.entries_ = std::move(entries);
  v.unk_id_ = 0;
  v.index_.reserve(v.entries_.size());
  for (std::size_t i = 0; i < v.entries_.size(); ++i) {
    auto [it, inserted] =
        v.index_.try_emplace(v.entries_[i], static_cast<std::int32_t>(i));
    if (!inserted) throw InputError("duplicate vocabulary entry: " + v.entries_[i]);
  }
  return v;
}

std::vector<std::int32_t> Vocabulary::encode(
    std::span<const std::string> words) const {
  std::vector<std::int32_t> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(encode_word(w));
  return ids;
}

void validate_stream(const TokenStream& stream, const Vocabulary& vocab) {
  for (std::int32_t id : stream.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw InputError("token stream '" + stream.story_id +
                       "': id out of vocabulary range");
    }
  }
  if (stream.sentence_starts.empty() || stream.sentence_starts.front() != 0) {
    throw InputError("token stream '" + stream.story_id +
                     "': sentence boundaries must start at 0");
  }
  for (std::size_t i = 1; i < stream.sentence_starts.size(); ++i) {
    if (stream.sentence_starts[i] <= stream.sentence_starts[i - 1]) {
      throw InputError("token stream '" + stream.story_id +
                       "': sentence boundaries must be strictly increasing");
    }
  }
}

}  // namespace lmrt
