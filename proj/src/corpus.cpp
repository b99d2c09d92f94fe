#include "lmrt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include "lmrt/common.hpp"
#include "lmrt/csv.hpp"
#include "lmrt/rng.hpp"
#include "lmrt/stats.hpp"

namespace lmrt {

namespace {

bool is_split_punct(char c) {
  static const std::string punct = ".,!?;:'\"()[]";
  return punct.find(c) != std::string::npos;
}

std::size_t parse_index(const std::string& s, const std::string& what,
                        long line) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ParseError("bad " + what + " value '" + s + "'", line);
  }
}

double parse_rt(const std::string& s, long line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("bad rt_ms value '" + s + "'", line);
  }
}

}  // namespace

std::vector<std::string> tokenize_word(const std::string& surface) {
  std::vector<std::string> trailing;  // reversed
  std::string core = surface;
  while (!core.empty() && is_split_punct(core.back())) {
    // Keep clitic apostrophes attached: 'n't' / ''s' are split below.
    if (core.back() == '\'' && core.size() >= 2) {
      const char prev = core[core.size() - 2];
      if (prev != '\'' && !is_split_punct(prev)) break;
    }
    trailing.push_back(std::string(1, core.back()));
    core.pop_back();
  }
  std::vector<std::string> tokens;
  if (!core.empty()) {
    auto ends_with = [&](const std::string& suffix) {
      return core.size() > suffix.size() &&
             core.compare(core.size() - suffix.size(), suffix.size(), suffix) ==
                 0;
    };
    if (ends_with("n't")) {
      tokens.push_back(core.substr(0, core.size() - 3));
      tokens.push_back("n't");
    } else if (ends_with("'s")) {
      tokens.push_back(core.substr(0, core.size() - 2));
      tokens.push_back("'s");
    } else {
      tokens.push_back(core);
    }
  }
  for (auto it = trailing.rbegin(); it != trailing.rend(); ++it) {
    tokens.push_back(*it);
  }
  if (tokens.empty()) tokens.push_back(surface);  // all-punctuation word
  return tokens;
}

std::vector<WordRecord> load_words_csv(const std::string& path) {
  auto table = csv::read_file(path);
  const auto c_story = table.column("story_id");
  const auto c_sent = table.column("sentence_index");
  const auto c_word = table.column("word_index");
  const auto c_surf = table.column("word");
  std::vector<WordRecord> words;
  words.reserve(table.rows.size());
  std::unordered_set<std::string> seen;
  long line = 1;
  for (const auto& row : table.rows) {
    ++line;
    WordRecord w;
    w.story_id = row[c_story];
    w.sentence_index = parse_index(row[c_sent], "sentence_index", line);
    w.word_index = parse_index(row[c_word], "word_index", line);
    w.surface = row[c_surf];
    if (w.story_id.empty() || w.surface.empty()) {
      throw ParseError("empty story_id or word", line);
    }
    if (!seen.insert(w.story_id + "\x1f" + std::to_string(w.word_index)).second) {
      throw InputError("duplicate (story_id, word_index) = (" + w.story_id +
                       ", " + std::to_string(w.word_index) + ")");
    }
    w.word_length = w.surface.size();
    words.push_back(std::move(w));
  }
  if (words.empty()) throw InputError(path + ": no word rows");
  return words;
}

std::vector<RTObservation> load_rts_csv(const std::string& path) {
  auto table = csv::read_file(path);
  const auto c_subj = table.column("subject_id");
  const auto c_story = table.column("story_id");
  const auto c_word = table.column("word_index");
  const auto c_rt = table.column("rt_ms");
  std::vector<RTObservation> rts;
  rts.reserve(table.rows.size());
  long line = 1;
  for (const auto& row : table.rows) {
    ++line;
    RTObservation r;
    r.subject_id = row[c_subj];
    r.story_id = row[c_story];
    r.word_index = parse_index(row[c_word], "word_index", line);
    r.rt_ms = parse_rt(row[c_rt], line);
    if (r.subject_id.empty()) throw ParseError("empty subject_id", line);
    if (!(r.rt_ms > 0.0)) {
      throw ParseError("rt_ms must be > 0, got " + row[c_rt], line);
    }
    rts.push_back(std::move(r));
  }
  return rts;
}

std::pair<std::vector<WordRecord>, std::vector<RTObservation>> load_corpus(
    const std::string& words_path, const std::string& rt_path) {
  auto words = load_words_csv(words_path);
  auto rts = load_rts_csv(rt_path);
  std::unordered_set<std::string> word_keys;
  for (const auto& w : words) {
    word_keys.insert(w.story_id + "\x1f" + std::to_string(w.word_index));
  }
  std::unordered_set<std::string> rt_keys;
  for (const auto& r : rts) {
    const std::string wkey = r.story_id + "\x1f" + std::to_string(r.word_index);
    if (!word_keys.count(wkey)) {
      throw InputError("rt row references unknown word: subject " +
                       r.subject_id + ", story " + r.story_id + ", word " +
                       std::to_string(r.word_index));
    }
    if (!rt_keys.insert(r.subject_id + "\x1f" + wkey).second) {
      throw InputError("duplicate rt row: subject " + r.subject_id +
                       ", story " + r.story_id + ", word " +
                       std::to_string(r.word_index));
    }
  }
  return {std::move(words), std::move(rts)};
}

std::vector<TokenStream> assign_spans(std::vector<WordRecord>& words,
                                      const Vocabulary& vocab) {
  // Stories in order of first appearance; within a story, words must come
  // sorted by word_index.
  std::vector<std::string> story_order;
  std::unordered_map<std::string, std::size_t> story_pos;
  for (const auto& w : words) {
    if (!story_pos.count(w.story_id)) {
      story_pos[w.story_id] = story_order.size();
      story_order.push_back(w.story_id);
    }
  }
  std::vector<TokenStream> streams(story_order.size());
  for (std::size_t s = 0; s < story_order.size(); ++s) {
    streams[s].story_id = story_order[s];
    streams[s].sentence_starts.clear();
  }

  std::vector<std::size_t> last_word_index(story_order.size(), 0);
  std::vector<bool> story_started(story_order.size(), false);
  std::vector<std::optional<std::size_t>> cur_sentence(story_order.size());
  std::vector<std::size_t> next_sentence_pos(story_order.size(), 0);

  for (auto& w : words) {
    const std::size_t s = story_pos[w.story_id];
    TokenStream& stream = streams[s];
    if (story_started[s] && w.word_index <= last_word_index[s]) {
      throw InputError("story " + w.story_id +
                       ": word_index must be strictly increasing");
    }
    story_started[s] = true;
    last_word_index[s] = w.word_index;

    if (!cur_sentence[s] || *cur_sentence[s] != w.sentence_index) {
      cur_sentence[s] = w.sentence_index;
      next_sentence_pos[s] = 0;
      stream.sentence_starts.push_back(stream.ids.size());
    }
    w.sentence_position = next_sentence_pos[s]++;
    w.word_length = w.surface.size();

    const auto tokens = tokenize_word(w.surface);
    w.token_start = stream.ids.size();
    w.token_len = tokens.size();
    w.all_unk = true;
    for (const auto& tok : tokens) {
      const std::int32_t id = vocab.encode_word(tok);
      if (id != vocab.unk_id()) w.all_unk = false;
      stream.ids.push_back(id);
    }
  }
  for (auto& stream : streams) {
    if (stream.sentence_starts.empty()) stream.sentence_starts.push_back(0);
    validate_stream(stream, vocab);
  }
  return streams;
}

std::vector<WordRecord> apply_exclusions(const std::vector<WordRecord>& words) {
  std::vector<WordRecord> kept;
  kept.reserve(words.size());
  for (const auto& w : words) {
    if (w.token_len == 1) kept.push_back(w);
  }
  return kept;
}

std::vector<double> unigram_frequency(
    const std::vector<std::string>& freq_corpus_tokens,
    const std::vector<WordRecord>& words) {
  if (freq_corpus_tokens.empty()) {
    throw InputError("unigram_frequency: empty frequency corpus");
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : freq_corpus_tokens) ++counts[t];
  std::unordered_set<std::string> types;
  for (const auto& [t, c] : counts) types.insert(t);
  for (const auto& w : words) types.insert(w.surface);

  const double N = static_cast<double>(freq_corpus_tokens.size());
  const double W = static_cast<double>(types.size());
  std::vector<double> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const auto it = counts.find(w.surface);
    const double c = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    out.push_back(std::log((c + 1.0) / (N + W)));
  }
  return out;
}

SentenceSplit split_sentences(const std::vector<WordRecord>& words,
                              double fraction_exploratory, std::uint64_t seed) {
  if (!(fraction_exploratory > 0.0 && fraction_exploratory < 1.0)) {
    throw InputError("split_sentences: fraction must be inside (0, 1)");
  }
  std::vector<std::pair<std::string, std::size_t>> sentences;
  std::set<std::pair<std::string, std::size_t>> seen;
  for (const auto& w : words) {
    if (seen.insert({w.story_id, w.sentence_index}).second) {
      sentences.push_back({w.story_id, w.sentence_index});
    }
  }
  const std::size_t n = sentences.size();
  if (n == 0) throw InputError("split_sentences: no sentences");

  // Largest-remainder apportionment between the two parts.
  const double q_exp = fraction_exploratory * static_cast<double>(n);
  const double q_held = (1.0 - fraction_exploratory) * static_cast<double>(n);
  std::size_t n_exp = static_cast<std::size_t>(q_exp);
  std::size_t n_held = static_cast<std::size_t>(q_held);
  if (n_exp + n_held < n) {
    const double r_exp = q_exp - static_cast<double>(n_exp);
    const double r_held = q_held - static_cast<double>(n_held);
    if (r_exp >= r_held) {
      ++n_exp;
    } else {
      ++n_held;
    }
  }

  Rng rng(seed);
  rng.shuffle(sentences);
  SentenceSplit split;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i < n_exp) {
      split.exploratory.insert(sentences[i]);
    } else {
      split.heldout.insert(sentences[i]);
    }
  }
  return split;
}

std::size_t PredictorTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < predictor_names.size(); ++i) {
    if (predictor_names[i] == name) return i;
  }
  throw UsageError("predictor table has no column '" + name + "'");
}

PredictorTable build_predictor_table(const std::vector<WordRecord>& words,
                                     const std::vector<RTObservation>& rts,
                                     const ScoredCorpus& scored,
                                     const PredictorOptions& options) {
  if (options.bounded_k_index &&
      *options.bounded_k_index >= scored.k_list.size()) {
    throw UsageError("build_predictor_table: bounded K index out of range");
  }
  if (options.unigram && options.unigram->size() != words.size()) {
    throw UsageError(
        "build_predictor_table: unigram values not aligned with words");
  }
  std::unordered_map<std::string, const StreamMeasures*> by_story;
  for (const auto& s : scored.streams) by_story[s.story_id] = &s;

  struct Included {
    const WordRecord* word;
    double surprisal, successor, entropy, unigram;
  };
  std::vector<Included> included;
  std::unordered_map<std::string, std::size_t> included_key;
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    const auto& w = words[wi];
    if (w.token_len != 1) continue;  // exclusion stage should have run
    if (options.exclude_all_unk_words && w.all_unk) continue;
    if (options.split) {
      const bool exp = options.split->is_exploratory(w.story_id, w.sentence_index);
      if (exp != options.use_exploratory_partition) continue;
    }
    const auto it = by_story.find(w.story_id);
    if (it == by_story.end()) {
      throw InputError("no scored stream for story " + w.story_id);
    }
    const auto& toks = it->second->tokens;
    if (w.token_start >= toks.size()) {
      throw InputError("word span outside scored stream for story " +
                       w.story_id);
    }
    const auto& m = toks[w.token_start];
    if (!m.successor_surprisal) continue;  // story-final word
    Included inc;
    inc.word = &w;
    inc.surprisal = m.surprisal;
    inc.successor = *m.successor_surprisal;
    inc.entropy = options.bounded_k_index ? m.bounded.at(*options.bounded_k_index)
                                          : m.entropy;
    inc.unigram = options.unigram ? (*options.unigram)[wi] : 0.0;
    included_key[w.story_id + "\x1f" + std::to_string(w.word_index)] =
        included.size();
    included.push_back(inc);
  }
  if (included.empty()) {
    throw InputError("build_predictor_table: no included words");
  }

  PredictorTable table;
  table.predictor_names.assign(std::begin(kPredictorNames),
                               std::end(kPredictorNames));
  const std::size_t P = table.predictor_names.size();
  table.raw.assign(P, {});

  for (const auto& r : rts) {
    const auto it =
        included_key.find(r.story_id + "\x1f" + std::to_string(r.word_index));
    if (it == included_key.end()) continue;
    if (options.rt_min_ms && r.rt_ms < *options.rt_min_ms) continue;
    if (options.rt_max_ms && r.rt_ms > *options.rt_max_ms) continue;
    const Included& inc = included[it->second];
    table.subject.push_back(r.subject_id);
    table.story.push_back(r.story_id);
    table.word_index.push_back(r.word_index);
    table.word.push_back(inc.word->surface);
    table.rt.push_back(r.rt_ms);
    table.raw[0].push_back(static_cast<double>(inc.word->sentence_position));
    table.raw[1].push_back(static_cast<double>(inc.word->word_length));
    table.raw[2].push_back(inc.unigram);
    table.raw[3].push_back(inc.surprisal);
    table.raw[4].push_back(inc.successor);
    table.raw[5].push_back(inc.entropy);
  }
  if (table.rows() == 0) {
    throw InputError("build_predictor_table: no (subject, word) rows");
  }

  table.z.assign(P, {});
  table.col_mean.assign(P, 0.0);
  table.col_sd.assign(P, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    const auto& col = table.raw[p];
    if (col.size() < 2) {
      throw UsageError("predictor column '" + table.predictor_names[p] +
                       "' has fewer than 2 rows");
    }
    const double m = stats::mean(col);
    const double sd = stats::sample_sd(col);
    if (!(sd > 0.0)) {
      throw UsageError("zero-variance predictor column '" +
                       table.predictor_names[p] + "'");
    }
    table.col_mean[p] = m;
    table.col_sd[p] = sd;
    auto& zc = table.z[p];
    zc.reserve(col.size());
    for (double v : col) zc.push_back((v - m) / sd);
  }
  return table;
}

void write_predictor_csv(std::ostream& out, const PredictorTable& table) {
  std::vector<std::string> header{"subject_id", "story_id", "word_index",
                                  "word", "rt_ms"};
  for (const auto& n : table.predictor_names) header.push_back("raw_" + n);
  for (const auto& n : table.predictor_names) header.push_back("z_" + n);
  csv::write_row(out, header);
  std::vector<std::string> row;
  for (std::size_t i = 0; i < table.rows(); ++i) {
    row.clear();
    row.push_back(table.subject[i]);
    row.push_back(table.story[i]);
    row.push_back(std::to_string(table.word_index[i]));
    row.push_back(table.word[i]);
    row.push_back(csv::format_double(table.rt[i]));
    for (const auto& col : table.raw) row.push_back(csv::format_double(col[i]));
    for (const auto& col : table.z) row.push_back(csv::format_double(col[i]));
    csv::write_row(out, row);
  }
}

void write_aligned_words_csv(std::ostream& out,
                             const std::vector<WordRecord>& words) {
  csv::write_row(out, {"story_id", "sentence_index", "word_index", "word",
                       "sentence_position", "token_start", "token_len",
                       "all_unk"});
  for (const auto& w : words) {
    csv::write_row(out, {w.story_id, std::to_string(w.sentence_index),
                         std::to_string(w.word_index), w.surface,
                         std::to_string(w.sentence_position),
                         std::to_string(w.token_start),
                         std::to_string(w.token_len), w.all_unk ? "1" : "0"});
  }
}

std::vector<WordRecord> read_aligned_words_csv(std::istream& in,
                                               const std::string& origin) {
  auto table = csv::read_stream(in, origin);
  const auto c_story = table.column("story_id");
  const auto c_sent = table.column("sentence_index");
  const auto c_word = table.column("word_index");
  const auto c_surf = table.column("word");
  const auto c_spos = table.column("sentence_position");
  const auto c_start = table.column("token_start");
  const auto c_len = table.column("token_len");
  const auto c_unk = table.column("all_unk");
  std::vector<WordRecord> words;
  long line = 1;
  for (const auto& row : table.rows) {
    ++line;
    WordRecord w;
    w.story_id = row[c_story];
    w.sentence_index = parse_index(row[c_sent], "sentence_index", line);
    w.word_index = parse_index(row[c_word], "word_index", line);
    w.surface = row[c_surf];
    w.word_length = w.surface.size();
    w.sentence_position = parse_index(row[c_spos], "sentence_position", line);
    w.token_start = parse_index(row[c_start], "token_start", line);
    w.token_len = parse_index(row[c_len], "token_len", line);
    w.all_unk = row[c_unk] == "1";
    words.push_back(std::move(w));
  }
  return words;
}

}  // namespace lmrt
