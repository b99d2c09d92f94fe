#include "lmrt/ngram.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lmrt/common.hpp"
#include "lmrt/kernels.hpp"
#include "lmrt/rng.hpp"

namespace lmrt {

namespace {

using detail::CtxKey;
using detail::CtxKeyHash;

CtxKey make_key(const std::int32_t* begin, int len) {
  CtxKey k;
  k.len = static_cast<std::uint8_t>(len);
  for (int i = 0; i < len; ++i) k.ids[i] = begin[i];
  return k;
}

// Raw k-gram counts keyed by the full gram (context slots + final token).
struct GramKey {
  CtxKey ctx;
  std::int32_t last = 0;
  bool operator==(const GramKey& o) const {
    return last == o.last && ctx == o.ctx;
  }
};
struct GramKeyHash {
  std::size_t operator()(const GramKey& g) const {
    std::uint64_t h = CtxKeyHash{}(g.ctx);
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(g.last)) +
         0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};
using GramCounts = std::unordered_map<GramKey, std::uint32_t, GramKeyHash>;

std::uint64_t mix64(std::uint64_t x) { return lmrt::detail::splitmix64(x); }

}  // namespace

KneserNeyModel KneserNeyModel::train(const std::vector<TokenStream>& corpus,
                                     int order, double discount,
                                     Vocabulary vocab) {
  if (order < 1 || order > kMaxNgramOrder) {
    throw InputError("train_kn: order must be in [1, " +
                     std::to_string(kMaxNgramOrder) + "]");
  }
  if (!(discount > 0.0 && discount < 1.0)) {
    throw InputError("train_kn: discount must be strictly inside (0, 1)");
  }
  std::size_t total_tokens = 0;
  for (const auto& s : corpus) total_tokens += s.size();
  if (corpus.empty() || total_tokens == 0) {
    throw InputError("train_kn: empty corpus");
  }
  for (const auto& s : corpus) validate_stream(s, vocab);

  // Raw counts for orders 1..max(order, 2); order 2 is always needed to
  // derive continuation counts for the unigram level.
  const int max_raw = std::max(order, 2);
  std::vector<GramCounts> raw(static_cast<std::size_t>(max_raw));
  for (const auto& stream : corpus) {
    const auto& ids = stream.ids;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (int k = 1; k <= max_raw; ++k) {
        if (i + 1 < static_cast<std::size_t>(k)) break;
        GramKey g;
        g.ctx = make_key(ids.data() + (i + 1 - k), k - 1);
        g.last = ids[i];
        ++raw[k - 1][g];
      }
    }
  }

  KneserNeyModel m;
  m.order_ = order;
  m.discount_ = discount;
  m.vocab_ = std::move(vocab);
  const std::size_t V = m.vocab_.size();

  // Unigram level: continuation counts (distinct predecessors) from the
  // distinct bigrams of the corpus.
  m.unigram_counts_.assign(V, 0);
  if (order == 1) {
    for (const auto& [g, c] : raw[1]) ++m.unigram_counts_[g.last];
  }

  m.tables_.assign(static_cast<std::size_t>(std::max(order, 1)), ContextTable{});
  for (int k = 2; k <= order; ++k) {
    ContextTable& table = m.tables_[k - 1];
    if (k == order) {
      // Top order: raw counts grouped by context.
      for (const auto& [g, c] : raw[k - 1]) {
        table[g.ctx].conts.emplace_back(g.last, c);
      }
    } else {
      // Continuation counts: distinct left extensions of (k+1)-grams.
      std::unordered_map<GramKey, std::uint32_t, GramKeyHash> cont;
      for (const auto& [g, c] : raw[k]) {
        // g is a (k+1)-gram (g.ctx has k slots); its suffix k-gram has
        // context g.ctx[1..k-1] and continuation g.last.
        GramKey s;
        s.ctx = make_key(g.ctx.ids.data() + 1, k - 1);
        s.last = g.last;
        ++cont[s];
      }
      for (const auto& [g, c] : cont) {
        table[g.ctx].conts.emplace_back(g.last, c);
      }
    }
  }
  if (order >= 2) {
    // Unigram continuation counts from distinct bigrams.
    for (const auto& [g, c] : raw[1]) ++m.unigram_counts_[g.last];
  }

  m.finalize();
  return m;
}

KneserNeyModel KneserNeyModel::from_counts(
    int order, double discount, Vocabulary vocab,
    std::vector<std::uint32_t> unigram_counts,
    std::vector<ContextTable> tables) {
  if (order < 1 || order > kMaxNgramOrder) {
    throw InputError("ngram model: order out of range");
  }
  if (!(discount > 0.0 && discount < 1.0)) {
    throw InputError("ngram model: discount outside (0, 1)");
  }
  KneserNeyModel m;
  m.order_ = order;
  m.discount_ = discount;
  m.vocab_ = std::move(vocab);
  if (unigram_counts.size() != m.vocab_.size()) {
    throw InputError("ngram model: unigram count size mismatch");
  }
  m.unigram_counts_ = std::move(unigram_counts);
  m.tables_ = std::move(tables);
  m.tables_.resize(static_cast<std::size_t>(std::max(order, 1)));
  m.finalize();
  return m;
}

void KneserNeyModel::finalize() {
  const std::size_t V = vocab_.size();
  unigram_total_ = 0;
  unigram_types_ = 0;
  for (std::uint32_t c : unigram_counts_) {
    unigram_total_ += c;
    if (c > 0) ++unigram_types_;
  }
  for (auto& table : tables_) {
    for (auto& [ctx, entry] : table) {
      std::sort(entry.conts.begin(), entry.conts.end());
      entry.total = 0;
      for (const auto& [w, c] : entry.conts) {
        if (c == 0) throw InputError("ngram model: zero stored count");
        entry.total += c;
      }
    }
  }

  // Cached unigram-level distribution P1 (base of the recursion).
  unigram_level_.assign(V, 1.0 / static_cast<double>(V));
  if (unigram_total_ > 0) {
    const double total = static_cast<double>(unigram_total_);
    const double backoff =
        discount_ * static_cast<double>(unigram_types_) / total;
    const double unif = backoff / static_cast<double>(V);
    for (std::size_t w = 0; w < V; ++w) {
      const double c = static_cast<double>(unigram_counts_[w]);
      unigram_level_[w] = (c > 0.0 ? (c - discount_) / total : 0.0) + unif;
    }
  }

  // Stable content hash; per-context hashes combine additively so the map
  // iteration order does not matter.
  std::uint64_t fp = mix64(0x6b6e5f6d6f64656cULL ^ static_cast<std::uint64_t>(order_));
  std::uint64_t dbits;
  static_assert(sizeof(dbits) == sizeof(discount_));
  std::memcpy(&dbits, &discount_, sizeof(dbits));
  fp = mix64(fp ^ dbits);
  fp = mix64(fp ^ static_cast<std::uint64_t>(vocab_.size()));
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : vocab_.word(static_cast<std::int32_t>(i))) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    fp += mix64(h ^ (i * 0x9e3779b97f4a7c15ULL));
  }
  for (std::size_t w = 0; w < unigram_counts_.size(); ++w) {
    if (unigram_counts_[w]) {
      fp += mix64((static_cast<std::uint64_t>(w) << 32) ^ unigram_counts_[w]);
    }
  }
  for (std::size_t k = 0; k < tables_.size(); ++k) {
    for (const auto& [ctx, entry] : tables_[k]) {
      std::uint64_t h = CtxKeyHash{}(ctx) ^ (k << 56);
      for (const auto& [w, c] : entry.conts) {
        h = mix64(h ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(w)) << 24) ^ c);
      }
      fp += h;
    }
  }
  fingerprint_ = fp ? fp : 1;
}

ContextState KneserNeyModel::initial_state() const {
  ContextState s;
  s.model_tag = fingerprint_;
  return s;
}

ContextState KneserNeyModel::advance(const ContextState& state,
                                     std::int32_t token) const {
  check_state(state);
  check_token(token);
  ContextState next = state;
  next.window.push_back(token);
  const std::size_t keep = static_cast<std::size_t>(std::max(order_ - 1, 0));
  if (next.window.size() > keep) {
    next.window.erase(next.window.begin(),
                      next.window.end() - static_cast<std::ptrdiff_t>(keep));
  }
  return next;
}

void KneserNeyModel::next_distribution(const ContextState& state,
                                       std::vector<double>& probs) const {
  check_state(state);
  const std::size_t V = vocab_.size();
  const auto& h = state.window;

  // Collect the applicable levels k = 2..order (context seen and enough
  // history), top down, recording each level's backoff weight.
  struct Level {
    const ContextCounts* entry;
    double backoff;  // D * types / total
  };
  std::array<Level, kMaxNgramOrder> levels{};
  int nlevels = 0;
  for (int k = 2; k <= order_; ++k) {
    if (h.size() < static_cast<std::size_t>(k - 1)) break;
    const CtxKey key = make_key(h.data() + (h.size() - (k - 1)), k - 1);
    auto it = tables_[k - 1].find(key);
    if (it == tables_[k - 1].end() || it->second.total == 0) continue;
    const auto& entry = it->second;
    levels[nlevels++] = {
        &entry, discount_ * static_cast<double>(entry.conts.size()) /
                    static_cast<double>(entry.total)};
  }

  // One dense pass: the unigram level scaled by the product of all backoff
  // weights above it, then sparse discounted-count adds per level. The top
  // level's counts carry weight 1; level k's counts carry the product of
  // the backoff weights of the levels above k.
  double gamma = 1.0;
  for (int i = 0; i < nlevels; ++i) gamma *= levels[i].backoff;
  probs.resize(V);
  kernels::par::axpb(unigram_level_, gamma, 0.0, probs);
  double scale = 1.0;
  for (int i = nlevels - 1; i >= 0; --i) {
    const auto& entry = *levels[i].entry;
    const double total = static_cast<double>(entry.total);
    for (const auto& [w, c] : entry.conts) {
      probs[w] += scale * (static_cast<double>(c) - discount_) / total;
    }
    scale *= levels[i].backoff;
  }
}

double KneserNeyModel::token_probability(const ContextState& state,
                                         std::int32_t token) const {
  check_state(state);
  check_token(token);
  const auto& h = state.window;
  double p = unigram_level_[token];
  // Apply levels bottom-up: p_k = (count - D)+/total + backoff_k * p_{k-1}.
  for (int k = 2; k <= order_; ++k) {
    if (h.size() < static_cast<std::size_t>(k - 1)) break;
    const CtxKey key = make_key(h.data() + (h.size() - (k - 1)), k - 1);
    auto it = tables_[k - 1].find(key);
    if (it == tables_[k - 1].end() || it->second.total == 0) continue;
    const auto& entry = it->second;
    const double total = static_cast<double>(entry.total);
    auto cit = std::lower_bound(
        entry.conts.begin(), entry.conts.end(), token,
        [](const std::pair<std::int32_t, std::uint32_t>& a, std::int32_t b) {
          return a.first < b;
        });
    const double cnt =
        (cit != entry.conts.end() && cit->first == token)
            ? static_cast<double>(cit->second)
            : 0.0;
    const double backoff = discount_ *
                           static_cast<double>(entry.conts.size()) / total;
    p = (cnt > 0.0 ? (cnt - discount_) / total : 0.0) + backoff * p;
  }
  return p;
}

}  // namespace lmrt
