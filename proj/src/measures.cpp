#include "lmrt/measures.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <ostream>

#include "lmrt/common.hpp"
#include "lmrt/csv.hpp"
#include "lmrt/kernels.hpp"

namespace lmrt {

double surprisal(const std::vector<double>& dist, std::int32_t token) {
  if (token < 0 || static_cast<std::size_t>(token) >= dist.size()) {
    throw InputError("surprisal: token id out of range");
  }
  return -std::log(std::max(dist[static_cast<std::size_t>(token)], kProbFloor));
}

double entropy(const std::vector<double>& dist) {
  return kernels::par::entropy(dist);
}

namespace {

double plogp_over_ascending(const std::vector<double>& dist,
                            std::span<const std::int32_t> idx) {
  double s = 0.0;
  for (std::int32_t i : idx) {
    const double p = dist[static_cast<std::size_t>(i)];
    if (p > 0.0) s += p * std::log(p);
  }
  return -s;
}

}  // namespace

double bounded_entropy(const std::vector<double>& dist, std::size_t k,
                       BoundedEntropyMode mode) {
  if (k < 1 || k > dist.size()) {
    throw InputError("bounded_entropy: K must be in [1, |V|]");
  }
  if (mode == BoundedEntropyMode::kTruncated && k == dist.size()) {
    return entropy(dist);
  }
  auto idx = kernels::par::topk_indices(dist, k);
  if (mode == BoundedEntropyMode::kTruncated) {
    return plogp_over_ascending(dist, idx);
  }
  double mass = 0.0;
  for (std::int32_t i : idx) mass += dist[static_cast<std::size_t>(i)];
  if (mass <= 0.0) return 0.0;
  double s = 0.0;
  for (std::int32_t i : idx) {
    const double p = dist[static_cast<std::size_t>(i)] / mass;
    if (p > 0.0) s += p * std::log(p);
  }
  return -s;
}

void bounded_entropy_sweep(const std::vector<double>& dist,
                           std::span<const std::size_t> ks,
                           std::span<double> out) {
  if (out.size() != ks.size()) {
    throw InputError("bounded_entropy_sweep: output size mismatch");
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 1 || ks[i] > dist.size()) {
      throw InputError("bounded_entropy_sweep: K out of range");
    }
    if (i > 0 && ks[i] <= ks[i - 1]) {
      throw InputError("bounded_entropy_sweep: K list must be strictly ascending");
    }
  }
  // Work from the largest K down, shrinking one candidate set in place:
  // one O(|V|) selection, then O(K) refinements.
  std::vector<std::int32_t> cand;
  for (std::size_t ii = ks.size(); ii-- > 0;) {
    const std::size_t k = ks[ii];
    if (k == dist.size()) {
      out[ii] = entropy(dist);
      continue;
    }
    if (cand.empty()) {
      cand = kernels::par::topk_indices(dist, k);
    } else if (k < cand.size()) {
      std::nth_element(cand.begin(),
                       cand.begin() + static_cast<std::ptrdiff_t>(k),
                       cand.end(), kernels::detail::TopkLess{dist.data()});
      cand.resize(k);
      std::sort(cand.begin(), cand.end());
    }
    out[ii] = plogp_over_ascending(dist, cand);
  }
}

std::size_t ScoredCorpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& s : streams) n += s.tokens.size();
  return n;
}

ScoredCorpus score_corpus(const LanguageModel& model,
                          const std::vector<TokenStream>& streams,
                          std::vector<std::size_t> k_list) {
  std::sort(k_list.begin(), k_list.end());
  k_list.erase(std::unique(k_list.begin(), k_list.end()), k_list.end());
  const std::size_t V = model.vocab().size();
  for (std::size_t k : k_list) {
    if (k < 1 || k > V) {
      throw InputError("score_corpus: K = " + std::to_string(k) +
                       " outside [1, " + std::to_string(V) + "]");
    }
  }
  for (const auto& s : streams) validate_stream(s, model.vocab());

  ScoredCorpus scored;
  scored.k_list = k_list;
  scored.model_fingerprint = model.fingerprint();
  scored.vocab_size = V;
  scored.streams.resize(streams.size());

  std::exception_ptr first_error;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(streams.size());
       ++si) {
    try {
      const TokenStream& stream = streams[static_cast<std::size_t>(si)];
      StreamMeasures& sm = scored.streams[static_cast<std::size_t>(si)];
      sm.story_id = stream.story_id;
      sm.tokens.resize(stream.size());
      ContextState state = model.initial_state();
      std::vector<double> probs;
      model.next_distribution(state, probs);
      validate_distribution(probs);
      for (std::size_t t = 0; t < stream.size(); ++t) {
        TokenMeasures& rec = sm.tokens[t];
        rec.position = t;
        rec.token = stream.ids[t];
        rec.surprisal = surprisal(probs, rec.token);
        state = model.advance(state, rec.token);
        model.next_distribution(state, probs);
        validate_distribution(probs);
        rec.entropy = kernels::par::entropy(probs);
        rec.bounded.resize(k_list.size());
        bounded_entropy_sweep(probs, k_list, rec.bounded);
      }
      for (std::size_t t = 0; t + 1 < stream.size(); ++t) {
        sm.tokens[t].successor_surprisal = sm.tokens[t + 1].surprisal;
      }
    } catch (...) {
#pragma omp critical(lmrt_score_error)
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  return scored;
}

double corpus_entropy_estimate(const ScoredCorpus& scored) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : scored.streams) {
    for (const auto& t : s.tokens) {
      if (t.successor_surprisal) {
        sum += *t.successor_surprisal;
        ++n;
      }
    }
  }
  if (n == 0) {
    throw InputError("corpus_entropy_estimate: no successor surprisal present");
  }
  return sum / static_cast<double>(n);
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("pearson_r: length mismatch");
  if (x.size() < 2) throw InputError("pearson_r: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    throw NumericError("pearson_r: undefined correlation (zero variance)");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

void write_scores_csv(std::ostream& out, const ScoredCorpus& scored,
                      const Vocabulary& vocab, double log_scale) {
  std::vector<std::string> header{"story_id",  "position",
                                  "word",      "surprisal",
                                  "successor_surprisal", "entropy"};
  for (std::size_t k : scored.k_list) {
    header.push_back("bounded_entropy_" + std::to_string(k));
  }
  csv::write_row(out, header);
  std::vector<std::string> row;
  for (const auto& s : scored.streams) {
    for (const auto& t : s.tokens) {
      row.clear();
      row.push_back(s.story_id);
      row.push_back(std::to_string(t.position));
      row.push_back(vocab.word(t.token));
      row.push_back(csv::format_double(t.surprisal * log_scale));
      row.push_back(t.successor_surprisal
                        ? csv::format_double(*t.successor_surprisal * log_scale)
                        : std::string{});
      row.push_back(csv::format_double(t.entropy * log_scale));
      for (double b : t.bounded) row.push_back(csv::format_double(b * log_scale));
      csv::write_row(out, row);
    }
  }
}

ScoredCorpus read_scores_csv(std::istream& in, const std::string& origin) {
  auto table = csv::read_stream(in, origin);
  ScoredCorpus scored;
  const auto c_story = table.column("story_id");
  const auto c_pos = table.column("position");
  const auto c_surp = table.column("surprisal");
  const auto c_succ = table.column("successor_surprisal");
  const auto c_ent = table.column("entropy");
  std::vector<std::size_t> k_cols;
  const std::string prefix = "bounded_entropy_";
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (table.header[i].rfind(prefix, 0) == 0) {
      scored.k_list.push_back(std::stoul(table.header[i].substr(prefix.size())));
      k_cols.push_back(i);
    }
  }
  StreamMeasures* cur = nullptr;
  for (const auto& row : table.rows) {
    if (!cur || cur->story_id != row[c_story]) {
      scored.streams.emplace_back();
      cur = &scored.streams.back();
      cur->story_id = row[c_story];
    }
    TokenMeasures t;
    t.position = std::stoul(row[c_pos]);
    t.surprisal = std::stod(row[c_surp]);
    if (!row[c_succ].empty()) t.successor_surprisal = std::stod(row[c_succ]);
    t.entropy = std::stod(row[c_ent]);
    for (std::size_t kc : k_cols) t.bounded.push_back(std::stod(row[kc]));
    cur->tokens.push_back(std::move(t));
  }
  return scored;
}

namespace {

template <typename Fn>
std::vector<double> collect(const ScoredCorpus& s, bool successor_rows_only,
                            Fn&& value) {
  std::vector<double> out;
  out.reserve(s.total_tokens());
  for (const auto& stream : s.streams) {
    for (const auto& t : stream.tokens) {
      if (successor_rows_only && !t.successor_surprisal) continue;
      out.push_back(value(t));
    }
  }
  return out;
}

}  // namespace

std::vector<double> surprisal_column(const ScoredCorpus& s,
                                     bool successor_rows_only) {
  return collect(s, successor_rows_only,
                 [](const TokenMeasures& t) { return t.surprisal; });
}

std::vector<double> successor_column(const ScoredCorpus& s) {
  return collect(s, true,
                 [](const TokenMeasures& t) { return *t.successor_surprisal; });
}

std::vector<double> entropy_column(const ScoredCorpus& s,
                                   bool successor_rows_only) {
  return collect(s, successor_rows_only,
                 [](const TokenMeasures& t) { return t.entropy; });
}

std::vector<double> bounded_column(const ScoredCorpus& s, std::size_t k_index,
                                   bool successor_rows_only) {
  if (!s.streams.empty() && k_index >= s.k_list.size()) {
    throw InputError("bounded_column: k index out of range");
  }
  return collect(s, successor_rows_only, [k_index](const TokenMeasures& t) {
    return t.bounded.at(k_index);
  });
}

}  // namespace lmrt
