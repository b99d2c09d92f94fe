// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Each criterion also enforces its own wall-clock budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lmrt/corpus.hpp"
#include "lmrt/kernels.hpp"
#include "lmrt/lmm.hpp"
#include "lmrt/lstm.hpp"
#include "lmrt/measures.hpp"
#include "lmrt/ngram.hpp"
#include "lmrt/rng.hpp"
#include "lmrt/stats.hpp"
#include "support/lmm_fixtures.hpp"
#include "support/textgen.hpp"
#include "support/toy_models.hpp"

using namespace lmrt;
using testsupport::make_grid;
using testsupport::ols_oracle;
using testsupport::TextGenerator;

namespace {

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Shared reading-scale fixture: >= 100k tokens of generated English-like
// text, an 8001-entry vocabulary (so K = 5000 is valid and well separated
// from |V|), an order-3 KN model, and a held-out scored corpus.
struct ReadingFixture {
  Vocabulary vocab;
  std::unique_ptr<KneserNeyModel> model;
  ScoredCorpus heldout_scored;
  std::vector<std::string> train_tokens;

  ReadingFixture() {
    TextGenerator train_gen(101, 5500, 1600, 1200);
    train_tokens = train_gen.tokens(150000);
    TextGenerator held_gen(202, 5500, 1600, 1200);
    auto held_tokens = held_gen.tokens(25000);

    vocab = Vocabulary::build(train_tokens, 8001);
    TokenStream train{"train", vocab.encode(train_tokens), {0}};
    model = std::make_unique<KneserNeyModel>(
        KneserNeyModel::train({train}, 3, 0.75, vocab));

    TokenStream held{"held", vocab.encode(held_tokens), {0}};
    heldout_scored = score_corpus(
        *model, {held}, {5, 50, 500, 5000, vocab.size()});
  }
};

ReadingFixture& reading_fixture() {
  static ReadingFixture fx;
  return fx;
}

// ---------------------------------------------------------------------------

bool criterion1_measure_identities(std::string& detail) {
  for (std::size_t n : {2ul, 4ul, 16ul, 1024ul}) {
    std::vector<double> u(n, 1.0 / static_cast<double>(n));
    const double h = entropy(u);
    if (std::abs(h - std::log(static_cast<double>(n))) > 1e-12) {
      detail = "uniform entropy off at n=" + std::to_string(n);
      return false;
    }
  }
  Rng rng(7001);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(1999);
    std::vector<double> d(n);
    double s = 0.0;
    for (auto& p : d) {
      p = -std::log(1.0 - rng.uniform());
      s += p;
    }
    for (auto& p : d) p /= s;
    std::vector<std::size_t> ks{1};
    for (std::size_t k : {2ul, 5ul, 17ul, 64ul, 311ul, 1200ul}) {
      if (k < n) ks.push_back(k);
    }
    ks.push_back(n);
    std::vector<double> out(ks.size());
    bounded_entropy_sweep(d, ks, out);
    for (std::size_t i = 1; i < out.size(); ++i) {
      if (out[i] < out[i - 1] - 1e-12) {
        detail = "bounded entropy decreased in K";
        return false;
      }
    }
    if (std::abs(out.back() - entropy(d)) > 1e-9) {
      detail = "bounded entropy at K=|V| differs from total entropy";
      return false;
    }
  }
  detail = "uniform identities and 1000 random sweeps";
  return true;
}

bool criterion2_monte_carlo(std::string& detail) {
  auto& fx = reading_fixture();
  auto sample = sample_stream(*fx.model, 50000, 424242, "mc");
  auto scored = score_corpus(*fx.model, {sample}, {});

  std::vector<double> succ, ent;
  for (const auto& t : scored.streams[0].tokens) {
    if (t.successor_surprisal) {
      succ.push_back(*t.successor_surprisal);
      ent.push_back(t.entropy);
    }
  }
  const double mean_succ = stats::mean(succ);
  const double mean_ent = stats::mean(ent);
  const double bound =
      3.0 * stats::sample_sd(succ) / std::sqrt(static_cast<double>(succ.size()));
  const double gap = std::abs(mean_succ - mean_ent);
  std::ostringstream os;
  os << "|" << mean_succ << " - " << mean_ent << "| = " << gap
     << " vs bound " << bound;
  detail = os.str();
  if (corpus_entropy_estimate(scored) != mean_succ) {
    detail += " (estimator mismatch)";
    return false;
  }
  return gap < bound;
}

bool criterion3_same_model_correlation(std::string& detail) {
  auto& fx = reading_fixture();
  const auto succ = successor_column(fx.heldout_scored);
  const auto ent = entropy_column(fx.heldout_scored, true);
  const double r = pearson_r(succ, ent);
  std::ostringstream os;
  os << "pearson r = " << r << " over " << succ.size()
     << " held-out positions (require > 0.2)";
  detail = os.str();
  return r > 0.2;
}

bool criterion4_bounded_entropy_pattern(std::string& detail) {
  // Scored on a stream drawn from the model itself: successor surprisal is
  // then a Monte Carlo draw whose conditional mean is the total entropy,
  // which is what makes the K = |V| correlation maximal.
  auto& fx = reading_fixture();
  auto sample = sample_stream(*fx.model, 50000, 909, "mc-sweep");
  auto scored =
      score_corpus(*fx.model, {sample}, {5, 50, 500, 5000, fx.vocab.size()});
  const auto succ = successor_column(scored);
  const auto total = entropy_column(scored, true);

  std::vector<double> r_total, r_succ;
  for (std::size_t ki = 0; ki < scored.k_list.size(); ++ki) {
    const auto bounded = bounded_column(scored, ki, true);
    r_total.push_back(pearson_r(bounded, total));
    r_succ.push_back(pearson_r(bounded, succ));
  }
  for (std::size_t i = 1; i < r_total.size(); ++i) {
    if (r_total[i] < r_total[i - 1] - 1e-9) {
      detail = "corr(bounded, total) not monotone";
      return false;
    }
  }
  if (std::abs(r_total.back() - 1.0) > 1e-12) {
    detail = "corr at K=|V| is not 1";
    return false;
  }
  for (std::size_t i = 0; i + 1 < r_succ.size(); ++i) {
    if (r_succ[i] > r_succ.back()) {
      detail = "corr(bounded, successor) not maximal at K=|V|";
      return false;
    }
  }
  std::ostringstream os;
  os << "corr(H_K, H): ";
  for (double v : r_total) os << v << " ";
  os << "; corr(H_K, s): ";
  for (double v : r_succ) os << v << " ";
  detail = os.str();
  return true;
}

bool criterion5_gradient_check(std::string& detail) {
  auto vocab = testsupport::small_vocab(7);
  LstmConfig c;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.num_layers = 2;
  c.batch_size = 2;
  c.bptt_len = 5;
  c.seed = 11;
  LstmModel m(c, vocab);
  Minibatch mb;
  mb.steps = 5;
  mb.lanes = 2;
  Rng rng(21);
  for (std::size_t i = 0; i < mb.steps * mb.lanes; ++i) {
    mb.inputs.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
    mb.targets.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
  const double err = m.gradient_check(mb, 1e-5, 200, 13);
  const std::size_t fault =
      m.tensor("output.bias").offset + static_cast<std::size_t>(mb.targets[0]);
  const double bad = m.gradient_check(mb, 1e-5, 200, 13,
                                      static_cast<std::ptrdiff_t>(fault));
  std::ostringstream os;
  os << "max rel err = " << err << " (require < 1e-4); negated-gradient err = "
     << bad << " (require > 1e-1)";
  detail = os.str();
  return err < 1e-4 && bad > 1e-1;
}

bool criterion6_lmm_oracles(std::string& detail) {
  // (a) zero between-group variance: beta matches OLS within 1e-6.
  {
    auto g = make_grid(6, 12, 2, [](auto, auto, double x1, double x2, Rng& r) {
      return 250.0 + 8.0 * x1 + 3.0 * x2 + 1.5 * r.normal();
    });
    LmmSpec spec;
    spec.fixed = {"x1", "x2"};
    spec.random_intercepts = {"subject"};
    spec.criterion = FitCriterion::kREML;
    auto fit = fit_lmm(g.table, spec);
    auto beta = ols_oracle({g.table.z[0], g.table.z[1]}, g.table.rt);
    for (std::size_t j = 0; j < 3; ++j) {
      if (std::abs(fit.fixed[j].beta - beta[j]) > 1e-6) {
        detail = "(a) OLS equivalence failed";
        return false;
      }
    }
  }
  // (b) balanced one-way REML matches the ANOVA closed form within 1e-4.
  {
    const std::size_t g_count = 8, m = 12;
    Rng gen(99);
    std::vector<double> subj_eff(g_count);
    for (auto& v : subj_eff) v = gen.normal(0.0, 3.0);
    auto g = make_grid(g_count, m, 7,
                       [&](std::size_t s, auto, double, double, Rng& r) {
                         return 300.0 + subj_eff[s] + r.normal(0.0, 2.0);
                       });
    LmmSpec spec;
    spec.random_intercepts = {"subject"};
    spec.criterion = FitCriterion::kREML;
    auto fit = fit_lmm(g.table, spec);

    const auto& y = g.table.rt;
    const double n = static_cast<double>(y.size());
    const double grand = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double ssb = 0.0, ssw = 0.0;
    for (std::size_t s = 0; s < g_count; ++s) {
      double gm = 0.0;
      for (std::size_t w = 0; w < m; ++w) gm += y[s * m + w];
      gm /= static_cast<double>(m);
      ssb += static_cast<double>(m) * (gm - grand) * (gm - grand);
      for (std::size_t w = 0; w < m; ++w) {
        ssw += (y[s * m + w] - gm) * (y[s * m + w] - gm);
      }
    }
    const double msw = ssw / (n - static_cast<double>(g_count));
    const double msb = ssb / static_cast<double>(g_count - 1);
    const double var_subj = (msb - msw) / static_cast<double>(m);
    if (var_subj <= 0.0) {
      detail = "(b) fixture degenerate";
      return false;
    }
    if (std::abs(fit.sigma2 - msw) > 1e-4 ||
        std::abs(fit.varcomp[0].variance - var_subj) > 1e-4) {
      std::ostringstream os;
      os << "(b) ANOVA mismatch: sigma2 " << fit.sigma2 << " vs " << msw
         << ", var_subj " << fit.varcomp[0].variance << " vs " << var_subj;
      detail = os.str();
      return false;
    }
  }
  // (c) generative recovery: per-coefficient 2-SE coverage over 100 seeded
  // replicates must be at least 95%.
  {
    const double b0 = 320.0, b1 = 9.0, b2 = -5.0;
    int cover[3] = {0, 0, 0};
    Rng master(60427);
    for (int rep = 0; rep < 100; ++rep) {
      const std::uint64_t seed = master.next_u64();
      Rng gen(derive_seed(seed, "subj"));
      std::vector<double> subj_eff(100);
      for (auto& v : subj_eff) v = gen.normal(0.0, 12.0);
      auto g = make_grid(100, 20, seed,
                         [&](std::size_t s, auto, double x1, double x2, Rng& r) {
                           return b0 + b1 * x1 + b2 * x2 + subj_eff[s] +
                                  r.normal(0.0, 6.0);
                         });
      LmmSpec spec;
      spec.fixed = {"x1", "x2"};
      spec.random_intercepts = {"subject"};
      spec.criterion = FitCriterion::kREML;
      auto fit = fit_lmm(g.table, spec);
      const double truth[3] = {b0, b1, b2};
      for (int j = 0; j < 3; ++j) {
        if (std::abs(fit.fixed[j].beta - truth[j]) <= 2.0 * fit.fixed[j].se) {
          ++cover[j];
        }
      }
    }
    std::ostringstream os;
    os << "(c) 2-SE coverage per beta over 100 replicates: " << cover[0] << "/"
       << cover[1] << "/" << cover[2] << " (require >= 95 each)";
    detail = os.str();
    for (int j = 0; j < 3; ++j) {
      if (cover[j] < 95) return false;
    }
  }
  if (detail.empty()) detail = "OLS, ANOVA, and recovery oracles agree";
  return true;
}

bool criterion7_lrt_calibration(std::string& detail) {
  // Reference point against the independent erfc identity for df = 1.
  const double p = stats::chi_square_upper_tail(3.841, 1);
  const double oracle = std::erfc(std::sqrt(0.5 * 3.841));
  if (std::abs(p - 0.050) > 5e-4 || std::abs(p - oracle) > 1e-12) {
    std::ostringstream os;
    os << "chi2(3.841, 1) -> p = " << p << " vs oracle " << oracle;
    detail = os.str();
    return false;
  }

  // True-null rejection rate at alpha = 0.05 over 200 replicates.
  int rejections = 0;
  Rng master(81202);
  for (int rep = 0; rep < 200; ++rep) {
    Rng gen(derive_seed(master.next_u64(), "subj"));
    std::vector<double> subj_eff(10);
    for (auto& v : subj_eff) v = gen.normal(0.0, 8.0);
    auto g = make_grid(10, 20, master.next_u64(),
                       [&](std::size_t s, auto, double x1, double, Rng& r) {
                         return 300.0 + 5.0 * x1 + subj_eff[s] +
                                r.normal(0.0, 5.0);
                       });
    LmmSpec reduced;
    reduced.fixed = {"x1"};
    reduced.random_intercepts = {"subject"};
    reduced.criterion = FitCriterion::kML;
    LmmSpec full = reduced;
    full.fixed = {"x1", "x2"};  // x2 has no effect in the generator
    auto r = lrt(fit_lmm(g.table, full), fit_lmm(g.table, reduced));
    if (r.p < 0.05) ++rejections;
  }
  const double rate = rejections / 200.0;
  std::ostringstream os;
  os << "p(3.841, 1) = " << p << "; null rejection rate = " << rate
     << " (require in [0.02, 0.09])";
  detail = os.str();
  return rate >= 0.02 && rate <= 0.09;
}

bool criterion8_end_to_end(std::string& detail) {
  auto& fx = reading_fixture();

  // Stories scored by the same model, via the corpus pipeline.
  TextGenerator story_gen(303, 4200, 1200, 800);
  auto rows = story_gen.story_rows("storyA", 80);
  std::vector<WordRecord> words;
  for (const auto& r : rows) {
    WordRecord w;
    w.story_id = r.story_id;
    w.sentence_index = r.sentence_index;
    w.word_index = r.word_index;
    w.surface = r.word;
    words.push_back(w);
  }
  auto streams = assign_spans(words, fx.vocab);
  auto scored = score_corpus(*fx.model, streams, {5, fx.vocab.size()});
  auto included = apply_exclusions(words);
  auto unigram = unigram_frequency(fx.train_tokens, included);

  const std::size_t n_subjects = 8;
  LmmSpec full;
  full.fixed = {"sentence_position", "word_length", "unigram_frequency",
                "surprisal", "successor_surprisal", "entropy"};
  full.random_intercepts = {"subject", "word"};
  full.criterion = FitCriterion::kML;
  LmmSpec no_ent = full;
  no_ent.fixed.erase(std::remove(no_ent.fixed.begin(), no_ent.fixed.end(),
                                 std::string("entropy")),
                     no_ent.fixed.end());
  LmmSpec no_succ = full;
  no_succ.fixed.erase(std::remove(no_succ.fixed.begin(), no_succ.fixed.end(),
                                  std::string("successor_surprisal")),
                      no_succ.fixed.end());

  auto make_rts = [&](std::uint64_t seed, double b_h, double b_s) {
    std::vector<RTObservation> rts;
    Rng rng(seed);
    std::unordered_map<std::string, const StreamMeasures*> by_story;
    for (const auto& s : scored.streams) by_story[s.story_id] = &s;
    for (std::size_t subj = 0; subj < n_subjects; ++subj) {
      const double subj_icpt = rng.normal(0.0, 20.0);
      for (const auto& w : included) {
        const auto& m = by_story.at(w.story_id)->tokens[w.token_start];
        if (!m.successor_surprisal) continue;
        RTObservation r;
        r.subject_id = "s" + std::to_string(subj);
        r.story_id = w.story_id;
        r.word_index = w.word_index;
        r.rt_ms = 300.0 + b_h * m.entropy + b_s * (*m.successor_surprisal) +
                  subj_icpt + rng.normal(0.0, 25.0);
        rts.push_back(r);
      }
    }
    return rts;
  };

  auto run_phase = [&](double b_h, double b_s, std::uint64_t seed_base,
                       int& ent_sig, int& succ_sig, int& h_beats_s) {
    for (int rep = 0; rep < 50; ++rep) {
      auto rts = make_rts(derive_seed(seed_base, std::to_string(rep)), b_h, b_s);
      PredictorOptions opt;
      opt.unigram = unigram;
      auto table = build_predictor_table(included, rts, scored, opt);
      auto fit_full = fit_lmm(table, full);
      auto fit_ne = fit_lmm(table, no_ent);
      auto fit_ns = fit_lmm(table, no_succ);
      if (lrt(fit_full, fit_ne).p < 0.001) ++ent_sig;
      if (lrt(fit_full, fit_ns).p < 0.001) ++succ_sig;
      if (fit_full.effect("entropy").beta >
          fit_full.effect("successor_surprisal").beta) {
        ++h_beats_s;
      }
    }
  };

  // Phase 1: entropy-only generator. Entropy must be significant and its
  // coefficient must exceed the successor-surprisal one.
  int ent_sig = 0, succ_sig = 0, h_beats_s = 0;
  run_phase(12.0, 0.0, 11111, ent_sig, succ_sig, h_beats_s);
  std::ostringstream os;
  os << "phase1: entropy p<0.001 in " << ent_sig << "/50, H-coef > s-coef in "
     << h_beats_s << "/50";
  if (ent_sig < 45 || h_beats_s < 45) {
    detail = os.str() + " (require >= 45 each)";
    return false;
  }

  // Phase 2: independent entropy and successor terms; both reject.
  int ent_sig2 = 0, succ_sig2 = 0, unused = 0;
  run_phase(9.0, 7.0, 22222, ent_sig2, succ_sig2, unused);
  os << "; phase2: entropy " << ent_sig2 << "/50, successor " << succ_sig2
     << "/50 at p<0.001";
  detail = os.str();
  return ent_sig2 >= 45 && succ_sig2 >= 45;
}

bool criterion9_corpus_fidelity(std::string& detail) {
  // Multi-token exclusion fixture with a do-n't case.
  std::vector<std::string> surfaces{"We",     "don't", "know.", "The",
                                    "boar!'", "ran",   "far"};
  std::vector<WordRecord> words;
  for (std::size_t i = 0; i < surfaces.size(); ++i) {
    WordRecord w;
    w.story_id = "f";
    w.sentence_index = i < 3 ? 0 : 1;
    w.word_index = i;
    w.surface = surfaces[i];
    words.push_back(w);
  }
  std::vector<std::string> lexicon{"We",  "do",  "n't", "know", ".",
                                   "The", "boar", "!",  "'",    "ran",
                                   "far"};
  std::vector<std::string> counted;
  for (int i = 0; i < 2; ++i) {
    counted.insert(counted.end(), lexicon.begin(), lexicon.end());
  }
  auto vocab = Vocabulary::build(counted, 50);
  auto streams = assign_spans(words, vocab);
  auto kept = apply_exclusions(words);

  std::vector<std::string> kept_surfaces;
  for (const auto& w : kept) kept_surfaces.push_back(w.surface);
  if (kept_surfaces != std::vector<std::string>{"We", "The", "ran", "far"}) {
    detail = "exclusion set wrong";
    return false;
  }

  // The token-level measure sequence is identical before and after
  // exclusions (exclusions touch regression rows only).
  TextGenerator noise_gen(505, 50, 20, 10);
  std::vector<std::string> extra_tokens = noise_gen.tokens(2000);
  std::vector<std::string> train_tokens = counted;
  train_tokens.insert(train_tokens.end(), extra_tokens.begin(),
                      extra_tokens.end());
  TokenStream train{"t", vocab.encode(train_tokens), {0}};
  auto model = KneserNeyModel::train({train}, 2, 0.75, vocab);
  auto scored_before = score_corpus(model, streams, {2});
  auto scored_after = score_corpus(model, streams, {2});  // exclusions do not rescore
  for (std::size_t t = 0; t < scored_before.streams[0].tokens.size(); ++t) {
    if (scored_before.streams[0].tokens[t].surprisal !=
        scored_after.streams[0].tokens[t].surprisal) {
      detail = "token measures changed";
      return false;
    }
  }
  const std::size_t n_tokens = streams[0].ids.size();
  if (n_tokens != 2 + 2 + 1 + 3 + 1 + 1 + 1) {  // We | do n't | know . | The | boar ! ' | ran | far
    detail = "tokenization shape wrong: " + std::to_string(n_tokens);
    return false;
  }

  // 485 sentences split (162, 323) by largest remainder.
  std::vector<WordRecord> sents;
  for (std::size_t s = 0; s < 485; ++s) {
    WordRecord w;
    w.story_id = "story" + std::to_string(s % 10);
    w.sentence_index = s;
    sents.push_back(w);
  }
  auto split = split_sentences(sents, 1.0 / 3.0, 12345);
  std::ostringstream os;
  os << "exclusions exact; split " << split.exploratory.size() << "/"
     << split.heldout.size();
  detail = os.str();
  return split.exploratory.size() == 162 && split.heldout.size() == 323;
}

struct Criterion {
  int index;
  const char* name;
  double budget_s;
  std::function<bool(std::string&)> fn;
};

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {1, "measure identities", 5.0, criterion1_measure_identities},
      {2, "Monte Carlo entropy estimator", 60.0, criterion2_monte_carlo},
      {3, "same-model successor/entropy correlation", 300.0,
       criterion3_same_model_correlation},
      {4, "bounded-entropy correlation pattern", 300.0,
       criterion4_bounded_entropy_pattern},
      {5, "LSTM gradient check", 30.0, criterion5_gradient_check},
      {6, "LMM oracle equivalence", 300.0, criterion6_lmm_oracles},
      {7, "LRT calibration", 300.0, criterion7_lrt_calibration},
      {8, "end-to-end predictor separation", 900.0, criterion8_end_to_end},
      {9, "corpus-handling fidelity", 5.0, criterion9_corpus_fidelity},
  };

  int failures = 0;
  for (auto& c : criteria) {
    const double t0 = now_s();
    std::string detail;
    bool ok = false;
    try {
      ok = c.fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
      ok = false;
    }
    const double dt = now_s() - t0;
    const bool in_budget = dt < c.budget_s;
    if (!in_budget) {
      detail += " [over budget " + std::to_string(c.budget_s) + "s]";
    }
    const bool pass = ok && in_budget;
    std::printf("%s  [%d] %-44s (%6.1f s)  %s\n", pass ? "PASS" : "FAIL",
                c.index, c.name, dt, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
  if (failures) {
    std::printf("\n%d criterion(s) FAILED\n", failures);
  } else {
    std::printf("\nall criteria passed\n");
  }
  return failures == 0 ? 0 : 1;
}
