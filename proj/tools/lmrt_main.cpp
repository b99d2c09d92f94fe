// lmrt: train/score/analyze/ksweep/correlate pipeline driver.
//
// Configuration comes from an optional JSON file (--config) with flag
// overrides; flags win. Every subcommand writes a manifest.json with the
// resolved configuration so runs can be reproduced from the output
// directory alone.
//
// Exit codes: 0 success, 1 numerical/convergence warning, 2 usage/input
// error.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lmrt/common.hpp"
#include "lmrt/corpus.hpp"
#include "lmrt/csv.hpp"
#include "lmrt/lmm.hpp"
#include "lmrt/lstm.hpp"
#include "lmrt/measures.hpp"
#include "lmrt/model_io.hpp"
#include "lmrt/ngram.hpp"
#include "lmrt/rng.hpp"
#include "lmrt/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lmrt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumericWarning = 1;
constexpr int kExitUsage = 2;

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": bad JSON: " + e.what(), 0);
  }
}

template <typename T>
T cfg(const json& c, const std::string& dotted, T fallback) {
  const json* node = &c;
  std::size_t at = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', at);
    const std::string key = dotted.substr(at, dot - at);
    if (!node->is_object() || !node->contains(key)) return fallback;
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    at = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const json::exception&) {
    throw InputError("config field '" + dotted + "' has the wrong type");
  }
}

// Whitespace tokens, then the word tokenizer (punctuation/clitic splits).
std::vector<std::string> read_text_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file: " + path);
  std::vector<std::string> tokens;
  std::string chunk;
  while (in >> chunk) {
    for (auto& t : tokenize_word(chunk)) tokens.push_back(std::move(t));
  }
  if (tokens.empty()) throw InputError(path + ": no tokens");
  return tokens;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << content;
}

void write_manifest(const fs::path& out_dir, json manifest) {
  std::ofstream out(out_dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string train_path;
  std::string out_dir = "out";
  std::string kind;  // empty = from config
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> vocab_max;
  std::optional<int> order;
  std::optional<double> discount;
  std::optional<std::size_t> epochs;
};

int run_train(const TrainArgs& a) {
  json c = load_config(a.config_path);
  const std::uint64_t seed = a.seed.value_or(cfg<std::uint64_t>(c, "seed", 1));
  const std::size_t vocab_max =
      a.vocab_max.value_or(cfg<std::size_t>(c, "vocab_max_size", 10000));
  const std::string kind =
      !a.kind.empty() ? a.kind : cfg<std::string>(c, "model.kind", "ngram");
  const double valid_fraction = cfg<double>(c, "validation_fraction", 0.1);
  if (a.train_path.empty()) throw UsageError("train: --train is required");

  fs::create_directories(a.out_dir);
  auto tokens = read_text_tokens(a.train_path);
  auto vocab = Vocabulary::build(tokens, vocab_max);

  // Deterministic tail split for validation.
  const std::size_t n_valid =
      valid_fraction > 0.0
          ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                         valid_fraction *
                                         static_cast<double>(tokens.size())))
          : 0;
  if (n_valid >= tokens.size()) {
    throw InputError("validation fraction leaves no training tokens");
  }
  std::vector<std::string> train_tokens(tokens.begin(),
                                        tokens.end() - static_cast<std::ptrdiff_t>(n_valid));
  std::vector<std::string> valid_tokens(tokens.end() - static_cast<std::ptrdiff_t>(n_valid),
                                        tokens.end());
  TokenStream train_stream{"train", vocab.encode(train_tokens), {0}};
  std::vector<TokenStream> validation;
  if (n_valid > 0) {
    validation.push_back(TokenStream{"valid", vocab.encode(valid_tokens), {0}});
  }

  const fs::path model_path = fs::path(a.out_dir) / "model.lmrt";
  std::ostringstream log_csv;
  log_csv << "epoch,train_ce,valid_ce,lr\n";

  if (kind == "ngram") {
    const int order = a.order.value_or(cfg<int>(c, "model.order", 3));
    const double discount =
        a.discount.value_or(cfg<double>(c, "model.discount", 0.75));
    auto model = KneserNeyModel::train({train_stream}, order, discount, vocab);
    save_model(model_path.string(), model);
    double val_ce = std::numeric_limits<double>::quiet_NaN();
    if (!validation.empty()) {
      long double total = 0.0L;
      ContextState st = model.initial_state();
      for (std::int32_t tok : validation[0].ids) {
        total += -std::log(model.token_probability(st, tok));
        st = model.advance(st, tok);
      }
      val_ce = static_cast<double>(total) /
               static_cast<double>(validation[0].ids.size());
    }
    log_csv << "1,," << csv::format_double(val_ce) << ",\n";
  } else if (kind == "lstm") {
    LstmConfig lc;
    lc.embed_dim = cfg<std::size_t>(c, "model.embed_dim", 64);
    lc.hidden_dim = cfg<std::size_t>(c, "model.hidden_dim", 128);
    lc.num_layers = cfg<std::size_t>(c, "model.num_layers", 2);
    lc.dropout = cfg<double>(c, "model.dropout", 0.0);
    lc.batch_size = cfg<std::size_t>(c, "model.batch_size", 16);
    lc.bptt_len = cfg<std::size_t>(c, "model.bptt_len", 32);
    lc.epochs = a.epochs.value_or(cfg<std::size_t>(c, "model.epochs", 10));
    lc.learning_rate = cfg<double>(c, "model.learning_rate", 1.0);
    lc.grad_clip = cfg<double>(c, "model.grad_clip", 5.0);
    lc.patience = cfg<std::size_t>(c, "model.patience", 5);
    lc.lr_decay = cfg<double>(c, "model.lr_decay", 0.5);
    lc.seed = derive_seed(seed, "lstm");
    std::vector<TrainLogEntry> log;
    auto model = LstmModel::train({train_stream}, lc, validation, vocab, &log);
    save_model(model_path.string(), model);
    for (const auto& e : log) {
      log_csv << e.epoch << "," << csv::format_double(e.train_ce) << ","
              << (std::isnan(e.valid_ce) ? std::string{}
                                         : csv::format_double(e.valid_ce))
              << "," << csv::format_double(e.lr) << "\n";
    }
  } else {
    throw UsageError("unknown model kind '" + kind + "' (ngram or lstm)");
  }

  write_file(fs::path(a.out_dir) / "train_log.csv", log_csv.str());
  json manifest;
  manifest["command"] = "train";
  manifest["config"] = {{"seed", seed},
                        {"vocab_max_size", vocab_max},
                        {"model_kind", kind},
                        {"train_corpus", a.train_path},
                        {"validation_fraction", valid_fraction},
                        {"train_tokens", train_tokens.size()},
                        {"validation_tokens", n_valid},
                        {"vocab_size", vocab.size()}};
  manifest["model_fingerprint"] = hex64(file_fingerprint(model_path.string()));
  manifest["outputs"] = {"model.lmrt", "train_log.csv"};
  write_manifest(a.out_dir, manifest);
  std::cout << "trained " << kind << " model: vocab " << vocab.size()
            << ", container " << model_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string config_path;
  std::string model_path;
  std::string words_path;
  std::string out_dir = "out";
  std::vector<std::size_t> k_list;
  bool log2 = false;
};

std::vector<std::size_t> resolve_k_list(const json& c,
                                        const std::vector<std::size_t>& flag_ks,
                                        std::size_t vocab_size) {
  std::vector<std::size_t> ks = flag_ks;
  if (ks.empty()) {
    ks = cfg<std::vector<std::size_t>>(c, "k_list", {});
  }
  if (!ks.empty()) {
    for (std::size_t k : ks) {
      if (k < 1 || k > vocab_size) {
        throw UsageError("K = " + std::to_string(k) + " outside [1, " +
                         std::to_string(vocab_size) + "]");
      }
    }
  } else {
    for (std::size_t k : {5ul, 50ul, 500ul, 5000ul}) {
      if (k <= vocab_size) ks.push_back(k);
    }
  }
  ks.push_back(vocab_size);
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

int run_score(const ScoreArgs& a) {
  json c = load_config(a.config_path);
  if (a.model_path.empty() || a.words_path.empty()) {
    throw UsageError("score: --model and --words are required");
  }
  const bool log2 = a.log2 || cfg<bool>(c, "log_base2", false);
  fs::create_directories(a.out_dir);

  auto model = load_model(a.model_path);
  auto words = load_words_csv(a.words_path);
  auto streams = assign_spans(words, model->vocab());
  const auto k_list = resolve_k_list(c, a.k_list, model->vocab().size());
  auto scored = score_corpus(*model, streams, k_list);

  const double scale = log2 ? 1.0 / std::log(2.0) : 1.0;
  {
    std::ofstream out(fs::path(a.out_dir) / "scores.csv");
    write_scores_csv(out, scored, model->vocab(), scale);
  }
  {
    std::ofstream out(fs::path(a.out_dir) / "aligned_words.csv");
    write_aligned_words_csv(out, words);
  }
  const auto succ = successor_column(scored);
  const auto ent = entropy_column(scored, /*successor_rows_only=*/true);
  {
    std::ofstream out(fs::path(a.out_dir) / "scatter.csv");
    csv::write_row(out, {"successor_surprisal", "entropy"});
    for (std::size_t i = 0; i < succ.size(); ++i) {
      csv::write_row(out, {csv::format_double(succ[i] * scale),
                           csv::format_double(ent[i] * scale)});
    }
  }
  // Undefined when a column is constant (a unigram model's entropy is).
  std::optional<double> r;
  try {
    r = pearson_r(succ, ent);
  } catch (const NumericError&) {
  }

  json manifest;
  manifest["command"] = "score";
  manifest["config"] = {{"model", a.model_path},
                        {"words", a.words_path},
                        {"k_list", k_list},
                        {"log_base2", log2}};
  manifest["model_fingerprint"] = hex64(file_fingerprint(a.model_path));
  if (r) {
    manifest["pearson_r_successor_entropy"] = *r;
  } else {
    manifest["pearson_r_successor_entropy"] = nullptr;
  }
  manifest["tokens_scored"] = scored.total_tokens();
  manifest["outputs"] = {"scores.csv", "aligned_words.csv", "scatter.csv"};
  write_manifest(a.out_dir, manifest);
  std::cout << "scored " << scored.total_tokens()
            << " tokens; pearson r(successor surprisal, entropy) = "
            << (r ? std::to_string(*r) : std::string("undefined")) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string config_path;
  std::string scores_path;
  std::string aligned_path;
  std::string rts_path;
  std::string freq_path;
  std::string out_dir = "out";
  std::string partition;  // empty = config/default
  std::optional<std::uint64_t> seed;
  bool exclude_unk_words = false;
};

struct AnalysisInputs {
  std::vector<WordRecord> words;
  std::vector<WordRecord> included;
  std::vector<RTObservation> rts;
  ScoredCorpus scored;
  SentenceSplit split;
  std::string partition;
  PredictorOptions options;  // bounded_k_index varies per table build
  PredictorTable table;
  std::uint64_t seed = 0;

  PredictorTable build_table(std::optional<std::size_t> k_index) const {
    PredictorOptions opt = options;
    opt.split = partition == "all" ? nullptr : &split;
    opt.use_exploratory_partition = partition == "exploratory";
    opt.bounded_k_index = k_index;
    return build_predictor_table(included, rts, scored, opt);
  }
};

LmmSpec base_spec(const json& c) {
  LmmSpec spec;
  spec.fixed = {"sentence_position", "word_length", "unigram_frequency",
                "surprisal", "successor_surprisal", "entropy"};
  spec.random_intercepts = {"subject", "word"};
  spec.criterion = cfg<std::string>(c, "lmm.criterion", "REML") == "ML"
                       ? FitCriterion::kML
                       : FitCriterion::kREML;
  spec.covariance = cfg<std::string>(c, "lmm.covariance", "diagonal") == "full"
                        ? CovarianceStructure::kFull
                        : CovarianceStructure::kDiagonal;
  spec.max_iterations = cfg<std::size_t>(c, "lmm.max_iterations", 500);
  spec.tolerance = cfg<double>(c, "lmm.tolerance", 1e-8);
  return spec;
}

// By-subject random slopes: the configured list (or `fallback`), filtered
// to predictors that are still fixed effects of this spec. Dropping a fixed
// effect therefore drops its slope as well.
void apply_slopes(LmmSpec& spec, const json& c, const std::string& key,
                  const std::vector<std::string>& fallback) {
  std::vector<std::string> slopes = fallback;
  if (c.is_object() && c.contains("lmm") && c["lmm"].contains(key)) {
    const auto& v = c["lmm"][key];
    if (v.is_string() && v.get<std::string>() == "all") {
      slopes = spec.fixed;
    } else if (v.is_array()) {
      slopes = v.get<std::vector<std::string>>();
    }
  }
  spec.random_slopes.clear();
  for (const auto& s : slopes) {
    if (std::find(spec.fixed.begin(), spec.fixed.end(), s) != spec.fixed.end()) {
      spec.random_slopes.push_back({"subject", s});
    }
  }
}

AnalysisInputs gather_inputs(const json& c, const AnalyzeArgs& args,
                             std::optional<std::size_t> bounded_k_index) {
  const std::string& scores_path = args.scores_path;
  const std::string& aligned_path = args.aligned_path;
  const std::string& rts_path = args.rts_path;
  const std::string& freq_path = args.freq_path;
  const std::string& partition_flag = args.partition;
  const std::optional<std::uint64_t> seed_flag = args.seed;
  if (scores_path.empty() || aligned_path.empty() || rts_path.empty()) {
    throw UsageError("--scores, --words, and --rts are required");
  }
  AnalysisInputs in;
  {
    std::ifstream f(scores_path);
    if (!f) throw InputError("cannot open " + scores_path);
    in.scored = read_scores_csv(f, scores_path);
  }
  {
    std::ifstream f(aligned_path);
    if (!f) throw InputError("cannot open " + aligned_path);
    in.words = read_aligned_words_csv(f, aligned_path);
  }
  in.rts = load_rts_csv(rts_path);
  in.included = apply_exclusions(in.words);

  in.seed = seed_flag.value_or(cfg<std::uint64_t>(c, "seed", 1));
  in.partition = !partition_flag.empty()
                     ? partition_flag
                     : cfg<std::string>(c, "split.partition", "held_out");
  if (in.partition != "held_out" && in.partition != "exploratory" &&
      in.partition != "all") {
    throw UsageError("partition must be held_out, exploratory, or all");
  }

  std::vector<std::string> freq_tokens;
  if (!freq_path.empty()) {
    freq_tokens = read_text_tokens(freq_path);
  } else {
    for (const auto& w : in.words) freq_tokens.push_back(w.surface);
  }
  in.options.unigram = unigram_frequency(freq_tokens, in.included);
  in.options.exclude_all_unk_words =
      args.exclude_unk_words || cfg<bool>(c, "filters.exclude_all_unk", false);
  const double rt_min = cfg<double>(c, "filters.rt_min", -1.0);
  const double rt_max = cfg<double>(c, "filters.rt_max", -1.0);
  if (rt_min > 0.0) in.options.rt_min_ms = rt_min;
  if (rt_max > 0.0) in.options.rt_max_ms = rt_max;

  in.split = split_sentences(in.words,
                             cfg<double>(c, "split.fraction_exploratory", 1.0 / 3.0),
                             derive_seed(in.seed, "split"));
  in.table = in.build_table(bounded_k_index);
  return in;
}

json partition_record(const SentenceSplit& split) {
  json rec;
  auto dump = [](const std::set<std::pair<std::string, std::size_t>>& side) {
    json arr = json::array();
    for (const auto& [story, sent] : side) {
      arr.push_back({{"story_id", story}, {"sentence_index", sent}});
    }
    return arr;
  };
  rec["exploratory"] = dump(split.exploratory);
  rec["heldout"] = dump(split.heldout);
  return rec;
}

int run_analyze(const AnalyzeArgs& a) {
  json c = load_config(a.config_path);
  fs::create_directories(a.out_dir);
  auto in = gather_inputs(c, a, std::nullopt);

  LmmSpec full = base_spec(c);
  apply_slopes(full, c, "slopes", full.fixed);
  LmmSpec no_succ = full;
  no_succ.fixed.erase(std::remove(no_succ.fixed.begin(), no_succ.fixed.end(),
                                  std::string("successor_surprisal")),
                      no_succ.fixed.end());
  apply_slopes(no_succ, c, "slopes", no_succ.fixed);
  LmmSpec no_ent = full;
  no_ent.fixed.erase(std::remove(no_ent.fixed.begin(), no_ent.fixed.end(),
                                 std::string("entropy")),
                     no_ent.fixed.end());
  apply_slopes(no_ent, c, "slopes", no_ent.fixed);

  // Displayed fits under the configured criterion.
  auto fit_full = fit_lmm(in.table, full);
  auto fit_ns = fit_lmm(in.table, no_succ);
  auto fit_ne = fit_lmm(in.table, no_ent);

  // Fixed-effect comparisons always run on ML refits.
  LmmSpec full_ml = full, ns_ml = no_succ, ne_ml = no_ent;
  full_ml.criterion = ns_ml.criterion = ne_ml.criterion = FitCriterion::kML;
  auto fit_full_ml = fit_lmm(in.table, full_ml);
  auto fit_ns_ml = fit_lmm(in.table, ns_ml);
  auto fit_ne_ml = fit_lmm(in.table, ne_ml);
  auto lrt_succ = lrt(fit_full_ml, fit_ns_ml);
  auto lrt_ent = lrt(fit_full_ml, fit_ne_ml);

  auto dump_fit = [&](const std::string& name, const LmmFit& f) {
    std::ostringstream out;
    write_fit_report(out, f);
    write_file(fs::path(a.out_dir) / name, out.str());
  };
  dump_fit("fit_full.txt", fit_full);
  dump_fit("fit_no_successor.txt", fit_ns);
  dump_fit("fit_no_entropy.txt", fit_ne);
  {
    std::ofstream out(fs::path(a.out_dir) / "lrt.csv");
    out << "comparison,chi2,df,p\n";
    out << "successor_surprisal," << csv::format_double(lrt_succ.chi2) << ","
        << lrt_succ.df << "," << csv::format_double(lrt_succ.p) << "\n";
    out << "entropy," << csv::format_double(lrt_ent.chi2) << "," << lrt_ent.df
        << "," << csv::format_double(lrt_ent.p) << "\n";
  }
  {
    std::ofstream out(fs::path(a.out_dir) / "predictors.csv");
    write_predictor_csv(out, in.table);
  }

  const bool all_converged = fit_full.converged && fit_ns.converged &&
                             fit_ne.converged && fit_full_ml.converged &&
                             fit_ns_ml.converged && fit_ne_ml.converged;
  json manifest;
  manifest["command"] = "analyze";
  manifest["config"] = {{"scores", a.scores_path},
                        {"words", a.aligned_path},
                        {"rts", a.rts_path},
                        {"partition", in.partition},
                        {"seed", in.seed},
                        {"rows", in.table.rows()},
                        {"criterion",
                         full.criterion == FitCriterion::kML ? "ML" : "REML"}};
  manifest["model_fingerprint"] = hex64(in.scored.model_fingerprint);
  manifest["partition_record"] = partition_record(in.split);
  manifest["converged"] = all_converged;
  manifest["lrt"] = {{"successor_surprisal",
                      {{"chi2", lrt_succ.chi2}, {"df", lrt_succ.df}, {"p", lrt_succ.p}}},
                     {"entropy",
                      {{"chi2", lrt_ent.chi2}, {"df", lrt_ent.df}, {"p", lrt_ent.p}}}};
  manifest["outputs"] = {"fit_full.txt", "fit_no_successor.txt",
                         "fit_no_entropy.txt", "lrt.csv", "predictors.csv"};
  write_manifest(a.out_dir, manifest);

  std::ostringstream line1, line2;
  write_lrt_report(line1, "successor surprisal", lrt_succ);
  write_lrt_report(line2, "entropy", lrt_ent);
  std::cout << line1.str() << line2.str();
  if (!all_converged) {
    std::cerr << "warning: at least one fit did not converge\n";
    return kExitNumericWarning;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int run_ksweep(const AnalyzeArgs& a) {
  json c = load_config(a.config_path);
  fs::create_directories(a.out_dir);

  // Correlation table over the scored corpus (token level).
  auto inputs0 = gather_inputs(c, a, std::nullopt);
  const auto& scored = inputs0.scored;
  if (scored.k_list.empty()) {
    throw UsageError("ksweep: the scored corpus carries no bounded-entropy columns");
  }
  const auto succ = successor_column(scored);
  const auto total_ent = entropy_column(scored, true);
  std::ostringstream corr_csv;
  corr_csv << "k,r_successor_surprisal,r_total_entropy\n";
  for (std::size_t ki = 0; ki < scored.k_list.size(); ++ki) {
    const auto bounded = bounded_column(scored, ki, true);
    corr_csv << scored.k_list[ki] << ","
             << csv::format_double(pearson_r(bounded, succ)) << ","
             << csv::format_double(pearson_r(bounded, total_ent)) << "\n";
  }
  write_file(fs::path(a.out_dir) / "ksweep_correlations.csv", corr_csv.str());

  // Per-K regression: the full predictor set with the entropy column bound
  // to K; slopes restricted (successor surprisal + entropy) so all fits
  // converge comfortably.
  std::ostringstream coef_csv;
  coef_csv << "k,beta_entropy,se_entropy,t_entropy,beta_successor,"
              "se_successor,t_successor,converged\n";
  bool all_converged = true;
  for (std::size_t ki = 0; ki < scored.k_list.size(); ++ki) {
    auto table = inputs0.build_table(ki);
    LmmSpec spec = base_spec(c);
    apply_slopes(spec, c, "ksweep_slopes",
                 {"successor_surprisal", "entropy"});
    auto fit = fit_lmm(table, spec);
    all_converged = all_converged && fit.converged;
    const auto& h = fit.effect("entropy");
    const auto& s = fit.effect("successor_surprisal");
    coef_csv << scored.k_list[ki] << "," << csv::format_double(h.beta) << ","
             << csv::format_double(h.se) << "," << csv::format_double(h.t)
             << "," << csv::format_double(s.beta) << ","
             << csv::format_double(s.se) << "," << csv::format_double(s.t)
             << "," << (fit.converged ? "yes" : "no") << "\n";
  }
  write_file(fs::path(a.out_dir) / "ksweep_coefficients.csv", coef_csv.str());

  json manifest;
  manifest["command"] = "ksweep";
  manifest["config"] = {{"scores", a.scores_path},
                        {"words", a.aligned_path},
                        {"rts", a.rts_path},
                        {"partition", inputs0.partition},
                        {"seed", inputs0.seed},
                        {"k_list", scored.k_list}};
  manifest["model_fingerprint"] = hex64(scored.model_fingerprint);
  manifest["partition_record"] = partition_record(inputs0.split);
  manifest["converged"] = all_converged;
  manifest["outputs"] = {"ksweep_coefficients.csv", "ksweep_correlations.csv"};
  write_manifest(a.out_dir, manifest);
  std::cout << "ksweep over " << scored.k_list.size() << " K values written to "
            << a.out_dir << "\n";
  return all_converged ? kExitOk : kExitNumericWarning;
}

// ---------------------------------------------------------------------------

struct CorrelateArgs {
  std::string csv_path;
  std::string x_col;
  std::string y_col;
  std::string out_dir;
};

int run_correlate(const CorrelateArgs& a) {
  if (a.csv_path.empty() || a.x_col.empty() || a.y_col.empty()) {
    throw UsageError("correlate: --csv, --x, and --y are required");
  }
  auto table = csv::read_file(a.csv_path);
  const std::size_t cx = table.column(a.x_col);
  const std::size_t cy = table.column(a.y_col);
  std::vector<double> x, y;
  for (const auto& row : table.rows) {
    if (row[cx].empty() || row[cy].empty()) continue;
    x.push_back(std::stod(row[cx]));
    y.push_back(std::stod(row[cy]));
  }
  const double r = pearson_r(x, y);
  std::cout << "pearson_r(" << a.x_col << ", " << a.y_col << ") = " << r
            << "  (n = " << x.size() << ")\n";
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    json manifest;
    manifest["command"] = "correlate";
    manifest["config"] = {{"csv", a.csv_path}, {"x", a.x_col}, {"y", a.y_col}};
    manifest["pearson_r"] = r;
    manifest["n"] = x.size();
    write_manifest(a.out_dir, manifest);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surprisal / successor-surprisal / entropy reading-time pipeline"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a language model");
  train->add_option("--config", train_args.config_path, "JSON config file");
  train->add_option("--train", train_args.train_path, "training text file");
  train->add_option("--out", train_args.out_dir, "output directory");
  train->add_option("--model", train_args.kind, "model kind: ngram or lstm");
  train->add_option("--seed", train_args.seed, "master seed");
  train->add_option("--vocab-size", train_args.vocab_max, "max vocabulary size");
  train->add_option("--order", train_args.order, "n-gram order");
  train->add_option("--discount", train_args.discount, "KN discount in (0,1)");
  train->add_option("--epochs", train_args.epochs, "LSTM epochs");

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "score a words file with a model");
  score->add_option("--config", score_args.config_path, "JSON config file");
  score->add_option("--model", score_args.model_path, "model container");
  score->add_option("--words", score_args.words_path, "words CSV");
  score->add_option("--out", score_args.out_dir, "output directory");
  score->add_option("--k", score_args.k_list, "bounded-entropy K values");
  score->add_flag("--log2", score_args.log2, "emit bits instead of nats");

  AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand("analyze", "mixed-effects RT analysis");
  analyze->add_option("--config", analyze_args.config_path, "JSON config file");
  analyze->add_option("--scores", analyze_args.scores_path, "scores.csv from `score`");
  analyze->add_option("--words", analyze_args.aligned_path,
                      "aligned_words.csv from `score`");
  analyze->add_option("--rts", analyze_args.rts_path, "reading-time CSV");
  analyze->add_option("--freq-corpus", analyze_args.freq_path,
                      "text file for unigram frequencies");
  analyze->add_option("--out", analyze_args.out_dir, "output directory");
  analyze->add_option("--partition", analyze_args.partition,
                      "held_out, exploratory, or all");
  analyze->add_option("--seed", analyze_args.seed, "master seed");
  analyze->add_flag("--exclude-unk-words", analyze_args.exclude_unk_words,
                    "drop words whose every token is UNK");

  AnalyzeArgs ksweep_args;
  auto* ksweep = app.add_subcommand("ksweep", "bounded-entropy K sweep");
  ksweep->add_option("--config", ksweep_args.config_path, "JSON config file");
  ksweep->add_option("--scores", ksweep_args.scores_path, "scores.csv from `score`");
  ksweep->add_option("--words", ksweep_args.aligned_path,
                     "aligned_words.csv from `score`");
  ksweep->add_option("--rts", ksweep_args.rts_path, "reading-time CSV");
  ksweep->add_option("--freq-corpus", ksweep_args.freq_path,
                     "text file for unigram frequencies");
  ksweep->add_option("--out", ksweep_args.out_dir, "output directory");
  ksweep->add_option("--partition", ksweep_args.partition,
                     "held_out, exploratory, or all");
  ksweep->add_option("--seed", ksweep_args.seed, "master seed");
  ksweep->add_flag("--exclude-unk-words", ksweep_args.exclude_unk_words,
                   "drop words whose every token is UNK");

  CorrelateArgs corr_args;
  auto* correlate = app.add_subcommand("correlate", "Pearson r of two CSV columns");
  correlate->add_option("--csv", corr_args.csv_path, "input CSV");
  correlate->add_option("--x", corr_args.x_col, "x column name");
  correlate->add_option("--y", corr_args.y_col, "y column name");
  correlate->add_option("--out", corr_args.out_dir, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : kExitUsage;
  }

  try {
    if (train->parsed()) return run_train(train_args);
    if (score->parsed()) return run_score(score_args);
    if (analyze->parsed()) return run_analyze(analyze_args);
    if (ksweep->parsed()) return run_ksweep(ksweep_args);
    if (correlate->parsed()) return run_correlate(corr_args);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumericWarning;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
