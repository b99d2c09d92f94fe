#include <doctest.h>

#include <cmath>
#include <vector>

#include "lmrt/common.hpp"
#include "lmrt/lstm.hpp"
#include "lmrt/rng.hpp"
#include "support/toy_models.hpp"

using namespace lmrt;

namespace {

LstmConfig tiny_config() {
  LstmConfig c;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.num_layers = 2;
  c.dropout = 0.0;
  c.batch_size = 2;
  c.bptt_len = 5;
  c.seed = 11;
  return c;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TokenStream random_stream(const Vocabulary& vocab, std::size_t n,
                          std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  TokenStream s;
  s.story_id = id;
  for (std::size_t i = 0; i < n; ++i) {
    s.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
  return s;
}

}  // namespace

TEST_CASE("zero weights give a uniform distribution") {
  auto vocab = testsupport::small_vocab(4);
  LstmModel m(tiny_config(), vocab);
  std::fill(m.mutable_parameters().begin(), m.mutable_parameters().end(), 0.0);
  m.refresh_fingerprint();
  auto [state, probs] = m.forward_step(m.initial_state(), 1);
  for (double p : probs) {
    CHECK(p == doctest::Approx(1.0 / vocab.size()).epsilon(1e-12));
  }
}

TEST_CASE("forward step matches hand-evaluated LSTM gate equations") {
  // One layer, one hidden unit, two-entry vocabulary, hand-set weights.
  std::vector<std::string> entries{kUnkToken, "a"};
  auto vocab = Vocabulary::from_entries(entries);
  LstmConfig c;
  c.embed_dim = 1;
  c.hidden_dim = 1;
  c.num_layers = 1;
  c.batch_size = 1;
  c.bptt_len = 2;
  c.seed = 1;
  LstmModel m(c, vocab);

  const double e0 = 0.3, e1 = -0.6;
  const double wx_i = 0.5, wx_f = -0.4, wx_g = 0.9, wx_o = 0.2;
  const double wh_i = -0.3, wh_f = 0.7, wh_g = -0.8, wh_o = 0.1;
  const double b_i = 0.05, b_f = 1.0, b_g = -0.02, b_o = 0.4;
  const double wo0 = 1.2, wo1 = -0.7, bo0 = 0.1, bo1 = -0.2;

  auto& p = m.mutable_parameters();
  std::fill(p.begin(), p.end(), 0.0);
  double* emb = m.tensor_data("embedding");
  emb[0] = e0;
  emb[1] = e1;
  double* wx = m.tensor_data("lstm0.wx");
  wx[0] = wx_i; wx[1] = wx_f; wx[2] = wx_g; wx[3] = wx_o;
  double* wh = m.tensor_data("lstm0.wh");
  wh[0] = wh_i; wh[1] = wh_f; wh[2] = wh_g; wh[3] = wh_o;
  double* b = m.tensor_data("lstm0.bias");
  b[0] = b_i; b[1] = b_f; b[2] = b_g; b[3] = b_o;
  double* wo = m.tensor_data("output.weight");
  wo[0] = wo0; wo[1] = wo1;
  double* bo = m.tensor_data("output.bias");
  bo[0] = bo0; bo[1] = bo1;
  m.refresh_fingerprint();

  // Hand rollout for tokens [1, 0].
  double h = 0.0, cc = 0.0;
  std::vector<double> want;
  for (std::int32_t tok : {1, 0}) {
    const double x = tok == 0 ? e0 : e1;
    const double gi = sigmoid(wx_i * x + wh_i * h + b_i);
    const double gf = sigmoid(wx_f * x + wh_f * h + b_f);
    const double gg = std::tanh(wx_g * x + wh_g * h + b_g);
    const double go = sigmoid(wx_o * x + wh_o * h + b_o);
    cc = gf * cc + gi * gg;
    h = go * std::tanh(cc);
    const double l0 = wo0 * h + bo0, l1 = wo1 * h + bo1;
    const double z = std::exp(l0) + std::exp(l1);
    want = {std::exp(l0) / z, std::exp(l1) / z};
  }

  auto st = m.initial_state();
  std::vector<double> probs;
  for (std::int32_t tok : {1, 0}) {
    auto [next, dist] = m.forward_step(st, tok);
    st = next;
    probs = dist;
  }
  CHECK(probs[0] == doctest::Approx(want[0]).epsilon(1e-13));
  CHECK(probs[1] == doctest::Approx(want[1]).epsilon(1e-13));
  CHECK(st.activations[0] == doctest::Approx(h).epsilon(1e-13));
  CHECK(st.activations[1] == doctest::Approx(cc).epsilon(1e-13));
}

TEST_CASE("advance is deterministic and leaves inputs untouched") {
  auto vocab = testsupport::small_vocab(5);
  LstmModel m(tiny_config(), vocab);
  auto s0 = m.initial_state();
  auto a = m.advance(s0, 2);
  auto b = m.advance(s0, 2);
  CHECK(a.activations == b.activations);
  for (double v : s0.activations) CHECK(v == 0.0);
  CHECK_THROWS_AS(m.advance(s0, 99), InputError);

  LstmModel other(tiny_config(), testsupport::small_vocab(5));
  // Same config and vocab but the instances share parameters, so states are
  // interchangeable only when fingerprints agree.
  CHECK(other.fingerprint() == m.fingerprint());
  std::vector<double>& p = other.mutable_parameters();
  p[0] += 1.0;
  other.refresh_fingerprint();
  CHECK_THROWS_AS(other.advance(s0, 1), UsageError);
}

TEST_CASE("state after t tokens equals the explicit recurrent rollout") {
  auto vocab = testsupport::small_vocab(6);
  LstmConfig c = tiny_config();
  LstmModel m(c, vocab);
  const std::vector<std::int32_t> tokens{1, 4, 2, 2, 6, 3, 0, 5};

  // Oracle: direct dense rollout of the gate equations over both layers.
  const std::size_t H = c.hidden_dim, D = c.embed_dim, L = c.num_layers;
  std::vector<std::vector<double>> hs(L, std::vector<double>(H, 0.0));
  std::vector<std::vector<double>> cs(L, std::vector<double>(H, 0.0));
  const double* emb = m.parameters().data() + m.tensor("embedding").offset;
  for (std::int32_t tok : tokens) {
    std::vector<double> x(emb + static_cast<std::size_t>(tok) * D,
                          emb + static_cast<std::size_t>(tok + 1) * D);
    for (std::size_t l = 0; l < L; ++l) {
      const std::string pre = "lstm" + std::to_string(l) + ".";
      const auto& tw = m.tensor(pre + "wx");
      const double* wx = m.parameters().data() + tw.offset;
      const double* wh = m.parameters().data() + m.tensor(pre + "wh").offset;
      const double* bias = m.parameters().data() + m.tensor(pre + "bias").offset;
      const std::size_t in = tw.cols;
      std::vector<double> a(4 * H, 0.0);
      for (std::size_t r = 0; r < 4 * H; ++r) {
        double s = bias[r];
        for (std::size_t k = 0; k < in; ++k) s += wx[r * in + k] * x[k];
        for (std::size_t k = 0; k < H; ++k) s += wh[r * H + k] * hs[l][k];
        a[r] = s;
      }
      for (std::size_t j = 0; j < H; ++j) {
        const double gi = sigmoid(a[j]);
        const double gf = sigmoid(a[H + j]);
        const double gg = std::tanh(a[2 * H + j]);
        const double go = sigmoid(a[3 * H + j]);
        cs[l][j] = gf * cs[l][j] + gi * gg;
        hs[l][j] = go * std::tanh(cs[l][j]);
      }
      x = hs[l];
    }
  }

  auto st = m.initial_state();
  for (std::int32_t tok : tokens) st = m.advance(st, tok);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < H; ++j) {
      CHECK(st.activations[2 * l * H + j] ==
            doctest::Approx(hs[l][j]).epsilon(1e-12));
      CHECK(st.activations[(2 * l + 1) * H + j] ==
            doctest::Approx(cs[l][j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("emitted distributions sum to 1 and stay strictly positive") {
  auto vocab = testsupport::small_vocab(9);
  LstmModel m(tiny_config(), vocab);
  auto st = m.initial_state();
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> probs;
    m.next_distribution(st, probs);
    double total = 0.0;
    for (double p : probs) {
      CHECK(p > 0.0);
      total += p;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    st = m.advance(st, static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
}

TEST_CASE("gradient check: analytic BPTT matches finite differences") {
  auto vocab = testsupport::small_vocab(7);
  LstmModel m(tiny_config(), vocab);
  Minibatch mb;
  mb.steps = 5;
  mb.lanes = 2;
  Rng rng(21);
  for (std::size_t i = 0; i < mb.steps * mb.lanes; ++i) {
    mb.inputs.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
    mb.targets.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
  const double err = m.gradient_check(mb, 1e-5, 120, 13);
  CHECK(err < 1e-4);

  // A corrupted gradient must be caught. The output bias of a target token
  // is guaranteed to carry a healthy gradient.
  const std::size_t fault =
      m.tensor("output.bias").offset + static_cast<std::size_t>(mb.targets[0]);
  const double bad = m.gradient_check(mb, 1e-5, 120, 13,
                                      static_cast<std::ptrdiff_t>(fault));
  CHECK(bad > 1e-1);

  Minibatch empty;
  CHECK_THROWS_AS(m.gradient_check(empty, 1e-5), InputError);
  CHECK_THROWS_AS(m.gradient_check(mb, 1e-2), InputError);
}

TEST_CASE("gradient check passes with dropout active") {
  auto vocab = testsupport::small_vocab(7);
  LstmConfig c = tiny_config();
  c.dropout = 0.3;
  LstmModel m(c, vocab);
  Minibatch mb;
  mb.steps = 4;
  mb.lanes = 2;
  Rng rng(22);
  for (std::size_t i = 0; i < mb.steps * mb.lanes; ++i) {
    mb.inputs.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
    mb.targets.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
  CHECK(m.gradient_check(mb, 1e-5, 80, 3) < 1e-4);
}

TEST_CASE("learning rate zero leaves parameters unchanged") {
  auto vocab = testsupport::small_vocab(6);
  LstmConfig c = tiny_config();
  c.learning_rate = 0.0;
  c.epochs = 2;
  auto stream = random_stream(vocab, 60, 31, "t");
  LstmModel before(c, vocab);
  auto trained = LstmModel::train({stream}, c, {}, vocab);
  CHECK(trained.parameters() == before.parameters());
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto vocab = testsupport::small_vocab(6);
  LstmConfig c = tiny_config();
  c.epochs = 3;
  c.learning_rate = 0.5;
  auto stream = random_stream(vocab, 80, 77, "t");
  auto m1 = LstmModel::train({stream}, c, {}, vocab);
  auto m2 = LstmModel::train({stream}, c, {}, vocab);
  CHECK(m1.parameters() == m2.parameters());
}

TEST_CASE("overfit: training cross-entropy falls below 0.1 nats/token") {
  // A deterministic 200-token corpus (a fixed 20-token cycle repeated ten
  // times); the model can represent it exactly, so it must memorize it.
  auto vocab = testsupport::small_vocab(8);
  TokenStream stream;
  stream.story_id = "memorize";
  Rng rng(123);
  std::vector<std::int32_t> pattern;
  for (int i = 0; i < 20; ++i) {
    pattern.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab.size())));
  }
  for (int rep = 0; rep < 10; ++rep) {
    stream.ids.insert(stream.ids.end(), pattern.begin(), pattern.end());
  }
  LstmConfig c;
  c.embed_dim = 16;
  c.hidden_dim = 48;
  c.num_layers = 1;
  c.dropout = 0.0;
  c.batch_size = 4;
  c.bptt_len = 25;
  c.epochs = 300;
  c.learning_rate = 1.2;
  c.grad_clip = 5.0;
  c.seed = 7;
  std::vector<TrainLogEntry> log;
  auto m = LstmModel::train({stream}, c, {}, vocab, &log);
  REQUIRE(!log.empty());
  CHECK(log.back().train_ce < 0.1);

  // Monotone decrease after the first epoch, within a tolerance of one
  // non-improving epoch.
  std::size_t violations = 0;
  for (std::size_t i = 2; i < log.size(); ++i) {
    if (log[i].train_ce > log[i - 1].train_ce + 1e-9) ++violations;
  }
  CHECK(violations <= 1);
}

TEST_CASE("early stopping halts on a rising validation loss and restores the best checkpoint") {
  auto vocab = testsupport::small_vocab(8);
  auto train_stream = random_stream(vocab, 150, 41, "train");
  auto valid_stream = random_stream(vocab, 60, 99, "valid");
  LstmConfig c;
  c.embed_dim = 8;
  c.hidden_dim = 24;
  c.num_layers = 1;
  c.batch_size = 2;
  c.bptt_len = 10;
  c.epochs = 200;
  c.learning_rate = 1.0;
  c.seed = 9;
  c.patience = 3;
  std::vector<TrainLogEntry> log;
  auto m = LstmModel::train({train_stream}, c, {valid_stream}, vocab, &log);
  CHECK(log.size() < c.epochs);  // halted early

  double best = log.front().valid_ce;
  for (const auto& e : log) best = std::min(best, e.valid_ce);
  CHECK(m.cross_entropy({valid_stream}) == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("training rejects invalid configs and tiny corpora") {
  auto vocab = testsupport::small_vocab(4);
  LstmConfig c = tiny_config();
  c.dropout = 1.0;
  auto stream = random_stream(vocab, 50, 1, "t");
  CHECK_THROWS_AS(LstmModel::train({stream}, c, {}, vocab), InputError);
  c = tiny_config();
  c.batch_size = 64;
  CHECK_THROWS_AS(LstmModel::train({stream}, c, {}, vocab), InputError);
}
