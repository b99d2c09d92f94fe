#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "lmrt/common.hpp"
#include "lmrt/model_io.hpp"
#include "lmrt/rng.hpp"
#include "support/toy_models.hpp"

using namespace lmrt;

namespace {

struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name)
      : path("/tmp/lmrt_io_" + name) {}
  ~TempPath() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("ngram container round trip gives identical distributions") {
  Rng rng(8);
  std::vector<std::string> words;
  for (int i = 0; i < 1500; ++i) {
    words.push_back("w" + std::to_string(rng.uniform_int(25)));
  }
  auto vocab = Vocabulary::build(words, 20);
  TokenStream s{"t", vocab.encode(words), {0}};
  auto model = KneserNeyModel::train({s}, 3, 0.7, vocab);

  TempPath file("ngram.lmrt");
  save_model(file.path, model);
  auto loaded = load_model(file.path);
  REQUIRE(loaded->kind() == "ngram");
  CHECK(loaded->fingerprint() == model.fingerprint());
  CHECK(loaded->vocab().size() == vocab.size());

  auto st1 = model.initial_state();
  auto st2 = loaded->initial_state();
  std::vector<double> p1, p2;
  for (std::int32_t tok : {3, 1, 4, 1}) {
    model.next_distribution(st1, p1);
    loaded->next_distribution(st2, p2);
    CHECK(p1 == p2);
    st1 = model.advance(st1, tok);
    st2 = loaded->advance(st2, tok);
  }
}

TEST_CASE("lstm container round trips parameters bit-exactly") {
  auto vocab = testsupport::small_vocab(6);
  LstmConfig c;
  c.embed_dim = 5;
  c.hidden_dim = 7;
  c.num_layers = 2;
  c.seed = 3;
  LstmModel model(c, vocab);

  TempPath file("lstm.lmrt");
  save_model(file.path, model);
  auto loaded = load_model(file.path);
  REQUIRE(loaded->kind() == "lstm");
  CHECK(loaded->fingerprint() == model.fingerprint());

  auto* lstm = dynamic_cast<LstmModel*>(loaded.get());
  REQUIRE(lstm != nullptr);
  CHECK(lstm->parameters() == model.parameters());
  CHECK(lstm->config().hidden_dim == c.hidden_dim);

  auto st1 = model.initial_state();
  auto st2 = loaded->initial_state();
  std::vector<double> p1, p2;
  model.next_distribution(st1, p1);
  loaded->next_distribution(st2, p2);
  CHECK(p1 == p2);
}

TEST_CASE("container rejects garbage and missing files") {
  CHECK_THROWS_AS(load_model("/tmp/lmrt_io_nonexistent.bin"), InputError);
  TempPath file("garbage.lmrt");
  {
    std::ofstream out(file.path, std::ios::binary);
    out << "this is not a model container at all";
  }
  CHECK_THROWS_AS(load_model(file.path), ParseError);
}

TEST_CASE("file fingerprint changes when content changes") {
  TempPath a("fp_a"), b("fp_b");
  {
    std::ofstream oa(a.path);
    oa << "hello";
    std::ofstream ob(b.path);
    ob << "hellp";
  }
  CHECK(file_fingerprint(a.path) != file_fingerprint(b.path));
  CHECK(file_fingerprint(a.path) == file_fingerprint(a.path));
}
