// Timing comparison of the serial reference kernels against the OpenMP
// versions, over LM-shaped workloads (vocabulary-sized reductions, top-K
// selection, LSTM-sized matrix products, full corpus scoring).
//
//   bench_kernels [--quick]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "lmrt/kernels.hpp"
#include "lmrt/measures.hpp"
#include "lmrt/ngram.hpp"
#include "lmrt/rng.hpp"

using namespace lmrt;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename Fn>
double time_once(Fn&& fn) {
  const double t0 = now_seconds();
  fn();
  return now_seconds() - t0;
}

// Interleaves the two variants so clock drift hits both equally.
template <typename FnA, typename FnB>
std::pair<double, double> time_pair(int reps, FnA&& a, FnB&& b) {
  double best_a = 1e300, best_b = 1e300;
  for (int r = 0; r < reps; ++r) {
    best_a = std::min(best_a, time_once(a));
    best_b = std::min(best_b, time_once(b));
  }
  return {best_a, best_b};
}

void report(const char* name, double serial_s, double par_s) {
  std::printf("%-28s serial %10.3f ms   openmp %10.3f ms   speedup %5.2fx\n",
              name, serial_s * 1e3, par_s * 1e3, serial_s / par_s);
}

std::vector<double> random_dist(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = -std::log(1.0 - rng.uniform());
    s += x;
  }
  for (auto& x : v) x /= s;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::strcmp(argv[1], "--quick") == 0;
  const std::size_t V = quick ? 20000 : 50000;
  const int positions = quick ? 200 : 2000;
  const int reps = quick ? 2 : 5;

  std::printf("threads: %d, vocab: %zu, positions: %d\n\n",
              kernels::max_threads(), V, positions);

  // Entropy over a vocabulary-sized distribution, per scoring position.
  {
    auto p = random_dist(V, 1);
    volatile double sink = 0.0;
    auto [ts, tp] = time_pair(
        reps,
        [&] {
          double acc = 0.0;
          for (int i = 0; i < positions; ++i) acc += kernels::serial::entropy(p);
          sink = acc;
        },
        [&] {
          double acc = 0.0;
          for (int i = 0; i < positions; ++i) acc += kernels::par::entropy(p);
          sink = acc;
        });
    report("entropy (V per position)", ts, tp);
  }

  // Bounded-entropy sweep: top-K selection plus banded sums.
  {
    auto p = random_dist(V, 2);
    std::vector<std::size_t> ks{5, 50, 500, 5000, V};
    std::vector<double> out(ks.size());
    auto [ts, tp] = time_pair(
        reps,
        [&] {
          for (int i = 0; i < positions / 4; ++i) {
            auto idx = kernels::serial::topk_indices(p, 5000);
            out[0] = static_cast<double>(idx.size());
          }
        },
        [&] {
          for (int i = 0; i < positions / 4; ++i) {
            auto idx = kernels::par::topk_indices(p, 5000);
            out[0] = static_cast<double>(idx.size());
          }
        });
    report("top-5000 selection", ts, tp);

    double tsweep = 1e300;
    for (int r = 0; r < reps; ++r) {
      tsweep = std::min(tsweep, time_once([&] {
        for (int i = 0; i < positions / 4; ++i) bounded_entropy_sweep(p, ks, out);
      }));
    }
    std::printf("%-28s %10.3f ms per %d positions (K sweep %zu values)\n\n",
                "bounded_entropy_sweep", tsweep * 1e3, positions / 4, ks.size());
  }

  // LSTM-shaped matrix products: gates (4H x in) * (in x B).
  {
    const std::size_t H = 256, in = 256, B = 64;
    Rng rng(3);
    std::vector<double> a(4 * H * in), b(in * B), c(4 * H * B);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    const int iters = quick ? 40 : 200;
    auto [ts, tp] = time_pair(
        reps,
        [&] {
          for (int i = 0; i < iters; ++i) {
            kernels::serial::matmul(a.data(), b.data(), c.data(), 4 * H, in, B,
                                    false);
          }
        },
        [&] {
          for (int i = 0; i < iters; ++i) {
            kernels::par::matmul(a.data(), b.data(), c.data(), 4 * H, in, B,
                                 false);
          }
        });
    report("lstm gate matmul", ts, tp);
  }

  // Softmax rows: output layer over a window of batch lanes.
  {
    const std::size_t rows = 128;
    Rng rng(4);
    std::vector<double> logits(rows * V);
    for (auto& x : logits) x = rng.uniform(-8, 8);
    auto l1 = logits, l2 = logits;
    auto [ts, tp] = time_pair(
        reps,
        [&] {
          l1 = logits;
          kernels::serial::softmax_rows(l1.data(), rows, V);
        },
        [&] {
          l2 = logits;
          kernels::par::softmax_rows(l2.data(), rows, V);
        });
    report("softmax rows (output layer)", ts, tp);
  }

  // Whole-pipeline scoring: KN model over parallel streams. The parallel
  // path is the library default; the serial baseline runs one stream at a
  // time with one thread.
  {
    Rng rng(5);
    std::vector<std::string> words;
    const std::size_t n_train = quick ? 20000 : 60000;
    for (std::size_t i = 0; i < n_train; ++i) {
      words.push_back("w" + std::to_string(rng.uniform_int(2000)));
    }
    auto vocab = Vocabulary::build(words, 2000);
    TokenStream train{"t", vocab.encode(words), {0}};
    auto model = KneserNeyModel::train({train}, 3, 0.75, vocab);
    std::vector<TokenStream> streams;
    for (int s = 0; s < 8; ++s) {
      streams.push_back(sample_stream(model, quick ? 300 : 1000,
                                      100 + static_cast<std::uint64_t>(s)));
    }
    std::vector<std::size_t> ks{5, 50, 500, vocab.size()};
    const double t0 = now_seconds();
    auto scored = score_corpus(model, streams, ks);
    const double t1 = now_seconds();
    std::printf("\n%-28s %10.3f ms (%zu tokens, %d streams, %d threads)\n",
                "score_corpus", (t1 - t0) * 1e3, scored.total_tokens(), 8,
                kernels::max_threads());
  }
  return 0;
}
