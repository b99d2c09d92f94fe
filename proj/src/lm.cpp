#include "lmrt/lm.hpp"

#include <cmath>

#include "lmrt/kernels.hpp"
#include "lmrt/rng.hpp"

namespace lmrt {

void validate_distribution(const std::vector<double>& probs, double tol) {
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      throw NumericError("distribution entry outside [0, 1]");
    }
  }
  const double total = kernels::par::sum(probs);
  if (std::abs(total - 1.0) > tol) {
    throw NumericError("distribution sums to " + std::to_string(total) +
                       ", expected 1 within " + std::to_string(tol));
  }
}

TokenStream sample_stream(const LanguageModel& model, std::size_t length,
                          std::uint64_t seed, const std::string& story_id) {
  if (length < 1) throw InputError("sample_stream: length must be >= 1");
  Rng rng(seed);
  TokenStream out;
  out.story_id = story_id;
  out.ids.reserve(length);
  ContextState state = model.initial_state();
  std::vector<double> probs;
  for (std::size_t i = 0; i < length; ++i) {
    model.next_distribution(state, probs);
    const double u = rng.uniform();
    double acc = 0.0;
    std::int32_t tok = static_cast<std::int32_t>(probs.size()) - 1;
    for (std::size_t w = 0; w < probs.size(); ++w) {
      acc += probs[w];
      if (u < acc) {
        tok = static_cast<std::int32_t>(w);
        break;
      }
    }
    out.ids.push_back(tok);
    state = model.advance(state, tok);
  }
  return out;
}

}  // namespace lmrt
