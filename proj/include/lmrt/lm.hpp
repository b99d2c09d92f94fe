#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmrt/common.hpp"
#include "lmrt/vocab.hpp"

namespace lmrt {

// Incremental scoring state. Value-like and cheap to copy: an n-gram model
// keeps a short history window, a recurrent model keeps its activations.
// `model_tag` ties the state to the model that produced it.
struct ContextState {
  std::uint64_t model_tag = 0;
  std::vector<std::int32_t> window;   // n-gram history, most recent last
  std::vector<double> activations;    // recurrent hidden/cell values, flat
};

// The conditional-language-model contract. Models are immutable once
// trained; any number of threads may score disjoint streams concurrently,
// each carrying its own ContextState.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Vocabulary& vocab() const = 0;

  // Fresh state conditioning on nothing (story start).
  virtual ContextState initial_state() const = 0;

  // Fills `probs` (resized to vocab size) with P(w | state's history).
  // Every implementation returns an exactly normalized distribution.
  virtual void next_distribution(const ContextState& state,
                                 std::vector<double>& probs) const = 0;

  // P(token | state's history) alone, without materializing the vector.
  virtual double token_probability(const ContextState& state,
                                   std::int32_t token) const = 0;

  // New state conditioning on the extended history; `state` is unchanged.
  virtual ContextState advance(const ContextState& state,
                               std::int32_t token) const = 0;

  // Stable content hash; also used as the state tag.
  virtual std::uint64_t fingerprint() const = 0;

  virtual std::string kind() const = 0;

 protected:
  void check_state(const ContextState& state) const {
    if (state.model_tag != fingerprint()) {
      throw UsageError("context state does not belong to this model");
    }
  }
  void check_token(std::int32_t token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= vocab().size()) {
      throw InputError("token id " + std::to_string(token) +
                       " out of range for vocabulary of size " +
                       std::to_string(vocab().size()));
    }
  }
};

// Throws NumericError unless probs is a valid distribution: entries in
// [0, 1], finite, summing to 1 within `tol`.
void validate_distribution(const std::vector<double>& probs,
                           double tol = 1e-6);

// Draws `length` tokens sequentially from the model's next_distribution,
// advancing the state after each draw. Identical seeds give identical
// streams.
TokenStream sample_stream(const LanguageModel& model, std::size_t length,
                          std::uint64_t seed,
                          const std::string& story_id = "sample");

}  // namespace lmrt
