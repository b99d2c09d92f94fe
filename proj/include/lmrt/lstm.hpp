#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lmrt/lm.hpp"
#include "lmrt/vocab.hpp"

namespace lmrt {

struct LstmConfig {
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t num_layers = 2;
  double dropout = 0.0;       // on embeddings and between layers only
  std::size_t batch_size = 16;
  std::size_t bptt_len = 32;
  std::size_t epochs = 10;
  double learning_rate = 1.0;  // plain SGD with gradient-norm clipping
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  std::size_t patience = 5;    // early-stopping patience, in epochs
  double lr_decay = 0.5;       // applied on a validation plateau

  void validate() const;  // throws InputError on out-of-range fields
};

// Named view into the flat parameter buffer; bias tensors have cols == 1.
struct TensorView {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct TrainLogEntry {
  std::size_t epoch = 0;
  double train_ce = 0.0;  // nats per token
  double valid_ce = 0.0;  // NaN when no validation set
  double lr = 0.0;
};

// A fixed training window: token matrices in [step][lane] row-major order.
struct Minibatch {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::vector<std::int32_t> inputs;   // steps * lanes
  std::vector<std::int32_t> targets;  // steps * lanes
};

// Stacked-LSTM language model: embedding, num_layers standard LSTM cells
// (input/forget/output gates, tanh candidate), softmax output. Trained by
// truncated BPTT; implements the incremental-scoring contract so the same
// measure code runs on it and on the n-gram model.
class LstmModel final : public LanguageModel {
 public:
  LstmModel(LstmConfig config, Vocabulary vocab);

  static LstmModel from_parameters(LstmConfig config, Vocabulary vocab,
                                   std::vector<double> params);

  // Truncated-BPTT training with gradient clipping; early stopping on
  // validation cross-entropy restores the best checkpoint. An empty
  // validation list disables early stopping and LR decay.
  static LstmModel train(const std::vector<TokenStream>& corpus,
                         const LstmConfig& config,
                         const std::vector<TokenStream>& validation,
                         const Vocabulary& vocab,
                         std::vector<TrainLogEntry>* log = nullptr);

  // LanguageModel contract.
  const Vocabulary& vocab() const override { return vocab_; }
  ContextState initial_state() const override;
  void next_distribution(const ContextState& state,
                         std::vector<double>& probs) const override;
  double token_probability(const ContextState& state,
                           std::int32_t token) const override;
  ContextState advance(const ContextState& state,
                       std::int32_t token) const override;
  std::uint64_t fingerprint() const override { return fingerprint_; }
  std::string kind() const override { return "lstm"; }

  // One recurrent step plus the output distribution.
  std::pair<ContextState, std::vector<double>> forward_step(
      const ContextState& state, std::int32_t token) const;

  // Mean cross-entropy (nats/token) of the model on the given streams.
  double cross_entropy(const std::vector<TokenStream>& streams) const;

  // Compares the analytic BPTT gradient against central finite differences
  // on `probes` randomly chosen parameters; returns the max relative error.
  // `fault_index >= 0` negates that analytic gradient entry first (self-test
  // hook for verifying that the check actually detects corruption).
  double gradient_check(const Minibatch& batch, double epsilon,
                        std::size_t probes = 64, std::uint64_t probe_seed = 7,
                        std::ptrdiff_t fault_index = -1) const;

  const LstmConfig& config() const { return config_; }
  const std::vector<double>& parameters() const { return params_; }
  const std::vector<TensorView>& tensors() const { return tensors_; }
  // Mutable access for hand-set weights and container loading; call
  // refresh_fingerprint() afterwards.
  std::vector<double>& mutable_parameters() { return params_; }
  void refresh_fingerprint();

  const TensorView& tensor(const std::string& name) const;
  double* tensor_data(const std::string& name);

 private:
  struct Workspace;

  void init_parameters();
  void build_layout();
  std::size_t layer_input_dim(std::size_t layer) const {
    return layer == 0 ? config_.embed_dim : config_.hidden_dim;
  }
  // Forward/backward over one window; returns mean loss over targets.
  // Accumulates into `grad` when non-null. Dropout masks are drawn from
  // `mask_rng` when dropout > 0 and mask_rng != nullptr.
  double window_loss_and_grad(const Minibatch& batch,
                              std::vector<double>* initial_state,
                              std::vector<double>* grad, class Rng* mask_rng,
                              Workspace& ws) const;

  LstmConfig config_;
  Vocabulary vocab_;
  std::vector<double> params_;
  std::vector<TensorView> tensors_;
  std::uint64_t fingerprint_ = 0;
};

}  // namespace lmrt
