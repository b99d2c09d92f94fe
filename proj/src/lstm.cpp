#include "lmrt/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "lmrt/common.hpp"
#include "lmrt/kernels.hpp"
#include "lmrt/rng.hpp"

namespace lmrt {

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t hash_doubles(std::uint64_t h, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &x[i], sizeof(bits));
    h = detail::splitmix64(h ^ bits);
  }
  return h;
}

}  // namespace

void LstmConfig::validate() const {
  if (embed_dim < 1 || hidden_dim < 1 || num_layers < 1) {
    throw InputError("lstm config: dimensions must be >= 1");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw InputError("lstm config: dropout must be in [0, 1)");
  }
  if (batch_size < 1 || bptt_len < 1) {
    throw InputError("lstm config: batch_size and bptt_len must be >= 1");
  }
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InputError("lstm config: learning rate must be finite and >= 0");
  }
  if (!(grad_clip > 0.0)) {
    throw InputError("lstm config: grad_clip must be > 0");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
    throw InputError("lstm config: lr_decay must be in (0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Construction and parameter layout

LstmModel::LstmModel(LstmConfig config, Vocabulary vocab)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  build_layout();
  init_parameters();
  refresh_fingerprint();
}

LstmModel LstmModel::from_parameters(LstmConfig config, Vocabulary vocab,
                                     std::vector<double> params) {
  LstmModel m(config, std::move(vocab));
  if (params.size() != m.params_.size()) {
    throw InputError("lstm parameters: expected " +
                     std::to_string(m.params_.size()) + " values, got " +
                     std::to_string(params.size()));
  }
  m.params_ = std::move(params);
  m.refresh_fingerprint();
  return m;
}

void LstmModel::build_layout() {
  const std::size_t V = vocab_.size();
  const std::size_t D = config_.embed_dim;
  const std::size_t H = config_.hidden_dim;
  std::size_t off = 0;
  auto add = [&](const std::string& name, std::size_t r, std::size_t c) {
    tensors_.push_back({name, off, r, c});
    off += r * c;
  };
  add("embedding", V, D);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "lstm" + std::to_string(l) + ".";
    add(p + "wx", 4 * H, layer_input_dim(l));
    add(p + "wh", 4 * H, H);
    add(p + "bias", 4 * H, 1);
  }
  add("output.weight", V, H);
  add("output.bias", V, 1);
  params_.assign(off, 0.0);
}

void LstmModel::init_parameters() {
  Rng rng(derive_seed(config_.seed, "lstm-init"));
  for (auto& p : params_) p = rng.uniform(-0.1, 0.1);
  // Forget-gate bias starts at 1 (gate rows are ordered i, f, g, o).
  const std::size_t H = config_.hidden_dim;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    double* b = tensor_data("lstm" + std::to_string(l) + ".bias");
    for (std::size_t j = H; j < 2 * H; ++j) b[j] = 1.0;
  }
}

const TensorView& LstmModel::tensor(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw UsageError("unknown tensor: " + name);
}

double* LstmModel::tensor_data(const std::string& name) {
  return params_.data() + tensor(name).offset;
}

void LstmModel::refresh_fingerprint() {
  std::uint64_t h = 0x6c73746d2d6c6dULL;
  h = detail::splitmix64(h ^ vocab_.size());
  h = detail::splitmix64(h ^ config_.embed_dim);
  h = detail::splitmix64(h ^ config_.hidden_dim);
  h = detail::splitmix64(h ^ config_.num_layers);
  h = hash_doubles(h, params_.data(), params_.size());
  fingerprint_ = h ? h : 1;
}

// ---------------------------------------------------------------------------
// Incremental scoring (batch of one)

ContextState LstmModel::initial_state() const {
  ContextState s;
  s.model_tag = fingerprint_;
  s.activations.assign(2 * config_.num_layers * config_.hidden_dim, 0.0);
  return s;
}

ContextState LstmModel::advance(const ContextState& state,
                                std::int32_t token) const {
  check_state(state);
  check_token(token);
  const std::size_t D = config_.embed_dim;
  const std::size_t H = config_.hidden_dim;

  ContextState next = state;
  const double* emb =
      params_.data() + tensor("embedding").offset + static_cast<std::size_t>(token) * D;
  std::vector<double> x(emb, emb + D);
  std::vector<double> a(4 * H);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "lstm" + std::to_string(l) + ".";
    const double* wx = params_.data() + tensor(p + "wx").offset;
    const double* wh = params_.data() + tensor(p + "wh").offset;
    const double* bias = params_.data() + tensor(p + "bias").offset;
    double* h = next.activations.data() + 2 * l * H;
    double* c = h + H;

    const std::size_t in = layer_input_dim(l);
    kernels::serial::matmul(wx, x.data(), a.data(), 4 * H, in, 1, false);
    kernels::serial::matmul(wh, h, a.data(), 4 * H, H, 1, true);
    bool finite = true;
    for (std::size_t j = 0; j < H; ++j) {
      const double gi = sigmoid(a[j] + bias[j]);
      const double gf = sigmoid(a[H + j] + bias[H + j]);
      const double gg = std::tanh(a[2 * H + j] + bias[2 * H + j]);
      const double go = sigmoid(a[3 * H + j] + bias[3 * H + j]);
      c[j] = gf * c[j] + gi * gg;
      h[j] = go * std::tanh(c[j]);
      finite = finite && std::isfinite(c[j]) && std::isfinite(h[j]);
    }
    if (!finite) {
      throw NumericError("non-finite activation in layer " + std::to_string(l));
    }
    x.assign(h, h + H);
  }
  return next;
}

void LstmModel::next_distribution(const ContextState& state,
                                  std::vector<double>& probs) const {
  check_state(state);
  const std::size_t V = vocab_.size();
  const std::size_t H = config_.hidden_dim;
  const double* h_top =
      state.activations.data() + 2 * (config_.num_layers - 1) * H;
  const double* wo = params_.data() + tensor("output.weight").offset;
  const double* bo = params_.data() + tensor("output.bias").offset;
  probs.resize(V);
  kernels::par::matmul(wo, h_top, probs.data(), V, H, 1, false);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(V); ++v) {
    probs[v] += bo[v];
  }
  kernels::par::softmax_inplace(probs);
}

double LstmModel::token_probability(const ContextState& state,
                                    std::int32_t token) const {
  check_state(state);
  check_token(token);
  const std::size_t V = vocab_.size();
  const std::size_t H = config_.hidden_dim;
  const double* h_top =
      state.activations.data() + 2 * (config_.num_layers - 1) * H;
  const double* wo = params_.data() + tensor("output.weight").offset;
  const double* bo = params_.data() + tensor("output.bias").offset;
  std::vector<double> logits(V);
  kernels::par::matmul(wo, h_top, logits.data(), V, H, 1, false);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(V); ++v) {
    logits[v] += bo[v];
  }
  const double lse = kernels::par::logsumexp(logits);
  return std::exp(logits[static_cast<std::size_t>(token)] - lse);
}

std::pair<ContextState, std::vector<double>> LstmModel::forward_step(
    const ContextState& state, std::int32_t token) const {
  ContextState next = advance(state, token);
  std::vector<double> probs;
  next_distribution(next, probs);
  return {std::move(next), std::move(probs)};
}

double LstmModel::cross_entropy(const std::vector<TokenStream>& streams) const {
  long double total = 0.0L;
  std::size_t n = 0;
  for (const auto& stream : streams) {
    validate_stream(stream, vocab_);
    ContextState state = initial_state();
    for (std::int32_t tok : stream.ids) {
      total += -std::log(token_probability(state, tok));
      state = advance(state, tok);
      ++n;
    }
  }
  if (n == 0) throw InputError("cross_entropy: no tokens");
  return static_cast<double>(total / static_cast<long double>(n));
}

// ---------------------------------------------------------------------------
// Batched window forward/backward (truncated BPTT)

struct LstmModel::Workspace {
  // Per layer, per step, column-major-within-step matrices (dim x lanes).
  std::vector<std::vector<double>> in_acts;     // layer input, post-dropout
  std::vector<std::vector<double>> gates;       // i,f,g,o post-nonlinearity
  std::vector<std::vector<double>> cells;       // c_t
  std::vector<std::vector<double>> tanh_cells;  // tanh(c_t)
  std::vector<std::vector<double>> hiddens;     // h_t
  std::vector<std::vector<double>> masks;       // dropout masks (may be empty)
  std::vector<double> h0, c0;                   // window-initial states
  std::vector<double> h_allT;                   // (T*B) x H
  std::vector<double> probs;                    // (T*B) x V
  std::vector<double> woT;                      // H x V
  std::vector<double> dh_allT;                  // (T*B) x H
  std::vector<double> ones;                     // T*B
  std::vector<double> a4;                       // 4H x B scratch
  std::vector<double> da;                       // 4H x B
  std::vector<double> dh, dc, dxbuf;            // per-layer scratch
  std::vector<std::vector<double>> dh_carry, dc_carry;
};

double LstmModel::window_loss_and_grad(const Minibatch& batch,
                                       std::vector<double>* initial_state,
                                       std::vector<double>* grad,
                                       Rng* mask_rng, Workspace& ws) const {
  const std::size_t T = batch.steps;
  const std::size_t B = batch.lanes;
  if (T == 0 || B == 0) throw InputError("empty minibatch");
  if (batch.inputs.size() != T * B || batch.targets.size() != T * B) {
    throw InputError("minibatch token buffers do not match steps * lanes");
  }
  const std::size_t V = vocab_.size();
  const std::size_t D = config_.embed_dim;
  const std::size_t H = config_.hidden_dim;
  const std::size_t L = config_.num_layers;
  for (std::int32_t t : batch.inputs) check_token(t);
  for (std::int32_t t : batch.targets) check_token(t);

  const bool use_dropout = config_.dropout > 0.0 && mask_rng != nullptr;
  const double keep = 1.0 - config_.dropout;

  ws.in_acts.resize(L);
  ws.gates.resize(L);
  ws.cells.resize(L);
  ws.tanh_cells.resize(L);
  ws.hiddens.resize(L);
  ws.masks.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    ws.in_acts[l].assign(T * layer_input_dim(l) * B, 0.0);
    ws.gates[l].assign(T * 4 * H * B, 0.0);
    ws.cells[l].assign(T * H * B, 0.0);
    ws.tanh_cells[l].assign(T * H * B, 0.0);
    ws.hiddens[l].assign(T * H * B, 0.0);
    if (use_dropout) ws.masks[l].assign(T * layer_input_dim(l) * B, 0.0);
  }
  ws.h0.assign(L * H * B, 0.0);
  ws.c0.assign(L * H * B, 0.0);
  if (initial_state) {
    if (initial_state->size() != 2 * L * H * B) {
      initial_state->assign(2 * L * H * B, 0.0);
    }
    for (std::size_t l = 0; l < L; ++l) {
      const double* src = initial_state->data() + 2 * l * H * B;
      std::copy(src, src + H * B, ws.h0.data() + l * H * B);
      std::copy(src + H * B, src + 2 * H * B, ws.c0.data() + l * H * B);
    }
  }

  const double* emb = params_.data() + tensor("embedding").offset;
  if (use_dropout) {
    for (auto& m : ws.masks) {
      for (auto& v : m) v = mask_rng->uniform() < keep ? 1.0 / keep : 0.0;
    }
  }

  // Forward.
  ws.a4.resize(4 * H * B);
  for (std::size_t t = 0; t < T; ++t) {
    double* x0 = ws.in_acts[0].data() + t * D * B;
    for (std::size_t b = 0; b < B; ++b) {
      const double* row =
          emb + static_cast<std::size_t>(batch.inputs[t * B + b]) * D;
      for (std::size_t d = 0; d < D; ++d) x0[d * B + b] = row[d];
    }
    if (use_dropout) {
      const double* m = ws.masks[0].data() + t * D * B;
      for (std::size_t i = 0; i < D * B; ++i) x0[i] *= m[i];
    }
    for (std::size_t l = 0; l < L; ++l) {
      const std::string p = "lstm" + std::to_string(l) + ".";
      const double* wx = params_.data() + tensor(p + "wx").offset;
      const double* wh = params_.data() + tensor(p + "wh").offset;
      const double* bias = params_.data() + tensor(p + "bias").offset;
      const std::size_t in = layer_input_dim(l);
      const double* x = ws.in_acts[l].data() + t * in * B;
      const double* h_prev = t == 0 ? ws.h0.data() + l * H * B
                                    : ws.hiddens[l].data() + (t - 1) * H * B;
      const double* c_prev = t == 0 ? ws.c0.data() + l * H * B
                                    : ws.cells[l].data() + (t - 1) * H * B;
      double* a = ws.a4.data();
      kernels::par::matmul(wx, x, a, 4 * H, in, B, false);
      kernels::par::matmul(wh, h_prev, a, 4 * H, H, B, true);
      double* gate = ws.gates[l].data() + t * 4 * H * B;
      double* c = ws.cells[l].data() + t * H * B;
      double* tc = ws.tanh_cells[l].data() + t * H * B;
      double* h = ws.hiddens[l].data() + t * H * B;
      for (std::size_t j = 0; j < H; ++j) {
        for (std::size_t b = 0; b < B; ++b) {
          const double gi = sigmoid(a[j * B + b] + bias[j]);
          const double gf = sigmoid(a[(H + j) * B + b] + bias[H + j]);
          const double gg = std::tanh(a[(2 * H + j) * B + b] + bias[2 * H + j]);
          const double go = sigmoid(a[(3 * H + j) * B + b] + bias[3 * H + j]);
          gate[j * B + b] = gi;
          gate[(H + j) * B + b] = gf;
          gate[(2 * H + j) * B + b] = gg;
          gate[(3 * H + j) * B + b] = go;
          const double cv = gf * c_prev[j * B + b] + gi * gg;
          c[j * B + b] = cv;
          const double tv = std::tanh(cv);
          tc[j * B + b] = tv;
          h[j * B + b] = go * tv;
        }
      }
      if (l + 1 < L) {
        double* xn = ws.in_acts[l + 1].data() + t * H * B;
        std::copy(h, h + H * B, xn);
        if (use_dropout) {
          const double* m = ws.masks[l + 1].data() + t * H * B;
          for (std::size_t i = 0; i < H * B; ++i) xn[i] *= m[i];
        }
      }
    }
  }

  // Output layer over all (t, lane) rows at once.
  ws.h_allT.resize(T * B * H);
  const double* h_top_all = ws.hiddens[L - 1].data();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      double* row = ws.h_allT.data() + (t * B + b) * H;
      const double* h = h_top_all + t * H * B;
      for (std::size_t j = 0; j < H; ++j) row[j] = h[j * B + b];
    }
  }
  const double* wo = params_.data() + tensor("output.weight").offset;
  const double* bo = params_.data() + tensor("output.bias").offset;
  ws.woT.resize(H * V);
  for (std::size_t v = 0; v < V; ++v) {
    for (std::size_t j = 0; j < H; ++j) ws.woT[j * V + v] = wo[v * H + j];
  }
  ws.probs.resize(T * B * V);
  kernels::par::matmul(ws.h_allT.data(), ws.woT.data(), ws.probs.data(), T * B,
                       H, V, false);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(T * B); ++r) {
    double* row = ws.probs.data() + static_cast<std::size_t>(r) * V;
    for (std::size_t v = 0; v < V; ++v) row[v] += bo[v];
  }
  kernels::par::softmax_rows(ws.probs.data(), T * B, V);

  long double loss = 0.0L;
  for (std::size_t r = 0; r < T * B; ++r) {
    const std::size_t tgt = static_cast<std::size_t>(batch.targets[r]);
    loss += -std::log(ws.probs[r * V + tgt]);
  }
  const double mean_loss = static_cast<double>(loss / (T * B));

  // Carry the end-of-window state out before any backward work.
  if (initial_state) {
    for (std::size_t l = 0; l < L; ++l) {
      double* dst = initial_state->data() + 2 * l * H * B;
      const double* h = ws.hiddens[l].data() + (T - 1) * H * B;
      const double* c = ws.cells[l].data() + (T - 1) * H * B;
      std::copy(h, h + H * B, dst);
      std::copy(c, c + H * B, dst + H * B);
    }
  }
  if (!grad) return mean_loss;

  // Backward.
  const double inv_n = 1.0 / static_cast<double>(T * B);
  double* gE = grad->data() + tensor("embedding").offset;
  double* gWo = grad->data() + tensor("output.weight").offset;
  double* gbo = grad->data() + tensor("output.bias").offset;

  // dlogits = (probs - onehot) / n, reusing the probs buffer.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(T * B); ++r) {
    double* row = ws.probs.data() + static_cast<std::size_t>(r) * V;
    for (std::size_t v = 0; v < V; ++v) row[v] *= inv_n;
    row[static_cast<std::size_t>(batch.targets[static_cast<std::size_t>(r)])] -=
        inv_n;
  }
  kernels::par::matmul_at_b(ws.probs.data(), ws.h_allT.data(), gWo, T * B, V, H,
                            true);
  ws.ones.assign(T * B, 1.0);
  kernels::par::matmul_at_b(ws.probs.data(), ws.ones.data(), gbo, T * B, V, 1,
                            true);
  ws.dh_allT.resize(T * B * H);
  kernels::par::matmul(ws.probs.data(), wo, ws.dh_allT.data(), T * B, V, H,
                       false);

  ws.da.resize(4 * H * B);
  ws.dh.resize(H * B);
  ws.dc.resize(H * B);
  ws.dxbuf.resize(std::max(D, H) * B);
  ws.dh_carry.assign(L, std::vector<double>(H * B, 0.0));
  ws.dc_carry.assign(L, std::vector<double>(H * B, 0.0));

  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t l = L; l-- > 0;) {
      const std::string p = "lstm" + std::to_string(l) + ".";
      const double* wx = params_.data() + tensor(p + "wx").offset;
      const double* wh = params_.data() + tensor(p + "wh").offset;
      double* gWx = grad->data() + tensor(p + "wx").offset;
      double* gWh = grad->data() + tensor(p + "wh").offset;
      double* gb = grad->data() + tensor(p + "bias").offset;
      const std::size_t in = layer_input_dim(l);

      const double* gate = ws.gates[l].data() + t * 4 * H * B;
      const double* tc = ws.tanh_cells[l].data() + t * H * B;
      const double* c_prev = t == 0 ? ws.c0.data() + l * H * B
                                    : ws.cells[l].data() + (t - 1) * H * B;
      const double* h_prev = t == 0 ? ws.h0.data() + l * H * B
                                    : ws.hiddens[l].data() + (t - 1) * H * B;
      const double* x = ws.in_acts[l].data() + t * in * B;

      // dh = carry from t+1 plus the contribution from above.
      std::copy(ws.dh_carry[l].begin(), ws.dh_carry[l].end(), ws.dh.begin());
      if (l == L - 1) {
        for (std::size_t b = 0; b < B; ++b) {
          const double* row = ws.dh_allT.data() + (t * B + b) * H;
          for (std::size_t j = 0; j < H; ++j) ws.dh[j * B + b] += row[j];
        }
      }

      for (std::size_t j = 0; j < H; ++j) {
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t i1 = j * B + b;
          const double gi = gate[i1];
          const double gf = gate[(H + j) * B + b];
          const double gg = gate[(2 * H + j) * B + b];
          const double go = gate[(3 * H + j) * B + b];
          const double tv = tc[i1];
          const double dh = ws.dh[i1];
          const double dc = ws.dc_carry[l][i1] + dh * go * (1.0 - tv * tv);
          ws.da[i1] = dc * gg * gi * (1.0 - gi);
          ws.da[(H + j) * B + b] = dc * c_prev[i1] * gf * (1.0 - gf);
          ws.da[(2 * H + j) * B + b] = dc * gi * (1.0 - gg * gg);
          ws.da[(3 * H + j) * B + b] = dh * tv * go * (1.0 - go);
          ws.dc_carry[l][i1] = dc * gf;
        }
      }

      kernels::par::matmul_a_bt(ws.da.data(), x, gWx, 4 * H, B, in, true);
      kernels::par::matmul_a_bt(ws.da.data(), h_prev, gWh, 4 * H, B, H, true);
      for (std::size_t r = 0; r < 4 * H; ++r) {
        double s = 0.0;
        for (std::size_t b = 0; b < B; ++b) s += ws.da[r * B + b];
        gb[r] += s;
      }
      kernels::par::matmul_at_b(wh, ws.da.data(), ws.dh_carry[l].data(), 4 * H,
                                H, B, false);
      kernels::par::matmul_at_b(wx, ws.da.data(), ws.dxbuf.data(), 4 * H, in, B,
                                false);
      if (use_dropout) {
        const double* m = ws.masks[l].data() + t * in * B;
        for (std::size_t i = 0; i < in * B; ++i) ws.dxbuf[i] *= m[i];
      }
      if (l > 0) {
        for (std::size_t i = 0; i < in * B; ++i) {
          ws.dh_carry[l - 1][i] += ws.dxbuf[i];
        }
      } else {
        for (std::size_t b = 0; b < B; ++b) {
          double* row =
              gE + static_cast<std::size_t>(batch.inputs[t * B + b]) * D;
          for (std::size_t d = 0; d < D; ++d) row[d] += ws.dxbuf[d * B + b];
        }
      }
    }
  }
  return mean_loss;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct BatchPlan {
  std::vector<std::int32_t> flat;
  std::size_t lanes = 0;
  std::size_t cols = 0;

  std::int32_t at(std::size_t lane, std::size_t col) const {
    return flat[lane * cols + col];
  }
};

BatchPlan plan_batches(const std::vector<TokenStream>& corpus,
                       std::size_t batch_size) {
  BatchPlan plan;
  for (const auto& s : corpus) {
    plan.flat.insert(plan.flat.end(), s.ids.begin(), s.ids.end());
  }
  plan.lanes = batch_size;
  plan.cols = plan.flat.size() / batch_size;
  if (plan.flat.empty() || plan.cols < 2) {
    throw InputError(
        "training corpus too small for batch size: need at least 2 tokens "
        "per lane");
  }
  return plan;
}

}  // namespace

LstmModel LstmModel::train(const std::vector<TokenStream>& corpus,
                           const LstmConfig& config,
                           const std::vector<TokenStream>& validation,
                           const Vocabulary& vocab,
                           std::vector<TrainLogEntry>* log) {
  config.validate();
  if (corpus.empty()) throw InputError("lstm train: empty corpus");
  for (const auto& s : corpus) validate_stream(s, vocab);
  for (const auto& s : validation) validate_stream(s, vocab);

  LstmModel model(config, vocab);
  BatchPlan plan = plan_batches(corpus, config.batch_size);
  const std::size_t B = plan.lanes;
  const std::size_t usable = plan.cols - 1;

  Rng mask_rng(derive_seed(config.seed, "lstm-dropout"));
  Workspace ws;
  std::vector<double> grad(model.params_.size(), 0.0);
  std::vector<double> carried;
  Minibatch batch;
  batch.lanes = B;

  double lr = config.learning_rate;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_params;
  std::size_t bad_epochs = 0;
  const bool has_validation = !validation.empty();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    carried.assign(2 * config.num_layers * config.hidden_dim * B, 0.0);
    long double epoch_loss = 0.0L;
    std::size_t epoch_targets = 0;
    std::size_t window_index = 0;
    for (std::size_t start = 0; start < usable; start += config.bptt_len) {
      const std::size_t steps = std::min(config.bptt_len, usable - start);
      batch.steps = steps;
      batch.inputs.resize(steps * B);
      batch.targets.resize(steps * B);
      for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t b = 0; b < B; ++b) {
          batch.inputs[t * B + b] = plan.at(b, start + t);
          batch.targets[t * B + b] = plan.at(b, start + t + 1);
        }
      }
      const double loss = model.window_loss_and_grad(
          batch, &carried, &grad, config.dropout > 0.0 ? &mask_rng : nullptr,
          ws);
      ++window_index;
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged: non-finite loss at epoch " +
                           std::to_string(epoch) + ", window " +
                           std::to_string(window_index));
      }
      epoch_loss += static_cast<long double>(loss) *
                    static_cast<long double>(steps * B);
      epoch_targets += steps * B;

      const double norm2 = kernels::par::dot(grad, grad);
      double scale = lr;
      if (norm2 > config.grad_clip * config.grad_clip) {
        scale = lr * config.grad_clip / std::sqrt(norm2);
      }
      kernels::par::axpy(grad, -scale, model.params_);
      std::fill(grad.begin(), grad.end(), 0.0);
    }

    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.train_ce = static_cast<double>(
        epoch_loss / static_cast<long double>(std::max<std::size_t>(epoch_targets, 1)));
    entry.lr = lr;
    entry.valid_ce = std::numeric_limits<double>::quiet_NaN();

    if (has_validation) {
      model.refresh_fingerprint();
      entry.valid_ce = model.cross_entropy(validation);
      if (entry.valid_ce < best_val - 1e-12) {
        best_val = entry.valid_ce;
        best_params = model.params_;
        bad_epochs = 0;
      } else {
        ++bad_epochs;
        lr *= config.lr_decay;
        if (bad_epochs >= config.patience) {
          if (log) log->push_back(entry);
          break;
        }
      }
    }
    if (log) log->push_back(entry);
  }

  if (has_validation && !best_params.empty()) {
    model.params_ = std::move(best_params);
  }
  model.refresh_fingerprint();
  return model;
}

// ---------------------------------------------------------------------------
// Gradient check

double LstmModel::gradient_check(const Minibatch& batch, double epsilon,
                                 std::size_t probes, std::uint64_t probe_seed,
                                 std::ptrdiff_t fault_index) const {
  if (batch.steps == 0 || batch.lanes == 0) {
    throw InputError("gradient_check: empty minibatch");
  }
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw InputError("gradient_check: epsilon must be in [1e-6, 1e-3]");
  }
  const std::uint64_t mask_seed = derive_seed(config_.seed, "gradcheck-mask");
  Workspace ws;

  std::vector<double> grad(params_.size(), 0.0);
  {
    Rng mask_rng(mask_seed);
    LstmModel work = *this;
    work.window_loss_and_grad(batch, nullptr, &grad,
                              config_.dropout > 0.0 ? &mask_rng : nullptr, ws);
  }
  if (fault_index >= 0) {
    grad[static_cast<std::size_t>(fault_index)] =
        -grad[static_cast<std::size_t>(fault_index)];
  }

  Rng pick(probe_seed);
  std::vector<std::size_t> indices;
  indices.reserve(probes + 1);
  for (std::size_t i = 0; i < probes; ++i) {
    indices.push_back(static_cast<std::size_t>(pick.uniform_int(params_.size())));
  }
  if (fault_index >= 0) indices.push_back(static_cast<std::size_t>(fault_index));

  LstmModel work = *this;
  double max_rel = 0.0;
  for (std::size_t idx : indices) {
    const double saved = work.params_[idx];
    const double h = epsilon * std::max(1.0, std::abs(saved));
    double lp, lm;
    {
      Rng mask_rng(mask_seed);
      work.params_[idx] = saved + h;
      lp = work.window_loss_and_grad(
          batch, nullptr, nullptr, config_.dropout > 0.0 ? &mask_rng : nullptr,
          ws);
    }
    {
      Rng mask_rng(mask_seed);
      work.params_[idx] = saved - h;
      lm = work.window_loss_and_grad(
          batch, nullptr, nullptr, config_.dropout > 0.0 ? &mask_rng : nullptr,
          ws);
    }
    work.params_[idx] = saved;
    const double numeric = (lp - lm) / (2.0 * h);
    // Floor the denominator at the finite-difference noise scale: absolute
    // loss roundoff (~1e-16) divided by the step puts ~1e-10 of noise on
    // `numeric`, so gradients far below 1e-4 compare in noise, not signal.
    const double denom = std::max(std::abs(grad[idx]) + std::abs(numeric), 1e-4);
    max_rel = std::max(max_rel, std::abs(grad[idx] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace lmrt
