#pragma once

#include <memory>
#include <string>

#include "lmrt/lm.hpp"
#include "lmrt/lstm.hpp"
#include "lmrt/ngram.hpp"

namespace lmrt {

// Single-file model container: magic + version, a JSON header describing
// kind, vocabulary, hyperparameters and payload sections, then a raw
// little-endian payload (doubles for tensors, u32 streams for counts).
// N-gram counts are stored explicitly so training is reproducible and
// inspectable; LSTM tensors round-trip bit-exactly.

void save_model(const std::string& path, const KneserNeyModel& model);
void save_model(const std::string& path, const LstmModel& model);

std::unique_ptr<LanguageModel> load_model(const std::string& path);

// FNV-1a over the container bytes; the run manifests record this.
std::uint64_t file_fingerprint(const std::string& path);

}  // namespace lmrt
