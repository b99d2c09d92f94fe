#include "lmrt/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <vector>

#include "lmrt/common.hpp"

namespace lmrt {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'L', 'M', 'R', 'T', 'M', 'D', 'L', '1'};

static_assert(std::endian::native == std::endian::little,
              "model container assumes a little-endian host");

void append_u32(std::vector<std::uint32_t>& out, std::uint64_t v) {
  if (v > 0xffffffffULL) throw NumericError("container: count overflows u32");
  out.push_back(static_cast<std::uint32_t>(v));
}

json vocab_json(const Vocabulary& vocab) { return json(vocab.entries()); }

Vocabulary vocab_from_json(const json& j) {
  std::vector<std::string> entries = j.get<std::vector<std::string>>();
  return Vocabulary::from_entries(std::move(entries));
}

struct Writer {
  std::ofstream out;
  explicit Writer(const std::string& path) : out(path, std::ios::binary) {
    if (!out) throw InputError("cannot open for writing: " + path);
  }
  void bytes(const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw InputError("short write to model container");
  }
};

void write_container(const std::string& path, json header,
                     const std::vector<double>& doubles,
                     const std::vector<std::uint32_t>& words) {
  header["version"] = 1;
  header["endianness"] = "little";
  header["payload"] = {{"doubles", doubles.size()}, {"u32s", words.size()}};
  const std::string htext = header.dump();
  Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = htext.size();
  w.bytes(&hlen, sizeof(hlen));
  w.bytes(htext.data(), htext.size());
  if (!doubles.empty()) {
    w.bytes(doubles.data(), doubles.size() * sizeof(double));
  }
  if (!words.empty()) {
    w.bytes(words.data(), words.size() * sizeof(std::uint32_t));
  }
}

struct Loaded {
  json header;
  std::vector<double> doubles;
  std::vector<std::uint32_t> words;
};

Loaded read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open model container: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(path + ": not a model container (bad magic)", 0);
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ULL << 32)) {
    throw ParseError(path + ": corrupt header length", 0);
  }
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ParseError(path + ": truncated header", 0);
  Loaded l;
  try {
    l.header = json::parse(htext);
  } catch (const json::exception& e) {
    throw ParseError(path + ": bad container header: " + e.what(), 0);
  }
  if (!l.header.contains("version") || l.header["version"].get<int>() != 1) {
    throw ParseError(path + ": unsupported container version", 0);
  }
  if (l.header.value("endianness", "little") != "little") {
    throw ParseError(path + ": unsupported endianness", 0);
  }
  const std::size_t nd = l.header["payload"]["doubles"].get<std::size_t>();
  const std::size_t nw = l.header["payload"]["u32s"].get<std::size_t>();
  l.doubles.resize(nd);
  if (nd) {
    in.read(reinterpret_cast<char*>(l.doubles.data()),
            static_cast<std::streamsize>(nd * sizeof(double)));
  }
  l.words.resize(nw);
  if (nw) {
    in.read(reinterpret_cast<char*>(l.words.data()),
            static_cast<std::streamsize>(nw * sizeof(std::uint32_t)));
  }
  if (!in) throw ParseError(path + ": truncated payload", 0);
  return l;
}

}  // namespace

void save_model(const std::string& path, const KneserNeyModel& model) {
  json header;
  header["kind"] = "ngram";
  header["order"] = model.order();
  header["discount"] = model.discount();
  header["vocabulary"] = vocab_json(model.vocab());

  // Count payload: unigram counts, then per order >= 2:
  // n_contexts, then per context: (order-1) ids, n_conts, (id, count)*.
  std::vector<std::uint32_t> words;
  for (std::uint32_t c : model.unigram_counts()) words.push_back(c);
  for (int k = 2; k <= model.order(); ++k) {
    const auto& table = model.tables()[static_cast<std::size_t>(k - 1)];
    // Deterministic context order for reproducible files.
    std::vector<const std::pair<const detail::CtxKey, KneserNeyModel::ContextCounts>*>
        entries;
    entries.reserve(table.size());
    for (const auto& kv : table) entries.push_back(&kv);
    std::sort(entries.begin(), entries.end(), [](const auto* a, const auto* b) {
      const auto& ka = a->first;
      const auto& kb = b->first;
      for (std::uint8_t i = 0; i < ka.len; ++i) {
        if (ka.ids[i] != kb.ids[i]) return ka.ids[i] < kb.ids[i];
      }
      return false;
    });
    append_u32(words, entries.size());
    for (const auto* kv : entries) {
      for (std::uint8_t i = 0; i < kv->first.len; ++i) {
        append_u32(words, static_cast<std::uint32_t>(kv->first.ids[i]));
      }
      append_u32(words, kv->second.conts.size());
      for (const auto& [w, c] : kv->second.conts) {
        append_u32(words, static_cast<std::uint32_t>(w));
        append_u32(words, c);
      }
    }
  }
  write_container(path, std::move(header), {}, words);
}

void save_model(const std::string& path, const LstmModel& model) {
  json header;
  header["kind"] = "lstm";
  const auto& c = model.config();
  header["config"] = {{"embed_dim", c.embed_dim},
                      {"hidden_dim", c.hidden_dim},
                      {"num_layers", c.num_layers},
                      {"dropout", c.dropout},
                      {"batch_size", c.batch_size},
                      {"bptt_len", c.bptt_len},
                      {"epochs", c.epochs},
                      {"learning_rate", c.learning_rate},
                      {"grad_clip", c.grad_clip},
                      {"seed", c.seed},
                      {"patience", c.patience},
                      {"lr_decay", c.lr_decay}};
  header["vocabulary"] = vocab_json(model.vocab());
  json tensors = json::array();
  for (const auto& t : model.tensors()) {
    tensors.push_back({{"name", t.name},
                       {"offset", t.offset},
                       {"rows", t.rows},
                       {"cols", t.cols}});
  }
  header["tensors"] = tensors;
  write_container(path, std::move(header), model.parameters(), {});
}

std::unique_ptr<LanguageModel> load_model(const std::string& path) {
  Loaded l = read_container(path);
  const std::string kind = l.header.value("kind", "");
  if (kind == "ngram") {
    const int order = l.header["order"].get<int>();
    const double discount = l.header["discount"].get<double>();
    Vocabulary vocab = vocab_from_json(l.header["vocabulary"]);
    const std::size_t V = vocab.size();
    std::size_t at = 0;
    auto take = [&]() {
      if (at >= l.words.size()) {
        throw ParseError(path + ": truncated count payload", 0);
      }
      return l.words[at++];
    };
    std::vector<std::uint32_t> unigrams(V);
    for (std::size_t w = 0; w < V; ++w) unigrams[w] = take();
    std::vector<KneserNeyModel::ContextTable> tables(
        static_cast<std::size_t>(std::max(order, 1)));
    for (int k = 2; k <= order; ++k) {
      const std::size_t n_ctx = take();
      auto& table = tables[static_cast<std::size_t>(k - 1)];
      table.reserve(n_ctx);
      for (std::size_t c = 0; c < n_ctx; ++c) {
        detail::CtxKey key;
        key.len = static_cast<std::uint8_t>(k - 1);
        for (int i = 0; i < k - 1; ++i) {
          key.ids[static_cast<std::size_t>(i)] =
              static_cast<std::int32_t>(take());
        }
        KneserNeyModel::ContextCounts entry;
        const std::size_t n_conts = take();
        entry.conts.reserve(n_conts);
        for (std::size_t j = 0; j < n_conts; ++j) {
          const std::int32_t w = static_cast<std::int32_t>(take());
          const std::uint32_t cnt = take();
          entry.conts.emplace_back(w, cnt);
        }
        table.emplace(key, std::move(entry));
      }
    }
    return std::make_unique<KneserNeyModel>(KneserNeyModel::from_counts(
        order, discount, std::move(vocab), std::move(unigrams),
        std::move(tables)));
  }
  if (kind == "lstm") {
    const auto& jc = l.header["config"];
    LstmConfig config;
    config.embed_dim = jc["embed_dim"].get<std::size_t>();
    config.hidden_dim = jc["hidden_dim"].get<std::size_t>();
    config.num_layers = jc["num_layers"].get<std::size_t>();
    config.dropout = jc["dropout"].get<double>();
    config.batch_size = jc["batch_size"].get<std::size_t>();
    config.bptt_len = jc["bptt_len"].get<std::size_t>();
    config.epochs = jc["epochs"].get<std::size_t>();
    config.learning_rate = jc["learning_rate"].get<double>();
    config.grad_clip = jc["grad_clip"].get<double>();
    config.seed = jc["seed"].get<std::uint64_t>();
    config.patience = jc.value("patience", std::size_t{5});
    config.lr_decay = jc.value("lr_decay", 0.5);
    Vocabulary vocab = vocab_from_json(l.header["vocabulary"]);
    return std::make_unique<LstmModel>(LstmModel::from_parameters(
        config, std::move(vocab), std::move(l.doubles)));
  }
  throw ParseError(path + ": unknown model kind '" + kind + "'", 0);
}

std::uint64_t file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace lmrt
