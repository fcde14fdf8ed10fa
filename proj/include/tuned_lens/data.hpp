#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tuned_lens::data {

/// Contiguous 90/5/5 train / lens-train / eval split of a byte corpus.
struct CorpusSplit {
  std::string train;
  std::string lens_train;
  std::string eval;
};
CorpusSplit split_corpus(const std::string& text);

/// Non-overlapping token windows of exactly seq_len tokens; a trailing
/// remainder shorter than seq_len is dropped. max_chunks < 0 keeps all.
std::vector<std::vector<int>> chunk(const std::string& text, int seq_len, int max_chunks = -1);

struct Demo {
  std::string text;
  bool correct = true;
};

struct McItem {
  std::string prompt;
  std::vector<std::string> options;
  int gold = 0;
  std::vector<Demo> demos;
};

struct McTask {
  std::string name;
  std::vector<McItem> items;
};

/// Throws std::invalid_argument if an item has fewer than two options or an
/// out-of-range gold index.
void validate(const McTask& task);

/// One JSON object per line: {"prompt", "options", "gold", "demos"}.
McTask load_task(const std::filesystem::path& path);
void save_task(const std::filesystem::path& path, const McTask& task);
std::string task_to_jsonl(const McTask& task);

struct SynthOptions {
  std::size_t corpus_bytes = 1 << 19;
  int n_entities = 48;
  int n_sentiment_items = 300;
  /// Fraction of sentiment lines in the corpus that follow an injected
  /// instruction instead of the review.
  double attack_exposure = 0.3;
};

/// Synthetic training text plus two multiple-choice tasks built from the same
/// generative rules: a binary sentiment task and a fact-recall task whose
/// entities appear with Zipf-distributed frequency (frequent = easy).
struct SynthData {
  std::string corpus;
  McTask sentiment;
  McTask facts;
};
SynthData synthesize(const SynthOptions& options, std::uint64_t seed);

}  // namespace tuned_lens::data
