#include "tuned_lens/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tuned_lens/anomaly.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::data {

CorpusSplit split_corpus(const std::string& text) {
  if (text.empty()) throw std::invalid_argument("split_corpus: empty corpus");
  const std::size_t n = text.size();
  const std::size_t a = n * 90 / 100;
  const std::size_t b = n * 95 / 100;
  return {text.substr(0, a), text.substr(a, b - a), text.substr(b)};
}

std::vector<std::vector<int>> chunk(const std::string& text, int seq_len, int max_chunks) {
  if (seq_len < 1) throw std::invalid_argument("chunk: seq_len must be positive");
  std::vector<std::vector<int>> out;
  auto ids = model::tokenize(text);
  for (std::size_t at = 0; at + static_cast<std::size_t>(seq_len) <= ids.size();
       at += static_cast<std::size_t>(seq_len)) {
    if (max_chunks >= 0 && static_cast<int>(out.size()) >= max_chunks) break;
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(at),
                     ids.begin() + static_cast<std::ptrdiff_t>(at) + seq_len);
  }
  return out;
}

void validate(const McTask& task) {
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const McItem& it = task.items[i];
    if (it.options.size() < 2)
      throw std::invalid_argument("task item " + std::to_string(i) + ": fewer than two options");
    if (it.gold < 0 || it.gold >= static_cast<int>(it.options.size()))
      throw std::invalid_argument("task item " + std::to_string(i) + ": gold out of range");
  }
}

std::string task_to_jsonl(const McTask& task) {
  std::string out;
  for (const McItem& it : task.items) {
    nlohmann::json demos = nlohmann::json::array();
    for (const Demo& d : it.demos) demos.push_back({{"text", d.text}, {"correct", d.correct}});
    nlohmann::json j = {
        {"prompt", it.prompt}, {"options", it.options}, {"gold", it.gold}, {"demos", demos}};
    out += j.dump() + "\n";
  }
  return out;
}

void save_task(const std::filesystem::path& path, const McTask& task) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << task_to_jsonl(task);
}

McTask load_task(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  McTask task;
  task.name = path.stem().string();
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    McItem it;
    it.prompt = j.at("prompt").get<std::string>();
    it.options = j.at("options").get<std::vector<std::string>>();
    it.gold = j.at("gold").get<int>();
    if (j.contains("demos")) {
      for (const auto& d : j.at("demos")) {
        if (d.is_string()) {
          it.demos.push_back({d.get<std::string>(), true});
        } else {
          it.demos.push_back({d.at("text").get<std::string>(), d.value("correct", true)});
        }
      }
    }
    task.items.push_back(std::move(it));
  }
  validate(task);
  return task;
}

// ---- synthetic data --------------------------------------------------------

namespace {

const std::vector<std::string> kPositive = {"great", "fine",  "lovely", "nice", "superb",
                                            "happy", "bright", "warm",  "sweet", "fun"};
const std::vector<std::string> kNegative = {"awful", "poor", "dull", "sad",  "grim",
                                            "cold",  "sour", "ugly", "weak", "dire"};
const std::vector<std::string> kLabels = {"good", "bad"};
const std::vector<std::string> kObjects = {"apples", "boats", "cards", "drums"};
const std::vector<std::string> kAdjectives = {"big", "small", "red", "old", "quiet", "fast"};
const std::vector<std::string> kNouns = {"dog", "cat", "bird", "man", "girl", "car", "tree"};
const std::vector<std::string> kVerbs = {"sees", "likes", "finds", "helps", "hears"};

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
  const std::string& pick(const std::vector<std::string>& v) { return v[pick(v.size())]; }
  double unit() { return std::uniform_real_distribution<double>(0, 1)(rng); }

  std::string review(int label) {
    const auto& words = label == 0 ? kPositive : kNegative;
    std::string r = "review:";
    for (int i = 0; i < 3; ++i) r += " " + pick(words);
    return r;
  }
};

std::string sentiment_prompt(const std::string& review) { return review + "\nsentiment:"; }

}  // namespace

SynthData synthesize(const SynthOptions& options, std::uint64_t seed) {
  if (options.n_entities < 1) throw std::invalid_argument("synthesize: need entities");
  Gen g(seed);
  SynthData out;

  // Entities: unique four-letter names, each bound to one object.
  std::vector<std::string> names;
  std::set<std::string> seen;
  while (static_cast<int>(names.size()) < options.n_entities) {
    std::string s;
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>('a' + g.pick(26)));
    if (seen.insert(s).second) names.push_back(s);
  }
  std::vector<int> object_of(names.size());
  for (auto& o : object_of) o = static_cast<int>(g.pick(kObjects.size()));
  std::vector<double> zipf(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) zipf[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> entity_dist(zipf.begin(), zipf.end());

  std::string& text = out.corpus;
  while (text.size() < options.corpus_bytes) {
    double u = g.unit();
    if (u < 0.35) {
      int label = static_cast<int>(g.pick(2));
      std::string prompt = sentiment_prompt(g.review(label));
      if (g.unit() < options.attack_exposure) {
        const std::string& wrong = kLabels[static_cast<std::size_t>(1 - label)];
        text += prompt + anomaly::attack_text(wrong) + " " + wrong + "\n";
      } else {
        text += prompt + " " + kLabels[static_cast<std::size_t>(label)] + "\n";
      }
    } else if (u < 0.7) {
      std::size_t e = entity_dist(g.rng);
      text += names[e] + " likes " + kObjects[static_cast<std::size_t>(object_of[e])] + ".\n";
    } else {
      text += "the " + g.pick(kAdjectives) + " " + g.pick(kNouns) + " " + g.pick(kVerbs) +
              " the " + g.pick(kNouns) + ".\n";
    }
  }

  out.sentiment.name = "sentiment";
  for (int i = 0; i < options.n_sentiment_items; ++i) {
    int label = static_cast<int>(g.pick(2));
    McItem it;
    it.prompt = sentiment_prompt(g.review(label));
    it.options = {" good", " bad"};
    it.gold = label;
    for (int k = 0; k < 4; ++k) {
      int dl = static_cast<int>(g.pick(2));
      bool correct = k < 2;
      const std::string& shown = kLabels[static_cast<std::size_t>(correct ? dl : 1 - dl)];
      it.demos.push_back({sentiment_prompt(g.review(dl)) + " " + shown + "\n", correct});
    }
    out.sentiment.items.push_back(std::move(it));
  }

  out.facts.name = "facts";
  for (std::size_t e = 0; e < names.size(); ++e) {
    McItem it;
    it.prompt = names[e] + " likes";
    for (const auto& o : kObjects) it.options.push_back(" " + o);
    it.gold = object_of[e];
    out.facts.items.push_back(std::move(it));
  }
  return out;
}

}  // namespace tuned_lens::data
