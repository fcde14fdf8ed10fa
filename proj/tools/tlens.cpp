#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuned_lens/aitchison.hpp"
#include "tuned_lens/anomaly.hpp"
#include "tuned_lens/causal.hpp"
#include "tuned_lens/checkpoint.hpp"
#include "tuned_lens/data.hpp"
#include "tuned_lens/diagnostics.hpp"
#include "tuned_lens/difficulty.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/model.hpp"
#include "tuned_lens/report.hpp"
#include "tuned_lens/staticlens.hpp"
#include "tuned_lens/train.hpp"

#ifndef TLENS_VERSION
#define TLENS_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tuned_lens;
using report::Csv;
using report::num;

namespace {

struct Flags {
  std::vector<std::string> models;
  std::string target;
  std::string lens;
  std::string corpus;
  std::string task;
  std::string bases;
  std::string table;
  std::string text;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<int> layers;
  int k = -1;
  std::string detector = "lof";
  std::string variant;
  std::string demos = "none";
  bool include_final_block = false;
  bool no_inject = false;

  int seq_len = 128;
  int max_seqs = -1;
  int steps = -1;
  double lr = -1;
  int batch = 8;
  int checkpoint_every = 0;
  int n_layers = -1;
  int d_model = -1;
  int n_heads = -1;
  int drop = 0;
  int splits = 10;
  int resamples = 1000;
  int max_vectors = 8;
  int shuffles = 20;
  int baseline_n = 250;
  long baseline_dim = -1;
  std::size_t synth_bytes = 1 << 19;
};

std::string fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Collects artifacts and writes the manifest last.
class Run {
 public:
  Run(std::string name, const Flags& f) : name_(std::move(name)), out_(f.out), seed_(f.seed) {
    fs::create_directories(out_);
  }

  void input(const std::string& key, const fs::path& p) {
    const std::string bytes = io::read_file(p);
    inputs_[key] = {{"path", p.string()}, {"bytes", bytes.size()}, {"fnv1a", fnv1a(bytes)}};
  }
  void option(const std::string& key, json value) { options_[key] = std::move(value); }

  void csv(const std::string& file, const Csv& c) {
    c.write(out_ / file);
    artifacts_.push_back(file);
  }
  void json_file(const std::string& file, const json& j) {
    report::write_json(out_ / file, j);
    artifacts_.push_back(file);
  }
  void text(const std::string& file, const std::string& s) {
    io::write_file(out_ / file, s);
    artifacts_.push_back(file);
  }
  fs::path path(const std::string& file) {
    artifacts_.push_back(file);
    return out_ / file;
  }

  void finish() {
    json m;
    m["subcommand"] = name_;
    m["seed"] = seed_;
    m["inputs"] = inputs_;
    m["options"] = options_;
    m["artifacts"] = artifacts_;
    m["versions"] = {{"tlens", TLENS_VERSION},
                     {"container_format", io::kFormatVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                   "." + std::to_string(EIGEN_MINOR_VERSION)}};
    report::write_json(out_ / "manifest.json", m);
  }

 private:
  std::string name_;
  fs::path out_;
  std::uint64_t seed_;
  json inputs_ = json::object();
  json options_ = json::object();
  std::vector<std::string> artifacts_;
};

model::Transformer load_model(Run& run, const std::string& path, const std::string& key = "model") {
  run.input(key, path);
  return io::load_model(path).cast<double>();
}

std::string read_corpus(Run& run, const Flags& f) {
  run.input("corpus", f.corpus);
  run.option("seq_len", f.seq_len);
  run.option("max_seqs", f.max_seqs);
  return io::read_file(f.corpus);
}

lens::Sequences eval_seqs(Run& run, const Flags& f) {
  auto seqs = data::chunk(data::split_corpus(read_corpus(run, f)).eval, f.seq_len, f.max_seqs);
  if (seqs.empty()) throw std::invalid_argument("corpus eval split is shorter than --seq-len");
  return seqs;
}

data::McTask load_task(Run& run, const Flags& f) {
  run.input("task", f.task);
  auto task = data::load_task(f.task);
  if (task.name.empty()) task.name = fs::path(f.task).stem().string();
  return task;
}

// plain -> null, extended -> identity with the final block, else the lens file
std::optional<lens::TunedLens> resolve_lens(Run& run, const Flags& f, const model::ModelConfig& cfg) {
  std::string variant = f.variant;
  if (variant.empty()) variant = f.lens.empty() ? "plain" : "tuned";
  run.option("variant", variant);
  if (variant == "plain") return std::nullopt;
  if (variant == "extended") return lens::TunedLens::identity(cfg, true);
  if (f.lens.empty()) throw std::invalid_argument("--variant " + variant + " needs --lens");
  run.input("lens", f.lens);
  return lens::load_lens(f.lens, cfg);
}

const lens::TunedLens* ptr(const std::optional<lens::TunedLens>& l) { return l ? &*l : nullptr; }

std::vector<int> layers_or(const Flags& f, std::vector<int> fallback, int lo, int hi) {
  auto ls = f.layers.empty() ? std::move(fallback) : f.layers;
  for (int l : ls)
    if (l < lo || l > hi)
      throw std::out_of_range("layer " + std::to_string(l) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
  return ls;
}

std::vector<int> range(int lo, int hi) {
  std::vector<int> r;
  for (int i = lo; i <= hi; ++i) r.push_back(i);
  return r;
}

void write_lens_report(Run& run, const std::string& stem, const lens::LensReport& rep) {
  Csv c({"layer", "perplexity", "kl_bits", "bias_bits"});
  json j = json::array();
  for (const auto& s : rep.layers) {
    c.row({std::to_string(s.layer), num(s.perplexity), num(s.kl_bits), num(s.bias_bits)});
    j.push_back({{"layer", s.layer}, {"ce_nats", s.ce_nats}, {"perplexity", s.perplexity},
                 {"kl_bits", s.kl_bits}, {"bias_bits", s.bias_bits}});
  }
  run.csv(stem + ".csv", c);
  run.json_file(stem + ".json", {{"layers", j}});
}

// ---- subcommands ------------------------------------------------------------

void cmd_synth(const Flags& f) {
  Run run("synth", f);
  data::SynthOptions o;
  o.corpus_bytes = f.synth_bytes;
  run.option("bytes", o.corpus_bytes);
  auto s = data::synthesize(o, f.seed);
  run.text("corpus.txt", s.corpus);
  run.text("sentiment.jsonl", data::task_to_jsonl(s.sentiment));
  run.text("facts.jsonl", data::task_to_jsonl(s.facts));
  run.finish();
}

void cmd_train_model(const Flags& f) {
  Run run("train-model", f);
  const auto text = data::split_corpus(read_corpus(run, f)).train;
  model::ModelConfig cfg;
  if (f.n_layers > 0) cfg.n_layers = f.n_layers;
  if (f.d_model > 0) {
    cfg.d_model = f.d_model;
    cfg.d_ff = 4 * f.d_model;
  }
  if (f.n_heads > 0) cfg.n_heads = f.n_heads;
  model::TrainOptions o;
  o.steps = f.steps > 0 ? f.steps : 1500;
  o.lr = f.lr > 0 ? f.lr : 1e-3;
  o.batch_size = f.batch;
  o.seq_len = f.seq_len;
  o.checkpoint_every = f.checkpoint_every;
  o.seed = f.seed;
  run.option("config", io::config_to_json(cfg));
  run.option("steps", o.steps);
  run.option("lr", o.lr);
  run.option("batch", o.batch_size);
  run.option("checkpoint_every", o.checkpoint_every);
  auto res = model::train_base_model(model::tokenize(text), cfg, o);
  io::save_model(run.path("model.tlns"), res.model);
  if (f.checkpoint_every > 0) {
    for (const auto& ck : res.checkpoints) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt-%06d.tlns", ck.step);
      io::save_model(run.path(name), ck.model, {{"step", ck.step}});
    }
  }
  Csv c({"step", "loss"});
  for (std::size_t i = 0; i < res.losses.size(); ++i) c.row({std::to_string(i), num(res.losses[i])});
  run.csv("losses.csv", c);
  run.finish();
}

void cmd_train_lens(const Flags& f) {
  Run run("train-lens", f);
  auto m = load_model(run, f.models.at(0));
  auto seqs = data::chunk(data::split_corpus(read_corpus(run, f)).lens_train, f.seq_len, f.max_seqs);
  const std::string variant = f.variant.empty() ? "tuned" : f.variant;
  if (variant != "tuned" && variant != "debiased")
    throw std::invalid_argument("train-lens trains the tuned or debiased variant");
  lens::TrainOptions o;
  if (f.steps > 0) o.steps = f.steps;
  o.lr = f.lr;
  o.include_final_block = f.include_final_block;
  o.bias_only = variant == "debiased";
  o.seed = f.seed;
  run.option("variant", variant);
  run.option("steps", o.steps);
  run.option("lr", o.lr);
  run.option("include_final_block", o.include_final_block);
  lens::TrainHistory hist;
  auto l = lens::train_translators(m, seqs, o, &hist);
  lens::save_lens(run.path("lens.tlns"), l, m.config);
  Csv c({"step", "layer", "kl_nats"});
  for (std::size_t s = 0; s < hist.loss.size(); ++s)
    for (std::size_t l2 = 0; l2 < hist.loss[s].size(); ++l2)
      c.row({std::to_string(s), std::to_string(l2), num(hist.loss[s][l2])});
  run.csv("history.csv", c);
  run.finish();
}

void cmd_eval_lens(const Flags& f) {
  Run run("eval-lens", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  write_lens_report(run, "eval", lens::eval_per_layer(ptr(l), m, eval_seqs(run, f)));
  run.finish();
}

void cmd_bias(const Flags& f) {
  Run run("bias", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto seqs = eval_seqs(run, f);
  Csv c({"layer", "bias_bits"});
  for (int layer : layers_or(f, range(0, m.n_layers()), 0, m.n_layers()))
    c.row({std::to_string(layer), num(lens::marginal_bias(ptr(l), m, seqs, layer))});
  run.csv("bias.csv", c);
  run.finish();
}

void cmd_transfer(const Flags& f) {
  Run run("transfer", f);
  auto m = load_model(run, f.models.at(0));
  if (f.lens.empty()) throw std::invalid_argument("transfer needs --lens");
  run.input("lens", f.lens);
  auto l = lens::load_lens(f.lens, m.config);
  auto seqs = eval_seqs(run, f);
  Matrix p = lens::transfer_penalty_matrix(l, m, seqs);
  Csv c({"train_layer", "eval_layer", "penalty_nats"});
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j) c.row({std::to_string(i), std::to_string(j), num(p(i, j))});
  run.csv("transfer.csv", c);
  if (!f.target.empty()) {
    auto target = load_model(run, f.target, "target");
    write_lens_report(run, "transfer_model", lens::transfer_lens(l, m, target, seqs));
  }
  run.finish();
}

void cmd_covdrift(const Flags& f) {
  Run run("covdrift", f);
  auto m = load_model(run, f.models.at(0));
  auto seqs = eval_seqs(run, f);
  auto ls = layers_or(f, range(0, m.n_layers()), 0, m.n_layers());
  run.option("drop_outlier_dims", f.drop);
  std::vector<Matrix> cov;
  for (int layer : ls) cov.push_back(lens::hidden_covariance(m, seqs, layer));
  Csv c({"layer_a", "layer_b", "similarity"});
  for (std::size_t a = 0; a < ls.size(); ++a)
    for (std::size_t b = 0; b < ls.size(); ++b)
      c.row({std::to_string(ls[a]), std::to_string(ls[b]), num(lens::covariance_similarity(cov[a], cov[b], f.drop))});
  run.csv("covdrift.csv", c);
  run.finish();
}

void cmd_cbe(const Flags& f) {
  Run run("cbe", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto seqs = eval_seqs(run, f);
  causal::CbeOptions o;
  if (f.k > 0) o.k = f.k;
  o.seed = f.seed;
  run.option("k", o.k);
  std::vector<causal::CausalBasis> bases;
  Csv c({"layer", "index", "sigma_bits"});
  for (int layer : layers_or(f, {m.n_layers() / 2}, 0, m.n_layers())) {
    bases.push_back(causal::layer_basis(m, ptr(l), seqs, layer, o));
    for (std::size_t i = 0; i < bases.back().sigma.size(); ++i)
      c.row({std::to_string(layer), std::to_string(i), num(bases.back().sigma[i])});
  }
  causal::save_bases(run.path("bases.tlns"), bases);
  run.csv("cbe.csv", c);
  run.finish();
}

std::vector<causal::CausalBasis> load_bases(Run& run, const Flags& f) {
  if (f.bases.empty()) throw std::invalid_argument("needs --bases (written by cbe)");
  run.input("bases", f.bases);
  return causal::load_bases(f.bases);
}

void cmd_fidelity(const Flags& f) {
  Run run("fidelity", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto bases = load_bases(run, f);
  auto seqs = eval_seqs(run, f);
  json summary = json::array();
  for (const auto& b : bases) {
    auto rep = causal::layer_fidelity(m, ptr(l), b, seqs);
    Csv c({"index", "lens_bits", "model_bits"});
    for (const auto& r : rep.rows) c.row({std::to_string(r.index), num(r.lens_bits), num(r.model_bits)});
    run.csv("fidelity_" + std::to_string(b.layer) + ".csv", c);
    summary.push_back({{"layer", rep.layer}, {"spearman", rep.spearman}});
  }
  run.json_file("fidelity.json", {{"layers", summary}});
  run.finish();
}

void cmd_align(const Flags& f) {
  Run run("align", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto bases = load_bases(run, f);
  auto seqs = eval_seqs(run, f);
  aitchison::AlignmentOptions o;
  if (f.k > 0) o.top_m = f.k;
  o.seed = f.seed;
  run.option("top_m", o.top_m);
  auto rows = aitchison::alignment_sweep(m, ptr(l), bases, seqs, o);
  Csv c({"layer", "mean_similarity", "n_tokens"});
  json j = json::array();
  for (const auto& r : rows) {
    c.row({std::to_string(r.layer), num(r.mean_similarity), std::to_string(r.n_tokens)});
    j.push_back({{"layer", r.layer}, {"mean_similarity", r.mean_similarity}, {"n_tokens", r.n_tokens},
                 {"n_skipped", r.n_skipped}});
  }
  run.csv("align.csv", c);
  run.json_file("align.json", {{"layers", j}});
  run.finish();
}

void cmd_inject_eval(const Flags& f) {
  Run run("inject-eval", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto task = load_task(run, f);
  anomaly::DetectOptions o;
  o.detector = anomaly::detector_from_string(f.detector);
  o.n_splits = f.splits;
  o.seed = f.seed;
  o.inject = !f.no_inject;
  o.bootstrap_resamples = f.resamples;
  run.option("detector", anomaly::to_string(o.detector));
  run.option("splits", o.n_splits);
  run.option("inject", o.inject);
  run.option("resamples", o.bootstrap_resamples);
  auto r = anomaly::detect_eval(task, m, ptr(l), o);
  Csv c({"task", "detector", "auroc", "ci_lo", "ci_hi", "acc_normal", "acc_injected"});
  c.row({task.name, anomaly::to_string(o.detector), num(r.auroc), num(r.ci.lo), num(r.ci.hi), num(r.acc_normal),
         num(r.acc_injected)});
  run.csv("results.csv", c);
  run.finish();
}

anomaly::DemoMode demo_mode(const std::string& s) {
  if (s == "none") return anomaly::DemoMode::kNone;
  if (s == "correct") return anomaly::DemoMode::kCorrect;
  if (s == "incorrect") return anomaly::DemoMode::kIncorrect;
  throw std::invalid_argument("unknown demo mode: " + s);
}

void cmd_sweep_accuracy(const Flags& f) {
  Run run("sweep-accuracy", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  auto task = load_task(run, f);
  run.option("demos", f.demos);
  const auto mode = demo_mode(f.demos);
  auto raw = anomaly::layer_accuracy_sweep(task, m, ptr(l), mode, anomaly::Calibration::kNone);
  auto cal = anomaly::layer_accuracy_sweep(task, m, ptr(l), mode, anomaly::Calibration::kMedian);
  Csv c({"layer", "accuracy", "accuracy_calibrated"});
  for (std::size_t i = 0; i < raw.size(); ++i) c.row({std::to_string(i), num(raw[i]), num(cal[i])});
  run.csv("accuracy.csv", c);
  run.finish();
}

void cmd_depth(const Flags& f) {
  Run run("depth", f);
  std::vector<model::Transformer> ckpts;
  for (std::size_t i = 0; i < f.models.size(); ++i)
    ckpts.push_back(load_model(run, f.models[i], "model" + std::to_string(i)));
  if (f.lens.empty()) throw std::invalid_argument("depth needs --lens");
  run.input("lens", f.lens);
  auto l = lens::load_lens(f.lens, ckpts.back().config);
  auto task = load_task(run, f);
  auto records = difficulty::difficulty_records(task, ckpts, l);
  Csv c({"item_id", "depth_tuned", "depth_logit", "iteration_learned", "correct"});
  for (const auto& r : records)
    c.row({std::to_string(r.item), std::to_string(r.depth_tuned), std::to_string(r.depth_logit),
           std::to_string(r.iteration), r.correct ? "1" : "0"});
  run.csv("depth.csv", c);
  auto rep = difficulty::correlate(records);
  run.json_file("depth.json", {{"rho_tuned", rep.rho_tuned}, {"rho_logit", rep.rho_logit}, {"n_items", records.size()}});
  run.finish();
}

void cmd_diagnostics(const Flags& f) {
  Run run("diagnostics", f);
  auto m = load_model(run, f.models.at(0));
  auto seqs = eval_seqs(run, f);
  auto al = diagnostics::grad_residual_alignment(m, seqs);
  Csv a({"layer", "p5", "p50", "p95", "frac_negative"});
  for (const auto& s : al.layers) a.row({std::to_string(s.layer), num(s.p5), num(s.p50), num(s.p95), num(s.frac_negative)});
  run.csv("grad_alignment.csv", a);
  auto del = diagnostics::layer_deletion_sweep(m, seqs);
  Csv d({"layer", "perplexity_deleted", "perplexity_baseline"});
  for (const auto& r : del.rows) d.row({std::to_string(r.layer), num(r.perplexity), num(del.baseline)});
  run.csv("deletion.csv", d);
  const long dim = f.baseline_dim > 0 ? f.baseline_dim : static_cast<long>(f.seq_len) * m.config.d_model;
  const double p5 = diagnostics::random_cosine_baseline(dim, f.baseline_n, 5, f.seed);
  run.json_file("baseline.json", {{"dim", dim}, {"n", f.baseline_n}, {"p5", p5}});
  run.finish();
}

void cmd_staticlens(const Flags& f) {
  Run run("staticlens", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  staticlens::EmbeddingTable table;
  if (f.table.empty()) {
    table = staticlens::EmbeddingTable::from_unembedding(m);
  } else {
    run.input("table", f.table);
    table = staticlens::load_table(f.table);
  }
  staticlens::StaticOptions o;
  if (f.k > 0) o.k = f.k;
  o.max_vectors = f.max_vectors;
  o.n_shuffles = f.shuffles;
  o.seed = f.seed;
  run.option("k", o.k);
  run.option("max_vectors", o.max_vectors);
  run.option("shuffles", o.n_shuffles);
  auto rows = staticlens::static_report(m, ptr(l), table, layers_or(f, range(0, m.n_layers() - 1), 0, m.n_layers() - 1),
                                        staticlens::all_extractors(), o);
  Csv c({"extractor", "layer", "index", "score_real", "score_shuffled_mean"});
  for (const auto& r : rows)
    c.row({staticlens::to_string(r.extractor), std::to_string(r.layer), std::to_string(r.index), num(r.score_real),
           num(r.score_shuffled_mean)});
  run.csv("staticlens.csv", c);
  run.finish();
}

void cmd_heatmap(const Flags& f) {
  Run run("heatmap", f);
  auto m = load_model(run, f.models.at(0));
  auto l = resolve_lens(run, f, m.config);
  run.option("text", f.text);
  const auto toks = model::tokenize(f.text);
  auto cells = report::heatmap_cells(m, ptr(l), toks);
  Csv c({"layer", "position", "token", "prob"});
  for (const auto& x : cells)
    c.row({std::to_string(x.layer), std::to_string(x.position), std::to_string(x.token), num(x.prob)});
  run.csv("heatmap.csv", c);
  run.text("heatmap.svg", report::heatmap_svg(cells, toks));
  run.finish();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tuned lens toolkit"};
  app.require_subcommand(1);
  Flags f;
  std::map<CLI::App*, std::function<void(const Flags&)>> handlers;

  auto sub = [&](const std::string& name, const std::string& help, std::function<void(const Flags&)> fn) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--out", f.out, "output directory")->required();
    s->add_option("--seed", f.seed, "seed for all randomness");
    handlers[s] = std::move(fn);
    return s;
  };
  auto model = [&](CLI::App* s) { s->add_option("--model", f.models, "model file")->required()->check(CLI::ExistingFile); };
  auto lens_opts = [&](CLI::App* s) {
    s->add_option("--lens", f.lens, "lens file")->check(CLI::ExistingFile);
    s->add_option("--variant", f.variant, "plain, extended, debiased or tuned")
        ->check(CLI::IsMember({"plain", "extended", "debiased", "tuned"}));
  };
  auto corpus = [&](CLI::App* s) {
    s->add_option("--corpus", f.corpus, "byte corpus")->required()->check(CLI::ExistingFile);
    s->add_option("--seq-len", f.seq_len, "tokens per sequence");
    s->add_option("--max-seqs", f.max_seqs, "cap on sequences (-1 keeps all)");
  };
  auto task = [&](CLI::App* s) { s->add_option("--task", f.task, "task file (JSON lines)")->required()->check(CLI::ExistingFile); };
  auto layers = [&](CLI::App* s) { s->add_option("--layers", f.layers, "comma separated layers")->delimiter(','); };

  auto* s = sub("synth", "write the synthetic corpus and tasks", cmd_synth);
  s->add_option("--bytes", f.synth_bytes, "corpus size");

  s = sub("train-model", "train a base model", cmd_train_model);
  corpus(s);
  s->add_option("--steps", f.steps);
  s->add_option("--lr", f.lr);
  s->add_option("--batch", f.batch);
  s->add_option("--checkpoint-every", f.checkpoint_every);
  s->add_option("--n-layers", f.n_layers);
  s->add_option("--d-model", f.d_model);
  s->add_option("--n-heads", f.n_heads);

  s = sub("train-lens", "train translators", cmd_train_lens);
  model(s);
  corpus(s);
  s->add_option("--variant", f.variant)->check(CLI::IsMember({"tuned", "debiased"}));
  s->add_option("--steps", f.steps);
  s->add_option("--lr", f.lr);
  s->add_flag("--include-final-block", f.include_final_block);

  s = sub("eval-lens", "per-layer perplexity, KL and bias", cmd_eval_lens);
  model(s);
  lens_opts(s);
  corpus(s);

  s = sub("bias", "marginal bias per layer", cmd_bias);
  model(s);
  lens_opts(s);
  corpus(s);
  layers(s);

  s = sub("transfer", "transfer penalties across layers and models", cmd_transfer);
  model(s);
  s->add_option("--lens", f.lens)->required()->check(CLI::ExistingFile);
  s->add_option("--target", f.target, "second model with the same config")->check(CLI::ExistingFile);
  corpus(s);

  s = sub("covdrift", "hidden-state covariance similarity", cmd_covdrift);
  model(s);
  corpus(s);
  layers(s);
  s->add_option("--drop", f.drop, "outlier dimensions removed");

  s = sub("cbe", "causal basis extraction", cmd_cbe);
  model(s);
  lens_opts(s);
  corpus(s);
  layers(s);
  s->add_option("--k", f.k);

  s = sub("fidelity", "lens vs model influence of a basis", cmd_fidelity);
  model(s);
  lens_opts(s);
  corpus(s);
  s->add_option("--bases", f.bases)->required()->check(CLI::ExistingFile);

  s = sub("align", "stimulus-response alignment", cmd_align);
  model(s);
  lens_opts(s);
  corpus(s);
  s->add_option("--bases", f.bases)->required()->check(CLI::ExistingFile);
  s->add_option("--k", f.k, "basis directions ablated");

  s = sub("inject-eval", "prompt injection detection", cmd_inject_eval);
  model(s);
  lens_opts(s);
  task(s);
  s->add_option("--detector", f.detector)->check(CLI::IsMember({"iforest", "lof", "srm"}));
  s->add_flag("--no-inject", f.no_inject);
  s->add_option("--splits", f.splits);
  s->add_option("--resamples", f.resamples);

  s = sub("sweep-accuracy", "per-layer task accuracy", cmd_sweep_accuracy);
  model(s);
  lens_opts(s);
  task(s);
  s->add_option("--demos", f.demos)->check(CLI::IsMember({"none", "correct", "incorrect"}));

  s = sub("depth", "prediction depth vs iteration learned", cmd_depth);
  s->add_option("--model", f.models, "checkpoints, oldest first")->required()->check(CLI::ExistingFile);
  s->add_option("--lens", f.lens)->required()->check(CLI::ExistingFile);
  task(s);

  s = sub("diagnostics", "gradient alignment and layer deletion", cmd_diagnostics);
  model(s);
  corpus(s);
  s->add_option("--baseline-n", f.baseline_n);
  s->add_option("--baseline-dim", f.baseline_dim);

  s = sub("staticlens", "static weight interpretability", cmd_staticlens);
  model(s);
  lens_opts(s);
  layers(s);
  s->add_option("--k", f.k);
  s->add_option("--table", f.table, "embedding table")->check(CLI::ExistingFile);
  s->add_option("--max-vectors", f.max_vectors);
  s->add_option("--shuffles", f.shuffles);

  s = sub("heatmap", "prediction trajectory heatmap", cmd_heatmap);
  model(s);
  lens_opts(s);
  s->add_option("--text", f.text)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    for (auto& [app_ptr, fn] : handlers)
      if (app_ptr->parsed()) fn(f);
  } catch (const std::exception& e) {
    std::cerr << "tlens: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
