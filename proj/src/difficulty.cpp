#include "tuned_lens/difficulty.hpp"

#include <stdexcept>

#include "tuned_lens/anomaly.hpp"
#include "tuned_lens/numerics.hpp"

namespace tuned_lens::difficulty {

int top1(const Eigen::Ref<const RowVector>& scores) {
  if (scores.size() == 0) throw std::invalid_argument("top1: empty scores");
  int best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(best)) best = static_cast<int>(i);
  return best;
}

namespace {

int stable_suffix_start(std::span<const int> xs) {
  int j = static_cast<int>(xs.size()) - 1;
  while (j > 0 && xs[static_cast<std::size_t>(j - 1)] == xs.back()) --j;
  return j;
}

}  // namespace

int prediction_depth(std::span<const int> top1_by_layer) {
  if (top1_by_layer.empty()) throw std::invalid_argument("prediction_depth: empty list");
  return stable_suffix_start(top1_by_layer);
}

int iteration_learned(std::span<const int> top1_by_checkpoint) {
  if (top1_by_checkpoint.empty()) throw std::invalid_argument("iteration_learned: empty list");
  return stable_suffix_start(top1_by_checkpoint);
}

std::vector<DifficultyRecord> difficulty_records(const data::McTask& task,
                                                 const std::vector<model::Transformer>& checkpoints,
                                                 const lens::TunedLens& lens) {
  if (checkpoints.size() < 2) throw std::invalid_argument("difficulty: need at least two checkpoints");
  if (task.items.empty()) throw std::invalid_argument("difficulty: empty task");
  data::validate(task);
  const auto& final_model = checkpoints.back();
  lens.check_compatible(final_model.config);
  const int L = final_model.n_layers();

  std::vector<DifficultyRecord> out;
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const auto& item = task.items[i];
    DifficultyRecord r;
    r.item = static_cast<int>(i);
    auto tuned = anomaly::trajectory(final_model, &lens, item);
    auto logit = anomaly::trajectory(final_model, nullptr, item);
    std::vector<int> by_layer_t, by_layer_l;
    for (int l = 0; l <= L; ++l) {
      by_layer_t.push_back(top1(tuned.logprobs.row(l)));
      by_layer_l.push_back(top1(logit.logprobs.row(l)));
    }
    r.depth_tuned = prediction_depth(by_layer_t);
    r.depth_logit = prediction_depth(by_layer_l);
    r.correct = by_layer_l.back() == item.gold;

    std::vector<int> by_ckpt;
    for (std::size_t c = 0; c + 1 < checkpoints.size(); ++c) {
      auto tr = anomaly::trajectory(checkpoints[c], nullptr, item);
      by_ckpt.push_back(top1(tr.logprobs.row(checkpoints[c].n_layers())));
    }
    by_ckpt.push_back(by_layer_l.back());
    r.iteration = iteration_learned(by_ckpt);

    out.push_back(r);
  }
  return out;
}

DifficultyReport correlate(std::vector<DifficultyRecord> records) {
  std::vector<double> dt, dl, it;
  for (const auto& r : records) {
    dt.push_back(r.depth_tuned);
    dl.push_back(r.depth_logit);
    it.push_back(r.iteration);
  }
  DifficultyReport rep;
  rep.rho_tuned = numerics::spearman_rho(dt, it);
  rep.rho_logit = numerics::spearman_rho(dl, it);
  rep.records = std::move(records);
  return rep;
}

DifficultyReport difficulty_correlation(const data::McTask& task,
                                        const std::vector<model::Transformer>& checkpoints,
                                        const lens::TunedLens& lens) {
  return correlate(difficulty_records(task, checkpoints, lens));
}

}  // namespace tuned_lens::difficulty
