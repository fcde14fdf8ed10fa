#pragma once

#include <span>
#include <vector>

#include "tuned_lens/data.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::difficulty {

/// Index of the highest score; the lowest index wins exact ties.
int top1(const Eigen::Ref<const RowVector>& scores);

/// Smallest j such that entries j..end are all equal (0 for a constant list).
int prediction_depth(std::span<const int> top1_by_layer);

/// Smallest c such that entries c..end all equal the last entry.
int iteration_learned(std::span<const int> top1_by_checkpoint);

struct DifficultyRecord {
  int item = 0;
  int depth_tuned = 0;
  int depth_logit = 0;
  int iteration = 0;
  bool correct = false;
};

struct DifficultyReport {
  double rho_tuned = 0;
  double rho_logit = 0;
  std::vector<DifficultyRecord> records;
};

/// Per-item records without the correlation.
std::vector<DifficultyRecord> difficulty_records(const data::McTask& task,
                                                 const std::vector<model::Transformer>& checkpoints,
                                                 const lens::TunedLens& lens);

/// Spearman of each depth against iteration learned.
DifficultyReport correlate(std::vector<DifficultyRecord> records);

/// Depths come from the last checkpoint's lens trajectories (tuned lens and
/// logit lens); iteration learned from the final-layer top-1 of every
/// checkpoint. Spearman errors on a constant metric are propagated.
DifficultyReport difficulty_correlation(const data::McTask& task,
                                        const std::vector<model::Transformer>& checkpoints,
                                        const lens::TunedLens& lens);

}  // namespace tuned_lens::difficulty
