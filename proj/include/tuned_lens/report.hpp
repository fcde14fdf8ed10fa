#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::report {

/// Shortest round-trip-safe text for a double ("%.17g"), with -0 printed as 0.
std::string num(double x);

class Csv {
 public:
  explicit Csv(std::vector<std::string> header);
  /// Throws when the field count differs from the header.
  void row(std::vector<std::string> fields);
  std::string str() const;
  void write(const std::filesystem::path& path) const;
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Pretty-printed with sorted keys and a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

struct HeatmapCell {
  int layer = 0;
  int position = 0;
  int token = 0;       // top-1 under the lens, lowest id on ties
  double prob = 0;     // its probability
};

/// One cell per (layer 0..L, position) of the lens trajectory.
std::vector<HeatmapCell> heatmap_cells(const model::Transformer& m, const lens::TunedLens* lens,
                                       const std::vector<int>& tokens);

/// Printable label for a byte token.
std::string token_label(int token);

/// Grid with layers as rows (final layer on top) and positions as columns.
/// Fill opacity equals the cell's probability.
std::string heatmap_svg(const std::vector<HeatmapCell>& cells, const std::vector<int>& tokens);

}  // namespace tuned_lens::report
