#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::io {

/// One named f32 tensor. Shapes of rank 1 are stored as a single row.
struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  MatrixF data;
};

/// "TLNS" container: magic, u32 version, u32 header length, JSON header,
/// little-endian f32 payload.
struct Container {
  nlohmann::json header;  // everything except the tensor directory
  std::vector<Tensor> tensors;

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  void add(std::string name, const MatrixF& m);
  void add_vector(std::string name, const RowVectorT<float>& v);
};

inline constexpr std::uint32_t kFormatVersion = 1;

std::string serialize(const Container& c);
Container parse(const std::string& bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

void save(const std::filesystem::path& path, const Container& c);
Container load(const std::filesystem::path& path);

nlohmann::json config_to_json(const model::ModelConfig& c);
model::ModelConfig config_from_json(const nlohmann::json& j);

/// Model parameters are always stored as f32.
Container model_container(const model::TransformerF& m, const nlohmann::json& meta = {});
model::TransformerF model_from_container(const Container& c);

void save_model(const std::filesystem::path& path, const model::TransformerF& m,
                const nlohmann::json& meta = {});
model::TransformerF load_model(const std::filesystem::path& path);

}  // namespace tuned_lens::io
