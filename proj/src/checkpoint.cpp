#include "tuned_lens/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tuned_lens::io {

static_assert(std::endian::native == std::endian::little, "payload is written natively");

namespace {

constexpr char kMagic[4] = {'T', 'L', 'N', 'S'};

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) {
    if (s < 0) throw std::runtime_error("checkpoint: negative extent");
    n *= s;
  }
  return n;
}

}  // namespace

const Tensor& Container::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw std::runtime_error("checkpoint: missing tensor " + name);
}

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

void Container::add(std::string name, const MatrixF& m) {
  tensors.push_back({std::move(name), {m.rows(), m.cols()}, m});
}

void Container::add_vector(std::string name, const RowVectorT<float>& v) {
  tensors.push_back({std::move(name), {v.size()}, MatrixF(v)});
}

std::string serialize(const Container& c) {
  nlohmann::json header = c.header;
  nlohmann::json dir = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (element_count(t.shape) != t.data.size())
      throw std::invalid_argument("checkpoint: shape does not match data for " + t.name);
    dir.push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}});
    offset += static_cast<std::int64_t>(t.data.size()) * 4;
  }
  header["tensors"] = dir;
  std::string text = header.dump();
  std::string out(kMagic, 4);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& t : c.tensors)
    out.append(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::size_t>(t.data.size()) * 4);
  return out;
}

Container parse(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  std::uint32_t version = get_u32(bytes, 4);
  if (version != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::uint32_t len = get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(len) > bytes.size())
    throw std::runtime_error("checkpoint: truncated header");
  Container c;
  c.header = nlohmann::json::parse(bytes.substr(12, len));
  const std::size_t base = 12 + len;
  nlohmann::json dir = c.header.at("tensors");
  c.header.erase("tensors");
  for (const auto& e : dir) {
    if (e.at("dtype") != "f32") throw std::runtime_error("checkpoint: unsupported dtype");
    Tensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    if (t.shape.empty() || t.shape.size() > 2)
      throw std::runtime_error("checkpoint: unsupported rank for " + t.name);
    std::int64_t n = element_count(t.shape);
    auto offset = e.at("offset").get<std::int64_t>();
    if (offset < 0 || base + static_cast<std::size_t>(offset + n * 4) > bytes.size())
      throw std::runtime_error("checkpoint: payload out of range for " + t.name);
    Eigen::Index rows = t.shape.size() == 2 ? t.shape[0] : 1;
    Eigen::Index cols = t.shape.back();
    t.data.resize(rows, cols);
    std::memcpy(t.data.data(), bytes.data() + base + offset, static_cast<std::size_t>(n) * 4);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save(const std::filesystem::path& path, const Container& c) { write_file(path, serialize(c)); }
Container load(const std::filesystem::path& path) { return parse(read_file(path)); }

nlohmann::json config_to_json(const model::ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"eps", c.eps}};
}

model::ModelConfig config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.eps = j.at("eps").get<double>();
  c.validate();
  return c;
}

Container model_container(const model::TransformerF& m, const nlohmann::json& meta) {
  Container c;
  c.header["kind"] = "model";
  c.header["config"] = config_to_json(m.config);
  c.header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  m.for_each_parameter([&](const std::string& name, const MatrixF& w) { c.add(name, w); });
  return c;
}

model::TransformerF model_from_container(const Container& c) {
  if (c.header.value("kind", "") != "model") throw std::runtime_error("checkpoint: not a model");
  model::TransformerF m(config_from_json(c.header.at("config")));
  m.for_each_parameter([&](const std::string& name, MatrixF& w) {
    const Tensor& t = c.get(name);
    if (t.data.rows() != w.rows() || t.data.cols() != w.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    w = t.data;
  });
  return m;
}

void save_model(const std::filesystem::path& path, const model::TransformerF& m,
                const nlohmann::json& meta) {
  save(path, model_container(m, meta));
}

model::TransformerF load_model(const std::filesystem::path& path) {
  return model_from_container(load(path));
}

}  // namespace tuned_lens::io
