#include "tuned_lens/staticlens.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "tuned_lens/numerics.hpp"

namespace tuned_lens::staticlens {

EmbeddingTable EmbeddingTable::from_rows(Matrix rows) {
  if (rows.rows() == 0 || rows.cols() == 0) throw std::invalid_argument("EmbeddingTable: empty");
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double n = rows.row(r).norm();
    if (!(n > 0)) throw std::invalid_argument("EmbeddingTable: zero row " + std::to_string(r));
    rows.row(r) /= n;
  }
  return {std::move(rows)};
}

EmbeddingTable EmbeddingTable::from_unembedding(const model::Transformer& m) {
  return from_rows(m.unembed.transpose());
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("embedding table: truncated header");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

EmbeddingTable load_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open embedding table " + path.string());
  const std::uint32_t count = get_u32(is), dim = get_u32(is);
  if (count == 0 || dim == 0) throw std::runtime_error("embedding table: empty");
  Matrix rows(count, dim);
  for (std::uint32_t r = 0; r < count; ++r)
    for (std::uint32_t c = 0; c < dim; ++c) {
      std::uint32_t bits = get_u32(is);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      rows(r, c) = f;
    }
  return EmbeddingTable::from_rows(std::move(rows));
}

void save_table(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write embedding table " + path.string());
  put_u32(os, static_cast<std::uint32_t>(table.vectors.rows()));
  put_u32(os, static_cast<std::uint32_t>(table.vectors.cols()));
  for (Eigen::Index r = 0; r < table.vectors.rows(); ++r)
    for (Eigen::Index c = 0; c < table.vectors.cols(); ++c) {
      float f = static_cast<float>(table.vectors(r, c));
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(os, bits);
    }
}

std::vector<int> project_param(const Vector& v, const model::Transformer& m,
                               const lens::TunedLens* lens, int layer, int k) {
  const auto V = static_cast<int>(m.unembed.cols());
  if (k < 1 || k > V) throw std::invalid_argument("project_param: k must be in [1, V]");
  if (v.size() != m.d_model()) throw std::invalid_argument("project_param: dimension mismatch");
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("project_param: bad layer");
  RowVector x = v.transpose();
  if (lens && layer < m.n_layers()) {
    lens->check_compatible(m.config);
    x = x * lens->translators[static_cast<std::size_t>(layer)].A.transpose();
  }
  RowVector logits = x * m.unembed;
  std::vector<int> ids(static_cast<std::size_t>(V));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logits(a) > logits(b); });
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

double interpretability_score(const std::vector<int>& tokens, const EmbeddingTable& table) {
  if (tokens.empty()) throw std::invalid_argument("interpretability_score: no tokens");
  RowVector sum = RowVector::Zero(table.vectors.cols());
  for (int t : tokens) {
    if (t < 0 || t >= table.vectors.rows())
      throw std::out_of_range("interpretability_score: token " + std::to_string(t) + " not in table");
    sum += table.vectors.row(t);
  }
  // sum_ij e_i . e_j = |sum_i e_i|^2
  const double k = static_cast<double>(tokens.size());
  return std::clamp(sum.squaredNorm() / (k * k), -1.0, 1.0);
}

Matrix shuffle_baseline(const Matrix& w, std::uint64_t seed, int n_blocks) {
  if (w.size() == 0) throw std::invalid_argument("shuffle_baseline: empty matrix");
  if (n_blocks < 1 || w.cols() % n_blocks != 0)
    throw std::invalid_argument("shuffle_baseline: columns do not split into equal blocks");
  numerics::Rng rng(seed);
  Matrix out = w;
  const Eigen::Index width = w.cols() / n_blocks;
  for (int b = 0; b < n_blocks; ++b) {
    std::vector<double> vals;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = b * width; c < (b + 1) * width; ++c) vals.push_back(w(r, c));
    for (std::size_t i = vals.size() - 1; i > 0; --i) std::swap(vals[i], vals[rng.index(i + 1)]);
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = b * width; c < (b + 1) * width; ++c) out(r, c) = vals[i++];
  }
  return out;
}

std::string to_string(Extractor e) {
  switch (e) {
    case Extractor::kMlpOutRows:
      return "mlp_out_rows";
    case Extractor::kMlpInCols:
      return "mlp_in_cols";
    case Extractor::kMlpOutSvd:
      return "mlp_out_svd";
    case Extractor::kMlpInSvd:
      return "mlp_in_svd";
    case Extractor::kOvSvd:
      return "ov_svd";
    case Extractor::kQkSvd:
      return "qk_svd";
  }
  return "unknown";
}

const std::vector<Extractor>& all_extractors() {
  static const std::vector<Extractor> all = {Extractor::kMlpOutRows, Extractor::kMlpInCols,
                                             Extractor::kMlpOutSvd,  Extractor::kMlpInSvd,
                                             Extractor::kOvSvd,      Extractor::kQkSvd};
  return all;
}

Extractor extractor_from_string(const std::string& name) {
  for (auto e : all_extractors())
    if (to_string(e) == name) return e;
  throw std::invalid_argument("unknown extractor '" + name + "'");
}

namespace {

// Sign fixed so the largest-magnitude entry is positive.
Vector canonical_sign(Vector v) {
  Eigen::Index i;
  v.cwiseAbs().maxCoeff(&i);
  if (v(i) < 0) v = -v;
  return v;
}

void push_columns(std::vector<Vector>& out, const Matrix& cols, int max_vectors) {
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(max_vectors, cols.cols()); ++c)
    out.push_back(canonical_sign(cols.col(c)));
}

Matrix left_singular(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU);
  return svd.matrixU();
}

Matrix right_singular(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinV);
  return svd.matrixV();
}

}  // namespace

std::vector<Vector> extract(const model::Transformer& m, int block, Extractor e, int max_vectors) {
  if (block < 0 || block >= m.n_layers()) throw std::out_of_range("extract: bad block");
  if (max_vectors < 1) throw std::invalid_argument("extract: max_vectors must be positive");
  const auto& b = m.blocks[static_cast<std::size_t>(block)];
  const Eigen::Index d = m.d_model();
  const int H = m.config.n_heads;
  const Eigen::Index dh = d / H;
  std::vector<Vector> out;
  switch (e) {
    case Extractor::kMlpOutRows:
      push_columns(out, b.w_proj.transpose(), max_vectors);
      break;
    case Extractor::kMlpInCols:
      push_columns(out, b.w_fc, max_vectors);
      break;
    case Extractor::kMlpOutSvd:
      push_columns(out, right_singular(b.w_proj), max_vectors);
      break;
    case Extractor::kMlpInSvd:
      push_columns(out, left_singular(b.w_fc), max_vectors);
      break;
    case Extractor::kOvSvd:
      for (int h = 0; h < H; ++h) {
        Matrix ov = b.w_qkv.block(0, 2 * d + h * dh, d, dh) * b.w_out.block(h * dh, 0, dh, d);
        push_columns(out, right_singular(ov), max_vectors);
      }
      break;
    case Extractor::kQkSvd:
      for (int h = 0; h < H; ++h) {
        Matrix qk = b.w_qkv.block(0, h * dh, d, dh) * b.w_qkv.block(0, d + h * dh, d, dh).transpose();
        push_columns(out, left_singular(qk), max_vectors);
      }
      break;
  }
  return out;
}

int decode_layer(Extractor e, int block) {
  switch (e) {
    case Extractor::kMlpOutRows:
    case Extractor::kMlpOutSvd:
    case Extractor::kOvSvd:
      return block + 1;
    default:
      return block;
  }
}

model::Transformer shuffle_block(const model::Transformer& m, int block, std::uint64_t seed) {
  if (block < 0 || block >= m.n_layers()) throw std::out_of_range("shuffle_block: bad block");
  model::Transformer out = m;
  auto& b = out.blocks[static_cast<std::size_t>(block)];
  const int H = m.config.n_heads;
  b.w_qkv = shuffle_baseline(b.w_qkv, seed * 4 + 0, 3 * H);
  b.w_out = shuffle_baseline(b.w_out.transpose(), seed * 4 + 1, H).transpose();
  b.w_fc = shuffle_baseline(b.w_fc, seed * 4 + 2);
  b.w_proj = shuffle_baseline(b.w_proj, seed * 4 + 3);
  return out;
}

std::vector<ScoreRow> static_report(const model::Transformer& m, const lens::TunedLens* lens,
                                    const EmbeddingTable& table, const std::vector<int>& blocks,
                                    const std::vector<Extractor>& extractors,
                                    const StaticOptions& options) {
  if (table.vectors.rows() < m.config.vocab_size)
    throw std::invalid_argument("static_report: embedding table smaller than the vocabulary");
  if (options.n_shuffles < 1) throw std::invalid_argument("static_report: need at least one shuffle");
  std::vector<ScoreRow> rows;
  for (int block : blocks) {
    std::vector<model::Transformer> shuffled;
    for (int s = 0; s < options.n_shuffles; ++s)
      shuffled.push_back(shuffle_block(m, block, options.seed + 1000ull * static_cast<std::uint64_t>(block) +
                                                     static_cast<std::uint64_t>(s)));
    for (Extractor e : extractors) {
      const int layer = decode_layer(e, block);
      auto score = [&](const model::Transformer& src, const Vector& v) {
        return interpretability_score(project_param(v, src, lens, layer, options.k), table);
      };
      auto real = extract(m, block, e, options.max_vectors);
      std::vector<std::vector<Vector>> fake;
      for (const auto& sm : shuffled) fake.push_back(extract(sm, block, e, options.max_vectors));
      for (std::size_t i = 0; i < real.size(); ++i) {
        ScoreRow r;
        r.extractor = e;
        r.layer = block;
        r.index = static_cast<int>(i);
        r.score_real = score(m, real[i]);
        double total = 0;
        int above = 0;
        for (std::size_t s = 0; s < fake.size(); ++s) {
          const double f = score(shuffled[s], fake[s][i]);
          total += f;
          above += f > r.score_real;
        }
        r.score_shuffled_mean = total / static_cast<double>(fake.size());
        r.rank = 1 + above;
        rows.push_back(r);
      }
    }
  }
  return rows;
}

}  // namespace tuned_lens::staticlens
