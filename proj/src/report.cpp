#include "tuned_lens/report.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tuned_lens/difficulty.hpp"
#include "tuned_lens/kernels.hpp"

namespace tuned_lens::report {

std::string num(double x) {
  if (x == 0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

Csv::Csv(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw std::invalid_argument("Csv: empty header");
}

void Csv::row(std::vector<std::string> fields) {
  if (fields.size() != header_.size()) throw std::invalid_argument("Csv: field count mismatch");
  rows_.push_back(std::move(fields));
}

namespace {

std::string quoted(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::string Csv::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& fs) {
    for (std::size_t i = 0; i < fs.size(); ++i) {
      if (i) out += ',';
      out += quoted(fs[i]);
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void Csv::write(const std::filesystem::path& path) const { write_text(path, str()); }

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::vector<HeatmapCell> heatmap_cells(const model::Transformer& m, const lens::TunedLens* lens,
                                       const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("heatmap: empty trace");
  if (lens) lens->check_compatible(m.config);
  auto tr = model::forward_trace(m, tokens);
  std::vector<HeatmapCell> cells;
  for (int l = 0; l <= m.n_layers(); ++l) {
    const Matrix& h = tr.hidden[static_cast<std::size_t>(l)];
    Matrix logits = lens ? lens::apply(*lens, m, l, h) : lens::logit_lens(m, h);
    Matrix lp = kernels::log_softmax<double>(logits);
    for (Eigen::Index t = 0; t < lp.rows(); ++t) {
      const int best = difficulty::top1(lp.row(t));
      cells.push_back({l, static_cast<int>(t), best, std::exp(lp(t, best))});
    }
  }
  return cells;
}

std::string token_label(int token) {
  if (token == ' ') return "␣";
  if (token == '\n') return "↵";
  if (token >= 33 && token <= 126) return std::string(1, static_cast<char>(token));
  char buf[8];
  std::snprintf(buf, sizeof buf, "x%02x", token);
  return buf;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

std::string heatmap_svg(const std::vector<HeatmapCell>& cells, const std::vector<int>& tokens) {
  if (cells.empty()) throw std::invalid_argument("heatmap: empty trace");
  int layers = 0;
  for (const auto& c : cells) layers = std::max(layers, c.layer + 1);
  const int T = static_cast<int>(tokens.size());
  if (static_cast<int>(cells.size()) != layers * T) throw std::invalid_argument("heatmap: ragged cells");
  constexpr int kCell = 36, kLeft = 70, kTop = 10, kBottom = 40;
  const int width = kLeft + T * kCell + 10, height = kTop + layers * kCell + kBottom;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"12\">\n";
  for (const auto& c : cells) {
    const int x = kLeft + c.position * kCell;
    const int y = kTop + (layers - 1 - c.layer) * kCell;
    os << "<g class=\"cell\" data-layer=\"" << c.layer << "\" data-pos=\"" << c.position << "\">"
       << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << kCell << "\" height=\"" << kCell
       << "\" fill=\"#1f5fa8\" fill-opacity=\"" << num(c.prob) << "\" stroke=\"#ffffff\"/>"
       << "<text x=\"" << x + kCell / 2 << "\" y=\"" << y + kCell / 2 + 4
       << "\" text-anchor=\"middle\">" << xml_escape(token_label(c.token)) << "</text></g>\n";
  }
  for (int l = 0; l < layers; ++l)
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + (layers - 1 - l) * kCell + kCell / 2 + 4
       << "\" text-anchor=\"end\">" << (l == layers - 1 ? "output" : "h" + std::to_string(l))
       << "</text>\n";
  for (int t = 0; t < T; ++t)
    os << "<text x=\"" << kLeft + t * kCell + kCell / 2 << "\" y=\"" << kTop + layers * kCell + 18
       << "\" text-anchor=\"middle\">" << xml_escape(token_label(tokens[static_cast<std::size_t>(t)]))
       << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace tuned_lens::report
