#include "far/attribution.hpp"

#include "far/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace far {

std::string_view to_string(SaliencyTarget t) {
  switch (t) {
    case SaliencyTarget::norm: return "norm";
    case SaliencyTarget::sum: return "sum";
    case SaliencyTarget::logit: return "logit";
  }
  return "norm";
}

SaliencyTarget parse_saliency_target(std::string_view text) {
  if (text == "norm") return SaliencyTarget::norm;
  if (text == "sum") return SaliencyTarget::sum;
  if (text == "logit") return SaliencyTarget::logit;
  throw ConfigError("unknown saliency target '" + std::string(text) + "' (expected norm, sum or logit)");
}

Eigen::MatrixXd min_max_normalize(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return m;
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  if (hi - lo <= 0.0) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
  return (m.array() - lo) / (hi - lo);
}

Eigen::MatrixXd row_normalize(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double s = m.row(r).sum();
    if (s > 0.0) out.row(r) /= s;
  }
  return out;
}

double band_mass_fraction(const Eigen::MatrixXd& m, int width) {
  double band = 0.0;
  double total = 0.0;
  for (Eigen::Index q = 0; q < m.rows(); ++q) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      total += m(q, k);
      if (std::abs(q - k) <= width) band += m(q, k);
    }
  }
  return total > 0.0 ? band / total : 0.0;
}

double uniform_band_fraction(Eigen::Index size, int width) {
  return band_mass_fraction(Eigen::MatrixXd::Ones(size, size), width);
}

std::vector<unsigned char> pgm_bytes(const Eigen::MatrixXd& m) {
  const std::string header = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  const double hi = m.size() ? m.maxCoeff() : 0.0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = hi > 0.0 ? std::clamp(m(r, c) / hi, 0.0, 1.0) * 255.0 : 0.0;
      out.push_back(static_cast<unsigned char>(std::lround(v)));
    }
  }
  return out;
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
  std::string out;
  char buf[64];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      // Shortest representation that parses back to the same double.
      const auto res = std::to_chars(buf, buf + sizeof buf, m(r, c));
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

Eigen::MatrixXd parse_matrix_csv(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      auto comma = line.find(',', start);
      if (comma == std::string_view::npos) comma = line.size();
      double v = 0.0;
      const auto cell = line.substr(start, comma - start);
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw std::runtime_error("matrix csv: bad value '" + std::string(cell) + "' on row " + std::to_string(rows.size() + 1));
      }
      row.push_back(v);
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw std::runtime_error("matrix csv: ragged rows");
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_matrix_csv(ss.str());
}

void export_heatmap(const Eigen::MatrixXd& m, const std::string& prefix) {
  const auto pgm = pgm_bytes(m);
  const auto csv = matrix_csv(m);
  try {
    write_file_atomic(prefix + ".pgm", std::as_bytes(std::span(pgm)));
    write_file_atomic(prefix + ".csv", std::as_bytes(std::span(csv.data(), csv.size())));
  } catch (const CheckpointError& e) {
    throw std::runtime_error(std::string("export_heatmap: ") + e.what());
  }
}

}  // namespace far
