#include "far/hoyer.hpp"

#include <iomanip>

namespace far {

std::vector<RetentionRow> retention_report(std::span<const PruneMask> masks) {
  std::vector<RetentionRow> rows;
  for (std::size_t l = 0; l < masks.size(); ++l) {
    for (std::size_t n = 0; n < masks[l].heads.size(); ++n) {
      for (auto d : {Direction::forward, Direction::reverse}) {
        const auto& m = masks[l].heads[n][static_cast<std::size_t>(d)];
        rows.push_back({static_cast<int>(l), static_cast<int>(n), d, m.retained(), m.total(), m.retention()});
      }
    }
  }
  return rows;
}

std::string retention_csv(std::span<const RetentionRow> rows) {
  std::ostringstream out;
  out << "layer,head,direction,retained,total,ratio\n";
  out << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.layer << ',' << r.head << ',' << direction_name(r.direction) << ',' << r.retained << ',' << r.total << ','
        << r.ratio << '\n';
  }
  return out.str();
}

double mean_retention(std::span<const RetentionRow> rows) {
  if (rows.empty()) return 1.0;
  double total = 0.0;
  for (const auto& r : rows) total += r.ratio;
  return total / static_cast<double>(rows.size());
}

}  // namespace far
