#pragma once

// Semantic change detection scores over an (N_c+1)^2 confusion matrix whose
// index 0 is "no change" and index c+1 is semantic class c in a changed
// region. Rows are predictions, columns are ground truth.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "gscd/errors.hpp"

namespace gscd {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes) : n_(n_classes + 1), m_(n_ * n_, 0) {
    if (n_classes == 0) throw ValueError("confusion matrix needs at least one class");
  }

  std::size_t size() const { return n_; }
  std::size_t n_classes() const { return n_ - 1; }
  std::uint64_t at(std::size_t pred, std::size_t truth) const { return m_[pred * n_ + truth]; }
  std::uint64_t& at(std::size_t pred, std::size_t truth) { return m_[pred * n_ + truth]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : m_) s += v;
    return s;
  }

  /// Adds one temporal's worth of pixels. Semantic maps hold classes in
  /// [0, N_c); change maps hold 0/1.
  void add_temporal(const std::vector<int>& pred_sem, const std::vector<int>& true_sem,
                    const std::vector<int>& pred_cd, const std::vector<int>& true_cd) {
    const std::size_t n = pred_sem.size();
    if (true_sem.size() != n || pred_cd.size() != n || true_cd.size() != n) {
      throw ShapeError("confusion matrix: map sizes differ");
    }
    for (std::size_t p = 0; p < n; ++p) at(scd_id(pred_sem[p], pred_cd[p]), scd_id(true_sem[p], true_cd[p]))++;
  }

  void accumulate(const std::vector<int>& pred1, const std::vector<int>& pred2, const std::vector<int>& y1,
                  const std::vector<int>& y2, const std::vector<int>& pred_cd, const std::vector<int>& y_cd) {
    add_temporal(pred1, y1, pred_cd, y_cd);
    add_temporal(pred2, y2, pred_cd, y_cd);
  }

  ConfusionMatrix& merge(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw ShapeError("confusion matrix: merging different class counts");
    for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += o.m_[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t scd_id(int sem, int cd) const {
    if (cd != 0 && cd != 1) throw ValueError("change map value " + std::to_string(cd) + " is not 0/1");
    if (sem < 0 || static_cast<std::size_t>(sem) >= n_ - 1) {
      throw ValueError("class id " + std::to_string(sem) + " out of range [0, " + std::to_string(n_ - 1) + ")");
    }
    return cd ? static_cast<std::size_t>(sem) + 1 : 0;
  }

  std::size_t n_;
  std::vector<std::uint64_t> m_;
};

struct ScdScores {
  double oa = 0.0;
  double miou = 0.0;
  double sek = 0.0;
  double fscd = 0.0;
  double iou_nochange = 0.0;
  double iou_change = 0.0;
  double kappa = 0.0;
};

/// Ratios with an empty denominator, and kappa with no chance disagreement
/// left, count as perfect agreement (1).
inline ScdScores scores(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  const double total = static_cast<double>(cm.total());
  if (total == 0.0) throw ValueError("scores: empty confusion matrix");
  ScdScores s;
  double trace = 0.0, row0 = 0.0, col0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    trace += static_cast<double>(cm.at(i, i));
    row0 += static_cast<double>(cm.at(0, i));
    col0 += static_cast<double>(cm.at(i, 0));
  }
  const double m00 = static_cast<double>(cm.at(0, 0));
  s.oa = trace / total;
  const double union0 = row0 + col0 - m00;
  s.iou_nochange = union0 > 0.0 ? m00 / union0 : 1.0;
  const double changed_both = total - row0 - col0 + m00;  // sum over i, j >= 1
  const double union1 = total - m00;
  s.iou_change = union1 > 0.0 ? changed_both / union1 : 1.0;
  s.miou = 0.5 * (s.iou_nochange + s.iou_change);

  // Kappa of the matrix with m00 removed.
  const double q_total = total - m00;
  if (q_total > 0.0) {
    double agree = trace - m00, expected = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0, col = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row += static_cast<double>(cm.at(i, j));
        col += static_cast<double>(cm.at(j, i));
      }
      if (i == 0) {
        row -= m00;
        col -= m00;
      }
      expected += row * col;
    }
    const double rho = agree / q_total, eta = expected / (q_total * q_total);
    s.kappa = (1.0 - eta) > 1e-15 ? (rho - eta) / (1.0 - eta) : 1.0;
  } else {
    s.kappa = 1.0;
  }
  s.sek = std::exp(s.iou_change - 1.0) * s.kappa;

  double hits = 0.0;
  for (std::size_t i = 1; i < n; ++i) hits += static_cast<double>(cm.at(i, i));
  const double pred_changed = total - row0, true_changed = total - col0;
  const double precision = pred_changed > 0.0 ? hits / pred_changed : 1.0;
  const double recall = true_changed > 0.0 ? hits / true_changed : 1.0;
  s.fscd = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return s;
}

/// Shortest text that parses back to exactly v.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

/// key=value lines, one per score.
inline std::string scores_report(const ScdScores& s) {
  std::ostringstream os;
  os << "oa=" << format_double(s.oa) << "\n"
     << "miou=" << format_double(s.miou) << "\n"
     << "sek=" << format_double(s.sek) << "\n"
     << "fscd=" << format_double(s.fscd) << "\n"
     << "iou_nochange=" << format_double(s.iou_nochange) << "\n"
     << "iou_change=" << format_double(s.iou_change) << "\n"
     << "kappa=" << format_double(s.kappa) << "\n";
  return os.str();
}

}  // namespace gscd
