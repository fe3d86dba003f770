#include "chanfuse/analysis.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>

#include "chanfuse/errors.hpp"
#include "chanfuse/gating.hpp"
#include "json.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

// Decision code -> position in (skip, reuse, keep).
constexpr std::array<std::size_t, 3> kSlot = {2, 1, 0};
const std::array<const char*, 3> kNames = {"skip", "reuse", "keep"};

Fractions to_fractions(const std::array<Index, 3>& by_code, Index total) {
  Fractions f = {0.0, 0.0, 0.0};
  if (total == 0) return f;
  for (std::size_t code = 0; code < 3; ++code) {
    f[kSlot[code]] = static_cast<double>(by_code[code]) / static_cast<double>(total);
  }
  return f;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

PolicyCounts count_trace(const PolicyTrace& trace) {
  PolicyCounts c;
  for (const BlockTrace& t : trace) {
    t.validate();
    BlockCounts& b = c.blocks[t.block];
    for (Index s = 0; s < t.samples; ++s) {
      for (Index ch = 0; ch < t.channels; ++ch) {
        const std::uint8_t first = t.at(s, 0, ch);
        bool constant = true;
        for (Index f = 0; f < t.frames; ++f) {
          const std::uint8_t d = t.at(s, f, ch);
          ++b.decisions[d];
          constant = constant && d == first;
        }
        if (constant) ++b.constant[first];
        ++b.pairs;
        b.cells += t.frames;
      }
    }
  }
  return c;
}

void merge(PolicyCounts& into, const PolicyCounts& more) {
  for (const auto& [id, m] : more.blocks) {
    BlockCounts& b = into.blocks[id];
    for (std::size_t i = 0; i < 3; ++i) {
      b.decisions[i] += m.decisions[i];
      b.constant[i] += m.constant[i];
    }
    b.pairs += m.pairs;
    b.cells += m.cells;
  }
}

PolicyStats stats_from_counts(const PolicyCounts& counts) {
  std::array<Index, 3> total = {0, 0, 0};
  Index cells = 0;
  PolicyStats s;
  for (const auto& [id, b] : counts.blocks) {
    s.blocks.push_back(id);
    s.per_block.push_back(to_fractions(b.decisions, b.cells));
    s.time_sensitivity.push_back(to_fractions(b.constant, b.pairs));
    for (std::size_t i = 0; i < 3; ++i) total[i] += b.decisions[i];
    cells += b.cells;
  }
  if (cells == 0) throw ContractError("aggregate: no policy decisions to aggregate");
  s.overall = to_fractions(total, cells);
  s.quotient_defined = total[kKeep] > 0;
  s.quotient = s.quotient_defined
                   ? static_cast<double>(total[kReuse]) / static_cast<double>(total[kKeep])
                   : 0.0;
  return s;
}

PolicyStats aggregate(std::span<const PolicyTrace> traces) {
  if (traces.empty()) throw ContractError("aggregate: empty trace stream");
  PolicyCounts c;
  for (const PolicyTrace& t : traces) merge(c, count_trace(t));
  return stats_from_counts(c);
}

PolicyStats aggregate(const PolicyTrace& trace) { return aggregate(std::span(&trace, 1)); }

std::vector<double> polyfit(std::span<const double> x, std::span<const double> y, int order) {
  if (order < 0) throw ContractError("polyfit: negative order");
  if (x.size() != y.size()) throw DimensionError("polyfit: x and y differ in length");
  const Index n = static_cast<Index>(x.size());
  const Index m = order + 1;
  if (n < m) {
    throw ContractError("polyfit: " + std::to_string(n) + " points cannot determine order " +
                        std::to_string(order));
  }
  // Map x onto [-1, 1] so the normal matrix stays well conditioned.
  double lo = x[0], hi = x[0];
  for (double v : x) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double mid = 0.5 * (lo + hi);
  const double half = hi > lo ? 0.5 * (hi - lo) : 1.0;

  Eigen::MatrixXd V(n, m);
  Eigen::VectorXd rhs(n);
  for (Index i = 0; i < n; ++i) {
    const double t = (x[sz(i)] - mid) / half;
    double p = 1.0;
    for (Index k = 0; k < m; ++k) {
      V(i, k) = p;
      p *= t;
    }
    rhs(i) = y[sz(i)];
  }
  const Eigen::MatrixXd A = V.transpose() * V;
  const Eigen::VectorXd b = V.transpose() * rhs;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A, Eigen::EigenvaluesOnly);
  const double emax = eig.eigenvalues().maxCoeff();
  const double emin = eig.eigenvalues().minCoeff();
  if (!(emin > 0.0) || emax / emin > 1e12) {
    throw NumericError("polyfit: normal equations are ill-conditioned (distinct abscissae < order + 1?)");
  }
  const Eigen::VectorXd a = A.ldlt().solve(b);

  // Expand sum_k a_k ((x - mid) / half)^k into powers of x.
  std::vector<double> c(sz(m), 0.0);
  for (Index k = 0; k < m; ++k) {
    const double ak = a(k) / std::pow(half, static_cast<double>(k));
    double binom = 1.0;  // C(k, j)
    for (Index j = 0; j <= k; ++j) {
      c[sz(j)] += ak * binom * std::pow(-mid, static_cast<double>(k - j));
      binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
    }
  }
  return c;
}

TrendFit trend_fit(std::span<const Fractions> series, int order) {
  if (series.size() < static_cast<std::size_t>(order) + 1) {
    throw ContractError("trend_fit: " + std::to_string(series.size()) + " blocks cannot determine order " +
                        std::to_string(order));
  }
  TrendFit fit;
  fit.order = order;
  std::vector<double> x(series.size()), y(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) x[i] = static_cast<double>(i);
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t i = 0; i < series.size(); ++i) y[i] = series[i][p];
    fit.coefficients[p] = polyfit(x, y, order);
    double rss = 0.0;
    for (std::size_t i = 0; i < series.size(); ++i) {
      double v = 0.0;
      for (std::size_t k = fit.coefficients[p].size(); k-- > 0;) v = v * x[i] + fit.coefficients[p][k];
      rss += (v - y[i]) * (v - y[i]);
    }
    fit.residual_ss[p] = rss;
  }
  return fit;
}

std::string stats_to_json(const PolicyStats& stats) {
  using nlohmann::ordered_json;
  auto frac = [](const Fractions& f) {
    ordered_json j;
    for (std::size_t i = 0; i < 3; ++i) j[kNames[i]] = f[i];
    return j;
  };
  ordered_json j;
  j["overall"] = frac(stats.overall);
  j["quotient"] = stats.quotient;
  j["quotient_defined"] = stats.quotient_defined;
  ordered_json blocks = ordered_json::array();
  for (std::size_t i = 0; i < stats.blocks.size(); ++i) {
    ordered_json b;
    b["block"] = stats.blocks[i];
    b["fractions"] = frac(stats.per_block[i]);
    b["instance"] = frac(stats.time_sensitivity[i]);
    blocks.push_back(b);
  }
  j["per_block"] = blocks;
  if (stats.per_block.size() >= 4) {
    const TrendFit fit = trend_fit(stats.per_block, 3);
    ordered_json t;
    t["order"] = fit.order;
    for (std::size_t p = 0; p < 3; ++p) {
      t[kNames[p]] = {{"coefficients", fit.coefficients[p]}, {"residual_ss", fit.residual_ss[p]}};
    }
    j["trend"] = t;
  }
  return j.dump(2);
}

PolicyStats stats_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats json: ") + e.what());
  }
  auto frac = [](const nlohmann::json& o) {
    Fractions f;
    for (std::size_t i = 0; i < 3; ++i) f[i] = o.at(kNames[i]).get<double>();
    return f;
  };
  try {
    PolicyStats s;
    s.overall = frac(j.at("overall"));
    s.quotient = j.at("quotient").get<double>();
    s.quotient_defined = j.at("quotient_defined").get<bool>();
    for (const auto& b : j.at("per_block")) {
      s.blocks.push_back(b.at("block").get<Index>());
      s.per_block.push_back(frac(b.at("fractions")));
      s.time_sensitivity.push_back(frac(b.at("instance")));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats json: ") + e.what());
  }
}

void export_stats(const PolicyStats& stats, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "stats.json", stats_to_json(stats) + "\n");
  std::string csv = "block,skip,reuse,keep,skip_instance,reuse_instance,keep_instance\n";
  char buf[64];
  for (std::size_t i = 0; i < stats.blocks.size(); ++i) {
    csv += std::to_string(stats.blocks[i]);
    for (double v : stats.per_block[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      csv += buf;
    }
    for (double v : stats.time_sensitivity[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      csv += buf;
    }
    csv += '\n';
  }
  write_text(dir / "per_block.csv", csv);
}

}  // namespace chanfuse
