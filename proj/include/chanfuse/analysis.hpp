#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chanfuse/trace.hpp"

namespace chanfuse {

/// Decision fractions in (skip, reuse, keep) order.
using Fractions = std::array<double, 3>;

/// Raw counts behind PolicyStats. Counting is additive, so counts from
/// disjoint trace sets merge by summation.
struct BlockCounts {
  std::array<Index, 3> decisions = {0, 0, 0};  ///< by decision code (keep, reuse, skip)
  std::array<Index, 3> constant = {0, 0, 0};   ///< (sample, channel) pairs fixed over all frames
  Index pairs = 0;                             ///< (sample, channel) pairs seen
  Index cells = 0;                             ///< (sample, frame, channel) cells seen
};

struct PolicyCounts {
  std::map<Index, BlockCounts> blocks;  ///< keyed by block id
};

PolicyCounts count_trace(const PolicyTrace& trace);
void merge(PolicyCounts& into, const PolicyCounts& more);

struct PolicyStats {
  Fractions overall = {0.0, 0.0, 0.0};
  double quotient = 0.0;          ///< reuse / keep
  bool quotient_defined = false;  ///< false when no channel was kept
  std::vector<Index> blocks;      ///< block ids by depth
  std::vector<Fractions> per_block;
  /// Per block, the fraction of (sample, channel) pairs whose decision is the
  /// same at every frame, split by that decision. Frame 0 is included.
  std::vector<Fractions> time_sensitivity;
};

PolicyStats stats_from_counts(const PolicyCounts& counts);
/// Throws ContractError when there is nothing to aggregate.
PolicyStats aggregate(std::span<const PolicyTrace> traces);
PolicyStats aggregate(const PolicyTrace& trace);

/// Least-squares polynomial y(x) = sum_k c_k x^k, coefficients in increasing
/// power. Solved through the normal equations on an affinely rescaled
/// abscissa; throws NumericError if they are ill-conditioned.
std::vector<double> polyfit(std::span<const double> x, std::span<const double> y, int order);

struct TrendFit {
  int order = 3;
  /// Per policy in (skip, reuse, keep) order, over block position 0..B-1.
  std::array<std::vector<double>, 3> coefficients;
  Fractions residual_ss = {0.0, 0.0, 0.0};
};

/// Throws ContractError with fewer than order + 1 points.
TrendFit trend_fit(std::span<const Fractions> series, int order = 3);

/// Writes dir/stats.json and dir/per_block.csv.
void export_stats(const PolicyStats& stats, const std::filesystem::path& dir);
std::string stats_to_json(const PolicyStats& stats);
PolicyStats stats_from_json(const std::string& text);

}  // namespace chanfuse
