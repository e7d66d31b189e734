#pragma once

#include <cstdint>
#include <vector>

#include "mdkto/elbo.hpp"
#include "mdkto/objective.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/stats.hpp"

namespace mdkto {

// Per-item margin variance v, cross-item covariance c, and the centered-margin variance
// aggregator psi = ((m-1)/m)(v - c).
struct VarianceStats {
  double v = 0.0;
  double c = 0.0;
  double psi = 0.0;
  int m = 0;

  static VarianceStats from(double v, double c, int m) {
    if (m < 2) return {v, 0.0, 0.0, m};
    return {v, c, (static_cast<double>(m - 1) / m) * (v - c), m};
  }
};

// r_hat[rep][item] over independent Monte Carlo replicates of one fixed batch.
inline std::vector<std::vector<double>> replicate_margins(const ModelParams& policy, const ModelParams& ref,
                                                          const Minibatch& batch,
                                                          const EstimatorDesign& design, int n_reps,
                                                          std::uint64_t seed) {
  std::vector<std::vector<double>> out(n_reps);
  for (int rep = 0; rep < n_reps; ++rep) {
    const auto ev = evaluate_batch(policy, ref, batch, design, mix_seed(seed, rep), false);
    auto& row = out[rep];
    row.resize(ev.policy_elbo.size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = ev.policy_elbo[i] - ev.ref_elbo[i];
  }
  return out;
}

inline VarianceStats variance_stats_from(const std::vector<std::vector<double>>& reps) {
  if (reps.empty()) throw ContractError("no replicates");
  const int m = static_cast<int>(reps.front().size());
  std::vector<std::vector<double>> cols(m);
  for (const auto& row : reps)
    for (int i = 0; i < m; ++i) cols[i].push_back(row[i]);
  CompensatedSum v, c;
  for (int i = 0; i < m; ++i) {
    v.add(variance(cols[i]));
    for (int j = 0; j < m; ++j)
      if (j != i) c.add(covariance(cols[i], cols[j]));
  }
  if (m < 2) return VarianceStats::from(v.value(), 0.0, m);
  return VarianceStats::from(v.value() / m, c.value() / (static_cast<double>(m) * (m - 1)), m);
}

inline VarianceStats margin_variance_stats(const ModelParams& policy, const ModelParams& ref,
                                           const Minibatch& batch, const EstimatorDesign& design, int n_reps,
                                           std::uint64_t seed) {
  if (n_reps < 100) throw ContractError("variance statistics need at least 100 replicates");
  return variance_stats_from(replicate_margins(policy, ref, batch, design, n_reps, seed));
}

}  // namespace mdkto
