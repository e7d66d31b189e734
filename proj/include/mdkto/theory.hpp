#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mdkto/elbo.hpp"
#include "mdkto/objective.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/stats.hpp"
#include "mdkto/variance.hpp"

namespace mdkto {

enum class CheckKind : std::uint8_t {
  upper_bound,  // pass iff lhs - ci <= rhs
  equality,     // pass iff |lhs - rhs| <= ci
};

struct BoundCheck {
  std::string name;
  std::string instance;
  CheckKind kind = CheckKind::upper_bound;
  double lhs_estimate = 0.0;
  double lhs_ci_halfwidth = 0.0;
  double rhs = 0.0;
  long replicates = 0;
  bool enforced = true;  // informational checks are reported but never fail a suite
  bool pass = false;
};

inline BoundCheck upper_bound_check(std::string name, double lhs, double ci, double rhs, long reps) {
  BoundCheck b{std::move(name), {}, CheckKind::upper_bound, lhs, ci, rhs, reps};
  b.pass = lhs - ci <= rhs;
  return b;
}

// Absolute slack of 1e-12 absorbs rounding when both sides are (near) zero.
inline BoundCheck equality_check(std::string name, double lhs, double ci, double rhs, long reps) {
  BoundCheck b{std::move(name), {}, CheckKind::equality, lhs, ci, rhs, reps};
  b.pass = std::abs(lhs - rhs) <= ci + 1e-12 * std::max({1.0, std::abs(lhs), std::abs(rhs)});
  return b;
}

inline constexpr int kMinReplicates = 200;

inline void require_replicates(int n_reps) {
  if (n_reps < kMinReplicates)
    throw ContractError("bound checks need at least " + std::to_string(kMinReplicates) + " replicates");
}

// ---------------------------------------------------------------------------------------------
// Lipschitz constants of the link

inline std::pair<BoundCheck, BoundCheck> check_lipschitz(double beta, int grid_points = 1'000'000,
                                                         double tolerance = 1e-5) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  const double lo = -200.0 / beta, hi = 200.0 / beta;
  const double h = 1e-5 / std::max(1.0, beta);
  double sup1 = 0.0, sup2 = 0.0;
  for (int i = 0; i <= grid_points; ++i) {
    const double u = lo + (hi - lo) * i / grid_points;
    sup1 = std::max(sup1, std::abs(link_deriv(u, beta)));
    sup2 = std::max(sup2, std::abs((link_deriv(u + h, beta) - link_deriv(u - h, beta)) / (2.0 * h)));
  }
  const std::string tag = "beta=" + std::to_string(beta);
  auto a = equality_check("lipschitz_g", sup1, tolerance, link_lipschitz(beta), grid_points + 1);
  auto b = equality_check("lipschitz_g_prime", sup2, tolerance, link_deriv_lipschitz(beta), grid_points + 1);
  a.instance = b.instance = tag;
  return {a, b};
}

// ---------------------------------------------------------------------------------------------
// Noise-free targets by enumeration

struct ExactBatch {
  std::vector<double> r;
  double b0 = 0.0;
  std::vector<double> delta;
  std::vector<double> a;
  std::vector<Gradient> grad_r;  // gradient of the exact policy ELBO; the reference is constant
  Gradient G;
  double loss_gb = 0.0;
};

inline ExactBatch exact_batch(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                              const KtoConfig& kto, MaskForm form = MaskForm::l_form) {
  ExactBatch ex;
  for (const auto& it : batch.items) {
    Gradient g = policy.zeros_like();
    const auto draw = exact_draw(form, it.seq.length());
    const double bp = evaluate_draw(policy, it.seq, draw, &g);
    const double br = evaluate_draw(ref, it.seq, draw);
    ex.r.push_back(bp - br);
    ex.grad_r.push_back(std::move(g));
  }
  const auto ms = make_margins(ex.r, batch_signs(batch));
  const auto lambdas = batch_lambdas(batch);
  ex.b0 = ms.b0_hat;
  ex.delta = ms.delta_hat;
  ex.loss_gb = kto_loss_from_margins(ms, lambdas, kto).loss;
  auto gr = kto_grad_from(ms, lambdas, ex.grad_r, kto);
  ex.a = std::move(gr.a_hat);
  ex.G = std::move(gr.grad);
  return ex;
}

// ---------------------------------------------------------------------------------------------
// Replicate simulation of one batch

struct GradNoiseStats {
  double v_grad_bar = 0.0;  // (1/m) sum_i E||grad r_hat_i - grad r_i||^2
  double c_grad_bar = 0.0;  // mean over i != j of E<xi_i, xi_j>
  double g_tilde_sq = 0.0;  // (1/m) sum_i E||grad r_hat_i||^2
  double g_bar = 0.0;       // max_i ||grad r_i||
};

struct BatchSummary {
  int m = 0;
  int reps = 0;
  VarianceStats stats;
  double loss_bias = 0.0;  // E[L_hat] - L_GB
  double loss_bias_se = 0.0;
  double loss_var = 0.0;
  double loss_var_se = 0.0;
  std::vector<double> grad_bias;  // E[G_hat] - G, per coordinate
  double grad_bias_err_sq = 0.0;  // trace Cov(G_hat) / reps
  double grad_var = 0.0;          // E||G_hat - E G_hat||^2
  double grad_var_se = 0.0;
  GradNoiseStats noise;
};

inline BatchSummary simulate_batch(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                                   const EstimatorDesign& design, const KtoConfig& kto, int n_reps,
                                   std::uint64_t seed, bool with_grad) {
  require_replicates(n_reps);
  const int m = batch.size();
  const auto ex = exact_batch(policy, ref, batch, kto, design.form);
  BatchSummary out;
  out.m = m;
  out.reps = n_reps;
  for (const auto& g : ex.grad_r) out.noise.g_bar = std::max(out.noise.g_bar, g.norm());

  std::vector<std::vector<double>> r_hat(n_reps);
  std::vector<double> loss_dev(n_reps);
  std::vector<Gradient> g_dev;
  std::vector<double> xi_sq(n_reps), grad_sq(n_reps), xi_cross(n_reps);
  if (with_grad) g_dev.reserve(n_reps);

  for (int rep = 0; rep < n_reps; ++rep) {
    const auto ev = evaluate_batch(policy, ref, batch, design, mix_seed(seed, rep), with_grad);
    const auto step = kto_from_eval(ev, batch, kto, BaselineMode::global_mean);
    r_hat[rep] = step.margins.r_hat;
    loss_dev[rep] = step.loss.loss - ex.loss_gb;
    if (!with_grad) continue;
    Gradient d = step.grad->grad;
    d.axpy(-1.0, ex.G);
    g_dev.push_back(std::move(d));
    std::vector<Gradient> xi;
    double sq = 0.0, gsq = 0.0;
    for (int i = 0; i < m; ++i) {
      Gradient x = ev.policy_grad[i];
      x.axpy(-1.0, ex.grad_r[i]);
      sq += x.dot(x);
      gsq += ev.policy_grad[i].dot(ev.policy_grad[i]);
      xi.push_back(std::move(x));
    }
    double cross = 0.0;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        if (i != j) cross += xi[i].dot(xi[j]);
    xi_sq[rep] = sq / m;
    grad_sq[rep] = gsq / m;
    xi_cross[rep] = m > 1 ? cross / (static_cast<double>(m) * (m - 1)) : 0.0;
  }

  out.stats = variance_stats_from(r_hat);
  out.loss_bias = mean(loss_dev);
  out.loss_bias_se = mean_se(loss_dev);
  out.loss_var = variance(loss_dev);
  out.loss_var_se = variance_se(loss_dev);

  if (with_grad) {
    const std::size_t P = policy.size();
    out.grad_bias.assign(P, 0.0);
    for (std::size_t k = 0; k < P; ++k) {
      CompensatedSum s;
      for (const auto& d : g_dev) s.add(d[k]);
      out.grad_bias[k] = s.value() / n_reps;
    }
    std::vector<double> dev_sq(n_reps);
    for (int rep = 0; rep < n_reps; ++rep) {
      double q = 0.0;
      for (std::size_t k = 0; k < P; ++k) {
        const double e = g_dev[rep][k] - out.grad_bias[k];
        q += e * e;
      }
      dev_sq[rep] = q;
    }
    const double scale = static_cast<double>(n_reps) / (n_reps - 1);
    out.grad_var = mean(dev_sq) * scale;
    out.grad_var_se = mean_se(dev_sq) * scale;
    out.grad_bias_err_sq = out.grad_var / n_reps;
    out.noise.v_grad_bar = mean(xi_sq);
    out.noise.g_tilde_sq = mean(grad_sq);
    out.noise.c_grad_bar = mean(xi_cross);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Loss and gradient bias/variance bounds, expectations over the batches approximating E_D

struct TheoremChecks {
  BoundCheck loss_bias;
  BoundCheck loss_variance;
  BoundCheck grad_bias;
  BoundCheck grad_variance;
  std::vector<BatchSummary> batches;
};

inline TheoremChecks theorem_checks(const ModelParams& policy, const ModelParams& ref,
                                    const std::vector<Minibatch>& batches, const EstimatorDesign& design,
                                    const KtoConfig& kto, int n_reps, std::uint64_t seed, double z = 4.0,
                                    bool with_grad = true) {
  if (batches.empty()) throw ContractError("bound checks need at least one batch");
  kto.validate();
  TheoremChecks tc;
  for (std::size_t b = 0; b < batches.size(); ++b)
    tc.batches.push_back(simulate_batch(policy, ref, batches[b], design, kto, n_reps, mix_seed(seed, b), with_grad));

  const double nb = static_cast<double>(batches.size());
  const double lam = kto.lambda_max();
  const double Lg = link_lipschitz(kto.beta);
  const double Lgp = link_deriv_lipschitz(kto.beta);
  const long reps = static_cast<long>(n_reps) * static_cast<long>(batches.size());

  CompensatedSum bias, bias_se2, var, var_se2, sqrt_psi, psi;
  for (const auto& s : tc.batches) {
    bias.add(s.loss_bias);
    bias_se2.add(s.loss_bias_se * s.loss_bias_se);
    var.add(s.loss_var);
    var_se2.add(s.loss_var_se * s.loss_var_se);
    sqrt_psi.add(std::sqrt(std::max(0.0, s.stats.psi)));
    psi.add(std::max(0.0, s.stats.psi));
  }
  tc.loss_bias = upper_bound_check("loss_bias", std::abs(bias.value() / nb), z * std::sqrt(bias_se2.value()) / nb,
                                   lam * Lg * sqrt_psi.value() / nb, reps);
  tc.loss_variance = upper_bound_check("loss_variance", var.value() / nb, z * std::sqrt(var_se2.value()) / nb,
                                       lam * Lg * lam * Lg * psi.value() / nb, reps);
  if (!with_grad) return tc;

  const std::size_t P = policy.size();
  std::vector<double> gbias(P, 0.0);
  double g_bar = 0.0;
  CompensatedSum err_sq, gvar, gvar_se2, sqrt_vgrad, var_rhs;
  const bool independent_items = !design.share_across_items;
  for (const auto& s : tc.batches) {
    for (std::size_t k = 0; k < P; ++k) gbias[k] += s.grad_bias[k];
    err_sq.add(s.grad_bias_err_sq);
    gvar.add(s.grad_var);
    gvar_se2.add(s.grad_var_se * s.grad_var_se);
    g_bar = std::max(g_bar, s.noise.g_bar);
    sqrt_vgrad.add(std::sqrt(s.noise.v_grad_bar));
    const double sp = std::sqrt(std::max(0.0, s.stats.psi));
    // Var(U) term: diagonal when per-item seeds are independent, general form otherwise.
    double var_u = s.noise.v_grad_bar / s.m;
    if (!independent_items) var_u += (static_cast<double>(s.m - 1) / s.m) * s.noise.c_grad_bar;
    const double root = lam * Lg * std::sqrt(std::max(0.0, var_u)) + lam * Lgp * sp * std::sqrt(s.noise.g_tilde_sq);
    var_rhs.add(root * root);
  }
  double norm2 = 0.0;
  for (double g : gbias) norm2 += (g / nb) * (g / nb);
  tc.grad_bias = upper_bound_check("grad_bias", std::sqrt(norm2), z * std::sqrt(err_sq.value()) / nb,
                                   lam * Lgp * (sqrt_psi.value() / nb) * g_bar + lam * Lg * sqrt_vgrad.value() / nb,
                                   reps);
  tc.grad_variance = upper_bound_check("grad_variance", gvar.value() / nb, z * std::sqrt(gvar_se2.value()) / nb,
                                       var_rhs.value() / nb, reps);
  tc.grad_variance.enforced = independent_items;
  return tc;
}

inline BoundCheck check_loss_bias(const ModelParams& policy, const ModelParams& ref,
                                  const std::vector<Minibatch>& batches, const EstimatorDesign& design,
                                  const KtoConfig& kto, int n_reps, std::uint64_t seed, double z = 4.0) {
  return theorem_checks(policy, ref, batches, design, kto, n_reps, seed, z, false).loss_bias;
}
inline BoundCheck check_loss_variance(const ModelParams& policy, const ModelParams& ref,
                                      const std::vector<Minibatch>& batches, const EstimatorDesign& design,
                                      const KtoConfig& kto, int n_reps, std::uint64_t seed, double z = 4.0) {
  return theorem_checks(policy, ref, batches, design, kto, n_reps, seed, z, false).loss_variance;
}
inline BoundCheck check_grad_bias(const ModelParams& policy, const ModelParams& ref,
                                  const std::vector<Minibatch>& batches, const EstimatorDesign& design,
                                  const KtoConfig& kto, int n_reps, std::uint64_t seed, double z = 4.0) {
  return theorem_checks(policy, ref, batches, design, kto, n_reps, seed, z, true).grad_bias;
}
inline BoundCheck check_grad_variance(const ModelParams& policy, const ModelParams& ref,
                                      const std::vector<Minibatch>& batches, const EstimatorDesign& design,
                                      const KtoConfig& kto, int n_reps, std::uint64_t seed, double z = 4.0) {
  return theorem_checks(policy, ref, batches, design, kto, n_reps, seed, z, true).grad_variance;
}

// ---------------------------------------------------------------------------------------------
// Centered-margin variance identity and baseline optimality

namespace detail {

// Per-replicate contributions whose means (times R/(R-1)) are v, c and psi.
struct AggregatorTerms {
  std::vector<double> v, c, psi;
};

inline AggregatorTerms aggregator_terms(const std::vector<std::vector<double>>& r_hat) {
  const int R = static_cast<int>(r_hat.size());
  const int m = static_cast<int>(r_hat.front().size());
  std::vector<double> col_mean(m);
  for (int i = 0; i < m; ++i) {
    CompensatedSum s;
    for (const auto& row : r_hat) s.add(row[i]);
    col_mean[i] = s.value() / R;
  }
  AggregatorTerms t;
  for (const auto& row : r_hat) {
    double v = 0.0, cross = 0.0, tot = 0.0;
    for (int i = 0; i < m; ++i) {
      const double d = row[i] - col_mean[i];
      v += d * d;
      tot += d;
    }
    cross = tot * tot - v;  // sum over i != j of d_i d_j
    const double vi = v / m;
    const double ci = m > 1 ? cross / (static_cast<double>(m) * (m - 1)) : 0.0;
    t.v.push_back(vi);
    t.c.push_back(ci);
    t.psi.push_back(m > 1 ? (static_cast<double>(m - 1) / m) * (vi - ci) : 0.0);
  }
  return t;
}

// Mean over items of the replicate variance of r_hat_i - b, as per-replicate terms.
template <typename BaselineFn>
std::vector<double> centered_variance_terms(const std::vector<std::vector<double>>& r_hat, BaselineFn baseline) {
  const int R = static_cast<int>(r_hat.size());
  const int m = static_cast<int>(r_hat.front().size());
  std::vector<std::vector<double>> centered(R, std::vector<double>(m));
  for (int rep = 0; rep < R; ++rep) {
    const double b = baseline(r_hat[rep]);
    for (int i = 0; i < m; ++i) centered[rep][i] = r_hat[rep][i] - b;
  }
  std::vector<double> col_mean(m, 0.0);
  for (int i = 0; i < m; ++i) {
    CompensatedSum s;
    for (const auto& row : centered) s.add(row[i]);
    col_mean[i] = s.value() / R;
  }
  std::vector<double> terms(R);
  for (int rep = 0; rep < R; ++rep) {
    double q = 0.0;
    for (int i = 0; i < m; ++i) q += (centered[rep][i] - col_mean[i]) * (centered[rep][i] - col_mean[i]);
    terms[rep] = q / m;
  }
  return terms;
}

inline double unbiased_mean(const std::vector<double>& terms) {
  const double R = static_cast<double>(terms.size());
  return mean(terms) * R / (R - 1.0);
}
inline double unbiased_se(const std::vector<double>& terms) {
  const double R = static_cast<double>(terms.size());
  return mean_se(terms) * R / (R - 1.0);
}

inline double batch_mean(const std::vector<double>& row) { return mean(row); }

}  // namespace detail

// Direct replicate variance of the centered margins vs ((m-1)/m)(v - c), each side from an
// independent replicate stream.
inline BoundCheck check_psi_identity(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                                     const EstimatorDesign& design, int n_reps, std::uint64_t seed,
                                     double z = 4.0) {
  require_replicates(n_reps);
  const auto direct_reps = replicate_margins(policy, ref, batch, design, n_reps, mix_seed(seed, 1));
  const auto formula_reps = replicate_margins(policy, ref, batch, design, n_reps, mix_seed(seed, 2));
  const auto direct = detail::centered_variance_terms(direct_reps, detail::batch_mean);
  const auto agg = detail::aggregator_terms(formula_reps);
  const double lhs = detail::unbiased_mean(direct);
  const double rhs = detail::unbiased_mean(agg.psi);
  const double ci = z * std::hypot(detail::unbiased_se(direct), detail::unbiased_se(agg.psi));
  return equality_check("psi_identity", lhs, ci, rhs, 2L * n_reps);
}

struct AltBaseline {
  std::string name;
  std::function<double(const std::vector<double>&)> fn;
};

inline std::vector<AltBaseline> default_alt_baselines(double offset = 3.7) {
  return {
      {"mean_shift", [offset](const std::vector<double>& r) { return mean(r) + offset; }},
      {"first_item", [](const std::vector<double>& r) { return r.front(); }},
      {"zero", [](const std::vector<double>&) { return 0.0; }},
      {"median", [](const std::vector<double>& r) { return percentile(r, 0.5); }},
  };
}

// For each alternative baseline b: Psi_b - Psi_{b0} = Var(b - b0) (equality, independent
// streams for the two sides) and Psi_b - Psi_{b0} >= 0.
inline std::vector<BoundCheck> check_baseline_optimality(const ModelParams& policy, const ModelParams& ref,
                                                         const Minibatch& batch, const EstimatorDesign& design,
                                                         const std::vector<AltBaseline>& alts, int n_reps,
                                                         std::uint64_t seed, double z = 4.0) {
  require_replicates(n_reps);
  const auto reps_a = replicate_margins(policy, ref, batch, design, n_reps, mix_seed(seed, 1));
  const auto reps_b = replicate_margins(policy, ref, batch, design, n_reps, mix_seed(seed, 2));
  const auto psi_b0 = detail::centered_variance_terms(reps_a, detail::batch_mean);
  std::vector<BoundCheck> out;
  for (const auto& alt : alts) {
    const auto psi_b = detail::centered_variance_terms(reps_a, alt.fn);
    std::vector<double> diff(psi_b.size());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = psi_b[k] - psi_b0[k];
    std::vector<double> gap;
    for (const auto& row : reps_b) gap.push_back(alt.fn(row) - mean(row));
    const double lhs = detail::unbiased_mean(diff);
    const double lhs_se = detail::unbiased_se(diff);
    const double rhs = variance(gap);
    const double ci = z * std::hypot(lhs_se, variance_se(gap));
    auto eq = equality_check("baseline_gap_equals_var:" + alt.name, lhs, ci, rhs, 2L * n_reps);
    auto nonneg = upper_bound_check("baseline_gap_nonnegative:" + alt.name, -lhs, z * lhs_se, 0.0, n_reps);
    out.push_back(std::move(eq));
    out.push_back(std::move(nonneg));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Estimator design sweep

struct SweepRow {
  EstimatorDesign design;
  VarianceStats stats;
  double v_se = 0.0;
  double c_se = 0.0;
  double psi_se = 0.0;
  double elbo_var = 0.0;  // mean over items of Var(policy ELBO estimate)
  double elbo_var_se = 0.0;
  double policy_ref_cov = 0.0;  // mean over items of Cov(policy, reference ELBO estimates)
  double policy_ref_cov_se = 0.0;
};

inline SweepRow sweep_cell(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                           const EstimatorDesign& design, int n_reps, std::uint64_t seed) {
  require_replicates(n_reps);
  const int m = batch.size();
  std::vector<std::vector<double>> r_hat(n_reps), bp(n_reps), br(n_reps);
  for (int rep = 0; rep < n_reps; ++rep) {
    const auto ev = evaluate_batch(policy, ref, batch, design, mix_seed(seed, rep), false);
    bp[rep] = ev.policy_elbo;
    br[rep] = ev.ref_elbo;
    r_hat[rep].resize(m);
    for (int i = 0; i < m; ++i) r_hat[rep][i] = bp[rep][i] - br[rep][i];
  }
  SweepRow row;
  row.design = design;
  const auto t = detail::aggregator_terms(r_hat);
  row.stats = VarianceStats::from(detail::unbiased_mean(t.v), detail::unbiased_mean(t.c), m);
  row.v_se = detail::unbiased_se(t.v);
  row.c_se = detail::unbiased_se(t.c);
  row.psi_se = m > 1 ? detail::unbiased_se(t.psi) : 0.0;

  CompensatedSum var, var_se2, cov, cov_se2;
  for (int i = 0; i < m; ++i) {
    std::vector<double> p(n_reps), q(n_reps), prod(n_reps);
    for (int rep = 0; rep < n_reps; ++rep) {
      p[rep] = bp[rep][i];
      q[rep] = br[rep][i];
    }
    const double mp = mean(p), mq = mean(q);
    for (int rep = 0; rep < n_reps; ++rep) prod[rep] = (p[rep] - mp) * (q[rep] - mq);
    var.add(variance(p));
    const double vse = variance_se(p);
    var_se2.add(vse * vse);
    cov.add(covariance(p, q));
    const double cse = mean_se(prod);
    cov_se2.add(cse * cse);
  }
  row.elbo_var = var.value() / m;
  row.elbo_var_se = std::sqrt(var_se2.value()) / m;
  row.policy_ref_cov = cov.value() / m;
  row.policy_ref_cov_se = std::sqrt(cov_se2.value()) / m;
  return row;
}

inline std::vector<SweepRow> design_sweep(const ModelParams& policy, const ModelParams& ref,
                                          const Minibatch& batch, const std::vector<EstimatorDesign>& grid,
                                          int n_reps, std::uint64_t seed) {
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < grid.size(); ++k)
    rows.push_back(sweep_cell(policy, ref, batch, grid[k], n_reps, mix_seed(seed, k)));
  return rows;
}

// a <= b up to z combined standard errors.
inline bool leq_within(double a, double a_se, double b, double b_se, double z = 4.0) {
  return a <= b + z * std::hypot(a_se, b_se);
}

// ---------------------------------------------------------------------------------------------
// Randomized instances and the full suite

struct SuiteConfig {
  int instances = 20;
  int batches = 20;
  int batch_size = 4;
  int reps = 300;
  int dataset_size = 32;
  int prompt_len = 2;
  int min_len = 2;
  int max_len = 6;
  int min_vocab = 2;
  int max_vocab = 4;
  int embed_dim = 8;
  double ref_scale = 0.8;
  double policy_shift = 0.4;
  std::vector<double> betas{0.5, 1.0, 2.0, 4.0};
  std::vector<double> lipschitz_betas{0.1, 1.0, 2.0, 10.0};
  int lipschitz_grid = 1'000'000;
  EstimatorDesign design{MaskForm::l_form, 2, 1, true, false, false};
  double z = 4.0;
  double min_pass_rate = 0.95;
  std::uint64_t seed = 0;

  void validate() const {
    if (instances < 1 || batches < 20) throw ConfigError("suite needs >= 1 instance and >= 20 batches");
    if (batch_size < 1 || batch_size > 8) throw ConfigError("batch_size must be in [1, 8]");
    if (dataset_size < batch_size) throw ConfigError("dataset_size must be >= batch_size");
    if (min_len < 1 || max_len > 6 || min_len > max_len) throw ConfigError("response length must lie in [1, 6]");
    if (min_vocab < 2 || max_vocab > 4 || min_vocab > max_vocab) throw ConfigError("vocab size must lie in [2, 4]");
    if (prompt_len < 1 || embed_dim < 1 || betas.empty()) throw ConfigError("bad suite shape");
    require_replicates(reps);
    design.validate();
  }
};

struct HarnessInstance {
  std::string label;
  ModelParams policy;
  ModelParams ref;
  KtoConfig kto;
  std::vector<Minibatch> batches;
};

inline HarnessInstance make_instance(const SuiteConfig& cfg, int index) {
  Rng rng(mix_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(index)));
  const int K = cfg.min_vocab + static_cast<int>(rng.below(cfg.max_vocab - cfg.min_vocab + 1));
  ModelConfig mc{Vocab::make(K), cfg.embed_dim, cfg.prompt_len + cfg.max_len};
  HarnessInstance inst{};
  inst.ref = ModelParams::random(mc, cfg.ref_scale, rng.next(), Role::reference);
  inst.policy = inst.ref;
  const auto shift = ModelParams::random(mc, cfg.policy_shift, rng.next());
  for (std::size_t k = 0; k < inst.policy.size(); ++k) inst.policy[k] += shift[k];
  inst.kto.beta = cfg.betas[rng.below(cfg.betas.size())];
  inst.kto.lambda_D = 0.5 + 1.5 * rng.uniform();
  inst.kto.lambda_U = 0.5 + 1.5 * rng.uniform();

  std::vector<PreferenceItem> pool;
  for (int n = 0; n < cfg.dataset_size; ++n) {
    TokenSeq seq;
    const int L = cfg.min_len + static_cast<int>(rng.below(cfg.max_len - cfg.min_len + 1));
    for (int j = 0; j < cfg.prompt_len; ++j) seq.prompt.push_back(static_cast<int>(rng.below(K)));
    for (int j = 0; j < L; ++j) seq.response.push_back(static_cast<int>(rng.below(K)));
    pool.push_back(make_item(seq, rng.below(2) == 0, inst.kto));
  }
  std::vector<int> order(pool.size());
  for (int b = 0; b < cfg.batches; ++b) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
    rng.shuffle(std::span<int>(order));
    Minibatch mb;
    for (int i = 0; i < cfg.batch_size; ++i) mb.items.push_back(pool[order[i]]);
    inst.batches.push_back(std::move(mb));
  }
  inst.label = "instance=" + std::to_string(index) + " K=" + std::to_string(K) +
               " beta=" + std::to_string(inst.kto.beta);
  return inst;
}

struct GroupRate {
  std::string group;
  int passed = 0;
  int total = 0;
  double rate() const { return total > 0 ? static_cast<double>(passed) / total : 1.0; }
};

struct SuiteReport {
  std::vector<BoundCheck> checks;
  std::vector<GroupRate> groups;
  bool passed = false;
};

inline std::string check_group(const std::string& name) { return name.substr(0, name.find(':')); }

inline void summarize(SuiteReport& rep, double min_pass_rate) {
  rep.groups.clear();
  for (const auto& c : rep.checks) {
    if (!c.enforced) continue;
    const auto g = check_group(c.name);
    auto it = std::find_if(rep.groups.begin(), rep.groups.end(), [&](const GroupRate& r) { return r.group == g; });
    if (it == rep.groups.end()) {
      rep.groups.push_back({g, 0, 0});
      it = std::prev(rep.groups.end());
    }
    ++it->total;
    if (c.pass) ++it->passed;
  }
  rep.passed = true;
  for (const auto& g : rep.groups) {
    // Lipschitz constants are deterministic; everything else is allowed CLT misses.
    const double need = g.group.rfind("lipschitz", 0) == 0 ? 1.0 : min_pass_rate;
    if (g.rate() < need) rep.passed = false;
  }
}

template <typename Progress = void (*)(int, int)>
SuiteReport run_suite(const SuiteConfig& cfg, Progress progress = [](int, int) {}) {
  cfg.validate();
  SuiteReport rep;
  for (double beta : cfg.lipschitz_betas) {
    auto [a, b] = check_lipschitz(beta, cfg.lipschitz_grid);
    rep.checks.push_back(std::move(a));
    rep.checks.push_back(std::move(b));
  }
  for (int k = 0; k < cfg.instances; ++k) {
    const auto inst = make_instance(cfg, k);
    const std::uint64_t s = mix_seed(cfg.seed, 0x2000 + static_cast<std::uint64_t>(k));
    auto tc = theorem_checks(inst.policy, inst.ref, inst.batches, cfg.design, inst.kto, cfg.reps, mix_seed(s, 1),
                             cfg.z);
    std::vector<BoundCheck> found{tc.loss_bias, tc.loss_variance, tc.grad_bias, tc.grad_variance};
    found.push_back(check_psi_identity(inst.policy, inst.ref, inst.batches[0], cfg.design, cfg.reps,
                                       mix_seed(s, 2), cfg.z));
    auto base = check_baseline_optimality(inst.policy, inst.ref, inst.batches[0], cfg.design,
                                          default_alt_baselines(), cfg.reps, mix_seed(s, 3), cfg.z);
    found.insert(found.end(), base.begin(), base.end());
    for (auto& c : found) {
      c.instance = inst.label;
      rep.checks.push_back(std::move(c));
    }
    progress(k + 1, cfg.instances);
  }
  summarize(rep, cfg.min_pass_rate);
  return rep;
}

}  // namespace mdkto
