#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdkto/dataset.hpp"
#include "mdkto/elbo.hpp"
#include "mdkto/objective.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/stats.hpp"

namespace mdkto {

enum class Objective : std::uint8_t { kto, kto_no_baseline, vrpo };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::kto: return "kto";
    case Objective::kto_no_baseline: return "kto-no-baseline";
    case Objective::vrpo: return "vrpo";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "kto") return Objective::kto;
  if (s == "kto-no-baseline") return Objective::kto_no_baseline;
  if (s == "vrpo") return Objective::vrpo;
  throw ConfigError("unknown objective '" + s + "'");
}

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  double peak_lr = 5e-3;
  double warmup_frac = 0.03;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  KtoConfig kto;
  EstimatorDesign design;  // design.budget() is the MC sample count per example
  Objective objective = Objective::kto;
  bool rebalance = false;  // set lambda_D n_D = lambda_U n_U from class counts
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw ConfigError("peak_lr must be finite and >= 0");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in (0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
      throw ConfigError("adam betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    kto.validate();
    design.validate();
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.value(epochs).value(batch_size).value(peak_lr).value(warmup_frac).value(weight_decay);
    h.value(adam_beta1).value(adam_beta2).value(adam_eps);
    h.value(kto.beta).value(kto.lambda_D).value(kto.lambda_U);
    h.value(design.hash()).value(static_cast<std::uint8_t>(objective)).value(rebalance).value(seed);
    return h.digest();
  }
};

// ---------------------------------------------------------------------------------------------
// Schedule

// Linear warmup over the first warmup_frac * total steps, then cosine decay to 0.
inline double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ContractError("total_steps must be positive");
  if (step < 0 || step > total_steps) throw ContractError("step outside [0, total_steps]");
  const double warm = cfg.warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  const double span = static_cast<double>(total_steps) - warm;
  const double progress = span > 0.0 ? (s - warm) / span : 1.0;
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------------------------
// AdamW with decoupled weight decay

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;

  static OptimizerState for_params(const ModelParams& p) { return {std::vector<double>(p.size(), 0.0),
                                                                   std::vector<double>(p.size(), 0.0), 0}; }
};

inline void adamw_update(ModelParams& params, const Gradient& grad, OptimizerState& st, double lr,
                         const TrainConfig& cfg) {
  if (grad.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw ContractError("optimizer state does not match parameter shapes");
  ++st.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grad[k];
    st.m[k] = b1 * st.m[k] + (1.0 - b1) * g;
    st.v[k] = b2 * st.v[k] + (1.0 - b2) * g * g;
    const double mh = st.m[k] / c1;
    const double vh = st.v[k] / c2;
    params[k] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * params[k]);
  }
}

// ---------------------------------------------------------------------------------------------
// Class weights

// lambda_D n_D = lambda_U n_U, larger weight equal to 1.
inline std::pair<double, double> rebalance_weights(long n_D, long n_U) {
  if (n_D < 1 || n_U < 1) throw ContractError("rebalance_weights needs at least one record in each class");
  if (n_D >= n_U) return {static_cast<double>(n_U) / static_cast<double>(n_D), 1.0};
  return {1.0, static_cast<double>(n_D) / static_cast<double>(n_U)};
}

// ---------------------------------------------------------------------------------------------
// Per-example noise and the reference cache

inline std::uint64_t string_key(const std::string& s) {
  Fnv1a h;
  h.bytes(s.data(), s.size());
  return h.digest();
}

inline std::uint64_t params_digest(const ModelParams& p) {
  Fnv1a h;
  const auto& c = p.config();
  h.value(c.vocab.size).value(c.vocab.eos_id).value(c.embed_dim).value(c.max_len);
  for (std::size_t k = 0; k < p.size(); ++k) h.value(p[k]);
  return h.digest();
}

// Masks are tied to the example, so every visit (and the cache) sees the same draws.
inline DrawPair example_draws(const EstimatorDesign& design, const TokenSeq& seq, const std::string& id,
                              std::uint64_t seed) {
  return draw_pair(design, seq.length(), item_seed(design, mix_seed(seed, 0xD4A7), string_key(id)));
}

struct RefCacheEntry {
  std::string id;
  double value = 0.0;
  NoiseDraw draw;
  std::vector<double> terms;  // per-draw contributions, for the within-item variance proxy
};

struct RefCache {
  std::uint64_t config_hash = 0;
  std::vector<RefCacheEntry> entries;

  const RefCacheEntry* find(const std::string& id) const {
    if (index_.size() != entries.size()) reindex();
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &entries[it->second];
  }

 private:
  void reindex() const {
    index_.clear();
    for (std::size_t k = 0; k < entries.size(); ++k) index_.emplace(entries[k].id, k);
  }
  mutable std::unordered_map<std::string, std::size_t> index_;
};

inline std::uint64_t ref_cache_hash(const ModelParams& ref, const EstimatorDesign& design, std::uint64_t seed) {
  Fnv1a h;
  h.value(params_digest(ref)).value(design.hash()).value(seed);
  return h.digest();
}

inline RefCache precompute_ref(const ModelParams& ref, const std::vector<DatasetRecord>& records,
                               const EstimatorDesign& design, std::uint64_t seed) {
  design.validate();
  RefCache cache;
  cache.config_hash = ref_cache_hash(ref, design, seed);
  cache.entries.reserve(records.size());
  for (const auto& r : records) {
    const auto seq = r.seq();
    RefCacheEntry e{r.id, 0.0, example_draws(design, seq, r.id, seed).reference, {}};
    e.value = evaluate_draw(ref, seq, e.draw, nullptr, &e.terms);
    cache.entries.push_back(std::move(e));
  }
  return cache;
}

inline void check_cache(const RefCache& cache, const ModelParams& ref, const std::vector<DatasetRecord>& records,
                        const EstimatorDesign& design, std::uint64_t seed) {
  if (cache.config_hash != ref_cache_hash(ref, design, seed))
    throw ContractError("reference cache was built for a different reference model, design, or seed");
  if (cache.entries.size() != records.size())
    throw ContractError("reference cache and dataset differ in size");
  for (const auto& r : records)
    if (!cache.find(r.id)) throw ContractError("reference cache has no entry for record '" + r.id + "'");
}

// ---------------------------------------------------------------------------------------------
// Training

struct StepMetrics {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double psi_proxy = 0.0;
  double grad_norm = 0.0;
  double mean_margin_desirable = 0.0;
  double mean_margin_undesirable = 0.0;
};

struct TrainResult {
  ModelParams params;
  OptimizerState optimizer;
  std::vector<StepMetrics> metrics;
  KtoConfig kto;  // effective weights after rebalancing
};

namespace detail {

// Within-item sample variance of the estimate, from its per-draw contributions.
inline double estimate_variance(const std::vector<double>& policy_terms, const std::vector<double>* ref_terms,
                                bool paired) {
  const std::size_t n = policy_terms.size();
  if (n < 2) return 0.0;
  const double N = static_cast<double>(n);
  std::vector<double> x(n);
  if (paired) {
    for (std::size_t k = 0; k < n; ++k) x[k] = N * (policy_terms[k] - (*ref_terms)[k]);
    return variance(x) / N;
  }
  for (std::size_t k = 0; k < n; ++k) x[k] = N * policy_terms[k];
  double v = variance(x) / N;
  if (ref_terms && ref_terms->size() >= 2) {
    std::vector<double> y(ref_terms->size());
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = static_cast<double>(y.size()) * (*ref_terms)[k];
    v += variance(y) / static_cast<double>(y.size());
  }
  return v;
}

inline void guard_finite(long step, double lr, double loss, const Gradient& grad, const ModelParams& params) {
  if (std::isfinite(loss) && grad.all_finite() && params.all_finite()) return;
  std::ostringstream os;
  os << "training diverged at step " << step << ": lr=" << lr << " loss=" << loss
     << " grad_norm=" << grad.norm() << " params_finite=" << (params.all_finite() ? "yes" : "no");
  throw DivergenceError(os.str());
}

inline long steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<long>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  Rng rng(mix_seed(seed, 0xE90C + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

}  // namespace detail

// KTO-style training on unpaired records. With `cache`, reference ELBOs come from it; without,
// they are recomputed on the same per-example draws.
inline TrainResult train(const ModelParams& policy_init, const ModelParams& ref, const Dataset& data,
                         TrainConfig cfg, const RefCache* cache = nullptr) {
  cfg.validate();
  if (cfg.objective == Objective::vrpo) throw ConfigError("use train_vrpo for the pairwise objective");
  if (data.records.empty()) throw DataError("training dataset is empty");
  require_both_classes(data);
  validate_tokens(data.records, policy_init.config().vocab);
  if (cfg.rebalance) std::tie(cfg.kto.lambda_D, cfg.kto.lambda_U) =
                         rebalance_weights(data.n_desirable(), data.n_undesirable());
  if (cache) check_cache(*cache, ref, data.records, cfg.design, cfg.seed);
  const auto mode = cfg.objective == Objective::kto ? BaselineMode::global_mean : BaselineMode::none;
  const bool paired = cfg.design.share_policy_ref;

  TrainResult res{policy_init, OptimizerState::for_params(policy_init), {}, cfg.kto};
  res.params.set_role(Role::policy);
  const std::size_t n = data.records.size();
  const long per_epoch = detail::steps_per_epoch(n, cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, cfg.seed, epoch);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      Minibatch batch;
      BatchEval ev;
      CompensatedSum var_sum;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& rec = data.records[order[k]];
        const auto seq = rec.seq();
        batch.items.push_back(make_item(seq, rec.label, cfg.kto));
        auto draws = example_draws(cfg.design, seq, rec.id, cfg.seed);
        ev.policy_grad.push_back(res.params.zeros_like());
        std::vector<double> pterms, rterms_local;
        ev.policy_elbo.push_back(evaluate_draw(res.params, seq, draws.policy, &ev.policy_grad.back(), &pterms));
        const std::vector<double>* rterms = nullptr;
        if (cache) {
          const auto* e = cache->find(rec.id);
          ev.ref_elbo.push_back(e->value);
          rterms = &e->terms;
        } else {
          ev.ref_elbo.push_back(evaluate_draw(ref, seq, draws.reference, nullptr, &rterms_local));
          rterms = &rterms_local;
        }
        var_sum.add(detail::estimate_variance(pterms, rterms, paired));
        ev.draws.push_back(std::move(draws));
      }
      const auto out = kto_from_eval(ev, batch, cfg.kto, mode);
      const double lr = lr_at(step + 1, total, cfg);
      detail::guard_finite(step + 1, lr, out.loss.loss, out.grad->grad, res.params);
      adamw_update(res.params, out.grad->grad, res.optimizer, lr, cfg);
      ++step;

      const int m = batch.size();
      StepMetrics sm{step, epoch, lr, out.loss.loss, 0.0, out.grad->grad.norm(), 0.0, 0.0};
      sm.psi_proxy = m > 1 ? (static_cast<double>(m - 1) / m) * var_sum.value() / m : 0.0;
      CompensatedSum dsum, usum;
      int nd = 0, nu = 0;
      for (int i = 0; i < m; ++i) {
        if (batch.items[i].s > 0) {
          dsum.add(out.margins.r_hat[i]);
          ++nd;
        } else {
          usum.add(out.margins.r_hat[i]);
          ++nu;
        }
      }
      sm.mean_margin_desirable = nd ? dsum.value() / nd : 0.0;
      sm.mean_margin_undesirable = nu ? usum.value() / nu : 0.0;
      res.metrics.push_back(sm);
    }
  }
  return res;
}

// Pairwise baseline objective on chosen/rejected pairs.
inline TrainResult train_vrpo(const ModelParams& policy_init, const ModelParams& ref,
                              const std::vector<PairRecord>& pairs, TrainConfig cfg) {
  cfg.validate();
  if (pairs.empty()) throw DataError("pairwise training needs at least one pair");
  validate_tokens(expand_pairs(pairs), policy_init.config().vocab);
  TrainResult res{policy_init, OptimizerState::for_params(policy_init), {}, cfg.kto};
  res.params.set_role(Role::policy);
  const std::size_t n = pairs.size();
  const long total = detail::steps_per_epoch(n, cfg.batch_size) * cfg.epochs;
  const std::uint64_t draw_seed = mix_seed(cfg.seed, 0xD4A7);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(n, cfg.seed, epoch);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_m = 1.0 / static_cast<double>(stop - start);
      Gradient grad = res.params.zeros_like();
      CompensatedSum loss, margin;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& p = pairs[order[k]];
        const auto st =
            vrpo_step(res.params, ref, p.pair(), cfg.kto.beta, cfg.design, mix_seed(draw_seed, string_key(p.id)), true);
        loss.add(st.loss * inv_m);
        margin.add(st.margin * inv_m);
        grad.axpy(inv_m, *st.grad);
      }
      const double lr = lr_at(step + 1, total, cfg);
      detail::guard_finite(step + 1, lr, loss.value(), grad, res.params);
      adamw_update(res.params, grad, res.optimizer, lr, cfg);
      ++step;
      res.metrics.push_back({step, epoch, lr, loss.value(), 0.0, grad.norm(), margin.value(), 0.0});
    }
  }
  return res;
}

}  // namespace mdkto
