#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mdkto/dataset.hpp"
#include "mdkto/judge.hpp"
#include "mdkto/synth.hpp"
#include "mdkto/train.hpp"

namespace mdkto {

// Keeps round(ratio * n_class) records of one class, chosen at random; order is preserved.
inline Dataset subsample_class(const Dataset& ds, bool label, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("subsample ratio must lie in (0, 1]");
  std::vector<std::size_t> cls;
  for (std::size_t k = 0; k < ds.records.size(); ++k)
    if (ds.records[k].label == label) cls.push_back(k);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(cls));
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(cls.size()) * ratio));
  std::vector<char> drop(ds.records.size(), 0);
  for (std::size_t k = keep; k < cls.size(); ++k) drop[cls[k]] = 1;
  Dataset out;
  for (std::size_t k = 0; k < ds.records.size(); ++k)
    if (!drop[k]) out.records.push_back(ds.records[k]);
  return out;
}

struct ImbalanceCurve {
  bool subsample_desirable = true;
  std::vector<double> ratios;
  std::vector<double> awr;  // mean over tasks

  int increases() const {
    int n = 0;
    for (std::size_t k = 1; k < awr.size(); ++k) n += awr[k] > awr[k - 1] ? 1 : 0;
    return n;
  }
  // Mean AWR loss relative to the full dataset over the subsampled ratios.
  double mean_drop() const {
    double d = 0.0;
    for (std::size_t k = 1; k < awr.size(); ++k) d += awr.front() - awr[k];
    return awr.size() > 1 ? d / static_cast<double>(awr.size() - 1) : 0.0;
  }
};

struct ImbalanceSweep {
  ImbalanceCurve desirable;
  ImbalanceCurve undesirable;
  int allowed_increases = 1;

  bool trend_ok() const {
    return desirable.increases() <= allowed_increases && undesirable.increases() <= allowed_increases;
  }
  bool desirable_steeper() const { return desirable.mean_drop() > undesirable.mean_drop(); }
  bool passed() const { return trend_ok() && desirable_steeper(); }
};

// Independent synthetic tasks sharing every setting but the seed.
inline std::vector<SynthTask> make_synth_tasks(SynthConfig base, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("need at least one task");
  std::vector<SynthTask> tasks;
  for (int t = 0; t < n; ++t) {
    base.seed = mix_seed(seed, 0x7A5C + static_cast<std::uint64_t>(t));
    tasks.push_back(make_synth_task(base));
  }
  return tasks;
}

// For each task: train one epoch on the subsampled records (class weights rebalanced) and score
// the result against the task's initial policy with its gold judge.
template <typename Progress = void (*)(int, int)>
ImbalanceSweep sweep_imbalance(const std::vector<SynthTask>& tasks, TrainConfig cfg, const std::vector<double>& ratios,
                               std::uint64_t seed, Progress progress = [](int, int) {}) {
  if (tasks.empty() || ratios.empty()) throw ConfigError("imbalance sweep needs tasks and ratios");
  if (ratios.front() != 1.0) throw ConfigError("imbalance sweep ratios must start at 1");
  cfg.rebalance = true;
  ImbalanceSweep sw;
  const int total = static_cast<int>(tasks.size() * (2 * ratios.size() - 1));
  int done = 0;
  std::vector<double> full(tasks.size());
  auto run = [&](std::size_t t, const Dataset& ds) {
    const auto& task = tasks[t];
    TrainConfig c = cfg;
    c.seed = mix_seed(seed, t);
    const auto res = train(task.ref, task.ref, ds, c);
    const auto ev = evaluate_pair(res.params, task.ref, task.eval, task.config.decode(), {gold_judge(task.gold)},
                                  mix_seed(seed, 0x5EED + t), 1);
    progress(++done, total);
    return ev.awr;
  };
  for (std::size_t t = 0; t < tasks.size(); ++t) full[t] = run(t, tasks[t].unpaired);
  for (bool label : {true, false}) {
    auto& curve = label ? sw.desirable : sw.undesirable;
    curve.subsample_desirable = label;
    curve.ratios = ratios;
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      double total_awr = 0.0;
      for (std::size_t t = 0; t < tasks.size(); ++t)
        total_awr += r == 0 ? full[t]
                            : run(t, subsample_class(tasks[t].unpaired, label, ratios[r], mix_seed(seed, 0xAB + t)));
      curve.awr.push_back(total_awr / static_cast<double>(tasks.size()));
    }
  }
  return sw;
}

}  // namespace mdkto
