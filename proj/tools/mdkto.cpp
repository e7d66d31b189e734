#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdkto/mdkto.hpp"

namespace fs = std::filesystem;
using namespace mdkto;

namespace {

enum Exit : int { ok = 0, checks_failed = 1, usage = 2, data = 3, diverged = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* sub, Common& c, bool seed_required) {
  sub->add_option("--config", c.config_path, "INI config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "override a config key, section.key=value")->take_all();
  auto* s = sub->add_option("--seed", c.seed, "master seed");
  if (seed_required) s->required();
  sub->add_option("--out-dir", c.out_dir, "output directory")->required();
}

// Loads the config, applies overrides, prepares the output directory and the manifest.
struct Run {
  RunConfig cfg;
  fs::path dir;
  RunManifest manifest;

  Run(const std::string& command, const Common& c, int argc, char** argv) {
    if (!c.config_path.empty()) {
      cfg = RunConfig::load(c.config_path);
      manifest.add_input(c.config_path);
    }
    for (const auto& o : c.overrides) cfg.set(o);
    dir = c.out_dir;
    fs::create_directories(dir);
    manifest.command = command;
    manifest.argv.assign(argv, argv + argc);
    manifest.config_text = cfg.canonical();
    manifest.config_hash = hex64(cfg.hash());
    if (c.seed) manifest.seeds["seed"] = *c.seed;
    std::ofstream(dir / "config.ini") << manifest.config_text;
    manifest.add_output(dir, "config.ini");
  }

  std::string input(const std::string& key) {
    const auto path = cfg.require<std::string>(key);
    manifest.add_input(path);
    return path;
  }

  std::ofstream open(const std::string& name) {
    std::ofstream out(dir / name);
    if (!out) throw ConfigError("cannot write '" + (dir / name).string() + "'");
    return out;
  }

  void finish(const std::vector<std::string>& outputs) {
    for (const auto& o : outputs) manifest.add_output(dir, o);
    manifest.save((dir / "manifest.json").string());
  }
};

DecodeConfig decode_from(const RunConfig& cfg, const ModelParams& model, const std::vector<TokenId>& prompt) {
  const int room = model.config().max_len - static_cast<int>(prompt.size());
  DecodeConfig d;
  d.gen_len = cfg.get("decode.gen_len", room);
  d.block_len = cfg.get("decode.block_len", d.gen_len);
  d.steps = cfg.get("decode.steps", d.block_len);
  if (d.gen_len > room) throw ConfigError("decode.gen_len exceeds the model's positions after the prompt");
  return d;
}

void progress_line(const char* what, int done, int total) {
  std::fprintf(stderr, "\r%s %d/%d", what, done, total);
  if (done == total) std::fputc('\n', stderr);
}

// ---- subcommands ----

int cmd_synth(const Common& c, int argc, char** argv) {
  Run run("synth", c, argc, argv);
  const auto sc = synth_config_from(run.cfg, *c.seed);
  const auto task = make_synth_task(sc);
  CheckpointHeader h{kCheckpointVersion, run.cfg.hash(), *c.seed, 0};
  save_checkpoint((run.dir / "gold.ckpt.json").string(), task.gold, h);
  save_checkpoint((run.dir / "ref.ckpt.json").string(), task.ref, h);
  write_dataset((run.dir / "train_unpaired.jsonl").string(), task.unpaired, DataFormat::unpaired);
  write_dataset((run.dir / "train_paired.jsonl").string(), task.unpaired, DataFormat::paired);
  {
    auto out = run.open("eval_prompts.jsonl");
    write_prompts(out, task.eval);
  }
  std::cout << dataset_summary(task.unpaired) << '\n';
  run.finish({"gold.ckpt.json", "ref.ckpt.json", "train_unpaired.jsonl", "train_paired.jsonl", "eval_prompts.jsonl"});
  return ok;
}

int cmd_train(const Common& c, int argc, char** argv) {
  Run run("train", c, argc, argv);
  const auto tc = train_config_from(run.cfg, *c.seed);
  const auto ref = load_checkpoint(run.input("model.ref"));
  const auto init = run.cfg.has("model.init") ? load_checkpoint(run.input("model.init")) : ref;
  const auto format = parse_format(run.cfg.get<std::string>("data.format", "unpaired"));
  const auto ds = ingest(run.input("data.train"), format, ref.config().vocab);
  std::cerr << dataset_summary(ds) << '\n';

  std::vector<std::string> outputs;
  TrainResult res;
  if (tc.objective == Objective::vrpo) {
    if (format != DataFormat::paired) throw ConfigError("objective vrpo needs data.format = paired");
    res = train_vrpo(init, ref, ds.pairs, tc);
  } else {
    std::optional<RefCache> cache;
    if (run.cfg.get("train.ref_cache", false)) {
      cache = precompute_ref(ref, ds.records, tc.design, tc.seed);
      save_ref_cache((run.dir / "ref_cache.jsonl").string(), *cache);
      outputs.push_back("ref_cache.jsonl");
    }
    res = train(init, ref, ds, tc, cache ? &*cache : nullptr);
  }

  CheckpointHeader h{kCheckpointVersion, tc.hash(), tc.seed, res.metrics.empty() ? 0 : res.metrics.back().step};
  save_checkpoint((run.dir / "policy.ckpt.json").string(), res.params, h);
  {
    auto out = run.open("metrics.jsonl");
    for (const auto& m : res.metrics) out << to_json(m).dump() << '\n';
  }
  outputs.insert(outputs.end(), {"policy.ckpt.json", "metrics.jsonl"});
  if (!res.metrics.empty()) {
    const auto& last = res.metrics.back();
    std::printf("steps %ld  final loss %.6f  grad norm %.4g\n", last.step, last.loss, last.grad_norm);
  }
  run.finish(outputs);
  return ok;
}

int cmd_verify_bounds(const Common& c, int argc, char** argv) {
  Run run("verify-bounds", c, argc, argv);
  const auto sc = suite_config_from(run.cfg, *c.seed);
  const auto rep = run_suite(sc, [](int d, int t) { progress_line("instances", d, t); });
  {
    auto out = run.open("bounds_report.jsonl");
    write_bounds_jsonl(out, rep);
  }
  std::ostringstream table;
  write_bounds_table(table, rep, sc.min_pass_rate);
  run.open("bounds_summary.txt") << table.str();
  std::cout << table.str();
  run.finish({"bounds_report.jsonl", "bounds_summary.txt"});
  return rep.passed ? ok : checks_failed;
}

int cmd_eval_judge(const Common& c, int argc, char** argv) {
  Run run("eval-judge", c, argc, argv);
  const auto a = load_checkpoint(run.input("model.a"));
  const auto b = load_checkpoint(run.input("model.b"));
  const auto prompts = read_prompts(run.input("data.eval"));
  if (prompts.empty()) throw DataError("no evaluation prompts");
  std::vector<JudgeOracle> judges{gold_judge(load_checkpoint(run.input("judge.gold")), "gold")};
  if (run.cfg.has("judge.second")) {
    auto j = gold_judge(load_checkpoint(run.input("judge.second")), "second");
    j.noise = run.cfg.get("judge.second_noise", 0.0);
    j.position_bias = run.cfg.get("judge.second_position_bias", 0.0);
    j.seed = mix_seed(*c.seed, 0x7D);
    judges.push_back(std::move(j));
  }
  const auto decode = decode_from(run.cfg, a, prompts.front().prompt);
  const int resamples = run.cfg.get("eval.resamples", 5000);
  const double level = run.cfg.get("eval.level", 0.90);
  const auto s = evaluate_pair(a, b, prompts, decode, judges, *c.seed, resamples, level);

  std::vector<std::string> outputs;
  for (std::size_t j = 0; j < s.per_judge.size(); ++j) {
    const auto name = "matches_" + judges[j].tag + ".jsonl";
    auto out = run.open(name);
    for (const auto& r : s.per_judge[j]) out << to_json(r).dump() << '\n';
    outputs.push_back(name);
  }
  run.open("eval_summary.json") << to_json(s).dump(1) << '\n';
  outputs.push_back("eval_summary.json");
  std::printf("AWR %.4f  (%ld win / %ld tie / %ld loss)  %.0f%% CI [%.4f, %.4f]\n", s.awr, s.counts.wins,
              s.counts.ties, s.counts.losses, level * 100, s.ci_low, s.ci_high);
  if (s.per_judge.size() > 1) {
    if (s.kappa)
      std::printf("judge agreement kappa %.4f\n", *s.kappa);
    else
      std::printf("judge agreement kappa undefined (chance agreement is 1)\n");
  }
  run.finish(outputs);
  return ok;
}

struct ElboFlags {
  bool exact = false;
  std::optional<int> n_t, n_yt;
  std::optional<std::string> form;
};

int cmd_elbo(const Common& c, const ElboFlags& f, int argc, char** argv) {
  if (!f.exact && !c.seed) throw CLI::RequiredError("--seed (Monte Carlo estimation is stochastic)");
  Run run("elbo", c, argc, argv);
  if (f.form) run.cfg.set("design.form=" + *f.form);
  if (f.n_t) run.cfg.set("design.n_t=" + std::to_string(*f.n_t));
  if (f.n_yt) run.cfg.set("design.n_yt=" + std::to_string(*f.n_yt));
  const auto design = design_from(run.cfg);
  const auto model = load_checkpoint(run.input("model.checkpoint"));
  const auto format = parse_format(run.cfg.get<std::string>("data.format", "unpaired"));
  const auto ds = ingest(run.input("data.path"), format, model.config().vocab);
  if (f.exact)
    for (const auto& r : ds.records)
      if (static_cast<int>(r.response.size()) > kMaxExactLength)
        throw ConfigError("record '" + r.id + "' has response length " + std::to_string(r.response.size()) +
                          "; the exact oracle enumerates masks and is limited to L <= " +
                          std::to_string(kMaxExactLength));
  auto out = run.open("elbo.jsonl");
  for (const auto& r : ds.records) {
    nlohmann::json j{{"id", r.id}, {"length", r.response.size()}};
    if (f.exact) {
      j["elbo"] = elbo_exact(model, r.seq(), design.form);
      j["method"] = "exact";
    } else {
      const auto est = elbo_mc(model, r.seq(), design, item_seed(design, *c.seed, string_key(r.id)));
      j["elbo"] = est.value;
      j["method"] = design.describe();
    }
    out << j.dump() << '\n';
  }
  out.close();
  std::printf("%zu records scored\n", ds.records.size());
  run.finish({"elbo.jsonl"});
  return ok;
}

int cmd_generate(const Common& c, int argc, char** argv) {
  Run run("generate", c, argc, argv);
  const auto model = load_checkpoint(run.input("model.checkpoint"));
  const auto prompts = read_prompts(run.input("data.prompts"));
  auto out = run.open("generations.jsonl");
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto d = decode_from(run.cfg, model, prompts[p].prompt);
    const auto seq = reverse_sample(model, prompts[p].prompt, d, mix_seed(*c.seed, p));
    out << nlohmann::json{{"id", prompts[p].id}, {"prompt", seq.prompt}, {"response", seq.response}}.dump() << '\n';
  }
  out.close();
  std::printf("%zu completions\n", prompts.size());
  run.finish({"generations.jsonl"});
  return ok;
}

int cmd_sweep_imbalance(const Common& c, int argc, char** argv) {
  Run run("sweep-imbalance", c, argc, argv);
  auto tc = train_config_from(run.cfg, *c.seed);
  const int n_tasks = run.cfg.get("sweep.tasks", 24);
  const auto ratios = parse_list("sweep.ratios", run.cfg.get<std::string>("sweep.ratios", "1,0.5,0.25,0.125"));
  const auto tasks = make_synth_tasks(synth_config_from(run.cfg, *c.seed), n_tasks, *c.seed);
  const auto sw = sweep_imbalance(tasks, tc, ratios, *c.seed, [](int d, int t) { progress_line("runs", d, t); });

  {
    auto out = run.open("sweep.jsonl");
    for (const auto* curve : {&sw.desirable, &sw.undesirable})
      for (std::size_t r = 0; r < curve->ratios.size(); ++r)
        out << nlohmann::json{{"subsampled", curve->subsample_desirable ? "desirable" : "undesirable"},
                              {"ratio", curve->ratios[r]},
                              {"awr", curve->awr[r]}}
                   .dump()
            << '\n';
  }
  std::ostringstream s;
  char line[128];
  std::snprintf(line, sizeof line, "%-12s", "ratio");
  s << line;
  for (double r : ratios) {
    std::snprintf(line, sizeof line, " %8.4g", r);
    s << line;
  }
  s << '\n';
  for (const auto* curve : {&sw.desirable, &sw.undesirable}) {
    std::snprintf(line, sizeof line, "%-12s", curve->subsample_desirable ? "desirable" : "undesirable");
    s << line;
    for (double a : curve->awr) {
      std::snprintf(line, sizeof line, " %8.4f", a);
      s << line;
    }
    std::snprintf(line, sizeof line, "   increases %d  mean drop %.4f\n", curve->increases(), curve->mean_drop());
    s << line;
  }
  s << "non-increasing (<= " << sw.allowed_increases << " exception per curve): " << (sw.trend_ok() ? "yes" : "no")
    << '\n';
  s << "desirable subsampling degrades more: " << (sw.desirable_steeper() ? "yes" : "no") << '\n';
  run.open("sweep_summary.txt") << s.str();
  std::cout << s.str();
  run.finish({"sweep.jsonl", "sweep_summary.txt"});
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-diffusion KTO toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common synth_c, train_c, bounds_c, judge_c, elbo_c, gen_c, sweep_c;
  ElboFlags elbo_f;
  auto* synth = app.add_subcommand("synth", "write a synthetic gold-judged task (models, data, eval prompts)");
  add_common(synth, synth_c, true);
  auto* trn = app.add_subcommand("train", "train a policy with ELBO-KTO (or the pairwise baseline)");
  add_common(trn, train_c, true);
  auto* bounds = app.add_subcommand("verify-bounds", "check the estimator bias/variance bounds on random instances");
  add_common(bounds, bounds_c, true);
  auto* judge = app.add_subcommand("eval-judge", "dual-order judged comparison of two checkpoints");
  add_common(judge, judge_c, true);
  auto* elbo = app.add_subcommand("elbo", "score records with the Monte Carlo or exact ELBO");
  add_common(elbo, elbo_c, false);
  auto* exact = elbo->add_flag("--exact", elbo_f.exact, "enumerate all masks (L <= 12)");
  elbo->add_option("--n-t", elbo_f.n_t, "timestep draws")->excludes(exact);
  elbo->add_option("--n-yt", elbo_f.n_yt, "mask draws per timestep")->excludes(exact);
  elbo->add_option("--form", elbo_f.form, "l or t")->check(CLI::IsMember({"l", "t"}));
  auto* gen = app.add_subcommand("generate", "decode completions for a prompt file");
  add_common(gen, gen_c, true);
  auto* sweep = app.add_subcommand("sweep-imbalance", "AWR as either class is subsampled");
  add_common(sweep, sweep_c, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*synth) return cmd_synth(synth_c, argc, argv);
    if (*trn) return cmd_train(train_c, argc, argv);
    if (*bounds) return cmd_verify_bounds(bounds_c, argc, argv);
    if (*judge) return cmd_eval_judge(judge_c, argc, argv);
    if (*elbo) return cmd_elbo(elbo_c, elbo_f, argc, argv);
    if (*gen) return cmd_generate(gen_c, argc, argv);
    if (*sweep) return cmd_sweep_imbalance(sweep_c, argc, argv);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return usage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return usage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return data;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return diverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return data;
  }
  return usage;
}
