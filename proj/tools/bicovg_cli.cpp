// bicovg command line.
//
//   train          run a config end to end, write metrics + checkpoint
//   eval           per-head and fused accuracy of a checkpoint on a dataset
//   fuse           refit the fusion weights of a checkpoint
//   diagnose       curve metrics (DA, TR, SG, DG, N_eff) for two layer curves
//   memplan        peak-memory estimates across group sizes and schedules
//   export-report  rebuild report.json from a run directory's artifacts
//   make-synth     write the synthetic corpus of a config as IDX files
//
// Configs come from --config <path> or --preset <name> (resolved against
// $BICOVG_PRESET_DIR, falling back to the build-time preset directory), with
// --set section.key=value overrides applied in order.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bicovg/checkpoint.hpp"
#include "bicovg/config.hpp"
#include "bicovg/data.hpp"
#include "bicovg/diagnostics.hpp"
#include "bicovg/fusion.hpp"
#include "bicovg/memmodel.hpp"
#include "bicovg/model.hpp"
#include "bicovg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bicovg;

namespace {

std::string preset_dir() {
  if (const char* env = std::getenv("BICOVG_PRESET_DIR")) return env;
  return BICOVG_DEFAULT_PRESET_DIR;
}

struct ConfigArgs {
  std::string config_path;
  std::string preset;
  std::vector<std::string> sets;
};

// Registers --config/--preset/--set on a subcommand; `flag` names the path
// option (train uses --config, eval and fuse call it --data).
void add_config_options(CLI::App* cmd, ConfigArgs& args,
                        const std::string& flag = "--config") {
  auto* c = cmd->add_option(flag, args.config_path, "config file");
  auto* p = cmd->add_option("--preset", args.preset, "shipped preset name");
  c->excludes(p);
  p->excludes(c);
  cmd->add_option("--set", args.sets,
                  "section.key=value override, repeatable");
}

Config resolve_config(const ConfigArgs& args) {
  std::string path = args.config_path;
  if (path.empty() && !args.preset.empty())
    path = preset_dir() + "/" + args.preset + ".cfg";
  if (path.empty())
    throw std::runtime_error("need a config file or a --preset name");
  Config cfg = load_config_file(path);
  for (const std::string& kv : args.sets) apply_override(cfg, kv);
  return cfg;
}

void check_data_matches_arch(const Dataset& d, const ArchConfig& a,
                             const char* split) {
  if (d.c != a.input_channels || d.h != a.input_size || d.w != a.input_size)
    throw std::runtime_error(
        std::string(split) + " split is " + std::to_string(d.c) + "x" +
        std::to_string(d.h) + "x" + std::to_string(d.w) + ", arch expects " +
        std::to_string(a.input_channels) + "x" + std::to_string(a.input_size) +
        "x" + std::to_string(a.input_size));
  if (d.classes > a.classes)
    throw std::runtime_error(std::string(split) + " split carries " +
                             std::to_string(d.classes) +
                             " classes, arch readouts have " +
                             std::to_string(a.classes));
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

json estimate_json(const MemoryEstimate& e) {
  return json{{"parameters", e.parameters},
              {"gradients", e.gradients},
              {"optimizer_state", e.optimizer_state},
              {"activations", e.activations},
              {"head_graphs", e.head_graphs},
              {"peak", e.peak}};
}

// ---- train ----

int cmd_train(const ConfigArgs& cargs, const std::string& out_dir,
              bool measure_mem) {
  Config cfg = resolve_config(cargs);
  finalize(cfg);
  fs::create_directories(out_dir);
  {
    std::ofstream f(out_dir + "/config.cfg");
    if (!f) throw std::runtime_error("cannot write " + out_dir + "/config.cfg");
    f << dump_config(cfg);
  }
  SplitPair data = load_train_test(cfg.data);
  check_data_matches_arch(data.train, cfg.arch, "train");
  check_data_matches_arch(data.test, cfg.arch, "test");

  Network net(cfg.arch, cfg.train.seed);
  Trainer trainer(net, cfg.train);
  MemProbe probe;
  if (measure_mem) probe.arm();

  std::ofstream csv(out_dir + "/metrics.csv");
  if (!csv) throw std::runtime_error("cannot write " + out_dir + "/metrics.csv");
  auto t0 = std::chrono::steady_clock::now();
  RunResult rr = train_model(net, cfg, data.train, data.test, trainer, &csv,
                             &std::cout);

  LogitCache train_cache = collect_logits(net, data.train, cfg.train.batch_size);
  FusionResult fr = fit_fusion(train_cache);
  LogitCache test_cache = collect_logits(net, data.test, cfg.train.batch_size);
  double fused_train = logit_top1(fused_logits(train_cache, fr.weights),
                                  train_cache.labels);
  double fused_test =
      logit_top1(fused_logits(test_cache, fr.weights), test_cache.labels);
  double secs = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
  int64_t measured = measure_mem ? measure_peak(probe) : 0;

  save_checkpoint(out_dir + "/ckpt.bin", net, &trainer, &fr.alpha);

  std::size_t bp = best_pred_index(rr.final_train);
  json rep;
  rep["name"] = cfg.arch.name;
  rep["seed"] = cfg.train.seed;
  rep["epochs"] = cfg.train.epochs;
  rep["steps"] = trainer.step_count();
  rep["schedule"] = cfg.train.schedule;
  rep["optimizer"] = cfg.train.optimizer;
  rep["group_size"] = cfg.arch.group_size;
  rep["train_samples"] = data.train.n;
  rep["test_samples"] = data.test.n;
  rep["wall_seconds"] = secs;
  json heads = json::array();
  for (std::size_t h = 0; h < rr.final_test.blocks.size(); ++h)
    heads.push_back(json{{"block", rr.final_test.blocks[h]},
                         {"test_loss", rr.final_test.loss[h]},
                         {"test_top1", rr.final_test.top1[h]},
                         {"train_top1", rr.final_train.top1[h]}});
  rep["heads"] = heads;
  rep["best_pred"] = json{{"block", rr.final_train.blocks[bp]},
                          {"train_top1", rr.final_train.top1[bp]},
                          {"test_top1", rr.final_test.top1[bp]}};
  rep["fusion"] = json{{"train_ce", fr.train_ce},
                       {"train_top1", fused_train},
                       {"test_top1", fused_test},
                       {"weights", fr.weights},
                       {"alpha", fr.alpha},
                       {"n_eff", n_eff(fr.weights)}};
  if (measure_mem) {
    RunPlan plan;
    plan.schedule = cfg.train.schedule;
    plan.optimizer = cfg.train.optimizer;
    MemoryEstimate e = estimate_peak(cfg.arch, plan, cfg.train.batch_size);
    rep["memory"] = json{{"measured_peak_bytes", measured},
                         {"estimate", estimate_json(e)}};
  }
  rep["artifacts"] = json{{"config", "config.cfg"},
                          {"metrics", "metrics.csv"},
                          {"checkpoint", "ckpt.bin"}};
  {
    std::ofstream f(out_dir + "/report.json");
    f << rep.dump(2) << "\n";
  }

  std::cout << "run complete in " << secs << " s\n";
  std::cout << "best head (picked on train): block "
            << rr.final_train.blocks[bp] << ", test top1 "
            << rr.final_test.top1[bp] << "\n";
  std::cout << "fused: test top1 " << fused_test << ", train ce "
            << fr.train_ce << "\n";
  if (measure_mem)
    std::cout << "peak memory: measured " << measured << " bytes\n";
  std::cout << "wrote " << out_dir << "/{config.cfg, metrics.csv, ckpt.bin, "
            << "report.json}\n";
  return 0;
}

// ---- eval ----

int cmd_eval(const std::string& ckpt, const ConfigArgs& cargs,
             const std::string& split) {
  Config cfg = resolve_config(cargs);
  finalize(cfg);
  CheckpointDoc doc = read_checkpoint(ckpt);
  Network net(cfg.arch, doc.seed);
  apply_doc(doc, net);
  SplitPair data = load_train_test(cfg.data);
  const Dataset& d = split == "train" ? data.train : data.test;
  check_data_matches_arch(d, cfg.arch, split.c_str());

  LogitCache cache = collect_logits(net, d, cfg.train.batch_size);
  EvalTable t = table_from_cache(cache);
  std::cout << "layer,loss,top1\n";
  for (std::size_t h = 0; h < t.blocks.size(); ++h)
    std::cout << t.blocks[h] << "," << t.loss[h] << "," << t.top1[h] << "\n";
  if (doc.has_alpha) {
    std::vector<double> w = softmax_weights(doc.alpha);
    Tensor4 fl = fused_logits(cache, w);
    std::cout << "fused," << logit_ce(fl, cache.labels) << ","
              << logit_top1(fl, cache.labels) << "\n";
  } else {
    std::cerr << "note: checkpoint has no fusion weights; run `bicovg fuse` "
                 "to add them\n";
  }
  return 0;
}

// ---- fuse ----

int cmd_fuse(const std::string& ckpt, const ConfigArgs& cargs) {
  Config cfg = resolve_config(cargs);
  finalize(cfg);
  CheckpointDoc doc = read_checkpoint(ckpt);
  Network net(cfg.arch, doc.seed);
  apply_doc(doc, net);
  SplitPair data = load_train_test(cfg.data);
  check_data_matches_arch(data.train, cfg.arch, "train");

  LogitCache train_cache = collect_logits(net, data.train, cfg.train.batch_size);
  FusionResult fr = fit_fusion(train_cache);
  LogitCache test_cache = collect_logits(net, data.test, cfg.train.batch_size);

  doc.has_alpha = true;
  doc.alpha = fr.alpha;
  write_checkpoint(ckpt, doc);  // params and optimizer state pass through

  std::cout << "layer,weight,train_top1,test_top1\n";
  for (std::size_t h = 0; h < train_cache.blocks.size(); ++h)
    std::cout << train_cache.blocks[h] << "," << fr.weights[h] << ","
              << logit_top1(train_cache.logits[h], train_cache.labels) << ","
              << logit_top1(test_cache.logits[h], test_cache.labels) << "\n";
  std::cout << "fused,1,"
            << logit_top1(fused_logits(train_cache, fr.weights),
                          train_cache.labels)
            << ","
            << logit_top1(fused_logits(test_cache, fr.weights),
                          test_cache.labels)
            << "\n";
  std::cerr << "fusion weights written into " << ckpt << " (train ce "
            << fr.train_ce << ")\n";
  return 0;
}

// ---- diagnose ----

struct Curve {
  std::vector<double> top1;     // percent
  std::vector<double> weights;  // optional third column
};

Curve read_curve_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open curve file '" + path + "'");
  Curve c;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string s = cfgdetail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cfgdetail::trim(cell));
    if (cells.size() < 2 || cells.size() > 3)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": want layer,top1[,weight]");
    try {
      std::stod(cells[1]);
    } catch (...) {
      if (lineno == 1) continue;  // header row
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": top1 is not a number");
    }
    c.top1.push_back(std::stod(cells[1]));
    if (cells.size() == 3) c.weights.push_back(std::stod(cells[2]));
  }
  if (c.top1.empty())
    throw std::runtime_error(path + ": no curve rows");
  if (!c.weights.empty() && c.weights.size() != c.top1.size())
    throw std::runtime_error(path + ": weight column is partial");
  return c;
}

int cmd_diagnose(const std::vector<std::string>& curve_paths,
                 const std::string& out_path) {
  Curve a = read_curve_csv(curve_paths[0]);
  Curve b = read_curve_csv(curve_paths[1]);
  auto curve_json = [](const std::string& file, const Curve& c) {
    json j;
    j["file"] = file;
    j["layers"] = c.top1.size();
    j["decline_area"] = decline_area(c.top1);
    j["tail_retention"] = tail_retention(c.top1);
    if (!c.weights.empty()) j["n_eff"] = n_eff(c.weights);
    return j;
  };
  json rep;
  rep["a"] = curve_json(curve_paths[0], a);
  rep["b"] = curve_json(curve_paths[1], b);
  GainSplit g = shallow_deep_gain(a.top1, b.top1);
  json deltas;
  deltas["decline_area"] =
      decline_area(b.top1) - decline_area(a.top1);
  deltas["tail_retention"] =
      tail_retention(b.top1) - tail_retention(a.top1);
  deltas["shallow_gain"] = g.shallow;
  deltas["deep_gain"] = g.deep;
  if (!a.weights.empty() && !b.weights.empty())
    deltas["n_eff"] = n_eff(b.weights) - n_eff(a.weights);
  rep["b_minus_a"] = deltas;
  std::string text = rep.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write '" + out_path + "'");
    f << text;
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

// ---- memplan ----

int cmd_memplan(const ConfigArgs& cargs, int64_t batch,
                const std::string& sweep) {
  Config cfg = resolve_config(cargs);
  finalize(cfg);
  std::vector<int64_t> ms;
  if (sweep.empty())
    ms.push_back(cfg.arch.group_size);
  else
    ms = cfgdetail::parse_int_list(sweep, "--sweep-m");
  int64_t L = static_cast<int64_t>(cfg.arch.blocks.size());
  for (int64_t m : ms)
    if (m < 1 || m > L || L % m != 0)
      throw std::runtime_error("group size " + std::to_string(m) +
                               " does not divide the " + std::to_string(L) +
                               "-block chain");
  std::cout << "m,schedule,parameters,gradients,optimizer_state,activations,"
               "head_graphs,peak\n";
  for (int64_t m : ms) {
    ArchConfig a = cfg.arch;
    a.group_size = m;
    for (const std::string& sched : {"standard", "interleaved"}) {
      RunPlan plan;
      plan.schedule = sched;
      plan.optimizer = cfg.train.optimizer;
      MemoryEstimate e = estimate_peak(a, plan, batch);
      std::cout << m << "," << sched << "," << e.parameters << ","
                << e.gradients << "," << e.optimizer_state << ","
                << e.activations << "," << e.head_graphs << "," << e.peak
                << "\n";
    }
  }
  return 0;
}

// ---- export-report ----

int cmd_export_report(const std::string& run_dir) {
  std::string cfg_path = run_dir + "/config.cfg";
  if (!fs::exists(cfg_path))
    throw std::runtime_error("no config.cfg under '" + run_dir + "'");
  Config cfg = load_config_file(cfg_path);
  finalize(cfg);
  json rep;
  rep["name"] = cfg.arch.name;
  rep["seed"] = cfg.train.seed;
  rep["epochs"] = cfg.train.epochs;
  rep["schedule"] = cfg.train.schedule;
  rep["optimizer"] = cfg.train.optimizer;
  rep["group_size"] = cfg.arch.group_size;

  std::string metrics_path = run_dir + "/metrics.csv";
  if (fs::exists(metrics_path)) {
    std::ifstream f(metrics_path);
    std::string line;
    std::getline(f, line);  // header
    int64_t last_epoch = 0;
    std::vector<json> rows;
    while (std::getline(f, line)) {
      std::stringstream ss(line);
      std::string e, l, loss, top1;
      if (!std::getline(ss, e, ',') || !std::getline(ss, l, ',') ||
          !std::getline(ss, loss, ',') || !std::getline(ss, top1, ','))
        continue;
      int64_t epoch = std::stoll(e);
      if (epoch > last_epoch) {
        last_epoch = epoch;
        rows.clear();
      }
      if (epoch == last_epoch)
        rows.push_back(json{{"block", std::stoll(l)},
                            {"test_loss", std::stod(loss)},
                            {"test_top1", std::stod(top1)}});
    }
    rep["epochs_recorded"] = last_epoch;
    rep["heads"] = rows;
  }

  std::string ckpt_path = run_dir + "/ckpt.bin";
  if (fs::exists(ckpt_path)) {
    CheckpointDoc doc = read_checkpoint(ckpt_path);
    json ck;
    ck["version"] = doc.version;
    ck["seed"] = doc.seed;
    ck["arch_hash"] = hex64(doc.arch_hash);
    ck["params"] = doc.params.size();
    ck["optimizer"] = doc.opt_kind;
    ck["has_fusion"] = doc.has_alpha;
    if (doc.has_alpha) {
      std::vector<double> w = softmax_weights(doc.alpha);
      ck["fusion_weights"] = w;
      ck["fusion_n_eff"] = n_eff(w);
    }
    rep["checkpoint"] = ck;
  }

  std::string out = run_dir + "/report.json";
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write '" + out + "'");
  f << rep.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

// ---- make-synth ----

int cmd_make_synth(const ConfigArgs& cargs, const std::string& out_dir) {
  Config cfg = resolve_config(cargs);
  finalize(cfg);
  if (cfg.data.format != "synth")
    throw std::runtime_error("make-synth wants a config with data format "
                             "'synth', got '" + cfg.data.format + "'");
  SynthSpec s;
  s.classes = cfg.data.synth_classes;
  s.size = cfg.data.synth_size;
  s.channels = cfg.data.synth_channels;
  s.noise = cfg.data.synth_noise;
  s.shift = cfg.data.synth_shift;
  s.seed = cfg.data.synth_seed;
  fs::create_directories(out_dir);
  s.count = cfg.data.synth_train;
  Dataset train = make_synthetic(s, "train");
  s.count = cfg.data.synth_test;
  Dataset test = make_synthetic(s, "test");
  save_idx(train, out_dir + "/train-images.idx", out_dir + "/train-labels.idx");
  save_idx(test, out_dir + "/test-images.idx", out_dir + "/test-labels.idx");
  std::cout << "wrote " << (train.n + test.n) << " samples under " << out_dir
            << "\n";
  std::cout << "use them with:\n"
            << "[data]\n"
            << "format = idx\n"
            << "train_images = " << out_dir << "/train-images.idx\n"
            << "train_labels = " << out_dir << "/train-labels.idx\n"
            << "test_images = " << out_dir << "/test-images.idx\n"
            << "test_labels = " << out_dir << "/test-labels.idx\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bicovg: local-learning training engine"};
  app.require_subcommand(1);

  ConfigArgs train_cfg;
  std::string train_out;
  bool measure_mem = false;
  CLI::App* train_cmd =
      app.add_subcommand("train", "train a model and write a run directory");
  add_config_options(train_cmd, train_cfg);
  train_cmd->add_option("--out", train_out, "run directory")->required();
  train_cmd->add_flag("--measure-mem", measure_mem,
                      "record the allocator high-water mark in the report");

  ConfigArgs eval_cfg;
  std::string eval_ckpt, eval_split = "test";
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  add_config_options(eval_cmd, eval_cfg, "--data");
  eval_cmd->add_option("--split", eval_split, "train or test (default test)")
      ->check(CLI::IsMember({"train", "test"}));

  ConfigArgs fuse_cfg;
  std::string fuse_ckpt;
  CLI::App* fuse_cmd = app.add_subcommand(
      "fuse", "refit fusion weights and store them in the checkpoint");
  fuse_cmd->add_option("--ckpt", fuse_ckpt, "checkpoint file")->required();
  add_config_options(fuse_cmd, fuse_cfg, "--data");

  std::vector<std::string> diag_curves;
  std::string diag_out;
  CLI::App* diag_cmd =
      app.add_subcommand("diagnose", "curve metrics for two layer curves");
  diag_cmd
      ->add_option("--curves", diag_curves,
                   "two CSV files with layer,top1[,weight] rows in percent")
      ->expected(2)
      ->required();
  diag_cmd->add_option("--out", diag_out, "write the JSON report here");

  ConfigArgs plan_cfg;
  int64_t plan_batch = 0;
  std::string plan_sweep;
  CLI::App* plan_cmd = app.add_subcommand(
      "memplan", "peak-memory estimates per group size and schedule");
  add_config_options(plan_cmd, plan_cfg);
  plan_cmd->add_option("--batch", plan_batch, "batch size")->required();
  plan_cmd->add_option("--sweep-m", plan_sweep,
                       "comma-separated group sizes (default: the config's)");

  std::string report_dir;
  CLI::App* report_cmd = app.add_subcommand(
      "export-report", "rebuild report.json from a run directory");
  report_cmd->add_option("--run-dir", report_dir, "run directory")->required();

  ConfigArgs synth_cfg;
  std::string synth_out;
  CLI::App* synth_cmd = app.add_subcommand(
      "make-synth", "write a config's synthetic corpus as IDX files");
  add_config_options(synth_cmd, synth_cfg);
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return cmd_train(train_cfg, train_out, measure_mem);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_cfg, eval_split);
    if (*fuse_cmd) return cmd_fuse(fuse_ckpt, fuse_cfg);
    if (*diag_cmd) return cmd_diagnose(diag_curves, diag_out);
    if (*plan_cmd) return cmd_memplan(plan_cfg, plan_batch, plan_sweep);
    if (*report_cmd) return cmd_export_report(report_dir);
    if (*synth_cmd) return cmd_make_synth(synth_cfg, synth_out);
  } catch (const std::exception& e) {
    std::cerr << "bicovg: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
