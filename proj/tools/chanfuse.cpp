// chanfuse command-line entry point.
//
// Exit codes: 0 success, 1 verification failure, 2 config error, 3 missing input.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <malloc.h>
#include <sstream>

#include "CLI11.hpp"
#include "chanfuse/analysis.hpp"
#include "chanfuse/checkpoint.hpp"
#include "chanfuse/config.hpp"
#include "chanfuse/data.hpp"
#include "chanfuse/errors.hpp"
#include "chanfuse/gradcheck.hpp"
#include "chanfuse/model.hpp"
#include "chanfuse/trace.hpp"
#include "chanfuse/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace chanfuse;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kConfigError = 2;
constexpr int kMissingInput = 3;

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw MissingInput(what + " not found: " + p.string());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

/// Config sources for one subcommand, applied in increasing priority:
/// dataset manifest, --config file, --set / dotted flags, short aliases.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> dotted;
  std::map<std::string, std::string> alias_values;
  std::map<std::string, std::vector<std::string>> alias_targets;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("--config", args.file, "key=value config file");
  app->add_option("--set", args.sets, "override, key=value (repeatable)");
  for (const std::string& key : RunConfig::keys()) {
    app->add_option("--" + key, args.dotted[key])->group("Config keys");
  }
}

void add_alias(CLI::App* app, ConfigArgs& args, const std::string& flag, std::vector<std::string> targets,
               const std::string& help) {
  app->add_option("--" + flag, args.alias_values[flag], help);
  args.alias_targets[flag] = std::move(targets);
}

void apply_args(RunConfig& cfg, const ConfigArgs& args) {
  if (!args.file.empty()) {
    require_file(args.file, "config file");
    cfg.apply_file(args.file);
  }
  for (const auto& [key, value] : args.dotted) {
    if (!value.empty()) cfg.set(key, value);
  }
  for (const std::string& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [flag, value] : args.alias_values) {
    if (value.empty()) continue;
    for (const std::string& key : args.alias_targets.at(flag)) cfg.set(key, value);
  }
}

// Takes the data section from the manifest written next to a dataset.
void apply_manifest(RunConfig& cfg, const fs::path& dataset) {
  const fs::path m = manifest_path(dataset);
  if (!fs::exists(m)) return;
  std::ifstream in(m);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    if (key == "channels") continue;
    cfg.set("data." + key, line.substr(eq + 1));
  }
}

void check_dataset(const Dataset& d, const RunConfig& cfg, const std::string& which) {
  const ToyNetConfig m = cfg.resolved_model();
  if (d.num_classes != m.num_classes || d.frames != m.frames || d.channels != m.in_channels) {
    throw ConfigError(which + " dataset (K=" + std::to_string(d.num_classes) + ", T=" + std::to_string(d.frames) +
                      ") does not match the configuration (K=" + std::to_string(m.num_classes) +
                      ", T=" + std::to_string(m.frames) + ")");
  }
}

std::string fractions_str(const std::array<double, 3>& f) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "keep %.3f reuse %.3f skip %.3f", f[0], f[1], f[2]);
  return buf;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const fs::path& out, const ConfigArgs& args) {
  RunConfig cfg;
  apply_args(cfg, args);
  cfg.data.validate();
  const Dataset d = generate(cfg.data);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_dataset_files(out, cfg.data, d);
  std::cout << "wrote " << out.string() << " (" << d.n << " clips, " << d.num_classes << " classes, "
            << fs::file_size(out) << " bytes)\n";
  return kOk;
}

int cmd_train(const fs::path& data_path, const fs::path& val_path, const fs::path& run_dir,
              const ConfigArgs& args, bool quiet) {
  require_file(data_path, "training dataset");
  require_file(val_path, "validation dataset");
  RunConfig cfg;
  apply_manifest(cfg, data_path);
  apply_args(cfg, args);
  cfg.validate();
  const Dataset train_set = load_dataset(data_path);
  const Dataset val_set = load_dataset(val_path);
  check_dataset(train_set, cfg, "training");
  check_dataset(val_set, cfg, "validation");

  fs::create_directories(run_dir);
  const std::string echo = cfg.echo();
  write_text(run_dir / "config.echo", echo);

  ToyNet net = make_toynet(cfg.resolved_model());
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r = train(net, train_set, val_set, cfg.train, run_dir, echo, [&](const MetricsRecord& m) {
    if (quiet) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "epoch %3lld  loss %.4f  top1 %.4f  util %.4f  %s  [%.0fs]\n",
                 static_cast<long long>(m.epoch), m.train_loss, m.top1, m.mean_util,
                 fractions_str(m.policy_fractions).c_str(), secs);
  });
  if (r.budget_stop) {
    std::cout << "stopped after " << r.history.size() << " epochs: cpu budget "
              << cfg.train.max_cpu_seconds << " s\n";
  }
  std::cout << "best top1 " << r.best.top1 << " at epoch " << r.best.epoch << "; checkpoint "
            << (run_dir / "checkpoint.afck").string() << '\n';
  return kOk;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& data_path, fs::path out_dir, bool dump_traces,
             const ConfigArgs& args) {
  require_file(ckpt_path, "checkpoint");
  require_file(data_path, "dataset");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig trained;
  trained.apply_text(ckpt.config_echo, ckpt_path.string());
  RunConfig cfg = trained;
  apply_args(cfg, args);
  cfg.validate();

  // The only structural change allowed at eval time is dropping the gates.
  ToyNet net = make_toynet(trained.resolved_model());
  restore_checkpoint(net, ckpt);
  const Variant want = cfg.model.variant;
  if (want != trained.model.variant) {
    ToyNet stripped = strip_gates(net);
    if (stripped.config.variant != want) {
      throw ConfigError("eval: cannot turn a " + to_string(trained.model.variant) + " checkpoint into " +
                        to_string(want));
    }
    net = std::move(stripped);
  }

  const Dataset data = load_dataset(data_path);
  check_dataset(data, cfg, "evaluation");
  EvalOptions eo = cfg.eval;
  eo.collect_trace = dump_traces;
  const EvalReport rep = evaluate(net, data, eo);

  if (out_dir.empty()) out_dir = ckpt_path.has_parent_path() ? ckpt_path.parent_path() : fs::path(".");
  fs::create_directories(out_dir);
  nlohmann::ordered_json j;
  j["top1"] = rep.top1;
  if (rep.top5) j["top5"] = *rep.top5;
  j["mean_flops"] = rep.mean_flops;
  j["mean_util"] = rep.mean_util;
  j["dense_flops"] = dense_flops(net, data.height, data.width);
  j["params"] = count_params(net);
  j["fractions"] = {{"keep", rep.policy_fractions[0]},
                    {"reuse", rep.policy_fractions[1]},
                    {"skip", rep.policy_fractions[2]}};
  j["loss"] = rep.loss;
  j["samples"] = rep.samples;
  j["variant"] = to_string(net.config.variant);
  j["policy"] = to_string(eo.policy.kind);
  j["config"] = cfg.echo();
  write_text(out_dir / "report.json", j.dump(2) + "\n");
  write_text(out_dir / "config.echo", cfg.echo());
  if (dump_traces) write_trace_csv(out_dir / "traces.csv", rep.trace);

  std::printf("top1 %.4f", rep.top1);
  if (rep.top5) std::printf("  top5 %.4f", *rep.top5);
  std::printf("  mean_flops %.6g  util %.4f  %s\n", rep.mean_flops, rep.mean_util,
              fractions_str(rep.policy_fractions).c_str());
  return kOk;
}

int cmd_gradcheck(const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<std::string> failed;
  std::printf("%-30s %12s %9s  %s\n", "op", "max_rel_err", "elements", "status");
  for (const auto& r : results) {
    std::printf("%-30s %12.3e %9lld  %s\n", r.op.c_str(), r.max_rel_err, static_cast<long long>(r.elements),
                r.passed ? "ok" : "FAIL");
    if (!r.passed) failed.push_back(r.op);
  }
  std::printf("%zu ops, tolerance %.0e, %.1fs\n", results.size(), opt.tolerance, secs);
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    std::fprintf(stderr, "gradcheck failed: %s\n", names.c_str());
    return kVerifyFailed;
  }
  return kOk;
}

int cmd_stats(const fs::path& traces, const fs::path& out_dir) {
  require_file(traces, "trace file");
  const PolicyTrace t = read_trace_csv(traces);
  const PolicyStats s = aggregate(t);
  export_stats(s, out_dir);
  std::printf("overall skip %.4f reuse %.4f keep %.4f  quotient %.4f%s\n", s.overall[0], s.overall[1],
              s.overall[2], s.quotient, s.quotient_defined ? "" : " (no keeps)");
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    std::printf("block %lld  skip %.4f reuse %.4f keep %.4f  | constant skip %.4f reuse %.4f keep %.4f\n",
                static_cast<long long>(s.blocks[i]), s.per_block[i][0], s.per_block[i][1], s.per_block[i][2],
                s.time_sensitivity[i][0], s.time_sensitivity[i][1], s.time_sensitivity[i][2]);
  }
  std::printf("wrote %s and %s\n", (out_dir / "stats.json").string().c_str(),
              (out_dir / "per_block.csv").string().c_str());
  return kOk;
}

int cmd_flops(const ConfigArgs& args) {
  RunConfig cfg;
  apply_args(cfg, args);
  cfg.validate();
  const ToyNet net = make_toynet(cfg.resolved_model());
  const Index T = net.config.frames;
  const auto layers = layer_flops(net, cfg.data.height, cfg.data.width);
  std::printf("%-16s %6s %16s\n", "layer", "block", "flops/frame");
  for (const auto& l : layers) {
    std::printf("%-16s %6lld %16.0f\n", l.name.c_str(), static_cast<long long>(l.block), l.flops);
  }
  std::printf("\n%-6s %6s %14s %14s %16s\n", "block", "gated", "m_x", "m_y", "T*(m_x+m_y)");
  double pairs = 0.0;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    double mx = 0.0, my = 0.0;
    for (const auto& l : layers) {
      if (l.block != static_cast<Index>(i)) continue;
      if (l.name.ends_with(".conv1")) mx = l.flops;
      if (l.name.ends_with(".conv2")) my = l.flops;
    }
    pairs += static_cast<double>(T) * (mx + my);
    std::printf("%-6zu %6s %14.0f %14.0f %16.0f\n", i, net.blocks[i].gate ? "yes" : "no", mx, my,
                static_cast<double>(T) * (mx + my));
  }
  const double total = dense_flops(net, cfg.data.height, cfg.data.width);
  std::printf("\nT = %lld\nblock pairs, all keep: %.0f\nfixed layers:          %.0f\nupper bound per clip:  %.0f\n",
              static_cast<long long>(T), pairs, total - pairs, total);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Activation buffers are tens of MB; keep them on the heap instead of
  // paying for a fresh mmap and page faults on every allocation.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Adaptive channel fusion on synthetic motion clips"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a SynthMotion dataset");
  fs::path gen_out;
  ConfigArgs gen_args;
  gen->add_option("--out,-o", gen_out, "output dataset path")->required();
  add_config_options(gen, gen_args);
  add_alias(gen, gen_args, "classes", {"data.classes"}, "comma-separated motion classes");
  add_alias(gen, gen_args, "n", {"data.n_samples"}, "number of clips");
  add_alias(gen, gen_args, "seed", {"data.seed"}, "generator seed");

  // train
  auto* tr = app.add_subcommand("train", "train a network");
  fs::path tr_data, tr_val, tr_dir;
  bool tr_quiet = false;
  ConfigArgs tr_args;
  tr->add_option("--data", tr_data, "training dataset")->required();
  tr->add_option("--val", tr_val, "validation dataset")->required();
  tr->add_option("--run-dir", tr_dir, "output directory")->required();
  tr->add_flag("--quiet,-q", tr_quiet, "no per-epoch progress");
  add_config_options(tr, tr_args);
  add_alias(tr, tr_args, "variant", {"model.variant"}, "plain, gated, shift, shift-last");
  add_alias(tr, tr_args, "seed", {"model.seed", "train.seed"}, "model and training seed");
  add_alias(tr, tr_args, "lambda", {"train.lambda_eff"}, "efficiency weight");
  add_alias(tr, tr_args, "epochs", {"train.epochs"}, "epochs");
  add_alias(tr, tr_args, "policy", {"train.policy"}, "learned, random, threshold, forced");
  add_alias(tr, tr_args, "dist", {"train.dist"}, "random policy keep,reuse,skip");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  fs::path ev_ckpt, ev_data, ev_out;
  bool ev_dump = false;
  ConfigArgs ev_args;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset")->required();
  ev->add_option("--out", ev_out, "report directory (default: the checkpoint's)");
  ev->add_flag("--dump-traces", ev_dump, "write traces.csv");
  add_config_options(ev, ev_args);
  add_alias(ev, ev_args, "variant", {"model.variant"}, "evaluate as this variant (gated -> plain only)");
  add_alias(ev, ev_args, "policy", {"eval.policy"}, "learned, random, threshold, forced");
  add_alias(ev, ev_args, "dist", {"eval.dist"}, "random policy keep,reuse,skip");
  add_alias(ev, ev_args, "keep-ratio", {"eval.keep_ratio"}, "threshold policy keep ratio");
  add_alias(ev, ev_args, "forced", {"eval.forced"}, "forced policy decision");
  add_alias(ev, ev_args, "seed", {"eval.seed"}, "random policy seed");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  GradcheckOptions gc_opt;
  gc->add_option("--seed", gc_opt.seed, "input seed");
  gc->add_option("--tolerance", gc_opt.tolerance, "maximum relative error");
  gc->add_option("--corrupt", gc_opt.corrupt)->group("");

  // stats
  auto* st = app.add_subcommand("stats", "policy statistics from a trace dump");
  fs::path st_traces, st_out;
  st->add_option("--traces", st_traces, "traces.csv")->required();
  st->add_option("--out", st_out, "output directory (default: alongside the traces)");

  // flops
  auto* fl = app.add_subcommand("flops", "analytic per-layer cost table");
  ConfigArgs fl_args;
  add_config_options(fl, fl_args);
  add_alias(fl, fl_args, "variant", {"model.variant"}, "plain, gated, shift, shift-last");
  add_alias(fl, fl_args, "classes", {"data.classes"}, "comma-separated motion classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_args);
    if (*tr) return cmd_train(tr_data, tr_val, tr_dir, tr_args, tr_quiet);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_dump, ev_args);
    if (*gc) return cmd_gradcheck(gc_opt);
    if (*st) {
      if (st_out.empty()) st_out = st_traces.has_parent_path() ? st_traces.parent_path() : fs::path(".");
      return cmd_stats(st_traces, st_out);
    }
    if (*fl) return cmd_flops(fl_args);
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kOk;
}
