// Command-line front end: graph inspection, model audits, topology and
// offset dumps, gradient checks, synthetic data generation, training and
// evaluation. Exit codes: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "tsegcn/tsegcn.hpp"

using json = nlohmann::json;
using namespace tsegcn;

namespace {

struct CommonModelArgs {
  std::string config = "default";
  std::string graph;  // empty = implied by config
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool no_norm = false;
  std::size_t classes = 0;  // 0 = config default
  std::size_t frames = 0;
  std::size_t persons = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Model preset: default or toy")->check(CLI::IsMember({"default", "toy"}));
    cmd->add_option("--graph", graph, "Skeleton graph: ntu25, toy9, or a graph file path");
    cmd->add_option("--ckpt", checkpoint, "Checkpoint to load");
    cmd->add_option("--seed", seed, "Initialization seed");
    cmd->add_option("--classes", classes, "Override class count");
    cmd->add_option("--frames", frames, "Override frame count");
    cmd->add_option("--persons", persons, "Override persons-per-sample audit convention");
    cmd->add_flag("--no-norm", no_norm, "Disable feature normalization layers");
  }

  ModelConfig make_config() const {
    ModelConfig cfg = (config == "toy") ? ModelConfig::toy() : ModelConfig::defaults();
    if (classes) cfg.n_classes = classes;
    if (frames) cfg.t_frames = frames;
    if (persons) cfg.n_persons = persons;
    if (no_norm) cfg.use_norm = false;
    return cfg;
  }

  SkeletonGraph make_graph() const {
    if (!graph.empty()) return resolve_graph(graph);
    return (config == "toy") ? builtin_graph_toy9() : builtin_graph_ntu25();
  }

  TsegcnModel make_model() const {
    TsegcnModel model(make_config(), make_graph(), seed);
    if (!checkpoint.empty()) model.load(checkpoint);
    return model;
  }
};

std::size_t resolve_threads(std::size_t cli_value) {
  if (cli_value > 0) return cli_value;
  if (const char* env = std::getenv("TSEGCN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

json tensor_matrix_json(const Tensor& t, std::size_t slice, std::size_t n) {
  // serialize the [n,n] slice starting at flat offset slice*n*n
  json rows = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < n; ++j) row.push_back(t[slice * n * n + i * n + j]);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Per-layer gradient-check suite (backs the `gradcheck` subcommand and the
// acceptance run). Instances keep sampling positions away from the
// interpolation kinks at integer frames, per the offset-gradient contract.
// ---------------------------------------------------------------------------

struct LayerCheck {
  std::string name;
  CheckReport report;
};

std::vector<LayerCheck> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<LayerCheck> out;
  GradCheckOptions opt;
  opt.seed = seed;
  opt.coords_per_tensor = 24;

  {
    SkeletonGraph g(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}});
    ParamStore ps;
    Rng rng(seed + 1);
    TsegcLayer layer(ps, "gc", TsegcConfig{5, 3, 4, 2, 4}, normalize_adjacency(g), hop_table(g, 5), rng);
    ps.value("gc.calib_gain")[0] = 0.3;
    Rng rx(seed + 2);
    Tensor x = rx.uniform_tensor({2, 5, 3, 3}, -1.0, 1.0);
    auto f = [&](ParamStore& p) {
      auto loss = ag::sum(layer.forward(p, ag::constant(x)));
      ag::backward(loss);
      return loss.value()[0];
    };
    out.push_back({"tsegc", grad_check(f, ps, opt)});
  }
  {
    ParamStore ps;
    Rng rng(seed + 3);
    DtcLayer layer(ps, "dtc", DtcConfig{3, 4, 5, 1, 1, false}, rng);
    Rng rx(seed + 4);
    ps.value("dtc.offset_w") = rx.uniform_tensor({4, 5}, -0.04, 0.04);
    ps.value("dtc.offset_b") = Tensor::from({5}, {0.31, 0.27, 0.41, 0.33, 0.29});
    ps.value("dtc.mod_w") = rx.uniform_tensor({4, 5}, -0.2, 0.2);
    Tensor x = rx.uniform_tensor({2, 3, 7, 4}, -1.0, 1.0);
    auto f = [&](ParamStore& p) {
      auto loss = ag::sum(layer.forward(p, ag::constant(x)));
      ag::backward(loss);
      return loss.value()[0];
    };
    out.push_back({"dtc", grad_check(f, ps, opt)});
  }
  {
    ParamStore ps;
    Rng rng(seed + 5);
    MbdtcLayer layer(ps, "tc", MbdtcConfig{3, 4, 8, 2, 5, false}, rng);
    ps.value("tc.b1.dtc.offset_b") = Tensor::from({5}, {0.23, 0.31, 0.37, 0.29, 0.41});
    ps.value("tc.b2.dtc.offset_b") = Tensor::from({5}, {0.27, 0.33, 0.39, 0.31, 0.43});
    Rng rx(seed + 6);
    Tensor x = rx.uniform_tensor({1, 3, 7, 4}, -1.0, 1.0);
    auto f = [&](ParamStore& p) {
      auto loss = ag::sum(layer.forward(p, ag::constant(x)));
      ag::backward(loss);
      return loss.value()[0];
    };
    out.push_back({"mbdtc", grad_check(f, ps, opt)});
  }
  {
    ParamStore ps;
    ps.add("gain", Tensor({4}, 1.0));
    ps.add("shift", Tensor({4}));
    Rng rx(seed + 7);
    ps.add("x", rx.uniform_tensor({2, 3, 4, 4}, -1.0, 1.0));
    auto f = [&](ParamStore& p) {
      auto y = ag::feature_norm_train(ag::param(p, "x"), ag::param(p, "gain"), ag::param(p, "shift"), 1e-5);
      auto loss = ag::sum(ag::gelu(y));
      ag::backward(loss);
      return loss.value()[0];
    };
    out.push_back({"feature_norm", grad_check(f, ps, opt)});
  }
  {
    ParamStore ps;
    Rng rng(seed + 8);
    ps.add("w", rng.uniform_tensor({6, 4}, -0.5, 0.5));
    ps.add("b", Tensor({4}));
    Tensor x = rng.uniform_tensor({3, 6}, -1.0, 1.0);
    const std::vector<std::size_t> labels{0, 3, 1};
    auto f = [&](ParamStore& p) {
      auto bias = ag::param(p, "b");
      auto logits = ag::linear(ag::constant(x), ag::param(p, "w"), &bias);
      auto loss = ag::cross_entropy(logits, labels);
      ag::backward(loss);
      return loss.value()[0];
    };
    out.push_back({"classifier", grad_check(f, ps, opt)});
  }
  return out;
}

// Best-effort NTU RGB+D `.skeleton` reader (x, y, z of up to two bodies).
SkeletonSequence convert_ntu_skeleton(const std::string& path, int label) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open skeleton file: " + path);
  std::size_t frames = 0;
  if (!(in >> frames) || frames < 1) throw ParseError(path + ": missing frame count");
  constexpr std::size_t joints = 25, max_bodies = 2;

  std::vector<double> coords(max_bodies * frames * joints * 3, 0.0);
  std::size_t bodies_seen = 1;
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t body_count = 0;
    if (!(in >> body_count)) throw ParseError(path + ": truncated at frame " + std::to_string(t));
    std::string rest;
    for (std::size_t b = 0; b < body_count; ++b) {
      std::getline(in, rest);  // rest of the current line
      std::getline(in, rest);  // body info line (id, handedness, ...)
      std::size_t joint_count = 0;
      if (!(in >> joint_count)) throw ParseError(path + ": missing joint count at frame " + std::to_string(t));
      for (std::size_t n = 0; n < joint_count; ++n) {
        double x, y, z;
        if (!(in >> x >> y >> z)) throw ParseError(path + ": truncated joint data at frame " + std::to_string(t));
        std::getline(in, rest);  // remaining per-joint columns
        if (b < max_bodies && n < joints) {
          const std::size_t base = ((b * frames + t) * joints + n) * 3;
          coords[base] = x;
          coords[base + 1] = y;
          coords[base + 2] = z;
        }
      }
      if (b < max_bodies && b + 1 > bodies_seen) bodies_seen = b + 1;
    }
  }
  SkeletonSequence seq;
  seq.joints = joints;
  seq.frames = frames;
  seq.persons = bodies_seen;
  seq.label = label;
  // coords are laid out [body][frame][joint][3]; keep only the bodies seen
  seq.coords.assign(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(bodies_seen * frames * joints * 3));
  return seq;
}

int label_from_ntu_name(const std::string& path) {
  // NTU file names carry the action class as A###.
  const auto pos = path.rfind('A');
  if (pos == std::string::npos || pos + 3 >= path.size()) return -1;
  int v = 0;
  for (std::size_t i = 1; i <= 3; ++i) {
    const char c = path[pos + i];
    if (c < '0' || c > '9') return -1;
    v = v * 10 + (c - '0');
  }
  return v - 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TSE-GCN: symmetry-aware skeleton action recognition toolkit"};
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "Machine-readable JSON output");
  std::size_t threads_opt = 0;
  app.add_option("--threads", threads_opt, "Worker cap for evaluation (env TSEGCN_THREADS)");

  // graph inspect ----------------------------------------------------------
  auto* graph_cmd = app.add_subcommand("graph", "Skeleton graph utilities");
  auto* inspect = graph_cmd->add_subcommand("inspect", "Print joint count, edges, diameter, hop histogram");
  std::string inspect_path;
  inspect->add_option("file", inspect_path, "Graph spec file (or ntu25/toy9)")->required();

  // topology dump ----------------------------------------------------------
  auto* topo_cmd = app.add_subcommand("topology", "Learned-topology utilities");
  auto* topo_dump = topo_cmd->add_subcommand("dump", "Dump z, reactivated topology, mask and calibration as JSON");
  CommonModelArgs topo_args;
  topo_args.attach(topo_dump);
  std::size_t topo_layer = 0;
  std::string topo_input, topo_out;
  topo_dump->add_option("--layer", topo_layer, "Block index (0-based)")->required();
  topo_dump->add_option("--input", topo_input, "Skeleton sequence file")->required();
  topo_dump->add_option("--out", topo_out, "Output path (default stdout)");

  // offsets dump -----------------------------------------------------------
  auto* off_cmd = app.add_subcommand("offsets", "Deformable-sampling utilities");
  auto* off_dump = off_cmd->add_subcommand("dump", "Dump per-layer averaged sampling positions as CSV");
  CommonModelArgs off_args;
  off_args.attach(off_dump);
  std::string off_input, off_out;
  off_dump->add_option("--input", off_input, "Skeleton sequence file")->required();
  off_dump->add_option("--out", off_out, "Output path (default stdout)");

  // model summary ----------------------------------------------------------
  auto* model_cmd = app.add_subcommand("model", "Model utilities");
  auto* summary = model_cmd->add_subcommand("summary", "Per-layer shapes, parameters and FLOPs");
  CommonModelArgs summary_args;
  summary_args.attach(summary);

  // audit ------------------------------------------------------------------
  auto* audit = app.add_subcommand("audit", "Parameter and FLOP counts as JSON");
  CommonModelArgs audit_args;
  audit_args.attach(audit);

  // gradcheck --------------------------------------------------------------
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks per layer type");
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--seed", gc_seed, "Suite seed");

  // gen --------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "Generate the synthetic 4-class toy dataset");
  std::string gen_out = "synth";
  std::string gen_split = "train";
  SynthSpec gen_spec;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--samples-per-class", gen_spec.samples_per_class, "Samples per class (default 32)");
  gen->add_option("--seed", gen_spec.seed, "Generator seed");
  gen->add_option("--frames", gen_spec.frames, "Raw frames per clip (default 48)");
  gen->add_option("--split", gen_split, "Split tag")->check(CLI::IsMember({"train", "test"}));

  // train ------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train on a manifest");
  CommonModelArgs train_args;
  train_args.config = "toy";
  train_args.attach(train_cmd);
  std::string train_manifest_path, eval_manifest_path, train_ckpt_out, train_log_path;
  OptimConfig optim;
  train_cmd->add_option("--data", train_manifest_path, "Training manifest (JSONL)")->required();
  train_cmd->add_option("--eval", eval_manifest_path, "Evaluation manifest (JSONL)");
  train_cmd->add_option("--epochs", optim.epochs, "Epochs (default 60)");
  train_cmd->add_option("--lr", optim.lr, "Learning rate (default 0.05)");
  train_cmd->add_option("--momentum", optim.momentum, "Nesterov momentum (default 0.9)");
  train_cmd->add_option("--weight-decay", optim.weight_decay, "L2 coefficient (default 0.004)");
  train_cmd->add_option("--batch-size", optim.batch_size, "Batch size (default 16)");
  train_cmd->add_option("--out", train_ckpt_out, "Best-checkpoint path");
  train_cmd->add_option("--log", train_log_path, "Training log (JSON lines)");

  // eval -------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy on a manifest");
  CommonModelArgs eval_args;
  eval_args.config = "toy";
  eval_args.attach(eval_cmd);
  std::string eval_manifest_arg;
  eval_cmd->add_option("--data", eval_manifest_arg, "Manifest (JSONL)")->required();

  // convert ----------------------------------------------------------------
  auto* convert_cmd = app.add_subcommand("convert", "Format converters");
  auto* ntu = convert_cmd->add_subcommand("ntu", "Convert a raw NTU .skeleton file to the canonical text format");
  std::string ntu_in, ntu_out;
  int ntu_label = -2;
  ntu->add_option("input", ntu_in, "NTU .skeleton file")->required();
  ntu->add_option("output", ntu_out, "Canonical output file")->required();
  ntu->add_option("--label", ntu_label, "Class label (default: from the A### token in the name)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  const std::size_t threads = resolve_threads(threads_opt);

  try {
    if (*inspect) {
      SkeletonGraph g = resolve_graph(inspect_path);
      const HopTable hop = hop_table(g, g.n());
      json out{{"n", g.n()}, {"edges", g.edges().size()}, {"diameter", hop.diameter()}};
      json hist = json::object();
      for (const auto& [d, count] : hop.histogram()) hist[std::to_string(d)] = count;
      out["hop_histogram"] = hist;
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*topo_dump) {
      TsegcnModel model = topo_args.make_model();
      const auto sched = model.config().schedule();
      if (topo_layer >= sched.size())
        throw ConfigError("--layer " + std::to_string(topo_layer) + " out of range for " +
                          std::to_string(sched.size()) + " blocks");
      SkeletonSequence seq = parse_sequence(topo_input);
      Tensor batch = to_batch({seq}, model.config().t_frames);
      ForwardTrace trace;
      trace.want_topology = true;
      ag::NoGradGuard guard;
      model.forward(batch, false, &trace);
      const TopologyBundle& bundle = trace.topologies.at(topo_layer);
      const std::size_t N = model.config().n_joints;
      const std::size_t K = model.config().k_partitions;
      json out{{"layer", topo_layer}, {"joints", N}, {"partitions", K}};
      out["calibration"] = tensor_matrix_json(bundle.calib, 0, N);
      json masks = json::array(), reacts = json::array(), zs = json::array();
      for (std::size_t s = 0; s < K; ++s) {
        masks.push_back(tensor_matrix_json(bundle.mask, s, N));
        reacts.push_back(tensor_matrix_json(bundle.reactivated, s, N));
        zs.push_back(tensor_matrix_json(bundle.assembled, s, N));
      }
      out["scale_mask"] = masks;
      out["reactivated"] = reacts;
      out["z"] = zs;
      if (topo_out.empty()) {
        std::cout << out.dump(2) << "\n";
      } else {
        std::ofstream f(topo_out);
        f << out.dump(2) << "\n";
      }
      return 0;
    }

    if (*off_dump) {
      TsegcnModel model = off_args.make_model();
      SkeletonSequence seq = parse_sequence(off_input);
      Tensor batch = to_batch({seq}, model.config().t_frames);
      ForwardTrace trace;
      trace.want_offsets = true;
      ag::NoGradGuard guard;
      model.forward(batch, false, &trace);

      json jrows = json::array();
      std::ostringstream csv;
      csv << "block,dilation,tap,grid_position,mean_offset,mean_position\n";
      for (std::size_t blk = 0; blk < trace.offset_fields.size(); ++blk) {
        const MbdtcProbe& probe = trace.offset_fields[blk];
        for (const std::size_t dil : {std::size_t{1}, std::size_t{2}}) {
          const OffsetField& field = (dil == 1) ? probe.dilation1 : probe.dilation2;
          const std::size_t B = field.offsets.dim(0), Tp = field.offsets.dim(1), R = field.offsets.dim(2);
          for (std::size_t r = 0; r < R; ++r) {
            double mean = 0.0;
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t t = 0; t < Tp; ++t) mean += field.offsets.at(b, t, r);
            mean /= static_cast<double>(B * Tp);
            const double grid =
                (static_cast<double>(r) - static_cast<double>(R - 1) / 2.0) * static_cast<double>(dil);
            csv << blk << ',' << dil << ',' << r << ',' << grid << ',' << mean << ',' << grid + mean << "\n";
            jrows.push_back({{"block", blk},
                             {"dilation", dil},
                             {"tap", r},
                             {"grid_position", grid},
                             {"mean_offset", mean},
                             {"mean_position", grid + mean}});
          }
        }
      }
      const std::string text = as_json ? json{{"offsets", jrows}}.dump(2) + "\n" : csv.str();
      if (off_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream f(off_out);
        f << text;
      }
      return 0;
    }

    if (*summary) {
      TsegcnModel model = summary_args.make_model();
      const auto rows = model.summary();
      if (as_json) {
        json jrows = json::array();
        for (const auto& r : rows)
          jrows.push_back({{"layer", r.name}, {"output", r.output_shape}, {"params", r.params}, {"flops", r.flops}});
        json out{{"layers", jrows}, {"total_params", model.count_params()}, {"total_flops", model.count_flops(1)}};
        std::cout << out.dump(2) << "\n";
      } else {
        std::printf("%-16s %-18s %12s %14s\n", "layer", "output", "params", "flops");
        for (const auto& r : rows)
          std::printf("%-16s %-18s %12zu %14zu\n", r.name.c_str(), r.output_shape.c_str(), r.params, r.flops);
        std::printf("%-16s %-18s %12zu %14zu\n", "total", "", model.count_params(), model.count_flops(1));
      }
      return 0;
    }

    if (*audit) {
      TsegcnModel model = audit_args.make_model();
      json out{{"config", audit_args.config},
               {"params", model.count_params()},
               {"flops", model.count_flops(1)},
               {"persons", model.config().n_persons}};
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*gradcheck) {
      const auto checks = run_gradcheck_suite(gc_seed);
      bool all_passed = true;
      json jlayers = json::array();
      for (const auto& c : checks) {
        all_passed = all_passed && c.report.passed;
        jlayers.push_back({{"layer", c.name},
                           {"max_rel_err", c.report.max_rel_err},
                           {"coords", c.report.coords_checked},
                           {"passed", c.report.passed}});
        if (!as_json)
          std::printf("%-14s max_rel_err %.3e over %zu coords: %s\n", c.name.c_str(), c.report.max_rel_err,
                      c.report.coords_checked, c.report.passed ? "pass" : "FAIL");
      }
      if (as_json) std::cout << json{{"layers", jlayers}, {"passed", all_passed}}.dump(2) << "\n";
      return all_passed ? 0 : 1;
    }

    if (*gen) {
      DatasetManifest manifest = synth_dataset(gen_spec, gen_out, gen_split);
      json out{{"dir", gen_out},
               {"split", gen_split},
               {"classes", SynthSpec::n_classes},
               {"samples", manifest.entries.size()},
               {"manifest", gen_out + "/" + gen_split + "_manifest.jsonl"}};
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*train_cmd) {
      TsegcnModel model = train_args.make_model();
      DatasetManifest train_m = load_manifest(train_manifest_path);
      DatasetManifest eval_m;
      if (!eval_manifest_path.empty()) eval_m = load_manifest(eval_manifest_path);
      optim.seed = train_args.seed;
      std::ofstream log_file;
      if (!train_log_path.empty()) {
        log_file.open(train_log_path);
        if (!log_file) throw Error("cannot open log file: " + train_log_path);
      }
      TrainLog log = train(model, train_m, eval_m, optim, train_ckpt_out, [&](const EpochStats& e) {
        json row{{"epoch", e.epoch},       {"train_loss", e.train_loss}, {"train_acc", e.train_acc},
                 {"eval_acc", e.eval_acc}, {"lr", e.lr},                 {"wall_time_s", e.wall_time_s}};
        if (log_file.is_open()) log_file << row.dump() << "\n";
        if (!as_json) std::cerr << row.dump() << "\n";
        return false;
      });
      json out{{"epochs", log.epochs.size()}, {"best_epoch", log.best_epoch}, {"best_eval_acc", log.best_eval_acc}};
      if (!log.epochs.empty()) {
        out["final_train_acc"] = log.epochs.back().train_acc;
        out["final_train_loss"] = log.epochs.back().train_loss;
      }
      if (!train_ckpt_out.empty()) out["checkpoint"] = train_ckpt_out;
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (*eval_cmd) {
      TsegcnModel model = eval_args.make_model();
      DatasetManifest manifest = load_manifest(eval_manifest_arg);
      const double acc = evaluate(model, manifest, threads);
      std::cout << json{{"samples", manifest.entries.size()}, {"accuracy", acc}}.dump(2) << "\n";
      return 0;
    }

    if (*ntu) {
      const int label = (ntu_label == -2) ? label_from_ntu_name(ntu_in) : ntu_label;
      SkeletonSequence seq = convert_ntu_skeleton(ntu_in, label);
      write_sequence(seq, ntu_out);
      json out{{"input", ntu_in},        {"output", ntu_out},     {"frames", seq.frames},
               {"persons", seq.persons}, {"joints", seq.joints},  {"label", seq.label}};
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    std::cerr << "no subcommand selected; run with --help\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
