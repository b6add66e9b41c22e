#include "prf/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "prf/config.hpp"
#include "prf/gradcheck.hpp"
#include "prf/model.hpp"
#include "prf/retrieval.hpp"
#include "prf/synth.hpp"
#include "prf/training.hpp"

namespace prf {

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value, applied after the file
};

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = RunConfig::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got: " + kv);
    cfg.apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void log_resolved(const RunConfig& cfg) {
  std::cout << "# resolved config\n" << cfg.serialize() << cfg.hash_comment()
            << "\n";
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--set", opts.overrides,
                  "override a config key (key=value, repeatable; flags win)");
}

std::vector<DescriptorData> embed_frames(const Model& model,
                                         const Dataset& ds,
                                         const std::string& role) {
  std::vector<DescriptorData> out;
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    if (role != "all" && ds.meta[i].role != role) continue;
    out.push_back(model.embed(ds.frames[i]));
  }
  return out;
}

DescriptorDB build_db(const Model& model, const Dataset& ds,
                      const std::string& role) {
  DescriptorDB db;
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    if (role != "all" && ds.meta[i].role != role) continue;
    DescriptorData d = model.embed(ds.frames[i]);
    db.add(ds.meta[i].id, d.f, d.position);
  }
  return db;
}

std::vector<DescriptorData> db_as_queries(const DescriptorDB& db) {
  std::vector<DescriptorData> out(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    out[i].f.assign(db.row(i), db.row(i) + db.dim);
    out[i].position = db.positions[i];
  }
  return out;
}

int cmd_gen_data(const RunConfig& cfg) {
  if (cfg.out.empty()) throw ConfigError("gen-data: missing --out directory");
  World world = generate_world(cfg.world_config());
  write_dataset(world, cfg.out, cfg.hash_comment());
  std::cout << "wrote " << world.trajectory.size() << " frames to " << cfg.out
            << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.dataset_dir.empty()) throw ConfigError("train: missing --data");
  if (cfg.out.empty()) throw ConfigError("train: missing --out checkpoint");
  Dataset ds = load_dataset(cfg.dataset_dir);
  Model model(cfg.model);
  TrainResult result = train(model, ds.frames, cfg.train_config());
  model.save(cfg.out);
  write_loss_trace(cfg.out + ".loss.csv", result, cfg.hash_comment());
  std::cout << "checkpoint " << cfg.out << "; epochs " << result.trace.size();
  if (!result.trace.empty())
    std::cout << "; final mean loss " << result.trace.back().mean_loss;
  std::cout << "\n";
  return kExitOk;
}

int cmd_embed(const RunConfig& cfg, const std::string& role) {
  if (cfg.dataset_dir.empty()) throw ConfigError("embed: missing --data");
  if (cfg.checkpoint.empty()) throw ConfigError("embed: missing --checkpoint");
  if (cfg.out.empty()) throw ConfigError("embed: missing --out db file");
  Model model = Model::load(cfg.checkpoint);
  Dataset ds = load_dataset(cfg.dataset_dir);
  DescriptorDB db = build_db(model, ds, role);
  if (db.size() == 0) throw Error("embed: no frames with role " + role);
  save_db(db, cfg.out);
  std::cout << "embedded " << db.size() << " frames (role " << role
            << ") dim " << db.dim << " -> " << cfg.out << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg) {
  if (cfg.db_file.empty()) throw ConfigError("eval: missing --db");
  if (cfg.queries_file.empty()) throw ConfigError("eval: missing --queries");
  if (cfg.out.empty()) throw ConfigError("eval: missing --out csv");
  DescriptorDB db = load_db(cfg.db_file);
  DescriptorDB queries = load_db(cfg.queries_file);
  RecallReport report =
      recall_metrics(db, db_as_queries(queries), cfg.k_max, cfg.tau);
  write_recall_csv(cfg.out, report, cfg.hash_comment());
  std::cout << "AR@1 " << report.r_at_1() << "; AR@1% " << report.ar_at_1pct
            << "; evaluated " << report.evaluated_queries << "; excluded "
            << report.excluded_queries << "\n";
  return kExitOk;
}

int cmd_perturb(const RunConfig& cfg) {
  if (cfg.dataset_dir.empty()) throw ConfigError("perturb: missing --data");
  if (cfg.checkpoint.empty())
    throw ConfigError("perturb: missing --checkpoint");
  if (cfg.out.empty()) throw ConfigError("perturb: missing --out prefix");
  Model model = Model::load(cfg.checkpoint);
  std::optional<Model> control;
  if (!cfg.control_checkpoint.empty())
    control.emplace(Model::load(cfg.control_checkpoint));
  Dataset ds = load_dataset(cfg.dataset_dir);
  SweepResult result = perturbation_sweep(
      model, control ? &*control : nullptr, ds, cfg.sweep_config());
  write_image_sweep_csv(cfg.out + "_image.csv", result, cfg.hash_comment());
  write_extrinsic_sweep_csv(cfg.out + "_extrinsic.csv", result,
                            cfg.hash_comment());
  std::cout << "clean AR@1 " << result.clean_ar1_main << "; wrote "
            << cfg.out + "_image.csv" << " and "
            << cfg.out + "_extrinsic.csv" << "\n";
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  const auto report = gradcheck_suite(cfg.model.seed);
  double worst = 0;
  std::cout << "module,max_rel_err\n";
  for (const auto& [name, err] : report) {
    std::cout << name << "," << err << "\n";
    worst = std::max(worst, err);
  }
  if (worst >= 1e-4) {
    std::cerr << "error: gradcheck: max relative error " << worst
              << " exceeds 1e-4\n";
    return 1;
  }
  return kExitOk;
}

// One training + retrieval evaluation for a given model configuration.
std::pair<double, double> run_arm(const RunConfig& cfg, const Dataset& ds) {
  Model model(cfg.model);
  (void)train(model, ds.frames, cfg.train_config());
  DescriptorDB db = build_db(model, ds, "db");
  std::vector<DescriptorData> queries = embed_frames(model, ds, "query");
  RecallReport r = recall_metrics(db, queries,
                                  std::min(cfg.k_max, db.size()), cfg.tau);
  return {r.r_at_1(), r.ar_at_1pct};
}

int cmd_ablate(const RunConfig& cfg, const std::string& sw) {
  if (cfg.dataset_dir.empty()) throw ConfigError("ablate: missing --data");
  if (cfg.out.empty()) throw ConfigError("ablate: missing --out csv");
  Dataset ds = load_dataset(cfg.dataset_dir);

  struct Arm {
    std::string name, value;
    RunConfig cfg;
  };
  std::vector<Arm> arms;
  auto variant_cfg = [&](auto&& mutate, const std::string& name,
                         const std::string& value) {
    RunConfig c = cfg;
    mutate(c);
    arms.push_back({name, value, c});
  };

  if (sw == "modules") {
    variant_cfg([](RunConfig&) {}, "full", "-");
    variant_cfg([](RunConfig& c) { c.model.use_gfm = false; }, "no-gfm", "-");
    variant_cfg([](RunConfig& c) { c.model.use_ndm = false; }, "no-ndm", "-");
    if (cfg.model.variant == Variant::PRFusionPP) {
      variant_cfg([](RunConfig& c) { c.model.use_lfm = false; }, "no-lfm",
                  "-");
      variant_cfg(
          [](RunConfig& c) {
            c.model.use_gfm = c.model.use_ndm = c.model.use_lfm = false;
          },
          "no-gfm-ndm-lfm", "-");
    } else {
      variant_cfg(
          [](RunConfig& c) { c.model.use_gfm = c.model.use_ndm = false; },
          "no-gfm-ndm", "-");
    }
  } else if (sw == "attention") {
    for (auto [mode, name] :
         {std::pair{AttentionMode::Mlp, "mlp"},
          std::pair{AttentionMode::Vanilla, "vanilla"},
          std::pair{AttentionMode::MetricNoOde, "metric-no-ode"},
          std::pair{AttentionMode::MetricNoActivation,
                    "metric-no-activation"},
          std::pair{AttentionMode::Metric, "metric"}})
      variant_cfg([mode = mode](RunConfig& c) { c.model.attention = mode; },
                  "attention", name);
  } else if (sw == "window") {
    for (double d : {1.0, 2.0, 4.0, 8.0})
      variant_cfg(
          [d](RunConfig& c) { c.model.lfm_dh = c.model.lfm_dw = d; },
          "window", std::to_string(static_cast<int>(d)) + "x" +
                        std::to_string(static_cast<int>(d)));
  } else if (sw == "knn") {
    for (std::size_t k : {9u, 16u, 25u, 36u})
      variant_cfg([k](RunConfig& c) { c.model.ndm.k = k; }, "knn",
                  std::to_string(k));
  } else if (sw == "samples") {
    for (std::size_t s : {8u, 16u, 32u, 64u})
      variant_cfg(
          [s](RunConfig& c) {
            c.model.gfm_samples_2d = c.model.gfm_samples_3d = s;
          },
          "samples", std::to_string(s));
  } else {
    throw ConfigError(
        "ablate: unknown switch (want modules|attention|window|knn|samples)");
  }

  std::ofstream os(cfg.out);
  if (!os) throw Error("cannot open " + cfg.out + " for writing");
  os.precision(17);
  os << "arm,value,ar1,ar1pct\n";
  for (const auto& arm : arms) {
    auto [ar1, ar1pct] = run_arm(arm.cfg, ds);
    os << arm.name << "," << arm.value << "," << ar1 << "," << ar1pct << "\n";
    std::cout << "arm " << arm.name << "=" << arm.value << " AR@1 " << ar1
              << "\n";
  }
  os << cfg.hash_comment() << "\n";
  return kExitOk;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"PRFusion multi-modal place recognition experiments"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string embed_role = "db";
  std::string ablate_switch = "modules";

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, opts);
  std::string flag_out, flag_data, flag_ckpt, flag_control, flag_db,
      flag_queries;
  gen->add_option("--out", flag_out, "output dataset directory");

  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  add_common(tr, opts);
  tr->add_option("--data", flag_data, "dataset directory");
  tr->add_option("--out", flag_out, "output checkpoint path");

  auto* em = app.add_subcommand("embed", "embed frames into a descriptor db");
  add_common(em, opts);
  em->add_option("--checkpoint", flag_ckpt, "model checkpoint");
  em->add_option("--data", flag_data, "dataset directory");
  em->add_option("--out", flag_out, "output descriptor db file");
  em->add_option("--role", embed_role, "db|query|all (default db)");

  auto* ev = app.add_subcommand("eval", "recall metrics for a descriptor db");
  add_common(ev, opts);
  ev->add_option("--db", flag_db, "database descriptor file");
  ev->add_option("--queries", flag_queries, "query descriptor file");
  ev->add_option("--out", flag_out, "output recall csv");

  auto* pe = app.add_subcommand("perturb", "robustness sweep for a checkpoint");
  add_common(pe, opts);
  pe->add_option("--checkpoint", flag_ckpt, "model checkpoint");
  pe->add_option("--control-checkpoint", flag_control,
                 "calibration-free control checkpoint");
  pe->add_option("--data", flag_data, "dataset directory");
  pe->add_option("--out", flag_out, "output csv prefix");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit");
  add_common(gc, opts);

  auto* ab = app.add_subcommand("ablate", "train+eval over an ablation grid");
  add_common(ab, opts);
  ab->add_option("--data", flag_data, "dataset directory");
  ab->add_option("--out", flag_out, "output csv");
  ab->add_option("--switch", ablate_switch,
                 "modules|attention|window|knn|samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = resolve_config(opts);
    // command-line paths win over config-file paths
    if (!flag_out.empty()) cfg.out = flag_out;
    if (!flag_data.empty()) cfg.dataset_dir = flag_data;
    if (!flag_ckpt.empty()) cfg.checkpoint = flag_ckpt;
    if (!flag_control.empty()) cfg.control_checkpoint = flag_control;
    if (!flag_db.empty()) cfg.db_file = flag_db;
    if (!flag_queries.empty()) cfg.queries_file = flag_queries;
    log_resolved(cfg);

    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (em->parsed()) return cmd_embed(cfg, embed_role);
    if (ev->parsed()) return cmd_eval(cfg);
    if (pe->parsed()) return cmd_perturb(cfg);
    if (gc->parsed()) return cmd_gradcheck(cfg);
    if (ab->parsed()) return cmd_ablate(cfg, ablate_switch);
    throw ConfigError("no subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const FormatError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace prf
