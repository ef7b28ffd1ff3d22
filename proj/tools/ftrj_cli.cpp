// ftrj command-line front end. Exit codes: 0 ok, 2 config, 3 data,
// 4 training, 5 evaluation, 6 invalid argument.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "ftrj/pipeline.hpp"

namespace {

using namespace ftrj;

struct Common {
  std::string config, out, lineage, dataset, heldout;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  bool dry_run = false;
};

void add_common(CLI::App* app, Common& c, bool need_out = true) {
  app->add_option("--config", c.config, "flat key = value config file");
  auto* out = app->add_option("--out", c.out, "run directory");
  if (need_out) out->required();
  app->add_option("--seed", c.seed, "master seed (overrides config)");
  app->add_option("--lineage", c.lineage, "lineage JSON (overrides config)");
  app->add_option("--dataset", c.dataset, "dataset CSV (overrides config)");
  app->add_option("--lambda", c.lambda, "finsler.lambda override");
  app->add_option("--heldout", c.heldout, "comma-separated held-out timepoints");
  app->add_flag("--dry-run", c.dry_run, "validate config and write the manifest only");
}

ExperimentConfig effective_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.lambda) cfg.set("finsler.lambda", format_double(*c.lambda));
  if (!c.dataset.empty()) {
    cfg.data_source = "file";
    cfg.data_path = c.dataset;
  }
  if (!c.lineage.empty()) cfg.lineage_path = c.lineage;
  if (!c.heldout.empty()) cfg.data_heldout = c.heldout;
  cfg.validate();
  return cfg;
}

void apply_threads() {
  if (const char* env = std::getenv("FTRJ_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) fail(ErrorKind::config, "FTRJ_THREADS must be a positive integer");
    Eigen::setNbThreads(static_cast<int>(n));
  }
}

void print_metrics(const RunMetrics& m) {
  for (auto [t, w] : m.per_t) std::cout << "W1[t=" << format_double(t) << "] = " << w << "\n";
  std::cout << "mean W1 = " << m.mean << " +- " << m.std_over_seeds << " over " << m.replicas.size()
            << " seed(s)\nlineage consistency = " << m.lineage_consistency << "\n";
}

// One training phase of replica 0 in an existing or new run directory.
int single_phase(const std::string& phase, const Common& c) {
  const ExperimentConfig cfg = effective_config(c);
  const fs::path run = c.out;
  prepare_run_dir(run, cfg);
  RunManifest manifest(run, phase, cfg);
  const auto seed = replica_seed(cfg.seed, 0);
  manifest.seed(seed);
  try {
    Problem p = load_problem(cfg);
    manifest.input("dataset", p.data_hash);
    manifest.input("lineage", p.lineage_hash);
    manifest.write();
    if (c.dry_run) {
      manifest.finish("dry-run");
      return 0;
    }
    const auto dir = replica_dir(run, 0);
    Models m;
    if (phase == "train-classifier") {
      timed(manifest, "classifier", [&] { train_classifier_phase(p, cfg, seed, m); });
      save_classifier(dir, m);
      std::cout << "classifier validation accuracy = " << m.classifier_report.validation_accuracy << " after "
                << m.classifier_report.epochs << " epochs\n";
      for (const auto& w : m.classifier_report.warnings) std::cerr << "warning: " << w << "\n";
    } else if (phase == "train-metric") {
      if (!fs::exists(dir / "classifier.ftrj")) fail(ErrorKind::data, "missing checkpoint: run train-classifier first");
      load_classifier(dir, m);
      timed(manifest, "metric", [&] { train_metric_phase(p, cfg, seed, m); });
      save_metric(dir, m);
      std::cout << "final L_emb = " << m.metric->history.emb.back() << ", L_geo = " << m.metric->history.geo.back()
                << "\n";
    } else {
      if (!fs::exists(dir / "metric.ftrj")) fail(ErrorKind::data, "missing checkpoint: run train-metric first");
      load_classifier(dir, m);
      load_metric(dir, m);
      timed(manifest, "flow", [&] { train_flow_phase(p, cfg, seed, m); });
      save_flow(dir, m);
      std::cout << "final flow loss = " << m.flow->loss_history.back() << "\n";
    }
    manifest.output(fs::relative(dir, run).string());
    manifest.finish("ok");
    return 0;
  } catch (const Error& e) {
    manifest.finish("failed", e.what());
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lineage-constrained trajectory inference"};
  app.require_subcommand(1);

  Common c;
  auto* gen = app.add_subcommand("gen-synthetic", "write the synthetic dataset and its lineage");
  add_common(gen, c);
  auto* tc = app.add_subcommand("train-classifier", "train the class-probability model");
  add_common(tc, c);
  auto* tm = app.add_subcommand("train-metric", "train the embedding and geodesic models");
  add_common(tm, c);
  auto* tf = app.add_subcommand("train-flow", "train the vector field");
  add_common(tf, c);
  auto* pipe = app.add_subcommand("pipeline", "all phases for every seed, then evaluate");
  add_common(pipe, c);
  auto* eval = app.add_subcommand("evaluate", "recompute metrics.json from checkpoints");
  eval->add_option("--out", c.out, "run directory")->required();
  std::string grid = kDefaultGrid;
  auto* sweep = app.add_subcommand("sweep", "validation sweep, then re-run the winner over seeds");
  add_common(sweep, c);
  sweep->add_option("--grid", grid, "key=v1,v2;key2=v3 (default lambda x smoothing)");
  auto* plots = app.add_subcommand("export-plots", "write trajectories.csv and marginals.csv");
  plots->add_option("--out", c.out, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::invalid_argument);
  }

  try {
    apply_threads();
    if (gen->parsed()) {
      const ExperimentConfig cfg = effective_config(c);
      fs::create_directories(c.out);
      auto [ds, tree] = gen_synthetic(cfg.synthetic, derive_seed(cfg.seed, "data"));
      if (c.dry_run) return 0;
      save_dataset(ds, (fs::path(c.out) / "data.csv").string());
      save_tree(tree, (fs::path(c.out) / "lineage.json").string());
      std::cout << "wrote " << ds.size() << " points to " << (fs::path(c.out) / "data.csv").string() << "\n";
      return 0;
    }
    if (tc->parsed()) return single_phase("train-classifier", c);
    if (tm->parsed()) return single_phase("train-metric", c);
    if (tf->parsed()) return single_phase("train-flow", c);
    if (pipe->parsed()) {
      PipelineOptions o;
      o.dry_run = c.dry_run;
      auto m = run_pipeline(effective_config(c), c.out, o);
      if (m) print_metrics(*m);
      else std::cout << "dry run: config valid, manifest written\n";
      return 0;
    }
    if (eval->parsed()) {
      auto m = evaluate_run(c.out);
      write_metrics(c.out, m);
      print_metrics(m);
      return 0;
    }
    if (sweep->parsed()) {
      const ExperimentConfig cfg = effective_config(c);
      const auto axes = parse_grid(grid);
      if (c.dry_run) {
        std::cout << expand_grid(cfg, axes).size() << " grid cells\n";
        return 0;
      }
      auto res = run_sweep(cfg, axes, c.out);
      for (std::size_t i = 0; i < res.rows.size(); ++i)
        std::cout << "cell " << i << ": validation W1 = " << res.rows[i].validation_w1
                  << (i == res.best ? "  <- best" : "") << "\n";
      print_metrics(res.winner);
      return 0;
    }
    if (plots->parsed()) {
      const fs::path run = c.out;
      const ExperimentConfig cfg = load_run_config(run);
      Problem p = load_problem(cfg);
      export_plots(run, p, cfg, load_models(replica_dir(run, 0)), replica_seed(cfg.seed, 0));
      std::cout << "wrote trajectories.csv and marginals.csv\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::data);
  }
  return 0;
}
