// selpred: SSL-loss checks, temperature calibration, and selective-prediction
// evaluation over logits files, run manifests, and synthetic experiment runs.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "selpred/io.hpp"
#include "selpred/losses.hpp"
#include "selpred/report.hpp"
#include "selpred/selective.hpp"
#include "selpred/synth.hpp"

#if defined(__unix__) || defined(__APPLE__)
#include <unistd.h>
#endif

namespace {

bool use_color() {
  if (std::getenv("SELPRED_NO_COLOR") != nullptr) return false;
#if defined(__unix__) || defined(__APPLE__)
  return isatty(fileno(stdout)) != 0;
#else
  return false;
#endif
}

std::string styled(const std::string& text, const char* code) {
  if (!use_color()) return text;
  return std::string("\033[") + code + "m" + text + "\033[0m";
}

std::string pass_tag() { return styled("PASS", "32"); }
std::string fail_tag() { return styled("FAIL", "31"); }

selpred::Matrix random_embeddings(std::size_t n, std::size_t d, selpred::Rng& rng) {
  selpred::Matrix m(n, d);
  for (auto& v : m.data) v = rng.normal();
  return m;
}

int cmd_losscheck(const std::string& loss, std::size_t n, std::size_t d,
                  std::uint64_t seed, const selpred::LossParams& params) {
  if (n < 2) throw selpred::UsageError("losscheck: --n must be at least 2");
  if (d < 1) throw selpred::UsageError("losscheck: --d must be at least 1");
  const selpred::LossId id = selpred::parse_loss_id(loss);
  selpred::Rng root(seed);
  selpred::Rng rng = root.split(0x10);
  const selpred::Matrix z = random_embeddings(n, d, rng);
  const selpred::Matrix zp = random_embeddings(n, d, rng);
  if (id == selpred::LossId::Sicova) {
    const selpred::LossBreakdown b = selpred::sicova_loss(z, zp, params.sicova);
    std::printf("loss      : sicova (n=%zu, d=%zu, seed=%llu)\n", n, d,
                static_cast<unsigned long long>(seed));
    std::printf("var_z     : %.12g\n", b.var_z);
    std::printf("var_zp    : %.12g\n", b.var_zp);
    std::printf("cov_z     : %.12g\n", b.cov_z);
    std::printf("cov_zp    : %.12g\n", b.cov_zp);
    std::printf("inv       : %.12g\n", b.inv);
    std::printf("corr      : %.12g\n", b.corr);
    std::printf("total     : %.12g\n", b.total);
  } else {
    const double v = selpred::triplet_loss(z, zp, params.triplet);
    std::printf("loss      : triplet (n=%zu, d=%zu, seed=%llu, margin=%g)\n", n,
                d, static_cast<unsigned long long>(seed), params.triplet.margin);
    std::printf("total     : %.12g\n", v);
  }
  return 0;
}

int cmd_gradcheck(const std::string& loss, double tol, std::uint64_t seed,
                  const selpred::LossParams& params) {
  if (!(tol > 0)) throw selpred::UsageError("gradcheck: --tol must be positive");
  std::vector<selpred::LossId> ids;
  if (loss == "all") {
    ids = {selpred::LossId::Sicova, selpred::LossId::Triplet};
  } else {
    ids = {selpred::parse_loss_id(loss)};
  }
  bool ok = true;
  for (const auto id : ids) {
    const double err = selpred::finite_diff_suite(id, params, seed, 1e-5);
    const bool this_ok = err < tol;
    ok = ok && this_ok;
    std::printf("%s  %-8s max relative error %.3e (tol %.1e)\n",
                (this_ok ? pass_tag() : fail_tag()).c_str(),
                id == selpred::LossId::Sicova ? "sicova" : "triplet", err, tol);
  }
  return ok ? 0 : 1;
}

int cmd_synth(const std::string& config_path, const std::string& out_override,
              bool seed_given, std::uint64_t seed, unsigned jobs) {
  selpred::ExperimentConfig cfg =
      selpred::load_experiment_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (seed_given) cfg.seed = seed;
  const selpred::ExperimentResult result = selpred::run_experiment(cfg, jobs);
  std::printf("run '%s': %zu checkpoints evaluated\n", cfg.run_id.c_str(),
              result.per_checkpoint.size());
  for (const auto& id : result.ranking.excluded)
    std::printf("  excluded (undefined selective metrics): %s\n", id.c_str());
  if (!result.ranking.ranking.empty()) {
    const auto& best = result.ranking.ranking.front();
    const auto& pt = best.operating_point.point;
    std::printf("best checkpoint %s: coverage %.4f, sel_macro_f1 %.4f\n",
                best.checkpoint_id.c_str(), pt.coverage,
                pt.sel_macro_f1 ? *pt.sel_macro_f1 : 0.0);
  }
  std::printf("results under %s\n", result.out_dir.string().c_str());
  return 0;
}

int cmd_calibrate(const std::string& logits_path, const std::string& labels_path,
                  const std::string& out_path) {
  const selpred::Matrix logits = selpred::read_logits(logits_path);
  const int k = static_cast<int>(logits.cols);
  selpred::LogitsSet ls{logits, selpred::read_labels(labels_path, k), k};
  ls.validate();
  const selpred::TemperatureFit fit = selpred::fit_temperature(ls);
  selpred::write_calibration_record(out_path, fit, ls.size());
  std::printf("temperature %.6f (nll %.6f%s) over %zu samples -> %s\n",
              fit.temperature, fit.nll, fit.clamped ? ", clamped" : "",
              ls.size(), out_path.c_str());
  return 0;
}

int cmd_sweep(const std::string& logits_path, const std::string& labels_path,
              double temperature, double grid_step, const std::string& out_path) {
  const selpred::Matrix logits = selpred::read_logits(logits_path);
  const int k = static_cast<int>(logits.cols);
  const auto labels = selpred::read_labels(labels_path, k);
  if (labels.size() != logits.rows)
    throw selpred::ValidationError("sweep: logits and labels row counts differ");
  const selpred::Matrix probs = selpred::softmax_probs(logits, temperature);
  const auto curve = selpred::threshold_sweep(
      probs, labels, k, selpred::make_threshold_grid(grid_step));
  selpred::write_curve_csv(out_path, curve);
  std::printf("%zu curve points -> %s\n", curve.size(), out_path.c_str());
  return 0;
}

std::vector<selpred::RankedCheckpoint> evaluate_manifest(
    const selpred::Manifest& manifest, double coverage, double grid_step,
    unsigned jobs) {
  const auto grid = selpred::make_threshold_grid(grid_step);
  std::vector<selpred::RankedCheckpoint> evaluated(manifest.checkpoints.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= manifest.checkpoints.size() || failed.load()) break;
      try {
        const auto rec =
            selpred::load_checkpoint_eval(manifest, manifest.checkpoints[i]);
        evaluated[i] = selpred::evaluate_checkpoint(rec, coverage, grid);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
      }
    }
  };
  const unsigned n_workers = std::max(
      1u, std::min<unsigned>(jobs, static_cast<unsigned>(manifest.checkpoints.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return evaluated;
}

int cmd_rank(const std::string& manifest_path, double coverage_override,
             double grid_step, const std::string& out_path, unsigned jobs) {
  const selpred::Manifest manifest = selpred::read_manifest(manifest_path);
  const double coverage =
      coverage_override > 0 ? coverage_override : manifest.target_coverage;
  auto evaluated = evaluate_manifest(manifest, coverage, grid_step, jobs);
  const auto result = selpred::rank_evaluated(std::move(evaluated));
  selpred::write_rank_csv(out_path, result);
  for (const auto& id : result.excluded)
    std::printf("excluded (undefined selective metrics): %s\n", id.c_str());
  std::printf("%zu checkpoints ranked -> %s\n", result.ranking.size(),
              out_path.c_str());
  return 0;
}

int cmd_report(const std::string& manifest_path, double coverage_override,
               double grid_step, const std::string& out_dir, unsigned jobs) {
  const selpred::Manifest manifest = selpred::read_manifest(manifest_path);
  const double coverage =
      coverage_override > 0 ? coverage_override : manifest.target_coverage;
  const auto evaluated = evaluate_manifest(manifest, coverage, grid_step, jobs);
  const auto result = selpred::rank_evaluated(evaluated);

  std::vector<selpred::SummaryRow> rows;
  for (const auto& rc : result.ranking) {
    const auto& pt = rc.operating_point.point;
    rows.push_back({manifest.run_id, rc.checkpoint_id, rc.pretrain_epoch,
                    pt.coverage, pt.sel_accuracy, pt.sel_macro_f1, pt.sel_qwk});
  }
  const std::filesystem::path dir(out_dir);
  selpred::emit_summary_table(dir / "summary.csv", rows);

  std::vector<selpred::PlotSeries> series;
  for (const auto& rc : evaluated) {
    std::size_t op_index = 0;
    for (std::size_t i = 0; i < rc.curve.size(); ++i)
      if (rc.curve[i].threshold == rc.operating_point.point.threshold) {
        op_index = i;
        break;
      }
    series.push_back({rc.checkpoint_id, rc.curve, op_index});
  }
  selpred::emit_risk_coverage_plot(dir / "risk_coverage.svg", series);
  std::printf("summary and risk-coverage plot -> %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective-prediction toolkit"};
  app.require_subcommand(1);

  // Shared option storage.
  std::string losscheck_loss = "sicova";
  std::string gradcheck_loss = "all";
  std::size_t n = 8, d = 4;
  std::uint64_t seed = 0;
  double margin = 1.0, tol = 1e-6, temperature = 1.0;
  double grid_step = 0.01, coverage = 0.0;
  std::string config_path, logits_path, labels_path, manifest_path, out_path;
  unsigned jobs = 1;
  selpred::LossParams params;

  auto* losscheck = app.add_subcommand(
      "losscheck", "print loss components on seeded random embeddings");
  losscheck->add_option("--loss", losscheck_loss, "sicova or triplet")
      ->default_str("sicova");
  losscheck->add_option("--n", n, "batch size")->default_str("8");
  losscheck->add_option("--d", d, "embedding dimension")->default_str("4");
  losscheck->add_option("--seed", seed, "rng seed")->default_str("0");
  losscheck->add_option("--margin", margin, "triplet margin")->default_str("1.0");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of the analytic gradients");
  gradcheck->add_option("--loss", gradcheck_loss, "sicova, triplet or all")
      ->default_str("all");
  gradcheck->add_option("--tol", tol, "max allowed relative error")
      ->default_str("1e-6");
  gradcheck->add_option("--seed", seed, "rng seed")->default_str("0");
  gradcheck->add_option("--margin", margin, "triplet margin")->default_str("1.0");

  auto* synth = app.add_subcommand(
      "synth", "run the synthetic checkpoint-reliability experiment");
  synth->add_option("--config", config_path, "experiment config file")
      ->required();
  synth->add_option("--out", out_path, "override the config's out_dir");
  auto* synth_seed = synth->add_option("--seed", seed, "override the config's seed");
  synth->add_option("--jobs", jobs, "parallel workers across checkpoints")
      ->default_str("1");

  auto* calibrate = app.add_subcommand(
      "calibrate", "fit a softmax temperature on a calibration split");
  calibrate->add_option("--logits", logits_path, "logits csv")->required();
  calibrate->add_option("--labels", labels_path, "labels file")->required();
  calibrate->add_option("--out", out_path, "calibration record (json)")
      ->required();

  auto* sweep = app.add_subcommand(
      "sweep", "risk-coverage sweep over the threshold grid");
  sweep->add_option("--logits", logits_path, "logits csv")->required();
  sweep->add_option("--labels", labels_path, "labels file")->required();
  sweep->add_option("--temperature", temperature, "softmax temperature")
      ->default_str("1.0");
  sweep->add_option("--grid-step", grid_step, "threshold grid step")
      ->default_str("0.01");
  sweep->add_option("--out", out_path, "curve csv")->required();

  auto* rank = app.add_subcommand(
      "rank", "rank manifest checkpoints by selective macro-F1");
  rank->add_option("--manifest", manifest_path, "run manifest (json)")
      ->required();
  rank->add_option("--coverage", coverage,
                   "target coverage (defaults to the manifest's)")
      ->check(CLI::Range(1e-9, 1.0));
  rank->add_option("--grid-step", grid_step, "threshold grid step")
      ->default_str("0.01");
  rank->add_option("--out", out_path, "rank csv")->required();
  rank->add_option("--jobs", jobs, "parallel workers")->default_str("1");

  auto* report = app.add_subcommand(
      "report", "summary table and risk-coverage plot for a manifest");
  report->add_option("--manifest", manifest_path, "run manifest (json)")
      ->required();
  report->add_option("--coverage", coverage,
                     "target coverage (defaults to the manifest's)")
      ->check(CLI::Range(1e-9, 1.0));
  report->add_option("--grid-step", grid_step, "threshold grid step")
      ->default_str("0.01");
  report->add_option("--out", out_path, "output directory")->required();
  report->add_option("--jobs", jobs, "parallel workers")->default_str("1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    params.triplet.margin = margin;
    if (losscheck->parsed())
      return cmd_losscheck(losscheck_loss, n, d, seed, params);
    if (gradcheck->parsed())
      return cmd_gradcheck(gradcheck_loss, tol, seed, params);
    if (synth->parsed())
      return cmd_synth(config_path, out_path, synth_seed->count() > 0, seed, jobs);
    if (calibrate->parsed())
      return cmd_calibrate(logits_path, labels_path, out_path);
    if (sweep->parsed())
      return cmd_sweep(logits_path, labels_path, temperature, grid_step, out_path);
    if (rank->parsed())
      return cmd_rank(manifest_path, coverage, grid_step, out_path, jobs);
    if (report->parsed())
      return cmd_report(manifest_path, coverage, grid_step, out_path, jobs);
  } catch (const selpred::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const selpred::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
