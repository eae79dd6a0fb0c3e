// Experiment CLI: train / compare / analyze / gradcheck.
//
// Exit codes: 0 success, 1 configuration error, 2 data error,
// 3 numerical divergence.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "wn/checkpoint.hpp"
#include "wn/experiment.hpp"
#include "wn/gradcheck.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out;
  std::int64_t seed = -1;
};

wn::ExperimentConfig resolve_config(const CommonArgs& args) {
  wn::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = wn::load_config(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (!args.out.empty()) cfg.out = args.out;
  return cfg;
}

int run_train(const CommonArgs& args, const std::string& mode, double lr, std::int64_t epochs,
              const std::string& checkpoint_path, const std::string& trace_path) {
  wn::ExperimentConfig cfg = resolve_config(args);
  if (!mode.empty()) cfg.norm_mode = wn::norm_mode_from_string(mode);
  if (lr > 0.0) cfg.lr = lr;
  if (epochs > 0) cfg.epochs = epochs;
  if (cfg.out.empty()) cfg.out = "run.csv";
  wn::validate_config(cfg);

  wn::NormTrace trace;
  const bool want_trace = !trace_path.empty();
  if (want_trace && !wn::uses_weight_norm(cfg.norm_mode)) {
    throw wn::ConfigError("--trace requires a weight-normalized mode");
  }

  // Reproduce run_experiment but keep the model for checkpointing.
  const wn::PreparedData data = wn::prepare_data(cfg);
  const wn::ModelState proto = wn::build_initialized_prototype(cfg, data);
  wn::ModelState model = wn::convert_model(proto, cfg.norm_mode);
  wn::RunRecord rec =
      wn::train_single(cfg, data, model, cfg.norm_mode, cfg.lr, want_trace ? &trace : nullptr);
  wn::write_file(cfg.out, wn::records_to_csv({rec}));
  if (want_trace) wn::write_file(trace_path, wn::norm_trace_to_csv(trace));

  if (rec.diverged) {
    std::cerr << "diverged: non-finite loss at epoch " << rec.diverged_epoch << " (mode "
              << rec.mode << ", lr " << wn::fmt_double(rec.lr) << ")\n";
    return 3;
  }
  if (!checkpoint_path.empty()) {
    wn::save_checkpoint(checkpoint_path, model, wn::model_meta(cfg));
  }
  const auto& last = rec.rows.back();
  std::cout << "mode=" << rec.mode << " lr=" << wn::fmt_double(rec.lr)
            << " final_train_loss=" << wn::fmt_double(last.train_loss)
            << " final_train_error=" << wn::fmt_double(last.train_error)
            << " final_test_error=" << wn::fmt_double(last.test_error) << "\n"
            << "wrote " << cfg.out << "\n";
  return 0;
}

int run_compare(const CommonArgs& args) {
  wn::ExperimentConfig cfg = resolve_config(args);
  if (cfg.out.empty()) cfg.out = "compare.csv";
  wn::validate_config(cfg);
  const wn::CompareResult result = wn::compare_parameterizations(cfg);
  int diverged = 0;
  for (const auto& rec : result.records) diverged += rec.diverged ? 1 : 0;
  std::cout << "ran " << result.records.size() << " cells (" << diverged << " diverged), wrote "
            << cfg.out << " and " << cfg.out << ".summary.csv\n";
  return 0;
}

int run_analyze(const CommonArgs& args, const std::string& checkpoint_path, std::int64_t probe,
                std::int64_t units) {
  wn::ExperimentConfig cfg = resolve_config(args);
  if (cfg.out.empty()) cfg.out = "analyze.csv";
  const wn::Checkpoint ck = wn::load_checkpoint(checkpoint_path);
  wn::ModelState model = wn::model_from_checkpoint(ck);
  const wn::PreparedData data = wn::prepare_data(cfg);
  const auto rows = wn::analyze_model(model, data.train_x, data.train_y,
                                      static_cast<wn::Index>(probe),
                                      static_cast<wn::Index>(units));
  wn::write_file(cfg.out, wn::analyze_rows_to_csv(rows));
  double mean_alignment = 0.0;
  for (const auto& r : rows) mean_alignment += r.alignment;
  if (!rows.empty()) mean_alignment /= static_cast<double>(rows.size());
  std::cout << "analyzed " << rows.size() << " units, mean |cos(w, top eig)| = "
            << wn::fmt_double(mean_alignment) << ", wrote " << cfg.out << "\n";
  return 0;
}

int run_gradcheck(const CommonArgs& args) {
  const std::uint64_t seed = args.seed >= 0 ? static_cast<std::uint64_t>(args.seed) : 1;
  const auto results = wn::gradcheck_all(seed);
  bool all_ok = true;
  std::string csv = "mode,n_coords,max_rel_err,frac_within_1e-5,seed\n";
  for (const auto& r : results) {
    const bool ok = r.passed();
    all_ok = all_ok && ok;
    std::cout << (ok ? "[ok]   " : "[FAIL] ") << wn::to_string(r.mode) << ": max "
              << wn::fmt_double(r.max_err) << ", " << wn::fmt_double(100.0 * r.frac_within_tol)
              << "% of " << r.n_coords << " coordinates within 1e-5\n";
    csv += wn::to_string(r.mode) + ',' + std::to_string(r.n_coords) + ',' +
           wn::fmt_double(r.max_err) + ',' + wn::fmt_double(r.frac_within_tol) + ',' +
           std::to_string(r.seed_used) + '\n';
  }
  if (!args.out.empty()) wn::write_file(args.out, csv);
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weight-normalization training experiments"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string mode, checkpoint_path, trace_path;
  double lr = -1.0;
  std::int64_t epochs = -1, probe = 256, units = 4;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "JSON experiment config");
    sub->add_option("--seed", args.seed, "RNG seed (overrides config)");
    sub->add_option("--out", args.out, "output CSV path (overrides config)");
  };

  CLI::App* train = app.add_subcommand("train", "train one parameterization");
  add_common(train);
  train->add_option("--mode", mode, "norm mode override");
  train->add_option("--lr", lr, "learning rate override");
  train->add_option("--epochs", epochs, "epoch count override");
  train->add_option("--checkpoint", checkpoint_path, "write final parameters here");
  train->add_option("--trace", trace_path, "write a per-step norm trace CSV here");

  CLI::App* compare = app.add_subcommand("compare", "five-parameterization grid");
  add_common(compare);

  CLI::App* analyze = app.add_subcommand("analyze", "gradient covariance on a checkpoint");
  add_common(analyze);
  analyze->add_option("--checkpoint", checkpoint_path, "checkpoint to analyze")->required();
  analyze->add_option("--probe", probe, "probe batch size (max 256)");
  analyze->add_option("--units", units, "units inspected per layer");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(train)) {
      return run_train(args, mode, lr, epochs, checkpoint_path, trace_path);
    }
    if (app.got_subcommand(compare)) return run_compare(args);
    if (app.got_subcommand(analyze)) return run_analyze(args, checkpoint_path, probe, units);
    if (app.got_subcommand(gradcheck)) return run_gradcheck(args);
  } catch (const wn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const wn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const wn::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
