#ifdef GSCD_CLI11_PACKAGE
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gscd/checkpoint.hpp"
#include "gscd/errors.hpp"
#include "gscd/gradcheck.hpp"
#include "gscd/loss_gradcheck.hpp"
#include "gscd/metrics.hpp"
#include "gscd/synth.hpp"
#include "gscd/train.hpp"

namespace fs = std::filesystem;
using namespace gscd;

namespace {

struct GenDataArgs {
  fs::path out;
  std::size_t train = 64;
  std::size_t val = 16;
  SceneSpec spec;
};

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
};

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  std::size_t batch_size = 8;
};

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double analytic_scale = 1.0;
  bool skip_losses = false;
};

RunConfig load_run_config(const RunArgs& a) {
  RunConfig c;
  if (!a.config.empty()) apply_config_file(c, a.config);
  for (const auto& kv : a.overrides) {
    if (kv.find('=') == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    apply_config_text(c, kv);
  }
  validate(c);
  return c;
}

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "key=value config file");
  cmd->add_option("overrides", a.overrides, "key=value overrides applied after the config file");
}

int cmd_gen_data(const GenDataArgs& a) {
  a.spec.validate();
  if (a.train == 0) throw ConfigError("--train must be positive");
  const auto train = generate(a.spec, a.train);
  save_dataset(a.out / "train", train);
  std::size_t warnings = train.warnings.size();
  if (a.val > 0) {
    const auto val = generate(a.spec, a.val, a.train);
    save_dataset(a.out / "val", val);
    warnings += val.warnings.size();
    for (const auto& w : val.warnings) std::cerr << "warning: " << w << "\n";
  }
  for (const auto& w : train.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "wrote " << a.train << " train and " << a.val << " val samples to " << a.out.string() << " ("
            << warnings << " warnings)\n";
  return 0;
}

int cmd_train(const RunArgs& a) {
  const auto cfg = load_run_config(a);
  const auto r = train(cfg, &std::cout);
  std::cout << final_report(r, cfg.epochs);
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  auto model = load_model(a.checkpoint);
  const auto ds = load_dataset(a.data);
  std::cout << scores_report(scores(evaluate(*model, ds, a.batch_size)));
  return 0;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions opt;
  opt.analytic_scale = a.analytic_scale;
  auto results = op_family_gradchecks(a.seed, opt);
  if (!a.skip_losses) {
    for (auto& r : loss_gradchecks(a.seed, opt)) results.push_back(std::move(r));
  }
  std::size_t failed = 0;
  std::cout << std::left << std::setw(28) << "check" << std::setw(16) << "max_rel_error" << std::setw(8) << "coords"
            << "result\n";
  for (const auto& r : results) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << r.max_rel_error;
    std::cout << std::setw(28) << r.name << std::setw(16) << err.str() << std::setw(8) << r.coords_checked
              << (r.passed ? "pass" : "FAIL") << "\n";
    if (!r.passed) ++failed;
  }
  std::cout << results.size() - failed << "/" << results.size() << " passed\n";
  if (failed > 0) throw Error(ErrorCategory::Check, std::to_string(failed) + " gradient checks failed");
  return 0;
}

int cmd_ablate(const RunArgs& a, const std::vector<std::uint64_t>& seeds) {
  const auto cfg = load_run_config(a);
  const auto s = run_ablation(cfg, seeds, &std::cout);
  fs::create_directories(cfg.out);
  const auto csv = fs::path(cfg.out) / "ablation.csv";
  std::ofstream(csv) << ablation_csv(s);
  for (const auto& v : ablation_variants()) {
    std::cout << "mean_miou." << v.name << "=" << format_double(s.mean_miou.at(v.name)) << "\n";
  }
  std::cout << "wrote " << csv.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-temporal semantic change detection toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic train/val dataset");
  gen_cmd->add_option("-o,--out", gen.out, "output directory (train/ and val/ are created)")->required();
  gen_cmd->add_option("--train", gen.train, "number of training samples");
  gen_cmd->add_option("--val", gen.val, "number of validation samples");
  gen_cmd->add_option("--height", gen.spec.height);
  gen_cmd->add_option("--width", gen.spec.width);
  gen_cmd->add_option("--classes", gen.spec.n_classes);
  gen_cmd->add_option("--shapes", gen.spec.n_shapes);
  gen_cmd->add_option("--change-fraction", gen.spec.change_fraction);
  gen_cmd->add_option("--noise", gen.spec.noise_std);
  gen_cmd->add_option("--seed", gen.spec.seed);

  RunArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_run_options(train_cmd, train_args);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval_cmd->add_option("checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("data", eval.data)->required();
  eval_cmd->add_option("--batch-size", eval.batch_size);

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op family and loss");
  gc_cmd->add_option("--seed", gc.seed);
  gc_cmd->add_option("--analytic-scale", gc.analytic_scale, "multiply analytic gradients (fault injection)");
  gc_cmd->add_flag("--skip-losses", gc.skip_losses, "only check op families");

  RunArgs ablate_args;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  auto* ablate_cmd = app.add_subcommand("ablate", "Train the full model and every single-component ablation");
  add_run_options(ablate_cmd, ablate_args);
  ablate_cmd->add_option("--seeds", seeds)->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::Usage);
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval);
    if (*gc_cmd) return cmd_gradcheck(gc);
    if (*ablate_cmd) return cmd_ablate(ablate_args, seeds);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
