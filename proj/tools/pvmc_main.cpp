#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "pvmc/commands.hpp"
#include "pvmc/errors.hpp"

// Exit codes: 0 success, 1 I/O error, 2 config error, 3 verification failure.

namespace {

struct Args {
  std::string config;
  std::string out;
  std::int64_t seed = -1;
};

pvmc::CmdOptions to_options(const Args& a) {
  pvmc::CmdOptions opt;
  opt.config_path = a.config;
  opt.out_dir = a.out;
  if (a.seed >= 0) opt.seed_override = static_cast<std::uint64_t>(a.seed);
  return opt;
}

void add_common(CLI::App* cmd, Args& args, bool config_required) {
  auto* c = cmd->add_option("--config", args.config, "JSON config file");
  if (config_required) c->required();
  cmd->add_option("--out", args.out, "output directory");
  cmd->add_option("--seed", args.seed, "override the config seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pvmc: physics-consistent PET denoising toolkit"};
  app.require_subcommand(1);

  Args sim_args, train_args, eval_args, ablate_args, calib_args, grad_args;

  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_common(sim, sim_args, false);
  auto* train = app.add_subcommand("train", "train a denoiser");
  add_common(train, train_args, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_args, true);
  auto* abl = app.add_subcommand("ablate", "lambda / patch-size grids");
  add_common(abl, ablate_args, true);
  auto* calib = app.add_subcommand("calibrate-k", "k spread over disjoint splits");
  add_common(calib, calib_args, true);
  auto* grad = app.add_subcommand("gradcheck", "verify every gradient rule");
  add_common(grad, grad_args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) pvmc::cmd_simulate(to_options(sim_args));
    if (train->parsed()) pvmc::cmd_train(to_options(train_args));
    if (eval->parsed()) pvmc::cmd_eval(to_options(eval_args));
    if (abl->parsed()) pvmc::cmd_ablate(to_options(ablate_args));
    if (calib->parsed()) pvmc::cmd_calibrate_k(to_options(calib_args));
    if (grad->parsed()) pvmc::cmd_gradcheck(to_options(grad_args));
  } catch (const pvmc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const pvmc::VerificationError& e) {
    std::fprintf(stderr, "verification failure: %s\n", e.what());
    return 3;
  } catch (const pvmc::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
