#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace pvmc {

struct CmdOptions {
  std::string config_path;  // empty = all defaults
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
};

// Command implementations behind the CLI. Each writes its artifacts plus a
// manifest into out_dir and throws pvmc errors on failure (the CLI maps
// exception types to exit codes).
void cmd_simulate(const CmdOptions& opt);
void cmd_train(const CmdOptions& opt);
void cmd_eval(const CmdOptions& opt);
void cmd_ablate(const CmdOptions& opt);
void cmd_calibrate_k(const CmdOptions& opt);
void cmd_gradcheck(const CmdOptions& opt);  // throws VerificationError on fail

}  // namespace pvmc
