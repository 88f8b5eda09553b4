#pragma once

// Command-line front end: train, eval, decode and report subcommands.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "homeostat/experiment.hpp"

namespace homeostat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Defaults, then the config file (if any), then `flag_patch`, which has the
// same layout as the config file.
ExperimentConfig resolve_experiment(
    const std::optional<std::filesystem::path>& config_file,
    const nlohmann::json& flag_patch);

// args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace homeostat
