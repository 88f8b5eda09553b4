#pragma once

// Cross-run summaries: one CSV row per run and an SVG plot of per-epoch BLEU.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "homeostat/trainer.hpp"

namespace homeostat {

struct RunSummary {
  std::string experiment_id;
  std::string variant;
  double s = 0;
  std::size_t q_att = 0;
  std::size_t q_bo = 0;
  std::vector<EpochRecord> records;

  // BLEU per evaluated epoch for `split`, falling back to "train" when the
  // run has no records for it.
  std::vector<double> bleu_curve(const std::string& split) const;
  double best_bleu(const std::string& split) const;
  // IMI of the training BLEU curve; empty with fewer than two epochs.
  std::optional<double> imi_train() const;
};

// Reads manifest.json and metrics.csv from a run directory.
RunSummary load_run(const std::filesystem::path& run_dir);

// Each path is a run directory or a directory whose immediate children are
// run directories. Results are sorted by experiment id.
std::vector<RunSummary> discover_runs(
    const std::vector<std::filesystem::path>& paths);

// Columns: experiment_id,variant,s,q_att,q_bo,best_bleu,imi
std::string report_csv(const std::vector<RunSummary>& runs,
                       const std::string& split);
std::string report_svg(const std::vector<RunSummary>& runs,
                       const std::string& split);

}  // namespace homeostat
