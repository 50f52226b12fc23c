#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskemb/encoder.hpp"
#include "taskemb/tasks.hpp"

// Two-stage sequential fine-tuning: adapt the shared reference extractor to a
// source task, discard the source head, then fine-tune on the target task and
// score its dev set. Cells are averaged over seeded restarts with the
// target-side data draw paired across sources, so every source competes on
// the identical target subsets.
namespace taskemb::transfer {

// Data regime: whether the source / target training sets are used in full or
// cut down to a fixed-size subsample.
enum class Regime { kFullFull, kFullLimited, kLimitedLimited };
std::string to_string(Regime r);          // "full-full" | "full-limited" | "limited-limited"
Regime regime_from(const std::string& s);

struct TrainConfig {
  double lr = 0.1;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;     // CR and QA tasks
  std::size_t epochs_sl = 6;  // sequence labeling converges slower
  bool frozen_extractor = false;  // head-only updates when set
  std::size_t epochs_for(tasks::TaskClass cls) const {
    return cls == tasks::TaskClass::kSL ? epochs_sl : epochs;
  }
};

struct TransferOptions {
  std::size_t limited_size = 100;
  std::size_t restarts = 5;  // limited-target regimes; full-full always runs once
  TrainConfig train;
  std::size_t workers = 1;
};

// Attach a fresh task head to a copy of `start` and run SGD over the given
// training set. Seed fans out to head init and epoch shuffling.
enc::Model fine_tune(const enc::FeatureExtractor& start, const tasks::Task& task,
                     const tasks::Dataset& train_data, const TrainConfig& tc,
                     std::uint64_t seed);

// Exact-step variant used by the loss-curve ranking baseline: cycles shuffled
// epochs until `steps` batch updates have been applied, recording each
// batch's mean per-example loss into loss_log.
enc::Model fine_tune_steps(const enc::FeatureExtractor& start, const tasks::Task& task,
                           const tasks::Dataset& train_data, const TrainConfig& tc,
                           std::size_t steps, std::vector<double>& loss_log, std::uint64_t seed);

// Dev-set score of the task's metric, in metric units (0-100 scale).
double evaluate(const enc::Model& m, const tasks::Task& task);

struct CellResult {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over restarts; 0 for one
  std::size_t restarts = 0;
  std::vector<double> scores;  // per-restart, in run order (empty when loaded)
};

// One matrix cell: source == nullptr gives the target-only baseline.
CellResult run_cell(const enc::FeatureExtractor& reference, const tasks::Task* source,
                    const tasks::Task& target, Regime regime, const TransferOptions& opts,
                    std::uint64_t master_seed);

// Results keyed by (regime, source-or-NONE, target).
class TransferMatrix {
 public:
  static constexpr const char* kNoSource = "NONE";

  void set(Regime r, const std::string& source, const std::string& target, CellResult res);
  const CellResult* find(Regime r, const std::string& source, const std::string& target) const;
  std::size_t size() const { return cells_.size(); }

  struct Row {
    std::string regime, source, target;
    CellResult result;
  };
  std::vector<Row> rows() const;  // sorted by (regime, source, target)

  // CSV: header `regime,source,target,mean,std,restarts`, one row per cell.
  void write_csv(const std::string& path) const;
  static TransferMatrix read_csv(const std::string& path);
  // Merge rows from another file (used to ingest transcribed reference data).
  void merge(const TransferMatrix& other);  // throws on conflicting duplicates

 private:
  std::map<std::string, Row> cells_;
};

// Run every source->target pair (source != target) plus per-target baselines,
// for every listed regime. A non-empty journal path makes the run resumable:
// finished cells are appended as JSON lines and skipped on rerun. Cells are
// independent and may be computed on `opts.workers` threads; results are
// bitwise independent of the schedule.
TransferMatrix run_matrix(const enc::FeatureExtractor& reference,
                          const std::vector<tasks::Task>& roster,
                          const std::vector<Regime>& regimes, const TransferOptions& opts,
                          std::uint64_t master_seed, const std::string& journal_path = "");

}  // namespace taskemb::transfer
