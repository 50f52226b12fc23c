#pragma once

// Experiment orchestration: one serializable, hash-stamped configuration that
// defines the synthetic task roster, the shared reference model, the transfer
// matrix, the embedding library, and the predict-then-verify pipeline built
// on top of them. Commands communicate only through the files these helpers
// produce.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskemb/embeddings.hpp"
#include "taskemb/encoder.hpp"
#include "taskemb/rankeval.hpp"
#include "taskemb/tasks.hpp"
#include "taskemb/transfer.hpp"

namespace taskemb::exp {

struct ExperimentConfig {
  enc::EncoderConfig encoder;
  std::vector<tasks::FamilySpec> families;
  int siblings_per_family = 2;
  std::size_t n_train = 256;
  std::size_t n_dev = 64;

  enc::PretrainConfig pretrain;
  std::size_t pretrain_sequences = 256;
  std::size_t pretrain_max_tokens = 24;

  std::vector<transfer::Regime> regimes = {transfer::Regime::kLimitedLimited};
  transfer::TransferOptions transfer_opts;
  emb::EmbeddingConfig embedding;
  std::string method = emb::kMethodTaskEmb;
  std::size_t curvegrad_steps = 200;

  std::uint64_t master_seed = 1;
  std::string out_root = "out";

  // Four families, two siblings each: two disjoint classification families
  // plus a span-extraction and a sequence-labeling family, sized so the full
  // pipeline completes in minutes on one machine.
  static ExperimentConfig desk_default();

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;  // over the canonical JSON form

  std::vector<std::vector<int>> make_corpus() const;
  std::vector<tasks::Task> make_roster() const;
};

// Directory layout under the experiment's output root.
struct Paths {
  std::string root;
  explicit Paths(std::string r) : root(std::move(r)) {}
  std::string config_json() const { return root + "/config.json"; }
  std::string manifest_json() const { return root + "/manifest.json"; }
  std::string reference_model() const { return root + "/reference.json"; }
  std::string tasks_dir() const { return root + "/tasks"; }
  std::string sizes_csv() const { return root + "/tasks/sizes.csv"; }
  std::string matrix_csv() const { return root + "/matrix.csv"; }
  std::string matrix_journal() const { return root + "/matrix.journal"; }
  std::string library_dir() const { return root + "/library"; }
  std::string rankings_dir(const std::string& method) const {
    return root + "/rankings/" + method;
  }
  std::string reports_dir() const { return root + "/reports"; }
  std::string layout_file() const { return root + "/space.json"; }
};

// Appends (or refreshes) one artifact record in <root>/manifest.json:
// relative path -> content hash, stamped with the config hash and master
// seed. Every command calls this for each file it finishes writing.
void record_artifact(const Paths& p, const ExperimentConfig& cfg, const std::string& rel_path);

// Content hash of an arbitrary file (FNV-1a 64 over the raw bytes).
std::string file_hash(const std::string& path);

// Loads when present, otherwise computes, saves, and records. The reference
// model additionally verifies that a loaded file matches the config.
enc::Model ensure_reference(const ExperimentConfig& cfg, const Paths& p);
std::vector<tasks::Task> ensure_roster(const ExperimentConfig& cfg, const Paths& p);

// Writes <tasks>/sizes.csv in the `task,class,train_size` format shared with
// the transcribed reference tables.
void write_sizes_csv(const std::vector<tasks::Task>& roster, const std::string& path);

// Keeps only rows whose target class is tgt_cls and whose source class is
// src_cls (baseline rows follow their target). Classes come from metas.
transfer::TransferMatrix filter_matrix_by_class(const transfer::TransferMatrix& m,
                                                const std::vector<rank::TaskMeta>& metas,
                                                const std::string& src_cls,
                                                const std::string& tgt_cls);

// Produces the ranking of candidate sources for one target under any method
// name accepted by the CLI: the embedding methods plus the "datasize" and
// "curvegrad" baselines. in_class restricts candidates to the target's class.
rank::Ranking rank_sources(const ExperimentConfig& cfg, const Paths& p,
                           const std::string& method, const std::string& target,
                           bool in_class);

// The end-to-end pipeline: embed the target, rank the library's sources,
// run two-stage transfer from the top-ranked source, and compare against the
// target-only baseline. When a transfer matrix file exists the report also
// carries the measured gold ranking. Requires a non-empty embedding library.
nlohmann::json pipeline_predict_and_verify(const ExperimentConfig& cfg, const Paths& p,
                                           const std::string& target_id,
                                           const std::string& method);

}  // namespace taskemb::exp
