#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskemb/encoder.hpp"
#include "taskemb/tasks.hpp"
#include "taskemb/transfer.hpp"

// Task embeddings: vectors that characterize what a task asks of the shared
// encoder. Two methods are provided.
//
//   textemb — the label-free baseline: average the final-layer token
//   representations of the never-fine-tuned reference extractor over the
//   task's training inputs.
//
//   taskemb — fine-tune a copy of the reference on the task, then take the
//   diagonal of the empirical Fisher information: the mean of squared
//   per-example log-likelihood gradients, with respect to (a) the extractor
//   parameters, sliced into named components and averaged elementwise across
//   layers, and (b) the final-layer activations, averaged over token
//   positions. The reference-model text vector is carried along as one more
//   component.
//
// Embeddings are persisted one JSON file per (task, method) in a library
// directory with an index; similarity search over the library lives in the
// ranking module.
namespace taskemb::emb {

inline constexpr const char* kMethodTaskEmb = "taskemb";
inline constexpr const char* kMethodTextEmb = "textemb";

// How the squared-gradient average is taken.
struct FisherOptions {
  // "empirical" uses each example's recorded label; "sampled" draws labels
  // from the model's own output distribution instead.
  std::string mode = "empirical";
  std::size_t samples = 1;  // label draws per example in sampled mode
  std::uint64_t seed = 0;   // sampling stream root (sampled mode only)
  void validate() const;
};

struct EmbeddingConfig {
  transfer::TrainConfig train;    // settings for the embedding fine-tune
  bool frozen_extractor = false;  // train the head only; Fisher at the frozen reference
  std::string fisher_mode = "empirical";
  std::size_t fisher_samples = 1;
  void validate() const;
  nlohmann::json to_json() const;
  static EmbeddingConfig from_json(const nlohmann::json& j);
  std::string hash() const;  // over the canonical JSON form
};

// Named component vectors plus the provenance needed to keep libraries
// comparable: embeddings may only be compared when model_hash (and config)
// agree.
struct TaskEmbedding {
  std::string task;
  std::string model_hash;
  std::string method;  // kMethodTaskEmb | kMethodTextEmb
  std::string config_hash;
  std::map<std::string, std::vector<double>> components;

  // All component vectors concatenated in sorted name order; same total
  // length for every task under one encoder config and method.
  std::vector<double> concat() const;
  nlohmann::json to_json() const;
  static TaskEmbedding from_json(const nlohmann::json& j);
};

// Content hash of an extractor (config + weights); stamped into embeddings.
std::string model_hash(const enc::FeatureExtractor& ex);

// Mean over the dataset of each input's token-position-mean final-layer
// representation. Forward-only; labels are never read. The extractor should
// be the shared pretrained reference, never a fine-tuned model.
std::vector<double> text_emb(const enc::FeatureExtractor& reference, const tasks::Dataset& data);

// Diagonal Fisher over the extractor parameters: mean of squared per-example
// log-likelihood gradients, sliced by component; per-layer components are
// averaged elementwise across the layer copies. Keys: token_embeddings,
// attention, feed_forward, layer_output.
std::map<std::string, std::vector<double>> fisher_diag_params(const enc::Model& m,
                                                              const tasks::Dataset& data,
                                                              const FisherOptions& fo = {});

// Diagonal Fisher over the final-layer activations: per example, the squared
// gradient of the log-likelihood with respect to each token's final-layer
// vector, meaned over token positions, then meaned over the dataset.
std::vector<double> fisher_diag_activations(const enc::Model& m, const tasks::Dataset& data,
                                            const FisherOptions& fo = {});

// Full pipeline for one task: fine-tune a copy of the reference on the
// task's training set (head-only when frozen_extractor), compute the
// parameter and activation Fishers there plus the reference text vector, and
// assemble the embedding record.
TaskEmbedding task_emb(const enc::FeatureExtractor& reference, const tasks::Task& task,
                       const EmbeddingConfig& cfg, std::uint64_t master_seed);

// The label-free method: a single "text" component from the reference model.
TaskEmbedding text_embedding(const enc::FeatureExtractor& reference, const tasks::Task& task,
                             const EmbeddingConfig& cfg);

// Canonical JSON file {"task","model_hash","method","components":{name:
// {"dim",values[]}},"config_hash"}; equal embeddings produce byte-identical
// files.
void save_embedding(const TaskEmbedding& e, const std::string& path);
TaskEmbedding load_embedding(const std::string& path);

struct LibraryEntry {
  std::string task;
  std::string method;
  std::string config_hash;
  std::string file;        // relative to the library directory
  std::string task_class;  // CR | QA | SL
  std::size_t train_size = 0;
};

// Directory of embedding files plus an index carrying task metadata. One
// entry per (task, method); every entry shares one model hash, so a library
// is bound to a single reference model.
class EmbeddingLibrary {
 public:
  explicit EmbeddingLibrary(const std::string& dir);  // loads the index when present

  const std::string& dir() const { return dir_; }
  const std::string& reference_hash() const { return model_hash_; }  // "" when empty
  std::size_t size() const { return index_.size(); }
  bool contains(const std::string& task, const std::string& method) const;

  // Insert or replace; writes the embedding file and the refreshed index
  // atomically. Throws ValidationError on a model-hash mismatch with the
  // existing entries.
  void put(const TaskEmbedding& e, tasks::TaskClass cls, std::size_t train_size);

  TaskEmbedding load(const std::string& task, const std::string& method) const;
  std::vector<LibraryEntry> entries() const;  // sorted by (task, method)

 private:
  std::string dir_;
  std::string model_hash_;
  std::map<std::pair<std::string, std::string>, LibraryEntry> index_;
  void write_index() const;
};

}  // namespace taskemb::emb
