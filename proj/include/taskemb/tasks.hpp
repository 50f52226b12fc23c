#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

// Synthetic task roster: parameterized families of classification/regression
// (CR), span-extraction QA, and sequence-labeling (SL) tasks. Sibling tasks
// within a family share vocabulary slice and labeling rule but are generated
// from disjoint example streams.
namespace taskemb::tasks {

enum class TaskClass { kCR, kQA, kSL };
std::string to_string(TaskClass c);
TaskClass task_class_from(const std::string& s);

enum class Metric { kAccuracy, kSpearman, kSpanF1, kTokenF1 };
std::string to_string(Metric m);
Metric metric_from(const std::string& s);

// class label | regression value | inclusive token span | per-token tags
using Target = std::variant<int, double, std::pair<int, int>, std::vector<int>>;

struct Example {
  std::vector<std::vector<int>> segments;
  Target target;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t size() const { return examples.size(); }
};

// "classes" (count) | "real" | "span" | "tags" (count incl. background 0)
struct LabelSpace {
  std::string type;
  int count = 0;
  nlohmann::json to_json() const;
  static LabelSpace from_json(const nlohmann::json& j);
};

struct Task {
  std::string id;
  std::string family;
  TaskClass cls = TaskClass::kCR;
  Metric metric = Metric::kAccuracy;
  LabelSpace labels;
  Dataset train;
  Dataset dev;
};

// Generator parameters for one family. Kinds: cr_classify, cr_regress,
// qa_span, sl_tag. Each family owns a private slice [vocab_lo, vocab_hi) of
// the token id space; marker tokens are drawn from that slice.
struct FamilySpec {
  std::string id;
  std::string kind = "cr_classify";
  int vocab_lo = 16;
  int vocab_hi = 64;
  int n_labels = 3;           // classes (cr_classify) or tag classes (sl_tag)
  int markers_per_label = 4;
  int seq_len_lo = 8;
  int seq_len_hi = 16;
  double noise = 0.0;         // label-flip probability (cr_classify only)
  int span_len = 2;           // qa_span answer width
  int n_keys = 8;             // qa_span distinct question keys
  nlohmann::json to_json() const;
  static FamilySpec from_json(const nlohmann::json& j);
  void validate() const;
  TaskClass task_class() const;
};

// Marker material derived deterministically from (family, master_seed);
// shared by all siblings of the family — this is the labeling rule.
struct FamilyMaterial {
  std::vector<std::vector<int>> label_markers;  // per label/tag class
  std::vector<int> keys;                        // qa question keys
  std::map<int, int> key_answer;                // qa key -> answer marker
  std::vector<int> content;                     // non-marker family tokens
};
FamilyMaterial derive_material(const FamilySpec& spec, std::uint64_t master_seed);

// Recompute the target implied by the rule for the given segments.
Target apply_rule(const FamilySpec& spec, const FamilyMaterial& mat,
                  const std::vector<std::vector<int>>& segments);

// Deterministic in all arguments; sibling_index picks the example stream.
Task generate_task(const FamilySpec& spec, int sibling_index, std::size_t n_train,
                   std::size_t n_dev, std::uint64_t master_seed);

// Unlabeled sequences drawn from the families' input distributions.
std::vector<std::vector<int>> pretrain_corpus(const std::vector<FamilySpec>& families,
                                              std::size_t sequences, std::size_t max_tokens,
                                              std::uint64_t master_seed);

// Dev-set score in [0,100] (Spearman in [-100,100]); gold/pred aligned.
double evaluate_metric(Metric metric, const std::vector<Target>& gold,
                       const std::vector<Target>& pred);

double spearman(const std::vector<double>& a, const std::vector<double>& b);
double span_overlap_f1(std::pair<int, int> gold, std::pair<int, int> pred);

// Fixed-size subsample without replacement (identity when limit >= size).
Dataset resample(const Dataset& d, std::size_t limit, std::uint64_t seed);

// Persistence: <dir>/<id>/manifest.json + train.jsonl + dev.jsonl.
void save_task(const Task& t, const std::string& dir);
Task load_task(const std::string& manifest_path);
std::vector<Task> load_task_dir(const std::string& dir);  // sorted by id

nlohmann::json target_to_json(const Target& t);
Target target_from_json(const nlohmann::json& j, const LabelSpace& labels);

}  // namespace taskemb::tasks
