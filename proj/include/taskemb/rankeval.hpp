#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskemb/embeddings.hpp"
#include "taskemb/tasks.hpp"
#include "taskemb/transfer.hpp"

// Source-task ranking and its evaluation. Rankers order candidate source
// tasks for a target — by embedding cosine similarity (fused across
// components), by training-set size, or by early loss-curve slopes — and the
// quality of a ranking is judged against gold transfer results with the mean
// best-source rank (rho) and NDCG.
namespace taskemb::rank {

struct RankEntry {
  std::string source;
  double score = 0.0;
  double rank = 0.0;  // 1-based; tied scores share the average of their positions
};

struct Ranking {
  std::string target;
  std::vector<RankEntry> entries;  // descending score

  double rank_of(const std::string& source) const;  // ValidationError when absent
};

// Sort descending by score and assign tie-averaged ranks.
Ranking make_ranking(const std::string& target,
                     const std::vector<std::pair<std::string, double>>& scores);

// Cosine similarity of one named component vector against every library
// embedding. Embeddings must be mutually comparable: equal model hashes and
// equal component dimensions.
Ranking rank_by_cosine(const emb::TaskEmbedding& target,
                       const std::vector<emb::TaskEmbedding>& library,
                       const std::string& component);

// Reciprocal-rank fusion: score(s) = sum over rankings of 1/(60 + rank_i(s)).
// Every ranking must cover the same source set.
inline constexpr double kRrfConstant = 60.0;
Ranking rrf_fuse(const std::vector<Ranking>& parts);

// Ranking methods built on the embedding library.
//   taskemb   — fuse the squared-gradient components
//   textemb   — the single text component
//   text+task — fuse all components, text included
inline constexpr const char* kMethodTextPlusTask = "text+task";
std::vector<std::string> method_components(const std::string& method);
// candidates, when given, restricts the sources considered (the target is
// always excluded); by default every other task in the library competes.
Ranking rank_by_embeddings(const std::string& method, const std::string& target_id,
                           const emb::EmbeddingLibrary& lib,
                           const std::vector<std::string>* candidates = nullptr);

// Task metadata for the size baseline.
struct TaskMeta {
  std::string id;
  std::string cls;  // cr | qa | sl
  std::size_t train_size = 0;
};
std::vector<TaskMeta> read_task_sizes(const std::string& csv_path);

// Larger training sets first; the target never ranks itself.
Ranking rank_by_datasize(const std::vector<TaskMeta>& candidates, const std::string& target);

// Least-squares slope of a recorded loss curve around each checkpoint
// fraction, over a window of +/- window_frac of the curve length.
std::vector<double> curve_slopes(const std::vector<double>& losses,
                                 const std::vector<double>& checkpoints, double window_frac);

inline const std::vector<double> kCurveGradCheckpoints = {0.1, 0.2, 0.3, 0.5, 0.7};
inline constexpr double kCurveGradWindow = 0.02;

// Fine-tune on the source for total_steps recording per-step losses, then
// read the five checkpoint slopes. total_steps must be at least 100.
std::vector<double> curvegrad_features(const enc::FeatureExtractor& reference,
                                       const tasks::Task& source,
                                       const transfer::TrainConfig& tc, std::size_t total_steps,
                                       std::uint64_t seed);

// One ranking per checkpoint, fused. Default order puts the steepest
// *improving* loss (most negative slope) first; literal_descending instead
// orders by raw slope value, largest first.
Ranking rank_by_curvegrad(const std::map<std::string, std::vector<double>>& slopes,
                          const std::string& target, bool literal_descending = false);

// Gold transfer outcomes for one target under one regime: the relevance of a
// source is the target's transferred score, and the best sources are the
// argmax of signed relative gain over the target-only baseline.
struct GoldRelevance {
  std::string target;
  double baseline = 0.0;
  std::map<std::string, double> relevance;
  std::vector<std::string> best;  // all tied argmax sources
};

// Extract per-target gold from a result matrix (baselines are the
// source=NONE rows). Targets with a zero baseline are skipped — relative
// gain is undefined there. Throws when a target lacks its baseline row.
std::vector<GoldRelevance> gold_from_matrix(const transfer::TransferMatrix& m,
                                            transfer::Regime regime);

// Mean over targets of the (tie-averaged) rank the ranking assigns to the
// gold best source; tied gold bests contribute the mean of their ranks.
double avg_best_source_rank(const std::vector<Ranking>& rankings,
                            const std::vector<GoldRelevance>& gold);

// Discounted cumulative gain of the first p relevances, log base 2.
double dcg(const std::vector<double>& rel_in_rank_order, std::size_t p);

// How raw 0-100 scores are mapped into the 2^rel exponent.
enum class RelScaling { kDiv100, kDiv20, kDiv10, kMinMax, kRaw };
std::string to_string(RelScaling s);
RelScaling rel_scaling_from(const std::string& s);

// 100 * DCG(predicted order) / DCG(ideal order); p = 0 means all sources.
double ndcg(const Ranking& pred, const GoldRelevance& gold, std::size_t p = 0,
            RelScaling scaling = RelScaling::kDiv100);

struct EvalReport {
  std::string method;
  std::string scope;  // in-class | all-class
  std::string regime;
  double rho = 0.0;
  double ndcg = 0.0;
  std::size_t targets = 0;
  nlohmann::json to_json() const;
};

// Mean-gain summary of one source-class -> target-class matrix: per target
// the best source's relative gain (skipping zero baselines), averaged and
// scaled to percent, plus how many targets see any positive gain.
struct AggregateCell {
  double mean_gain_pct = 0.0;
  std::size_t positive_targets = 0;
  std::size_t targets = 0;
};
AggregateCell table2_aggregate(const transfer::TransferMatrix& m, transfer::Regime regime);

// Rankings persist as CSV `target,source,score,rank` (one file per target).
void write_ranking_csv(const Ranking& r, const std::string& path);
Ranking read_ranking_csv(const std::string& path);

}  // namespace taskemb::rank
