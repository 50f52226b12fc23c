#include "taskemb/rankeval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "taskemb/common.hpp"

namespace taskemb::rank {

using nlohmann::json;

double Ranking::rank_of(const std::string& source) const {
  for (const auto& e : entries) {
    if (e.source == source) return e.rank;
  }
  throw ValidationError("source '" + source + "' is not ranked for target '" + target + "'");
}

Ranking make_ranking(const std::string& target,
                     const std::vector<std::pair<std::string, double>>& scores) {
  Ranking r;
  r.target = target;
  for (const auto& [s, sc] : scores) r.entries.push_back({s, sc, 0.0});
  std::sort(r.entries.begin(), r.entries.end(), [](const RankEntry& a, const RankEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.source < b.source;
  });
  // Runs of equal score share the mean of their 1-based positions.
  std::size_t i = 0;
  while (i < r.entries.size()) {
    std::size_t j = i;
    while (j < r.entries.size() && r.entries[j].score == r.entries[i].score) ++j;
    const double avg = (double(i + 1) + double(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) r.entries[k].rank = avg;
    i = j;
  }
  return r;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;  // degenerate vector: no similarity signal
  return num / (std::sqrt(na) * std::sqrt(nb));
}

const std::vector<double>& component_of(const emb::TaskEmbedding& e, const std::string& name) {
  auto it = e.components.find(name);
  if (it == e.components.end()) {
    throw ValidationError("embedding of '" + e.task + "' has no component '" + name + "'");
  }
  return it->second;
}

}  // namespace

Ranking rank_by_cosine(const emb::TaskEmbedding& target,
                       const std::vector<emb::TaskEmbedding>& library,
                       const std::string& component) {
  const std::vector<double>& tv = component_of(target, component);
  std::vector<std::pair<std::string, double>> scores;
  for (const auto& e : library) {
    if (e.task == target.task) continue;
    if (e.model_hash != target.model_hash) {
      throw ValidationError("embeddings of '" + e.task + "' and '" + target.task +
                            "' come from different models and are not comparable");
    }
    const std::vector<double>& sv = component_of(e, component);
    if (sv.size() != tv.size()) {
      throw DimensionError("cosine over '" + component + "'", std::to_string(tv.size()),
                           std::to_string(sv.size()));
    }
    scores.push_back({e.task, cosine(tv, sv)});
  }
  return make_ranking(target.task, scores);
}

Ranking rrf_fuse(const std::vector<Ranking>& parts) {
  if (parts.empty()) throw ValidationError("nothing to fuse");
  std::map<std::string, double> fused;
  for (const auto& e : parts[0].entries) fused[e.source] = 0.0;
  for (const auto& part : parts) {
    if (part.entries.size() != fused.size()) {
      throw ValidationError("component rankings disagree on the source set");
    }
    for (const auto& e : part.entries) {
      auto it = fused.find(e.source);
      if (it == fused.end()) {
        throw ValidationError("source '" + e.source + "' is missing from a component ranking");
      }
      it->second += 1.0 / (kRrfConstant + e.rank);
    }
  }
  std::vector<std::pair<std::string, double>> scores(fused.begin(), fused.end());
  return make_ranking(parts[0].target, scores);
}

std::vector<std::string> method_components(const std::string& method) {
  if (method == emb::kMethodTaskEmb) {
    return {"activations", "attention", "feed_forward", "layer_output", "token_embeddings"};
  }
  if (method == emb::kMethodTextEmb) return {"text"};
  if (method == kMethodTextPlusTask) {
    return {"activations", "attention", "feed_forward", "layer_output", "text",
            "token_embeddings"};
  }
  throw ValidationError("unknown ranking method '" + method + "'");
}

Ranking rank_by_embeddings(const std::string& method, const std::string& target_id,
                           const emb::EmbeddingLibrary& lib,
                           const std::vector<std::string>* candidates) {
  const std::vector<std::string> comps = method_components(method);
  // textemb rankings read the text-only embeddings; the fisher-based methods
  // read the full ones (which carry the text component too).
  const std::string file_method =
      method == emb::kMethodTextEmb ? emb::kMethodTextEmb : emb::kMethodTaskEmb;
  const emb::TaskEmbedding target = lib.load(target_id, file_method);
  std::vector<emb::TaskEmbedding> sources;
  for (const auto& le : lib.entries()) {
    if (le.method != file_method || le.task == target_id) continue;
    if (candidates &&
        std::find(candidates->begin(), candidates->end(), le.task) == candidates->end()) {
      continue;
    }
    sources.push_back(lib.load(le.task, le.method));
  }
  if (sources.empty()) {
    throw ValidationError("library has no '" + file_method + "' sources besides '" + target_id +
                          "'");
  }
  std::vector<Ranking> parts;
  parts.reserve(comps.size());
  for (const auto& c : comps) parts.push_back(rank_by_cosine(target, sources, c));
  return rrf_fuse(parts);
}

std::vector<TaskMeta> read_task_sizes(const std::string& csv_path) {
  std::istringstream in(read_file(csv_path));
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(csv_path, 1, "empty file");
  ++lineno;
  if (line != "task,class,train_size") {
    throw ParseError(csv_path, lineno, "expected header task,class,train_size");
  }
  std::vector<TaskMeta> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 3) throw ParseError(csv_path, lineno, "expected 3 fields");
    TaskMeta m;
    m.id = f[0];
    m.cls = f[1];
    try {
      m.train_size = std::stoull(f[2]);
    } catch (const std::exception&) {
      throw ParseError(csv_path, lineno, "bad train size '" + f[2] + "'");
    }
    out.push_back(m);
  }
  return out;
}

Ranking rank_by_datasize(const std::vector<TaskMeta>& candidates, const std::string& target) {
  std::vector<std::pair<std::string, double>> scores;
  for (const auto& m : candidates) {
    if (m.id == target) continue;
    scores.push_back({m.id, double(m.train_size)});
  }
  return make_ranking(target, scores);
}

std::vector<double> curve_slopes(const std::vector<double>& losses,
                                 const std::vector<double>& checkpoints, double window_frac) {
  const std::size_t n = losses.size();
  if (n < 5) throw ValidationError("loss curve too short for slope estimation");
  std::vector<double> out;
  out.reserve(checkpoints.size());
  for (double f : checkpoints) {
    if (f <= 0.0 || f >= 1.0) throw ValidationError("checkpoint fraction must be inside (0,1)");
    const long long center = std::llround(f * double(n - 1));
    const long long w = std::max<long long>(1, std::llround(window_frac * double(n)));
    const long long lo = std::max<long long>(0, center - w);
    const long long hi = std::min<long long>(static_cast<long long>(n) - 1, center + w);
    // Least-squares slope of loss vs. step index over the window.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double cnt = double(hi - lo + 1);
    for (long long i = lo; i <= hi; ++i) {
      sx += double(i);
      sy += losses[std::size_t(i)];
      sxx += double(i) * double(i);
      sxy += double(i) * losses[std::size_t(i)];
    }
    const double denom = cnt * sxx - sx * sx;
    out.push_back(denom == 0.0 ? 0.0 : (cnt * sxy - sx * sy) / denom);
  }
  return out;
}

std::vector<double> curvegrad_features(const enc::FeatureExtractor& reference,
                                       const tasks::Task& source,
                                       const transfer::TrainConfig& tc, std::size_t total_steps,
                                       std::uint64_t seed) {
  if (total_steps < 100) throw ValidationError("curve features need at least 100 steps");
  std::vector<double> losses;
  transfer::fine_tune_steps(reference, source, source.train, tc, total_steps, losses, seed);
  return curve_slopes(losses, kCurveGradCheckpoints, kCurveGradWindow);
}

Ranking rank_by_curvegrad(const std::map<std::string, std::vector<double>>& slopes,
                          const std::string& target, bool literal_descending) {
  if (slopes.empty()) throw ValidationError("no slope sets to rank");
  const std::size_t n_checkpoints = slopes.begin()->second.size();
  std::vector<Ranking> parts;
  for (std::size_t j = 0; j < n_checkpoints; ++j) {
    std::vector<std::pair<std::string, double>> scores;
    for (const auto& [src, sl] : slopes) {
      if (src == target) continue;
      if (sl.size() != n_checkpoints) {
        throw ValidationError("source '" + src + "' has a different number of slope values");
      }
      // Default: a steeper *improving* loss (more negative slope) ranks
      // higher — still-learning sources are the promising ones. The literal
      // variant orders by the raw slope value instead.
      scores.push_back({src, literal_descending ? sl[j] : -sl[j]});
    }
    parts.push_back(make_ranking(target, scores));
  }
  return rrf_fuse(parts);
}

std::vector<GoldRelevance> gold_from_matrix(const transfer::TransferMatrix& m,
                                            transfer::Regime regime) {
  const std::string want = transfer::to_string(regime);
  std::map<std::string, GoldRelevance> per_target;
  std::map<std::string, double> baselines;
  for (const auto& row : m.rows()) {
    if (row.regime != want) continue;
    if (row.source == transfer::TransferMatrix::kNoSource) {
      baselines[row.target] = row.result.mean;
    } else {
      auto& g = per_target[row.target];
      g.target = row.target;
      g.relevance[row.source] = row.result.mean;
    }
  }
  std::vector<GoldRelevance> out;
  for (auto& [target, g] : per_target) {
    auto bit = baselines.find(target);
    if (bit == baselines.end()) {
      throw ValidationError("target '" + target + "' has transfer results but no baseline row");
    }
    g.baseline = bit->second;
    if (g.baseline == 0.0) continue;  // relative gain undefined
    double best_gain = -std::numeric_limits<double>::infinity();
    for (const auto& [src, mean] : g.relevance) {
      best_gain = std::max(best_gain, (mean - g.baseline) / g.baseline);
    }
    for (const auto& [src, mean] : g.relevance) {
      if ((mean - g.baseline) / g.baseline == best_gain) g.best.push_back(src);
    }
    out.push_back(g);
  }
  return out;
}

double avg_best_source_rank(const std::vector<Ranking>& rankings,
                            const std::vector<GoldRelevance>& gold) {
  if (gold.empty()) throw ValidationError("no gold targets to evaluate");
  double total = 0.0;
  for (const auto& g : gold) {
    const Ranking* r = nullptr;
    for (const auto& cand : rankings) {
      if (cand.target == g.target) {
        r = &cand;
        break;
      }
    }
    if (!r) throw ValidationError("no ranking provided for target '" + g.target + "'");
    double sum = 0.0;
    for (const auto& b : g.best) sum += r->rank_of(b);
    total += sum / double(g.best.size());
  }
  return total / double(gold.size());
}

double dcg(const std::vector<double>& rel_in_rank_order, std::size_t p) {
  if (p > rel_in_rank_order.size()) {
    throw ValidationError("dcg cutoff exceeds the ranked list length");
  }
  double out = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    out += (std::exp2(rel_in_rank_order[i]) - 1.0) / std::log2(double(i + 2));
  }
  return out;
}

std::string to_string(RelScaling s) {
  switch (s) {
    case RelScaling::kDiv100: return "div100";
    case RelScaling::kDiv20: return "div20";
    case RelScaling::kDiv10: return "div10";
    case RelScaling::kMinMax: return "minmax";
    case RelScaling::kRaw: return "raw";
  }
  throw ValidationError("bad relevance scaling");
}

RelScaling rel_scaling_from(const std::string& s) {
  if (s == "div100") return RelScaling::kDiv100;
  if (s == "div20") return RelScaling::kDiv20;
  if (s == "div10") return RelScaling::kDiv10;
  if (s == "minmax") return RelScaling::kMinMax;
  if (s == "raw") return RelScaling::kRaw;
  throw ValidationError("unknown relevance scaling '" + s + "'");
}

namespace {

std::vector<double> scale_relevances(std::vector<double> rel, RelScaling scaling) {
  switch (scaling) {
    case RelScaling::kDiv100:
      for (double& x : rel) x /= 100.0;
      return rel;
    case RelScaling::kDiv20:
      for (double& x : rel) x /= 20.0;
      return rel;
    case RelScaling::kDiv10:
      for (double& x : rel) x /= 10.0;
      return rel;
    case RelScaling::kMinMax: {
      const auto [lo, hi] = std::minmax_element(rel.begin(), rel.end());
      const double d = *hi - *lo;
      for (double& x : rel) x = d == 0.0 ? 0.0 : (x - *lo) / d;
      return rel;
    }
    case RelScaling::kRaw:
      return rel;
  }
  throw ValidationError("bad relevance scaling");
}

}  // namespace

double ndcg(const Ranking& pred, const GoldRelevance& gold, std::size_t p, RelScaling scaling) {
  if (pred.entries.size() != gold.relevance.size()) {
    throw ValidationError("ranking for '" + pred.target + "' does not cover the gold sources");
  }
  std::vector<double> in_pred_order;
  in_pred_order.reserve(pred.entries.size());
  for (const auto& e : pred.entries) {
    auto it = gold.relevance.find(e.source);
    if (it == gold.relevance.end()) {
      throw ValidationError("ranked source '" + e.source + "' has no gold relevance");
    }
    in_pred_order.push_back(it->second);
  }
  in_pred_order = scale_relevances(std::move(in_pred_order), scaling);
  std::vector<double> ideal = in_pred_order;
  std::sort(ideal.begin(), ideal.end(), std::greater<double>());
  if (p == 0) p = in_pred_order.size();
  const double num = dcg(in_pred_order, p);
  const double den = dcg(ideal, p);
  if (den == 0.0) return 100.0;  // all relevances zero: any order is ideal
  return 100.0 * num / den;
}

json EvalReport::to_json() const {
  json j;
  j["method"] = method;
  j["scope"] = scope;
  j["regime"] = regime;
  j["rho"] = rho;
  j["ndcg"] = ndcg;
  j["targets"] = targets;
  return j;
}

AggregateCell table2_aggregate(const transfer::TransferMatrix& m, transfer::Regime regime) {
  const std::vector<GoldRelevance> gold = gold_from_matrix(m, regime);
  if (gold.empty()) {
    throw ValidationError("matrix has no usable transfer cells for regime " +
                          transfer::to_string(regime));
  }
  AggregateCell cell;
  cell.targets = gold.size();
  double sum = 0.0;
  for (const auto& g : gold) {
    double best_gain = -std::numeric_limits<double>::infinity();
    for (const auto& [src, mean] : g.relevance) {
      best_gain = std::max(best_gain, (mean - g.baseline) / g.baseline);
    }
    sum += best_gain;
    if (best_gain > 0.0) ++cell.positive_targets;
  }
  cell.mean_gain_pct = 100.0 * sum / double(gold.size());
  return cell;
}

void write_ranking_csv(const Ranking& r, const std::string& path) {
  std::string out = "target,source,score,rank\n";
  for (const auto& e : r.entries) {
    out += r.target + "," + e.source + "," + fmt_real(e.score) + "," + fmt_real(e.rank) + "\n";
  }
  atomic_write_file(path, out);
}

Ranking read_ranking_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path, 1, "empty file");
  ++lineno;
  if (line != "target,source,score,rank") {
    throw ParseError(path, lineno, "expected header target,source,score,rank");
  }
  Ranking r;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 4) throw ParseError(path, lineno, "expected 4 fields");
    if (r.entries.empty()) {
      r.target = f[0];
    } else if (r.target != f[0]) {
      throw ParseError(path, lineno, "mixed targets in one ranking file");
    }
    try {
      r.entries.push_back({f[1], std::stod(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "bad numeric field");
    }
  }
  return r;
}

}  // namespace taskemb::rank
