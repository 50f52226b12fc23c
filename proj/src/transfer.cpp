#include "taskemb/transfer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "taskemb/common.hpp"

namespace taskemb::transfer {

using nlohmann::json;

std::string to_string(Regime r) {
  switch (r) {
    case Regime::kFullFull: return "full-full";
    case Regime::kFullLimited: return "full-limited";
    case Regime::kLimitedLimited: return "limited-limited";
  }
  throw ValidationError("bad regime");
}

Regime regime_from(const std::string& s) {
  if (s == "full-full") return Regime::kFullFull;
  if (s == "full-limited") return Regime::kFullLimited;
  if (s == "limited-limited") return Regime::kLimitedLimited;
  throw ValidationError("unknown regime '" + s + "'");
}

namespace {

bool limited_source(Regime r) { return r == Regime::kLimitedLimited; }
bool limited_target(Regime r) { return r != Regime::kFullFull; }

// Accumulate one example's gradient contribution into flat buffers.
void accumulate(const std::vector<ad::Tensor>& params, std::vector<std::vector<double>>& acc) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& g = params[p].grad();
    if (g.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) acc[p][i] += g[i];
  }
}

void sgd_step(std::vector<ad::Tensor>& params, const std::vector<std::vector<double>>& acc,
              double lr, double inv_batch) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& v = params[p].mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * inv_batch * acc[p][i];
  }
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / double(xs.size() - 1));
}

std::string cell_key(const std::string& regime, const std::string& source,
                     const std::string& target) {
  return regime + "\x1f" + source + "\x1f" + target;
}

}  // namespace

namespace {

// Shared SGD engine. Runs shuffled epochs; stops after `max_epochs` full
// epochs, or after `max_steps` batch updates when max_steps > 0 (cycling
// epochs as needed). Records each batch's mean per-example loss when asked.
enc::Model run_sgd(const enc::FeatureExtractor& start, const tasks::Task& task,
                   const tasks::Dataset& train_data, const TrainConfig& tc, std::uint64_t seed,
                   std::size_t max_epochs, std::size_t max_steps,
                   std::vector<double>* loss_log) {
  if (train_data.examples.empty()) throw ValidationError("fine_tune: empty training set");
  enc::Model m{start.clone(),
               enc::Head::for_task(task, start.config().d_model, derive_seed(seed, "head"))};

  std::vector<ad::Tensor> trainable = m.head->params();
  if (!tc.frozen_extractor) {
    for (const auto& p : m.extractor.params()) trainable.push_back(p);
  }
  std::vector<std::vector<double>> acc(trainable.size());
  for (std::size_t p = 0; p < trainable.size(); ++p) acc[p].assign(trainable[p].size(), 0.0);

  std::vector<enc::EncodedInput> encoded;
  encoded.reserve(train_data.size());
  for (const auto& e : train_data.examples) {
    encoded.push_back(enc::encode_input(start.config(), e.segments));
  }

  auto rng = make_rng(seed, "sgd");
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t steps = 0;
  for (std::size_t ep = 0; ep < max_epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + tc.batch_size);
      for (auto& buf : acc) std::fill(buf.begin(), buf.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& ex = train_data.examples[order[i]];
        // Per-position normalization keeps one learning rate workable across
        // heads: a tagger's joint log-likelihood sums over every token, so
        // unnormalized steps would be an order of magnitude hotter there.
        const auto* tags = std::get_if<std::vector<int>>(&ex.target);
        const double units = tags && !tags->empty() ? double(tags->size()) : 1.0;
        ad::Tensor loss = ad::scale(m.log_likelihood(encoded[order[i]], ex.target), -1.0 / units);
        if (!std::isfinite(loss.item())) {
          throw Error("fine-tuning diverged: non-finite loss on task " + task.id + " epoch " +
                      std::to_string(ep));
        }
        ad::backward(loss);
        accumulate(trainable, acc);
        batch_loss += loss.item();
      }
      sgd_step(trainable, acc, tc.lr, 1.0 / double(b1 - b0));
      if (loss_log) loss_log->push_back(batch_loss / double(b1 - b0));
      if (max_steps > 0 && ++steps >= max_steps) return m;
    }
  }
  return m;
}

}  // namespace

enc::Model fine_tune(const enc::FeatureExtractor& start, const tasks::Task& task,
                     const tasks::Dataset& train_data, const TrainConfig& tc,
                     std::uint64_t seed) {
  return run_sgd(start, task, train_data, tc, seed, tc.epochs_for(task.cls), 0, nullptr);
}

enc::Model fine_tune_steps(const enc::FeatureExtractor& start, const tasks::Task& task,
                           const tasks::Dataset& train_data, const TrainConfig& tc,
                           std::size_t steps, std::vector<double>& loss_log,
                           std::uint64_t seed) {
  if (steps == 0) throw ValidationError("fine_tune_steps: need at least one step");
  loss_log.clear();
  return run_sgd(start, task, train_data, tc, seed, std::size_t(-1), steps, &loss_log);
}

double evaluate(const enc::Model& m, const tasks::Task& task) {
  if (task.dev.examples.empty()) throw ValidationError("evaluate: empty dev set");
  std::vector<tasks::Target> gold, pred;
  gold.reserve(task.dev.size());
  pred.reserve(task.dev.size());
  for (const auto& e : task.dev.examples) {
    gold.push_back(e.target);
    pred.push_back(m.predict(enc::encode_input(m.extractor.config(), e.segments)));
  }
  return tasks::evaluate_metric(task.metric, gold, pred);
}

namespace {

// Stage-1 adaptation depends only on (regime, source, restart); the matrix
// runner computes each one once and shares it across targets.
enc::FeatureExtractor stage1_extractor(const enc::FeatureExtractor& reference,
                                       const tasks::Task& source, Regime regime,
                                       const TransferOptions& opts, std::uint64_t master_seed,
                                       std::size_t restart) {
  const std::string rname = to_string(regime);
  tasks::Dataset data = source.train;
  if (limited_source(regime)) {
    data = tasks::resample(
        source.train, opts.limited_size,
        derive_seed(master_seed,
                    "resample/" + rname + "/" + source.id + "/" + std::to_string(restart)));
  }
  enc::Model m = fine_tune(
      reference, source, data, opts.train,
      derive_seed(master_seed,
                  "stage1/" + rname + "/" + source.id + "/" + std::to_string(restart)));
  return m.extractor;  // the source head is discarded
}

double stage2_score(const enc::FeatureExtractor& start, const tasks::Task& target, Regime regime,
                    const TransferOptions& opts, std::uint64_t master_seed, std::size_t restart) {
  const std::string rname = to_string(regime);
  tasks::Dataset data = target.train;
  if (limited_target(regime)) {
    data = tasks::resample(
        target.train, opts.limited_size,
        derive_seed(master_seed,
                    "resample/" + rname + "/" + target.id + "/" + std::to_string(restart)));
  }
  // Seeds are keyed by (regime, target, restart) only, never by source: every
  // source — and the target-only baseline — sees the identical paired target
  // subsets, head init, and batch order. Only the starting extractor differs.
  enc::Model m = fine_tune(start, target, data, opts.train,
                           derive_seed(master_seed, "stage2/" + rname + "/" + target.id + "/" +
                                                        std::to_string(restart)));
  return evaluate(m, target);
}

}  // namespace

CellResult run_cell(const enc::FeatureExtractor& reference, const tasks::Task* source,
                    const tasks::Task& target, Regime regime, const TransferOptions& opts,
                    std::uint64_t master_seed) {
  const std::size_t restarts = regime == Regime::kFullFull ? 1 : std::max<std::size_t>(1, opts.restarts);
  CellResult out;
  out.restarts = restarts;
  for (std::size_t r = 0; r < restarts; ++r) {
    double score;
    if (source == nullptr) {
      score = stage2_score(reference, target, regime, opts, master_seed, r);
    } else {
      enc::FeatureExtractor adapted =
          stage1_extractor(reference, *source, regime, opts, master_seed, r);
      score = stage2_score(adapted, target, regime, opts, master_seed, r);
    }
    out.scores.push_back(score);
  }
  out.mean = std::accumulate(out.scores.begin(), out.scores.end(), 0.0) / double(restarts);
  out.stddev = sample_std(out.scores, out.mean);
  return out;
}

void TransferMatrix::set(Regime r, const std::string& source, const std::string& target,
                         CellResult res) {
  const std::string key = cell_key(to_string(r), source, target);
  cells_[key] = Row{to_string(r), source, target, std::move(res)};
}

const CellResult* TransferMatrix::find(Regime r, const std::string& source,
                                       const std::string& target) const {
  auto it = cells_.find(cell_key(to_string(r), source, target));
  return it == cells_.end() ? nullptr : &it->second.result;
}

std::vector<TransferMatrix::Row> TransferMatrix::rows() const {
  std::vector<Row> out;
  out.reserve(cells_.size());
  for (const auto& [k, row] : cells_) out.push_back(row);
  return out;
}

void TransferMatrix::write_csv(const std::string& path) const {
  std::ostringstream os;
  os << "regime,source,target,mean,std,restarts\n";
  for (const auto& [k, row] : cells_) {
    os << row.regime << ',' << row.source << ',' << row.target << ',' << fmt_real(row.result.mean)
       << ',' << fmt_real(row.result.stddev) << ',' << row.result.restarts << '\n';
  }
  atomic_write_file(path, os.str());
}

TransferMatrix TransferMatrix::read_csv(const std::string& path) {
  TransferMatrix out;
  std::istringstream is(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != "regime,source,target,mean,std,restarts") {
        throw ParseError(path, 1, "unexpected transfer CSV header");
      }
      continue;
    }
    const auto parts = split(line, ',');
    if (parts.size() != 6) throw ParseError(path, lineno, "expected 6 fields");
    try {
      CellResult res;
      res.mean = std::stod(parts[3]);
      res.stddev = std::stod(parts[4]);
      res.restarts = std::stoul(parts[5]);
      out.set(regime_from(parts[0]), parts[1], parts[2], std::move(res));
    } catch (const std::invalid_argument&) {
      throw ParseError(path, lineno, "bad numeric field");
    }
  }
  return out;
}

void TransferMatrix::merge(const TransferMatrix& other) {
  for (const auto& [key, row] : other.cells_) {
    auto it = cells_.find(key);
    if (it == cells_.end()) {
      cells_.emplace(key, row);
      continue;
    }
    const auto& a = it->second.result;
    const auto& b = row.result;
    if (a.mean != b.mean || a.stddev != b.stddev || a.restarts != b.restarts) {
      throw ValidationError("conflicting duplicate cell " + row.regime + " " + row.source +
                            "->" + row.target);
    }
  }
}

TransferMatrix run_matrix(const enc::FeatureExtractor& reference,
                          const std::vector<tasks::Task>& roster,
                          const std::vector<Regime>& regimes, const TransferOptions& opts,
                          std::uint64_t master_seed, const std::string& journal_path) {
  if (roster.empty()) throw ValidationError("run_matrix: empty task roster");
  TransferMatrix matrix;
  std::mutex mu;

  // Resume: already-journaled cells are trusted and skipped.
  if (!journal_path.empty() && std::filesystem::exists(journal_path)) {
    std::istringstream is(read_file(journal_path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError(journal_path, lineno, e.what());
      }
      CellResult res;
      res.mean = j.at("mean").get<double>();
      res.stddev = j.at("std").get<double>();
      res.restarts = j.at("restarts").get<std::size_t>();
      res.scores = j.value("scores", std::vector<double>{});
      matrix.set(regime_from(j.at("regime").get<std::string>()),
                 j.at("source").get<std::string>(), j.at("target").get<std::string>(),
                 std::move(res));
    }
  }

  struct Cell {
    Regime regime;
    const tasks::Task* source;  // null for baseline
    const tasks::Task* target;
  };
  std::vector<Cell> todo;
  for (Regime r : regimes) {
    for (const auto& tgt : roster) {
      if (!matrix.find(r, TransferMatrix::kNoSource, tgt.id)) todo.push_back({r, nullptr, &tgt});
      for (const auto& src : roster) {
        if (src.id == tgt.id) continue;
        if (!matrix.find(r, src.id, tgt.id)) todo.push_back({r, &src, &tgt});
      }
    }
  }

  // Stage-1 extractors shared across targets: compute each needed
  // (regime, source, restart) combination once.
  std::map<std::string, std::size_t> stage1_restarts;
  for (const auto& c : todo) {
    if (!c.source) continue;
    const std::size_t n = c.regime == Regime::kFullFull ? 1 : std::max<std::size_t>(1, opts.restarts);
    auto& cur = stage1_restarts[to_string(c.regime) + "\x1f" + c.source->id];
    cur = std::max(cur, n);
  }
  struct Stage1Job {
    Regime regime;
    const tasks::Task* source;
    std::size_t restart;
    std::string key;
  };
  std::vector<Stage1Job> stage1_jobs;
  for (Regime r : regimes) {
    for (const auto& src : roster) {
      auto it = stage1_restarts.find(to_string(r) + "\x1f" + src.id);
      if (it == stage1_restarts.end()) continue;
      for (std::size_t k = 0; k < it->second; ++k) {
        stage1_jobs.push_back(
            {r, &src, k, to_string(r) + "\x1f" + src.id + "\x1f" + std::to_string(k)});
      }
    }
  }
  std::map<std::string, enc::FeatureExtractor> stage1_cache;
  const std::size_t workers = std::max<std::size_t>(1, opts.workers);
  {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= stage1_jobs.size()) return;
        const auto& job = stage1_jobs[i];
        enc::FeatureExtractor fe =
            stage1_extractor(reference, *job.source, job.regime, opts, master_seed, job.restart);
        std::lock_guard<std::mutex> lock(mu);
        stage1_cache.emplace(job.key, std::move(fe));
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }

  std::ofstream journal;
  if (!journal_path.empty()) {
    std::filesystem::create_directories(std::filesystem::path(journal_path).parent_path());
    journal.open(journal_path, std::ios::app);
    if (!journal) throw IoError("cannot open journal " + journal_path);
  }

  {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= todo.size()) return;
        const auto& c = todo[i];
        const std::size_t restarts =
            c.regime == Regime::kFullFull ? 1 : std::max<std::size_t>(1, opts.restarts);
        CellResult res;
        res.restarts = restarts;
        const std::string src_label = c.source ? c.source->id : TransferMatrix::kNoSource;
        for (std::size_t r = 0; r < restarts; ++r) {
          const enc::FeatureExtractor* start = &reference;
          if (c.source) {
            start = &stage1_cache.at(to_string(c.regime) + "\x1f" + c.source->id + "\x1f" +
                                     std::to_string(r));
          }
          res.scores.push_back(
              stage2_score(*start, *c.target, c.regime, opts, master_seed, r));
        }
        res.mean =
            std::accumulate(res.scores.begin(), res.scores.end(), 0.0) / double(restarts);
        res.stddev = sample_std(res.scores, res.mean);

        std::lock_guard<std::mutex> lock(mu);
        if (journal.is_open()) {
          json j{{"regime", to_string(c.regime)}, {"source", src_label},
                 {"target", c.target->id},       {"mean", res.mean},
                 {"std", res.stddev},            {"restarts", res.restarts},
                 {"scores", res.scores}};
          journal << j.dump() << '\n' << std::flush;
        }
        matrix.set(c.regime, src_label, c.target->id, std::move(res));
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }
  return matrix;
}

}  // namespace taskemb::transfer
