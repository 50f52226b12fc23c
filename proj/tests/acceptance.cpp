// Acceptance gate: exercises the toolkit end to end and prints one
// [PASS]/[FAIL] line per check. Exit code is the number of failed checks.
//
// Checks, in order:
//   1. size-heuristic mean best-source rank on the transcribed in-class
//      classification transfer table
//   2. best-gain aggregate recomputation from the transcribed tables
//   3. parameter Fisher diagonal vs an independent brute-force oracle
//   4. finite-difference sweep over every autodiff primitive
//   5. ranking-metric hand values and the random-rank expectation
//   6. sibling recovery and transfer advantage on a synthetic roster
//   7. rerun determinism of the command pipeline
//   8. force-directed layout geometry
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "taskemb/autodiff.hpp"
#include "taskemb/commands.hpp"
#include "taskemb/common.hpp"
#include "taskemb/embeddings.hpp"
#include "taskemb/encoder.hpp"
#include "taskemb/experiment.hpp"
#include "taskemb/layout.hpp"
#include "taskemb/rankeval.hpp"
#include "taskemb/tasks.hpp"
#include "taskemb/transfer.hpp"

using namespace taskemb;
using Clock = std::chrono::steady_clock;

namespace {

const std::string kSourceDir = TASKEMB_SOURCE_DIR;
const std::string kTables = kSourceDir + "/data/appendix";

int g_failures = 0;

void report(int idx, const std::string& what, bool ok, const std::string& detail) {
  std::printf("[%s] %d: %s — %s\n", ok ? "PASS" : "FAIL", idx, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("taskemb_acceptance_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- check 1
// The training-set-size heuristic, scored against the transcribed in-class
// classification Full->Full transfer table, lands a mean best-source rank of
// 3.6 within +/-0.05. The tied pair of equally scored top sources for one
// target must be handled by rank averaging for this value to come out.
void check_size_heuristic_rank() {
  bool ok = false;
  std::ostringstream detail;
  try {
    auto matrix = transfer::TransferMatrix::read_csv(kTables + "/cr_cr_full_full.csv");
    auto gold = rank::gold_from_matrix(matrix, transfer::Regime::kFullFull);
    auto metas = rank::read_task_sizes(kTables + "/task_sizes.csv");
    std::vector<rank::TaskMeta> cr;
    for (const auto& m : metas) {
      if (m.cls == "cr") cr.push_back(m);
    }
    std::vector<rank::Ranking> rankings;
    rankings.reserve(gold.size());
    for (const auto& g : gold) rankings.push_back(rank::rank_by_datasize(cr, g.target));
    const double rho = rank::avg_best_source_rank(rankings, gold);
    ok = std::abs(rho - 3.6) <= 0.05 && gold.size() == 11;
    detail << "rho=" << rho << " over " << gold.size() << " targets (reference 3.6 +/- 0.05)";
  } catch (const Error& e) {
    detail << "error: " << e.what();
  }
  report(1, "size-heuristic mean best-source rank", ok, detail.str());
}

// ---------------------------------------------------------------- check 2
// Recomputing the best-source gain aggregates from the transcribed tables
// reproduces the published cells: the classification in-class Full->Full
// aggregate at 6.3% with all 11 targets positive, and the span-extraction and
// sequence-labeling diagonal means at 9.5% and 0.5%. The transcriptions carry
// one-decimal rounding, so positive-target counts are asserted only where
// rounding cannot flip them.
void check_aggregate_recomputation() {
  bool ok = false;
  std::ostringstream detail;
  try {
    auto cr = rank::table2_aggregate(
        transfer::TransferMatrix::read_csv(kTables + "/cr_cr_full_full.csv"),
        transfer::Regime::kFullFull);
    auto qa = rank::table2_aggregate(
        transfer::TransferMatrix::read_csv(kTables + "/qa_qa_full_full.csv"),
        transfer::Regime::kFullFull);
    auto sl = rank::table2_aggregate(
        transfer::TransferMatrix::read_csv(kTables + "/sl_sl_full_full.csv"),
        transfer::Regime::kFullFull);
    const bool cr_ok = std::abs(cr.mean_gain_pct - 6.3) <= 0.1 && cr.positive_targets == 11 &&
                       cr.targets == 11;
    const bool qa_ok = std::abs(qa.mean_gain_pct - 9.5) <= 0.1;
    const bool sl_ok = std::abs(sl.mean_gain_pct - 0.5) <= 0.1;
    ok = cr_ok && qa_ok && sl_ok;
    detail << "cr " << cr.mean_gain_pct << "% (" << cr.positive_targets << "/" << cr.targets
           << " positive, reference 6.3 (11)), qa " << qa.mean_gain_pct
           << "% (reference 9.5), sl " << sl.mean_gain_pct << "% (reference 0.5)";
  } catch (const Error& e) {
    detail << "error: " << e.what();
  }
  report(2, "best-gain aggregate recomputation", ok, detail.str());
}

// ---------------------------------------------------------------- check 3
// The parameter Fisher diagonal equals a brute-force oracle that never goes
// through the embedding module's accumulation: per example it differentiates
// the model's log-likelihood directly, reads each parameter tensor's
// gradient, squares and averages them with its own component/layer
// bookkeeping.
std::map<std::string, std::vector<double>> fisher_oracle(const enc::Model& m,
                                                         const tasks::Dataset& data) {
  // component -> per-layer running sums of squared gradients over examples
  std::map<std::string, std::map<std::size_t, std::vector<double>>> sums;
  for (const auto& ex : data.examples) {
    const enc::EncodedInput in = enc::encode_input(m.extractor.config(), ex.segments);
    ad::Tensor ll = m.log_likelihood(in, ex.target);
    ad::backward(ll);
    std::map<std::string, std::map<std::size_t, std::vector<double>>> per_example;
    for (const auto& pi : m.extractor.param_infos()) {
      const std::vector<double>& g = m.extractor.param(pi.name).grad();
      auto& block = per_example[pi.component][pi.layer];
      for (double v : g) block.push_back(v * v);
    }
    for (auto& [comp, layers] : per_example) {
      for (auto& [layer, block] : layers) {
        auto& acc = sums[comp][layer];
        if (acc.empty()) acc.assign(block.size(), 0.0);
        for (std::size_t i = 0; i < block.size(); ++i) acc[i] += block[i];
      }
    }
  }
  std::map<std::string, std::vector<double>> out;
  for (auto& [comp, layers] : sums) {
    std::vector<double> mean(layers.begin()->second.size(), 0.0);
    for (auto& [layer, acc] : layers) {
      for (std::size_t i = 0; i < acc.size(); ++i) mean[i] += acc[i] / double(data.size());
    }
    for (double& v : mean) v /= double(layers.size());
    out[comp] = mean;
  }
  return out;
}

void check_fisher_oracle() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::size_t instances = 0;
  double worst = 0.0;
  std::string worst_at;
  std::ostringstream detail;
  try {
    std::mt19937_64 meta(20260822);
    const std::vector<std::string> kinds = {"cr_classify", "cr_regress", "qa_span", "sl_tag"};
    for (int inst = 0; inst < 24; ++inst) {
      enc::EncoderConfig cfg;
      cfg.vocab_size = 32 + std::uniform_int_distribution<std::size_t>(0, 8)(meta);
      cfg.d_model = 4 + 2 * std::uniform_int_distribution<std::size_t>(0, 2)(meta);
      cfg.n_layers = 1 + std::uniform_int_distribution<std::size_t>(0, 1)(meta);
      cfg.n_heads = 2;
      cfg.d_ffn = 2 * cfg.d_model;
      cfg.max_len = 24;

      tasks::FamilySpec fam;
      fam.id = "ofam";
      fam.kind = kinds[std::size_t(inst) % kinds.size()];
      fam.vocab_lo = 8;
      fam.vocab_hi = int(cfg.vocab_size);
      fam.n_labels = 3;
      fam.markers_per_label = 2;
      fam.seq_len_lo = 6;
      fam.seq_len_hi = 10;
      fam.span_len = 1;
      fam.n_keys = 4;
      const tasks::Task task =
          tasks::generate_task(fam, 0, 8 + std::size_t(inst) % 24, 4, 555 + std::uint64_t(inst));

      enc::Model m{enc::FeatureExtractor::init(cfg, derive_seed(7, "oracle-ex/" +
                                                                       std::to_string(inst))),
                   enc::Head::for_task(task, cfg.d_model,
                                       derive_seed(7, "oracle-head/" + std::to_string(inst)))};
      auto got = emb::fisher_diag_params(m, task.train);
      auto want = fisher_oracle(m, task.train);
      if (got.size() != want.size()) {
        ok = false;
        worst_at = "component sets differ";
        break;
      }
      for (const auto& [comp, v] : want) {
        const auto& g = got.at(comp);
        if (g.size() != v.size()) {
          ok = false;
          worst_at = comp + " size";
          break;
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double d = std::abs(g[i] - v[i]);
          if (d > worst) {
            worst = d;
            worst_at = comp + "[" + std::to_string(i) + "]";
          }
        }
      }
      ++instances;
    }
    const double elapsed = secs_since(t0);
    ok = ok && instances >= 20 && worst <= 1e-10 && elapsed < 60.0;
    detail << instances << " instances, worst |diff| " << worst << " at " << worst_at << ", "
           << elapsed << "s (budget 60s)";
  } catch (const Error& e) {
    ok = false;
    detail << "error: " << e.what();
  }
  report(3, "parameter Fisher vs brute-force oracle", ok, detail.str());
}

// ---------------------------------------------------------------- check 4
// Central finite differences (step 1e-5, relative error < 1e-4) confirm the
// analytic gradient of every autodiff primitive across 100 random instances.
struct FdHarness {
  static constexpr double kStep = 1e-5;
  static constexpr double kRelTol = 1e-4;
  std::size_t checked = 0;
  double worst = 0.0;

  static double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
  }

  bool check(const std::vector<ad::Tensor>& leaves, const std::function<ad::Tensor()>& forward) {
    ad::Tensor loss = forward();
    ad::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& leaf : leaves) analytic.push_back(leaf.node()->grad);
    for (std::size_t t = 0; t < leaves.size(); ++t) {
      auto& vals = const_cast<ad::Tensor&>(leaves[t]).mutable_value();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + kStep;
        const double up = forward().item();
        vals[i] = keep - kStep;
        const double dn = forward().item();
        vals[i] = keep;
        const double err = rel_err(analytic[t][i], (up - dn) / (2.0 * kStep));
        worst = std::max(worst, err);
        ++checked;
        if (err >= kRelTol) return false;
      }
    }
    return true;
  }
};

void check_gradients_sweep() {
  bool ok = true;
  FdHarness fd;
  std::ostringstream detail;
  std::mt19937_64 rng(424242);
  std::uniform_int_distribution<std::size_t> dim(1, 5), dim2(2, 6);
  auto rand_t = [&](std::size_t r, std::size_t c, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(r * c);
    for (auto& x : v) x = d(rng);
    return ad::Tensor::from(r, c, std::move(v), true);
  };
  auto wsum = [](const ad::Tensor& x, const ad::Tensor& w) {
    return ad::sum_all(ad::mul(x, w));
  };
  try {
    for (int iter = 0; iter < 100 && ok; ++iter) {
      const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
      {
        auto a = rand_t(m, k, -2, 2), b = rand_t(m, k, -2, 2), w = rand_t(m, k, -1, 1);
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::add(a, b), w); });
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::sub(a, b), w); });
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::mul(a, b), w); });
        ok = ok && fd.check({a}, [&] { return wsum(ad::scale(a, 1.7), w); });
      }
      {
        auto a = rand_t(m + 1, k, -2, 2), b = rand_t(1, k, -2, 2), w = rand_t(m + 1, k, -1, 1);
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::add(a, b), w); });  // bias row
      }
      {
        auto a = rand_t(m, k, -2, 2), b = rand_t(k, n, -2, 2), w = rand_t(m, n, -1, 1);
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::matmul(a, b), w); });
      }
      {
        auto a = rand_t(m, k, -2, 2), b = rand_t(n, k, -2, 2), w = rand_t(m, n, -1, 1);
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::matmul_nt(a, b), w); });
      }
      {
        auto a = rand_t(m, k, -2, 2), w = rand_t(k, m, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::transpose(a), w); });
      }
      {
        auto a = rand_t(m + 2, k + 2, -2, 2);
        auto wr = rand_t(m + 1, k + 2, -1, 1), wc = rand_t(m + 2, k + 1, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::slice_rows(a, 1, m + 2), wr); });
        ok = ok && fd.check({a}, [&] { return wsum(ad::slice_cols(a, 0, k + 1), wc); });
      }
      {
        auto a = rand_t(m, k, -2, 2), b = rand_t(m, n, -2, 2), w = rand_t(m, k + n, -1, 1);
        ok = ok && fd.check({a, b}, [&] { return wsum(ad::concat_cols({a, b}), w); });
      }
      {
        auto a = rand_t(m, k, -2, 2);
        ok = ok && fd.check({a}, [&] { return ad::scale(ad::sum_all(a), 0.7); });
        auto w = rand_t(1, k, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::mean_rows(a), w); });
      }
      {
        auto a = rand_t(m, dim2(rng), -2, 2);
        auto w = rand_t(a.rows(), a.cols(), -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::softmax_rows(a), w); });
        ok = ok && fd.check({a}, [&] { return wsum(ad::log_softmax_rows(a), w); });
      }
      {
        auto a = rand_t(m, k, 0.2, 3.0), w = rand_t(m, k, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::log(a), w); });
      }
      {
        auto a = rand_t(m, k, -3, 3), w = rand_t(m, k, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::gelu(a), w); });
      }
      {
        const std::size_t c = dim2(rng) + 1;
        auto a = rand_t(m, c, -2, 2), g = rand_t(1, c, 0.5, 1.5), b = rand_t(1, c, -0.5, 0.5);
        auto w = rand_t(m, c, -1, 1);
        ok = ok && fd.check({a, g, b}, [&] { return wsum(ad::layer_norm_rows(a, g, b), w); });
      }
      {
        const std::size_t V = 6;
        auto table = rand_t(V, k, -2, 2);
        std::uniform_int_distribution<int> idd(0, int(V) - 1);
        std::vector<int> ids(m + 1);
        for (auto& id : ids) id = idd(rng);
        auto w = rand_t(ids.size(), k, -1, 1);
        ok = ok && fd.check({table}, [&] { return wsum(ad::embedding_gather(table, ids), w); });
      }
      {
        auto a = rand_t(m, k, -2, 2);
        std::uniform_int_distribution<std::size_t> rr(0, m - 1), cc(0, k - 1);
        const std::size_t pr = rr(rng), pc = cc(rng);
        ok = ok && fd.check({a}, [&] { return ad::scale(ad::pick(a, pr, pc), 1.3); });
        std::vector<int> cols(m);
        std::uniform_int_distribution<int> cd(0, int(k) - 1);
        for (auto& c2 : cols) c2 = cd(rng);
        auto w = rand_t(m, 1, -1, 1);
        ok = ok && fd.check({a}, [&] { return wsum(ad::pick_rows(a, cols), w); });
      }
      {
        const std::size_t classes = dim2(rng);
        auto logits = rand_t(m, classes, -2, 2);
        std::uniform_int_distribution<std::size_t> rr(0, m - 1), tt(0, classes - 1);
        const std::size_t row = rr(rng), target = tt(rng);
        ok = ok && fd.check({logits},
                            [&] { return ad::scale(ad::nll_row(logits, row, target), 0.9); });
      }
    }
    detail << fd.checked << " gradient entries over 100 instances, worst relative error "
           << fd.worst << " (tolerance 1e-4)";
  } catch (const Error& e) {
    ok = false;
    detail << "error: " << e.what();
  }
  report(4, "finite-difference sweep over every primitive", ok, detail.str());
}

// ---------------------------------------------------------------- check 5
// Hand values for the ranking metrics, then the statistical sanity check:
// the mean rank a random permutation assigns to the gold best source over k
// sources converges to (k+1)/2.
void check_metric_units() {
  bool ok = true;
  std::ostringstream detail;
  try {
    auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

    // reciprocal-rank fusion on single- and two-element rankings
    {
      rank::Ranking one = rank::make_ranking("t", {{"a", 1.0}});
      rank::Ranking fused = rank::rrf_fuse({one});
      ok = ok && near(fused.entries[0].score, 1.0 / 61.0, 1e-6) &&
           near(fused.entries[0].score, 0.0163934, 1e-6);
      rank::Ranking two = rank::make_ranking("t", {{"a", 2.0}, {"b", 1.0}});
      rank::Ranking fused2 = rank::rrf_fuse({two, two});
      double top = 0.0;
      for (const auto& e : fused2.entries) {
        if (e.source == "a") top = e.score;
      }
      ok = ok && near(top, 2.0 / 61.0, 1e-6);
      // one ranking with ranks [1,2]: per-source scores 1/61 and 1/62
      double sum = 0.0;
      for (const auto& e : rank::rrf_fuse({two}).entries) sum += e.score;
      ok = ok && near(sum, 1.0 / 61.0 + 1.0 / 62.0, 1e-6) && near(sum, 0.0325224, 1e-6);
    }

    // discounted cumulative gain
    ok = ok && near(rank::dcg({1, 0, 0}, 3), 1.0, 1e-12);
    ok = ok && near(rank::dcg({0, 1}, 2), 1.0 / std::log2(3.0), 1e-6) &&
         near(rank::dcg({0, 1}, 2), 0.63093, 1e-5);
    ok = ok && rank::dcg({0, 0, 0}, 3) == 0.0;

    // normalized DCG: identity is exactly 100; the reversed three-level
    // example evaluates to 100 * 6.3928 / 9.3928
    {
      rank::GoldRelevance gold;
      gold.target = "t";
      gold.relevance = {{"a", 1.0}, {"b", 2.0}, {"c", 3.0}};
      gold.best = {"c"};
      rank::Ranking ideal = rank::make_ranking("t", {{"c", 3.0}, {"b", 2.0}, {"a", 1.0}});
      ok = ok && rank::ndcg(ideal, gold, 3, rank::RelScaling::kRaw) == 100.0;
      rank::Ranking reversed = rank::make_ranking("t", {{"a", 3.0}, {"b", 2.0}, {"c", 1.0}});
      const double got = rank::ndcg(reversed, gold, 3, rank::RelScaling::kRaw);
      const double pred_dcg = 1.0 + 3.0 / std::log2(3.0) + 7.0 / 2.0;
      const double ideal_dcg = 7.0 + 3.0 / std::log2(3.0) + 0.5;
      ok = ok && near(got, 100.0 * pred_dcg / ideal_dcg, 1e-6) && near(got, 68.06, 0.005);
    }

    // attraction weight from a mutual rank pair
    ok = ok && layout::pair_force(1.0, 1.0) == 2.0;
    ok = ok && near(layout::pair_force(2.0, 3.0), 5.0 / 6.0, 1e-6) &&
         near(layout::pair_force(2.0, 3.0), 0.8333, 5e-5);
    ok = ok && layout::pair_force(2.0, 3.0) == layout::pair_force(3.0, 2.0);

    // random-permutation expectation of the best-source rank
    const std::size_t k = 10;
    std::mt19937_64 rng(98765);
    std::vector<std::string> sources;
    for (std::size_t i = 0; i < k; ++i) sources.push_back("s" + std::to_string(i));
    rank::GoldRelevance gold;
    gold.target = "t";
    for (const auto& s : sources) gold.relevance[s] = 1.0;
    gold.relevance["s0"] = 2.0;
    gold.best = {"s0"};
    double acc = 0.0;
    const int shuffles = 10000;
    for (int i = 0; i < shuffles; ++i) {
      std::vector<std::pair<std::string, double>> scores;
      std::vector<std::string> perm = sources;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t j = 0; j < perm.size(); ++j) {
        scores.push_back({perm[j], double(k - j)});
      }
      acc += rank::avg_best_source_rank({rank::make_ranking("t", scores)}, {gold});
    }
    const double mean_rank = acc / shuffles;
    const double expect = (double(k) + 1.0) / 2.0;
    ok = ok && std::abs(mean_rank - expect) <= 0.02 * expect;
    detail << "hand values reproduced; random-rank mean " << mean_rank << " vs " << expect
           << " +/- 2%";
  } catch (const Error& e) {
    ok = false;
    detail << "error: " << e.what();
  }
  report(5, "ranking-metric hand values and rank expectation", ok, detail.str());
}

// ---------------------------------------------------------------- check 6
// The controlled transferability property on a synthetic roster of four task
// families with two sibling tasks each. Per seeded trial: pretrain a
// reference, embed every task, and demand (a) the fused squared-gradient
// ranking puts the target's sibling first, and (b) two-stage transfer from
// the sibling beats transfer from a random unrelated source on the mean
// limited-regime target score. Both must hold in >= 80% of 20 trials.
exp::ExperimentConfig sibling_cfg(std::uint64_t master_seed) {
  exp::ExperimentConfig cfg = exp::ExperimentConfig::desk_default();
  // Family hardness is tuned so every task trains into the informative
  // mid-accuracy band: label noise keeps the classification gradients alive,
  // distinct sequence-length bands give each family a positional signature,
  // and the span family carries enough keys that limited data stays short.
  cfg.families[0].seq_len_lo = 8;
  cfg.families[0].seq_len_hi = 12;
  cfg.families[0].noise = 0.06;
  cfg.families[1].seq_len_lo = 13;
  cfg.families[1].seq_len_hi = 18;
  cfg.families[1].n_labels = 3;
  cfg.families[1].markers_per_label = 6;
  cfg.families[1].noise = 0.06;
  cfg.families[2].seq_len_lo = 14;
  cfg.families[2].seq_len_hi = 22;
  cfg.families[2].vocab_hi = 200;
  cfg.families[2].n_keys = 32;
  cfg.families[2].span_len = 2;
  cfg.families[3].vocab_lo = 200;
  cfg.families[3].vocab_hi = 256;
  cfg.families[3].seq_len_lo = 19;
  cfg.families[3].seq_len_hi = 26;
  cfg.families[3].n_labels = 5;
  cfg.families[3].markers_per_label = 8;
  cfg.n_train = 256;
  cfg.n_dev = 64;
  cfg.pretrain_sequences = 192;
  cfg.pretrain.steps = 800;
  cfg.embedding.train.lr = 0.03;
  cfg.embedding.train.batch_size = 8;
  cfg.embedding.train.epochs = 5;
  cfg.embedding.train.epochs_sl = 12;
  cfg.embedding.fisher_mode = "sampled";
  cfg.embedding.fisher_samples = 3;
  cfg.transfer_opts.limited_size = 64;
  cfg.transfer_opts.restarts = 5;
  cfg.transfer_opts.workers = 4;
  cfg.transfer_opts.train.lr = 0.03;
  cfg.transfer_opts.train.batch_size = 8;
  cfg.transfer_opts.train.epochs = 6;
  cfg.transfer_opts.train.epochs_sl = 12;
  cfg.master_seed = master_seed;
  return cfg;
}

void check_sibling_transfer() {
  const auto t0 = Clock::now();
  bool ok = false;
  std::ostringstream detail;
  const int kTrials = 20;
  int top_hits = 0, transfer_hits = 0;
  try {
    for (int trial = 0; trial < kTrials; ++trial) {
      exp::ExperimentConfig cfg = sibling_cfg(9000 + std::uint64_t(trial));
      auto corpus = cfg.make_corpus();
      enc::Model ref = enc::pretrain_reference_model(cfg.encoder, corpus, cfg.pretrain,
                                                     derive_seed(cfg.master_seed, "pretrain"));
      std::vector<tasks::Task> roster = cfg.make_roster();

      std::vector<emb::TaskEmbedding> lib;
      lib.reserve(roster.size());
      for (const auto& t : roster) {
        lib.push_back(emb::task_emb(ref.extractor, t, cfg.embedding, cfg.master_seed));
      }

      const tasks::Task& target = roster[std::size_t(trial) % roster.size()];
      const tasks::Task* sibling = nullptr;
      std::vector<const tasks::Task*> unrelated;
      for (const auto& t : roster) {
        if (t.id == target.id) continue;
        if (t.family == target.family) sibling = &t;
        else unrelated.push_back(&t);
      }

      const emb::TaskEmbedding* target_emb = nullptr;
      std::vector<emb::TaskEmbedding> sources;
      for (const auto& e : lib) {
        if (e.task == target.id) target_emb = &e;
        else sources.push_back(e);
      }
      std::vector<rank::Ranking> parts;
      for (const auto& comp : rank::method_components(emb::kMethodTaskEmb)) {
        parts.push_back(rank::rank_by_cosine(*target_emb, sources, comp));
      }
      const rank::Ranking fused = rank::rrf_fuse(parts);
      const bool top = fused.rank_of(sibling->id) == 1.0;
      if (top) ++top_hits;

      std::mt19937_64 pick = make_rng(cfg.master_seed, "unrelated-pick");
      const tasks::Task* random_unrelated = unrelated[std::uniform_int_distribution<std::size_t>(
          0, unrelated.size() - 1)(pick)];
      const std::uint64_t mseed = derive_seed(cfg.master_seed, "matrix");
      auto from_sibling = transfer::run_cell(ref.extractor, sibling, target,
                                             transfer::Regime::kLimitedLimited,
                                             cfg.transfer_opts, mseed);
      auto from_random = transfer::run_cell(ref.extractor, random_unrelated, target,
                                            transfer::Regime::kLimitedLimited,
                                            cfg.transfer_opts, mseed);
      const bool better = from_sibling.mean > from_random.mean;
      if (better) ++transfer_hits;

      std::printf("  trial %2d target %-8s sibling-rank %.1f%s from-sibling %6.2f "
                  "from-%s %6.2f%s\n",
                  trial, target.id.c_str(), fused.rank_of(sibling->id), top ? "" : " (miss)",
                  from_sibling.mean, random_unrelated->id.c_str(), from_random.mean,
                  better ? "" : " (miss)");
      std::fflush(stdout);
    }
    const double elapsed = secs_since(t0);
    const int need = (kTrials * 8 + 9) / 10;  // >= 80%
    ok = top_hits >= need && transfer_hits >= need && elapsed < 1800.0;
    detail << "sibling top-ranked " << top_hits << "/" << kTrials << ", sibling transfer ahead "
           << transfer_hits << "/" << kTrials << " (need " << need << "), " << int(elapsed)
           << "s (budget 1800s)";
  } catch (const Error& e) {
    detail << "error: " << e.what();
  }
  report(6, "sibling recovery and transfer advantage", ok, detail.str());
}

// ---------------------------------------------------------------- check 7
// Running the command pipeline twice from scratch with the same configuration
// and seed yields byte-identical scientific artifacts; the output location
// must not leak into them.
void check_rerun_determinism() {
  bool ok = false;
  std::ostringstream detail;
  try {
    const auto base = fresh_dir("determinism");
    exp::ExperimentConfig cfg = exp::ExperimentConfig::desk_default();
    cfg.encoder.vocab_size = 72;
    cfg.encoder.d_model = 8;
    cfg.encoder.n_layers = 2;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ffn = 16;
    cfg.encoder.max_len = 32;
    tasks::FamilySpec fa = cfg.families[0];
    fa.vocab_lo = 16;
    fa.vocab_hi = 40;
    fa.seq_len_lo = 8;
    fa.seq_len_hi = 14;
    tasks::FamilySpec fb = cfg.families[1];
    fb.vocab_lo = 40;
    fb.vocab_hi = 64;
    fb.n_labels = 2;
    fb.seq_len_lo = 8;
    fb.seq_len_hi = 14;
    cfg.families = {fa, fb};
    cfg.n_train = 48;
    cfg.n_dev = 16;
    cfg.pretrain.steps = 60;
    cfg.pretrain_sequences = 64;
    cfg.pretrain_max_tokens = 12;
    cfg.transfer_opts.limited_size = 32;
    cfg.transfer_opts.restarts = 2;
    cfg.transfer_opts.workers = 2;
    cfg.transfer_opts.train.epochs = 2;
    cfg.transfer_opts.train.epochs_sl = 3;
    cfg.master_seed = 5;

    auto run_flow = [&](const std::string& root) {
      cfg.out_root = root;
      const std::string cfg_path = root + ".config.json";
      atomic_write_file(cfg_path, cfg.to_json().dump(2) + "\n");
      std::vector<std::vector<std::string>> cmds = {
          {"pretrain", "--config", cfg_path, "--out", root},
          {"gen-tasks", "--config", cfg_path, "--out", root},
          {"embed", "--config", cfg_path, "--out", root},
          {"rank", "--config", cfg_path, "--out", root, "--method", "taskemb", "--target",
           "fam_a_0"},
      };
      for (auto& c : cmds) {
        if (cli::run_cli(c) != 0) throw ValidationError("pipeline command failed");
      }
    };
    run_flow((base / "a").string());
    run_flow((base / "b").string());

    const std::vector<std::string> artifacts = {
        "/reference.json",
        "/tasks/sizes.csv",
        "/tasks/fam_a_0/train.jsonl",
        "/library/index.json",
        "/library/fam_a_0.taskemb.json",
        "/library/fam_b_1.textemb.json",
        "/rankings/taskemb/fam_a_0.csv",
    };
    ok = true;
    std::string first_diff;
    for (const auto& rel : artifacts) {
      const std::string ha = exp::file_hash((base / "a").string() + rel);
      const std::string hb = exp::file_hash((base / "b").string() + rel);
      if (ha != hb) {
        ok = false;
        first_diff = rel;
        break;
      }
    }
    detail << artifacts.size() << " artifacts compared across independent reruns";
    if (!ok) detail << "; first difference at " << first_diff;
    std::filesystem::remove_all(base);
  } catch (const Error& e) {
    ok = false;
    detail << "error: " << e.what();
  }
  report(7, "rerun determinism of the pipeline", ok, detail.str());
}

// ---------------------------------------------------------------- check 8
// Layout geometry: three equally attracted nodes settle into an equilateral
// shape (pairwise distances within 2%), and in the two-node system a larger
// attraction weight gives a strictly shorter equilibrium distance.
void check_layout_geometry() {
  bool ok = false;
  std::ostringstream detail;
  try {
    auto dist = [](const layout::Point& a, const layout::Point& b) {
      return std::hypot(a.x - b.x, a.y - b.y);
    };

    layout::TaskGraph tri;
    tri.nodes = {"a", "b", "c"};
    tri.set_weight("a", "b", 1.5);
    tri.set_weight("a", "c", 1.5);
    tri.set_weight("b", "c", 1.5);
    tri.params.seed = 31;
    auto pts = layout::fr_layout(tri);
    const double d01 = dist(pts[0], pts[1]);
    const double d02 = dist(pts[0], pts[2]);
    const double d12 = dist(pts[1], pts[2]);
    const double hi = std::max({d01, d02, d12});
    const double lo = std::min({d01, d02, d12});
    const bool equilateral = hi / lo < 1.02;

    auto two_node_distance = [&](double w) {
      layout::TaskGraph g;
      g.nodes = {"a", "b"};
      g.set_weight("a", "b", w);
      g.params.seed = 77;
      auto p = layout::fr_layout(g);
      return dist(p[0], p[1]);
    };
    const double d_strong = two_node_distance(layout::pair_force(1.0, 1.0));  // 2.0
    const double d_weak = two_node_distance(layout::pair_force(2.0, 4.0));    // 0.75
    const bool monotone = d_strong < d_weak;

    ok = equilateral && monotone;
    detail << "triangle spread " << hi / lo << " (< 1.02), two-node distances " << d_strong
           << " (strong) vs " << d_weak << " (weak)";
  } catch (const Error& e) {
    detail << "error: " << e.what();
  }
  report(8, "force-directed layout geometry", ok, detail.str());
}

}  // namespace

int main(int argc, char** argv) {
  // Optional argument: a string of check digits to run (default: all 8).
  const std::string which = argc > 1 ? argv[1] : "12345678";
  const auto t0 = Clock::now();
  int ran = 0;
  const std::pair<char, void (*)()> checks[] = {
      {'1', check_size_heuristic_rank}, {'2', check_aggregate_recomputation},
      {'3', check_fisher_oracle},       {'4', check_gradients_sweep},
      {'5', check_metric_units},        {'6', check_sibling_transfer},
      {'7', check_rerun_determinism},   {'8', check_layout_geometry},
  };
  for (const auto& [digit, fn] : checks) {
    if (which.find(digit) != std::string::npos) {
      fn();
      ++ran;
    }
  }
  std::printf("%d/%d checks passed in %.0fs\n", ran - g_failures, ran, secs_since(t0));
  return g_failures == 0 ? 0 : 1;
}
