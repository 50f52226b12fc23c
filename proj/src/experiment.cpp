#include "taskemb/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "taskemb/common.hpp"

namespace taskemb::exp {

using nlohmann::json;

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;

  tasks::FamilySpec fam_a;
  fam_a.id = "fam_a";
  fam_a.kind = "cr_classify";
  fam_a.vocab_lo = 16;
  fam_a.vocab_hi = 64;
  fam_a.n_labels = 3;

  tasks::FamilySpec fam_b;
  fam_b.id = "fam_b";
  fam_b.kind = "cr_classify";
  fam_b.vocab_lo = 64;
  fam_b.vocab_hi = 112;
  fam_b.n_labels = 2;

  tasks::FamilySpec fam_c;
  fam_c.id = "fam_c";
  fam_c.kind = "qa_span";
  fam_c.vocab_lo = 112;
  fam_c.vocab_hi = 176;

  tasks::FamilySpec fam_d;
  fam_d.id = "fam_d";
  fam_d.kind = "sl_tag";
  fam_d.vocab_lo = 176;
  fam_d.vocab_hi = 232;
  fam_d.n_labels = 3;

  c.families = {fam_a, fam_b, fam_c, fam_d};
  c.transfer_opts.workers = 4;
  return c;
}

void ExperimentConfig::validate() const {
  encoder.validate();
  if (families.empty()) throw ValidationError("experiment: empty family roster");
  for (const auto& f : families) f.validate();
  if (siblings_per_family < 1) {
    throw ValidationError("experiment: siblings_per_family must be >= 1");
  }
  if (n_train == 0 || n_dev == 0) {
    throw ValidationError("experiment: n_train and n_dev must be positive");
  }
  if (regimes.empty()) throw ValidationError("experiment: no regimes configured");
  if (pretrain_sequences == 0 || pretrain_max_tokens == 0) {
    throw ValidationError("experiment: pretraining corpus must be non-empty");
  }
  embedding.validate();
  (void)rank::method_components(method);  // rejects unknown embedding methods
  if (curvegrad_steps < 100) {
    throw ValidationError("experiment: curvegrad_steps must be >= 100");
  }
  if (out_root.empty()) throw ValidationError("experiment: out_root must be set");
}

json ExperimentConfig::to_json() const {
  json j;
  j["encoder"] = encoder.to_json();
  json fams = json::array();
  for (const auto& f : families) fams.push_back(f.to_json());
  j["families"] = fams;
  j["siblings_per_family"] = siblings_per_family;
  j["n_train"] = n_train;
  j["n_dev"] = n_dev;
  j["pretrain"] = {{"steps", pretrain.steps},
                   {"lr", pretrain.lr},
                   {"mask_prob", pretrain.mask_prob},
                   {"sequences", pretrain_sequences},
                   {"max_tokens", pretrain_max_tokens}};
  json regs = json::array();
  for (auto r : regimes) regs.push_back(transfer::to_string(r));
  j["regimes"] = regs;
  j["transfer"] = {{"limited_size", transfer_opts.limited_size},
                   {"restarts", transfer_opts.restarts},
                   {"workers", transfer_opts.workers},
                   {"train",
                    {{"lr", transfer_opts.train.lr},
                     {"batch_size", transfer_opts.train.batch_size},
                     {"epochs", transfer_opts.train.epochs},
                     {"epochs_sl", transfer_opts.train.epochs_sl}}}};
  j["embedding"] = embedding.to_json();
  j["method"] = method;
  j["curvegrad_steps"] = curvegrad_steps;
  j["master_seed"] = master_seed;
  j["out_root"] = out_root;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.encoder = enc::EncoderConfig::from_json(j.at("encoder"));
  c.families.clear();
  for (const auto& f : j.at("families")) c.families.push_back(tasks::FamilySpec::from_json(f));
  c.siblings_per_family = j.at("siblings_per_family").get<int>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_dev = j.at("n_dev").get<std::size_t>();
  const json& p = j.at("pretrain");
  c.pretrain.steps = p.at("steps").get<std::size_t>();
  c.pretrain.lr = p.at("lr").get<double>();
  c.pretrain.mask_prob = p.at("mask_prob").get<double>();
  c.pretrain_sequences = p.at("sequences").get<std::size_t>();
  c.pretrain_max_tokens = p.at("max_tokens").get<std::size_t>();
  c.regimes.clear();
  for (const auto& r : j.at("regimes")) {
    c.regimes.push_back(transfer::regime_from(r.get<std::string>()));
  }
  const json& t = j.at("transfer");
  c.transfer_opts.limited_size = t.at("limited_size").get<std::size_t>();
  c.transfer_opts.restarts = t.at("restarts").get<std::size_t>();
  c.transfer_opts.workers = t.at("workers").get<std::size_t>();
  const json& tr = t.at("train");
  c.transfer_opts.train.lr = tr.at("lr").get<double>();
  c.transfer_opts.train.batch_size = tr.at("batch_size").get<std::size_t>();
  c.transfer_opts.train.epochs = tr.at("epochs").get<std::size_t>();
  c.transfer_opts.train.epochs_sl = tr.at("epochs_sl").get<std::size_t>();
  c.embedding = emb::EmbeddingConfig::from_json(j.at("embedding"));
  c.method = j.at("method").get<std::string>();
  c.curvegrad_steps = j.at("curvegrad_steps").get<std::size_t>();
  c.master_seed = j.at("master_seed").get<std::uint64_t>();
  c.out_root = j.at("out_root").get<std::string>();
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

std::vector<std::vector<int>> ExperimentConfig::make_corpus() const {
  return tasks::pretrain_corpus(families, pretrain_sequences, pretrain_max_tokens,
                                derive_seed(master_seed, "corpus"));
}

std::vector<tasks::Task> ExperimentConfig::make_roster() const {
  std::vector<tasks::Task> roster;
  const std::uint64_t seed = derive_seed(master_seed, "tasks");
  for (const auto& fam : families) {
    for (int s = 0; s < siblings_per_family; ++s) {
      roster.push_back(tasks::generate_task(fam, s, n_train, n_dev, seed));
    }
  }
  return roster;
}

std::string file_hash(const std::string& path) {
  const std::string bytes = read_file(path);
  return hex64(fnv1a64(bytes));
}

void record_artifact(const Paths& p, const ExperimentConfig& cfg, const std::string& rel_path) {
  json manifest;
  if (std::filesystem::exists(p.manifest_json())) {
    try {
      manifest = json::parse(read_file(p.manifest_json()));
    } catch (const json::exception& e) {
      throw ParseError(p.manifest_json(), 0, e.what());
    }
  } else {
    manifest = json::object();
  }
  manifest["config_hash"] = cfg.hash();
  manifest["master_seed"] = cfg.master_seed;
  json artifacts = manifest.value("artifacts", json::object());
  artifacts[rel_path] = file_hash(p.root + "/" + rel_path);
  manifest["artifacts"] = artifacts;
  atomic_write_file(p.manifest_json(), manifest.dump(2) + "\n");
}

enc::Model ensure_reference(const ExperimentConfig& cfg, const Paths& p) {
  if (std::filesystem::exists(p.reference_model())) {
    enc::Model m = enc::load_model(p.reference_model());
    if (m.extractor.config().hash() != cfg.encoder.hash()) {
      throw ValidationError("reference model at " + p.reference_model() +
                            " was built for a different encoder config");
    }
    return m;
  }
  std::filesystem::create_directories(p.root);
  enc::Model m = enc::pretrain_reference_model(cfg.encoder, cfg.make_corpus(), cfg.pretrain,
                                               derive_seed(cfg.master_seed, "pretrain"));
  enc::save_model(m, p.reference_model());
  record_artifact(p, cfg, "reference.json");
  return m;
}

std::vector<tasks::Task> ensure_roster(const ExperimentConfig& cfg, const Paths& p) {
  if (std::filesystem::exists(p.sizes_csv())) {
    return tasks::load_task_dir(p.tasks_dir());
  }
  std::filesystem::create_directories(p.tasks_dir());
  std::vector<tasks::Task> roster = cfg.make_roster();
  for (const auto& t : roster) tasks::save_task(t, p.tasks_dir());
  write_sizes_csv(roster, p.sizes_csv());
  record_artifact(p, cfg, "tasks/sizes.csv");
  return roster;
}

void write_sizes_csv(const std::vector<tasks::Task>& roster, const std::string& path) {
  std::ostringstream os;
  os << "task,class,train_size\n";
  for (const auto& t : roster) {
    os << t.id << ',' << tasks::to_string(t.cls) << ',' << t.train.size() << '\n';
  }
  atomic_write_file(path, os.str());
}

namespace {

std::string class_of(const std::vector<rank::TaskMeta>& metas, const std::string& task) {
  for (const auto& m : metas) {
    if (m.id == task) return m.cls;
  }
  throw ValidationError("task '" + task + "' has no class metadata");
}

}  // namespace

transfer::TransferMatrix filter_matrix_by_class(const transfer::TransferMatrix& m,
                                                const std::vector<rank::TaskMeta>& metas,
                                                const std::string& src_cls,
                                                const std::string& tgt_cls) {
  transfer::TransferMatrix out;
  for (const auto& row : m.rows()) {
    if (class_of(metas, row.target) != tgt_cls) continue;
    if (row.source != transfer::TransferMatrix::kNoSource &&
        class_of(metas, row.source) != src_cls) {
      continue;
    }
    out.set(transfer::regime_from(row.regime), row.source, row.target, row.result);
  }
  return out;
}

rank::Ranking rank_sources(const ExperimentConfig& cfg, const Paths& p,
                           const std::string& method, const std::string& target,
                           bool in_class) {
  if (method == "datasize") {
    auto metas = rank::read_task_sizes(p.sizes_csv());
    std::vector<rank::TaskMeta> pool;
    const std::string cls = in_class ? class_of(metas, target) : "";
    for (const auto& m : metas) {
      if (in_class && m.cls != cls) continue;
      pool.push_back(m);
    }
    return rank::rank_by_datasize(pool, target);
  }
  if (method == "curvegrad") {
    enc::Model reference = ensure_reference(cfg, p);
    auto roster = ensure_roster(cfg, p);
    auto metas = rank::read_task_sizes(p.sizes_csv());
    const std::string cls = in_class ? class_of(metas, target) : "";
    std::map<std::string, std::vector<double>> slopes;
    for (const auto& t : roster) {
      if (t.id == target) continue;
      if (in_class && tasks::to_string(t.cls) != cls) continue;
      slopes[t.id] = rank::curvegrad_features(reference.extractor, t, cfg.transfer_opts.train,
                                              cfg.curvegrad_steps,
                                              derive_seed(cfg.master_seed, "curvegrad/" + t.id));
    }
    rank::Ranking r = rank::rank_by_curvegrad(slopes, target);
    return r;
  }
  // Embedding-similarity methods read the library.
  emb::EmbeddingLibrary lib(p.library_dir());
  if (lib.size() == 0) {
    throw ValidationError("embedding library at " + p.library_dir() +
                          " is empty; run `embed` first");
  }
  if (!in_class) return rank::rank_by_embeddings(method, target, lib);
  std::vector<std::string> candidates;
  std::string cls;
  for (const auto& e : lib.entries()) {
    if (e.task == target) cls = e.task_class;
  }
  if (cls.empty()) throw ValidationError("target '" + target + "' is not in the library");
  for (const auto& e : lib.entries()) {
    if (e.task != target && e.task_class == cls) candidates.push_back(e.task);
  }
  return rank::rank_by_embeddings(method, target, lib, &candidates);
}

json pipeline_predict_and_verify(const ExperimentConfig& cfg, const Paths& p,
                                 const std::string& target_id, const std::string& method) {
  emb::EmbeddingLibrary lib(p.library_dir());
  if (lib.size() == 0) {
    throw ValidationError("embedding library at " + p.library_dir() +
                          " is empty; run `embed` first");
  }
  enc::Model reference = ensure_reference(cfg, p);
  auto roster = ensure_roster(cfg, p);
  const tasks::Task* target = nullptr;
  for (const auto& t : roster) {
    if (t.id == target_id) target = &t;
  }
  if (!target) throw ValidationError("target task '" + target_id + "' is not in the roster");

  // Make sure the target's embedding exists (sources must already be there).
  const std::string file_method =
      method == emb::kMethodTextEmb ? emb::kMethodTextEmb : emb::kMethodTaskEmb;
  if (!lib.contains(target_id, file_method)) {
    if (file_method == emb::kMethodTextEmb) {
      lib.put(emb::text_embedding(reference.extractor, *target, cfg.embedding), target->cls,
              target->train.size());
    } else {
      lib.put(emb::task_emb(reference.extractor, *target, cfg.embedding, cfg.master_seed),
              target->cls, target->train.size());
    }
  }
  rank::Ranking ranking = rank::rank_by_embeddings(method, target_id, lib);
  const std::string top = ranking.entries.front().source;
  const tasks::Task* source = nullptr;
  for (const auto& t : roster) {
    if (t.id == top) source = &t;
  }
  if (!source) {
    throw ValidationError("top-ranked source '" + top + "' is not in the task roster");
  }

  // Verify by running the actual two-stage transfer under the first
  // configured regime, against the paired target-only baseline. The matrix
  // seed label keeps these cells bitwise identical to run-matrix output.
  const transfer::Regime regime = cfg.regimes.front();
  const std::uint64_t matrix_seed = derive_seed(cfg.master_seed, "matrix");
  transfer::CellResult baseline =
      transfer::run_cell(reference.extractor, nullptr, *target, regime, cfg.transfer_opts,
                         matrix_seed);
  transfer::CellResult transferred =
      transfer::run_cell(reference.extractor, source, *target, regime, cfg.transfer_opts,
                         matrix_seed);
  const double gain_pct =
      baseline.mean != 0.0
          ? (transferred.mean - baseline.mean) / std::abs(baseline.mean) * 100.0
          : 0.0;

  json jrank = json::array();
  for (const auto& e : ranking.entries) {
    jrank.push_back({{"source", e.source}, {"score", e.score}, {"rank", e.rank}});
  }
  json report = {{"target", target_id},
                 {"method", method},
                 {"regime", transfer::to_string(regime)},
                 {"ranking", jrank},
                 {"top_source", top},
                 {"baseline", {{"mean", baseline.mean}, {"std", baseline.stddev}}},
                 {"transferred", {{"mean", transferred.mean}, {"std", transferred.stddev}}},
                 {"relative_gain_pct", gain_pct},
                 {"config_hash", cfg.hash()},
                 {"master_seed", cfg.master_seed}};

  if (std::filesystem::exists(p.matrix_csv())) {
    auto matrix = transfer::TransferMatrix::read_csv(p.matrix_csv());
    for (const auto& g : rank::gold_from_matrix(matrix, regime)) {
      if (g.target != target_id) continue;
      json rel = json::object();
      for (const auto& [s, v] : g.relevance) rel[s] = v;
      report["gold"] = {{"baseline", g.baseline},
                        {"relevance", rel},
                        {"best", g.best},
                        {"predicted_best_rank", rank::avg_best_source_rank({ranking}, {g})}};
    }
  }
  return report;
}

}  // namespace taskemb::exp
