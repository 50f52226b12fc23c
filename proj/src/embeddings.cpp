#include "taskemb/embeddings.hpp"

#include <cmath>
#include <filesystem>
#include <random>

#include "taskemb/autodiff.hpp"
#include "taskemb/common.hpp"

namespace taskemb::emb {

namespace fs = std::filesystem;
using nlohmann::json;

void FisherOptions::validate() const {
  if (mode != "empirical" && mode != "sampled") {
    throw ValidationError("unknown fisher mode '" + mode + "' (want empirical|sampled)");
  }
  if (samples == 0) throw ValidationError("fisher samples must be positive");
}

void EmbeddingConfig::validate() const {
  FisherOptions fo;
  fo.mode = fisher_mode;
  fo.samples = fisher_samples;
  fo.validate();
  if (train.lr <= 0.0) throw ValidationError("embedding fine-tune lr must be positive");
}

json EmbeddingConfig::to_json() const {
  json j;
  j["train"] = {{"lr", train.lr},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"epochs_sl", train.epochs_sl}};
  j["frozen_extractor"] = frozen_extractor;
  j["fisher_mode"] = fisher_mode;
  j["fisher_samples"] = fisher_samples;
  return j;
}

EmbeddingConfig EmbeddingConfig::from_json(const json& j) {
  EmbeddingConfig c;
  const json& t = j.at("train");
  c.train.lr = t.at("lr").get<double>();
  c.train.batch_size = t.at("batch_size").get<std::size_t>();
  c.train.epochs = t.at("epochs").get<std::size_t>();
  c.train.epochs_sl = t.at("epochs_sl").get<std::size_t>();
  c.frozen_extractor = j.at("frozen_extractor").get<bool>();
  c.fisher_mode = j.at("fisher_mode").get<std::string>();
  c.fisher_samples = j.at("fisher_samples").get<std::size_t>();
  c.validate();
  return c;
}

std::string EmbeddingConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

std::vector<double> TaskEmbedding::concat() const {
  std::vector<double> out;
  for (const auto& [name, v] : components) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::string model_hash(const enc::FeatureExtractor& ex) {
  std::uint64_t h = fnv1a64(ex.config().to_json().dump());
  const std::vector<double> v = ex.flat_values();
  h = fnv1a64(v.data(), v.size() * sizeof(double), h);
  return hex64(h);
}

std::vector<double> text_emb(const enc::FeatureExtractor& reference, const tasks::Dataset& data) {
  if (data.size() == 0) throw ValidationError("text embedding needs a non-empty dataset");
  const std::size_t d = reference.config().d_model;
  std::vector<double> acc(d, 0.0);
  for (const auto& ex : data.examples) {
    const enc::EncodedInput in = enc::encode_input(reference.config(), ex.segments);
    const auto f = reference.forward(in);
    const std::vector<double>& v = f.final.value();
    const std::size_t len = f.final.rows();
    for (std::size_t c = 0; c < d; ++c) {
      double hx = 0.0;
      for (std::size_t r = 0; r < len; ++r) hx += v[r * d + c];
      acc[c] += hx / double(len);
    }
  }
  for (double& x : acc) x /= double(data.size());
  return acc;
}

namespace {

// The labels whose gradients enter one Fisher term: the recorded one, or
// model-drawn ones in sampled mode.
std::vector<tasks::Target> fisher_targets(const enc::Model& m, const enc::EncodedInput& in,
                                          const tasks::Target& recorded, const FisherOptions& fo,
                                          std::size_t example_index) {
  if (fo.mode == "empirical") return {recorded};
  const auto f = m.extractor.forward(in);
  std::vector<tasks::Target> out;
  out.reserve(fo.samples);
  for (std::size_t s = 0; s < fo.samples; ++s) {
    std::mt19937_64 rng = make_rng(
        fo.seed, "fisher-sample/" + std::to_string(example_index) + "/" + std::to_string(s));
    out.push_back(m.head->sample(f, in, rng));
  }
  return out;
}

void check_fisher_inputs(const enc::Model& m, const tasks::Dataset& data,
                         const FisherOptions& fo) {
  fo.validate();
  if (!m.head) throw ValidationError("fisher needs a model with a task head");
  if (data.size() == 0) throw ValidationError("fisher needs a non-empty dataset");
}

// Split a flat per-parameter vector into named components; components that
// repeat per layer are averaged elementwise across their layer copies.
std::map<std::string, std::vector<double>> slice_components(const enc::FeatureExtractor& ex,
                                                            const std::vector<double>& flat) {
  std::map<std::string, std::map<std::size_t, std::vector<double>>> blocks;
  std::size_t off = 0;
  for (const auto& pi : ex.param_infos()) {
    std::vector<double>& b = blocks[pi.component][pi.layer];
    b.insert(b.end(), flat.begin() + off, flat.begin() + off + pi.rows * pi.cols);
    off += pi.rows * pi.cols;
  }
  std::map<std::string, std::vector<double>> out;
  for (const auto& [comp, per_layer] : blocks) {
    const std::size_t n = per_layer.begin()->second.size();
    std::vector<double> mean(n, 0.0);
    for (const auto& [layer, b] : per_layer) {
      if (b.size() != n) {
        throw ValidationError("component '" + comp + "' has incongruent layer slices");
      }
      for (std::size_t i = 0; i < n; ++i) mean[i] += b[i];
    }
    for (double& x : mean) x /= double(per_layer.size());
    out[comp] = std::move(mean);
  }
  return out;
}

}  // namespace

std::map<std::string, std::vector<double>> fisher_diag_params(const enc::Model& m,
                                                              const tasks::Dataset& data,
                                                              const FisherOptions& fo) {
  check_fisher_inputs(m, data, fo);
  std::vector<double> acc(m.extractor.param_count(), 0.0);
  std::size_t terms = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const tasks::Example& ex = data.examples[i];
    const enc::EncodedInput in = enc::encode_input(m.extractor.config(), ex.segments);
    for (const tasks::Target& y : fisher_targets(m, in, ex.target, fo, i)) {
      const std::vector<double> g = enc::per_example_grad(m, in, y);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k] * g[k];
      ++terms;
    }
  }
  for (double& x : acc) x /= double(terms);
  return slice_components(m.extractor, acc);
}

std::vector<double> fisher_diag_activations(const enc::Model& m, const tasks::Dataset& data,
                                            const FisherOptions& fo) {
  check_fisher_inputs(m, data, fo);
  const std::size_t d = m.extractor.config().d_model;
  std::vector<double> acc(d, 0.0);
  std::size_t terms = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const tasks::Example& ex = data.examples[i];
    const enc::EncodedInput in = enc::encode_input(m.extractor.config(), ex.segments);
    const auto f = m.extractor.forward(in);
    for (const tasks::Target& y : fisher_targets(m, in, ex.target, fo, i)) {
      ad::Tensor ll = m.head->log_likelihood(f, in, y);
      ad::backward(ll);
      const std::vector<double>& g = f.final.grad();
      const std::size_t len = f.final.rows();
      for (std::size_t c = 0; c < d; ++c) {
        double col = 0.0;
        for (std::size_t r = 0; r < len; ++r) col += g[r * d + c] * g[r * d + c];
        acc[c] += col / double(len);
      }
      ++terms;
    }
  }
  for (double& x : acc) x /= double(terms);
  return acc;
}

TaskEmbedding task_emb(const enc::FeatureExtractor& reference, const tasks::Task& task,
                       const EmbeddingConfig& cfg, std::uint64_t master_seed) {
  cfg.validate();
  if (task.train.size() == 0) throw ValidationError("task '" + task.id + "' has no training set");

  transfer::TrainConfig tc = cfg.train;
  tc.frozen_extractor = cfg.frozen_extractor;
  const enc::Model tuned =
      transfer::fine_tune(reference, task, task.train, tc, derive_seed(master_seed, "embed/" + task.id));

  FisherOptions fo;
  fo.mode = cfg.fisher_mode;
  fo.samples = cfg.fisher_samples;
  fo.seed = derive_seed(master_seed, "embed-fisher/" + task.id);

  TaskEmbedding e;
  e.task = task.id;
  e.model_hash = model_hash(reference);
  e.method = kMethodTaskEmb;
  e.config_hash = cfg.hash();
  e.components = fisher_diag_params(tuned, task.train, fo);
  e.components["activations"] = fisher_diag_activations(tuned, task.train, fo);
  e.components["text"] = text_emb(reference, task.train);
  return e;
}

TaskEmbedding text_embedding(const enc::FeatureExtractor& reference, const tasks::Task& task,
                             const EmbeddingConfig& cfg) {
  cfg.validate();
  if (task.train.size() == 0) throw ValidationError("task '" + task.id + "' has no training set");
  TaskEmbedding e;
  e.task = task.id;
  e.model_hash = model_hash(reference);
  e.method = kMethodTextEmb;
  e.config_hash = cfg.hash();
  e.components["text"] = text_emb(reference, task.train);
  return e;
}

json TaskEmbedding::to_json() const {
  json comps = json::object();
  for (const auto& [name, v] : components) {
    comps[name] = {{"dim", v.size()}, {"values", v}};
  }
  json j;
  j["task"] = task;
  j["model_hash"] = model_hash;
  j["method"] = method;
  j["components"] = comps;
  j["config_hash"] = config_hash;
  return j;
}

TaskEmbedding TaskEmbedding::from_json(const json& j) {
  TaskEmbedding e;
  e.task = j.at("task").get<std::string>();
  e.model_hash = j.at("model_hash").get<std::string>();
  e.method = j.at("method").get<std::string>();
  e.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& [name, c] : j.at("components").items()) {
    std::vector<double> v = c.at("values").get<std::vector<double>>();
    if (c.at("dim").get<std::size_t>() != v.size()) {
      throw ValidationError("component '" + name + "' dim does not match its values");
    }
    e.components[name] = std::move(v);
  }
  return e;
}

void save_embedding(const TaskEmbedding& e, const std::string& path) {
  atomic_write_file(path, e.to_json().dump(2) + "\n");
}

TaskEmbedding load_embedding(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& pe) {
    throw ParseError(path, 1, pe.what());
  }
  try {
    return TaskEmbedding::from_json(j);
  } catch (const json::exception& je) {
    throw ValidationError("embedding file " + path + ": " + je.what());
  }
}

EmbeddingLibrary::EmbeddingLibrary(const std::string& dir) : dir_(dir) {
  fs::create_directories(dir_);
  const fs::path idx = fs::path(dir_) / "index.json";
  if (!fs::exists(idx)) return;
  json j;
  try {
    j = json::parse(read_file(idx.string()));
  } catch (const json::parse_error& pe) {
    throw ParseError(idx.string(), 1, pe.what());
  }
  model_hash_ = j.at("model_hash").get<std::string>();
  for (const auto& row : j.at("entries")) {
    LibraryEntry le;
    le.task = row.at("task").get<std::string>();
    le.method = row.at("method").get<std::string>();
    le.config_hash = row.at("config_hash").get<std::string>();
    le.file = row.at("file").get<std::string>();
    le.task_class = row.at("class").get<std::string>();
    le.train_size = row.at("train_size").get<std::size_t>();
    index_[{le.task, le.method}] = le;
  }
}

bool EmbeddingLibrary::contains(const std::string& task, const std::string& method) const {
  return index_.count({task, method}) > 0;
}

void EmbeddingLibrary::put(const TaskEmbedding& e, tasks::TaskClass cls, std::size_t train_size) {
  if (!model_hash_.empty() && model_hash_ != e.model_hash) {
    throw ValidationError("library at " + dir_ + " holds embeddings for model " + model_hash_ +
                          ", refusing to mix in " + e.model_hash);
  }
  model_hash_ = e.model_hash;
  LibraryEntry le;
  le.task = e.task;
  le.method = e.method;
  le.config_hash = e.config_hash;
  le.file = e.task + "." + e.method + ".json";
  le.task_class = tasks::to_string(cls);
  le.train_size = train_size;
  save_embedding(e, (fs::path(dir_) / le.file).string());
  index_[{le.task, le.method}] = le;
  write_index();
}

TaskEmbedding EmbeddingLibrary::load(const std::string& task, const std::string& method) const {
  auto it = index_.find({task, method});
  if (it == index_.end()) {
    throw ValidationError("library has no '" + method + "' embedding for task '" + task + "'");
  }
  return load_embedding((fs::path(dir_) / it->second.file).string());
}

std::vector<LibraryEntry> EmbeddingLibrary::entries() const {
  std::vector<LibraryEntry> out;
  out.reserve(index_.size());
  for (const auto& [key, le] : index_) out.push_back(le);
  return out;
}

void EmbeddingLibrary::write_index() const {
  json rows = json::array();
  for (const auto& [key, le] : index_) {
    rows.push_back({{"task", le.task},
                    {"method", le.method},
                    {"config_hash", le.config_hash},
                    {"file", le.file},
                    {"class", le.task_class},
                    {"train_size", le.train_size}});
  }
  json j;
  j["model_hash"] = model_hash_;
  j["entries"] = rows;
  atomic_write_file((fs::path(dir_) / "index.json").string(), j.dump(2) + "\n");
}

}  // namespace taskemb::emb
