#include "taskemb/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "taskemb/common.hpp"

namespace taskemb::tasks {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(TaskClass c) {
  switch (c) {
    case TaskClass::kCR: return "cr";
    case TaskClass::kQA: return "qa";
    case TaskClass::kSL: return "sl";
  }
  throw ValidationError("bad task class");
}

TaskClass task_class_from(const std::string& s) {
  if (s == "cr") return TaskClass::kCR;
  if (s == "qa") return TaskClass::kQA;
  if (s == "sl") return TaskClass::kSL;
  throw ValidationError("unknown task class '" + s + "'");
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kSpearman: return "spearman";
    case Metric::kSpanF1: return "span_f1";
    case Metric::kTokenF1: return "token_f1";
  }
  throw ValidationError("bad metric");
}

Metric metric_from(const std::string& s) {
  if (s == "accuracy") return Metric::kAccuracy;
  if (s == "spearman") return Metric::kSpearman;
  if (s == "span_f1") return Metric::kSpanF1;
  if (s == "token_f1") return Metric::kTokenF1;
  throw ValidationError("unknown metric '" + s + "'");
}

json LabelSpace::to_json() const {
  json j{{"type", type}};
  if (type == "classes" || type == "tags") j["count"] = count;
  return j;
}

LabelSpace LabelSpace::from_json(const json& j) {
  LabelSpace ls;
  ls.type = j.at("type").get<std::string>();
  if (ls.type == "classes" || ls.type == "tags") {
    ls.count = j.at("count").get<int>();
  } else if (ls.type != "real" && ls.type != "span") {
    throw ValidationError("unknown label space type '" + ls.type + "'");
  }
  return ls;
}

json FamilySpec::to_json() const {
  return json{{"id", id},
              {"kind", kind},
              {"vocab_lo", vocab_lo},
              {"vocab_hi", vocab_hi},
              {"n_labels", n_labels},
              {"markers_per_label", markers_per_label},
              {"seq_len_lo", seq_len_lo},
              {"seq_len_hi", seq_len_hi},
              {"noise", noise},
              {"span_len", span_len},
              {"n_keys", n_keys}};
}

FamilySpec FamilySpec::from_json(const json& j) {
  FamilySpec s;
  s.id = j.at("id").get<std::string>();
  s.kind = j.value("kind", s.kind);
  s.vocab_lo = j.value("vocab_lo", s.vocab_lo);
  s.vocab_hi = j.value("vocab_hi", s.vocab_hi);
  s.n_labels = j.value("n_labels", s.n_labels);
  s.markers_per_label = j.value("markers_per_label", s.markers_per_label);
  s.seq_len_lo = j.value("seq_len_lo", s.seq_len_lo);
  s.seq_len_hi = j.value("seq_len_hi", s.seq_len_hi);
  s.noise = j.value("noise", s.noise);
  s.span_len = j.value("span_len", s.span_len);
  s.n_keys = j.value("n_keys", s.n_keys);
  s.validate();
  return s;
}

TaskClass FamilySpec::task_class() const {
  if (kind == "cr_classify" || kind == "cr_regress") return TaskClass::kCR;
  if (kind == "qa_span") return TaskClass::kQA;
  if (kind == "sl_tag") return TaskClass::kSL;
  throw ValidationError("unknown family kind '" + kind + "'");
}

void FamilySpec::validate() const {
  task_class();  // rejects unknown kinds
  if (id.empty()) throw ValidationError("family id empty");
  if (vocab_lo < 3) throw ValidationError("family " + id + ": vocab_lo must be >= 3 (reserved ids)");
  if (vocab_hi <= vocab_lo) throw ValidationError("family " + id + ": empty vocab slice");
  if (seq_len_lo < 2 || seq_len_hi < seq_len_lo) {
    throw ValidationError("family " + id + ": bad sequence length range");
  }
  if (noise < 0.0 || noise > 0.5) throw ValidationError("family " + id + ": noise outside [0,0.5]");
  int markers = 0;
  if (kind == "cr_classify" || kind == "sl_tag") {
    if (n_labels < 2) throw ValidationError("family " + id + ": needs >= 2 label classes");
    markers = n_labels * markers_per_label;
  } else if (kind == "cr_regress") {
    markers = markers_per_label;
  } else {  // qa_span
    if (n_keys < 2) throw ValidationError("family " + id + ": needs >= 2 question keys");
    if (span_len < 1 || span_len + 1 > seq_len_lo) {
      throw ValidationError("family " + id + ": answer span does not fit");
    }
    markers = 2 * n_keys;
  }
  if (vocab_hi - vocab_lo < markers + 8) {
    throw ValidationError("family " + id + ": vocab slice too small for markers + content");
  }
}

FamilyMaterial derive_material(const FamilySpec& spec, std::uint64_t master_seed) {
  spec.validate();
  auto rng = make_rng(master_seed, "family/" + spec.id);
  std::vector<int> slice(std::size_t(spec.vocab_hi - spec.vocab_lo));
  std::iota(slice.begin(), slice.end(), spec.vocab_lo);
  std::shuffle(slice.begin(), slice.end(), rng);
  FamilyMaterial mat;
  std::size_t pos = 0;
  auto take = [&](int n) {
    std::vector<int> out(slice.begin() + pos, slice.begin() + pos + n);
    pos += std::size_t(n);
    return out;
  };
  if (spec.kind == "cr_classify" || spec.kind == "sl_tag") {
    for (int j = 0; j < spec.n_labels; ++j) mat.label_markers.push_back(take(spec.markers_per_label));
  } else if (spec.kind == "cr_regress") {
    mat.label_markers.push_back(take(spec.markers_per_label));
  } else {  // qa_span
    mat.keys = take(spec.n_keys);
    auto answers = take(spec.n_keys);
    for (int j = 0; j < spec.n_keys; ++j) mat.key_answer[mat.keys[std::size_t(j)]] = answers[std::size_t(j)];
  }
  mat.content.assign(slice.begin() + pos, slice.end());
  return mat;
}

namespace {

int marker_class_of(const FamilyMaterial& mat, int token) {
  for (std::size_t j = 0; j < mat.label_markers.size(); ++j) {
    const auto& set = mat.label_markers[j];
    if (std::find(set.begin(), set.end(), token) != set.end()) return int(j);
  }
  return -1;
}

}  // namespace

Target apply_rule(const FamilySpec& spec, const FamilyMaterial& mat,
                  const std::vector<std::vector<int>>& segments) {
  if (spec.kind == "cr_classify") {
    std::vector<int> counts(std::size_t(spec.n_labels), 0);
    for (const auto& seg : segments) {
      for (int tok : seg) {
        const int j = marker_class_of(mat, tok);
        if (j >= 0) ++counts[std::size_t(j)];
      }
    }
    return int(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  if (spec.kind == "cr_regress") {
    std::size_t total = 0, hits = 0;
    for (const auto& seg : segments) {
      total += seg.size();
      for (int tok : seg) {
        if (marker_class_of(mat, tok) == 0) ++hits;
      }
    }
    return total == 0 ? 0.0 : double(hits) / double(total);
  }
  if (spec.kind == "qa_span") {
    if (segments.size() != 2 || segments[0].size() != 1) {
      throw ValidationError("qa_span expects [question],[passage] segments");
    }
    auto it = mat.key_answer.find(segments[0][0]);
    if (it == mat.key_answer.end()) throw ValidationError("unknown question key");
    const auto& passage = segments[1];
    for (std::size_t p = 0; p < passage.size(); ++p) {
      if (passage[p] == it->second) return std::make_pair(int(p), int(p) + spec.span_len - 1);
    }
    throw ValidationError("answer marker absent from passage");
  }
  // sl_tag: marker class j -> tag j+1, background 0.
  if (segments.size() != 1) throw ValidationError("sl_tag expects a single segment");
  std::vector<int> tags;
  tags.reserve(segments[0].size());
  for (int tok : segments[0]) tags.push_back(marker_class_of(mat, tok) + 1);
  return tags;
}

namespace {

std::string example_key(const std::vector<std::vector<int>>& segments) {
  std::string k;
  for (const auto& seg : segments) {
    for (int t : seg) {
      k += std::to_string(t);
      k.push_back(',');
    }
    k.push_back('|');
  }
  return k;
}

int pick_from(const std::vector<int>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::vector<std::vector<int>> gen_segments(const FamilySpec& spec, const FamilyMaterial& mat,
                                           std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_d(spec.seq_len_lo, spec.seq_len_hi);
  if (spec.kind == "cr_classify") {
    const int len = len_d(rng);
    const int y = std::uniform_int_distribution<int>(0, spec.n_labels - 1)(rng);
    // Winner margin of at least two marker occurrences keeps the rule
    // learnable within the fixed epoch budget.
    const int w = std::uniform_int_distribution<int>(3, 5)(rng);
    std::vector<int> toks;
    for (int j = 0; j < spec.n_labels; ++j) {
      const int c = j == y ? w : std::uniform_int_distribution<int>(0, w - 2)(rng);
      for (int i = 0; i < c; ++i) toks.push_back(pick_from(mat.label_markers[std::size_t(j)], rng));
    }
    while (int(toks.size()) < len) toks.push_back(pick_from(mat.content, rng));
    std::shuffle(toks.begin(), toks.end(), rng);
    return {toks};
  }
  if (spec.kind == "cr_regress") {
    const int len = len_d(rng);
    const int c = std::uniform_int_distribution<int>(0, len / 2)(rng);
    std::vector<int> toks;
    for (int i = 0; i < c; ++i) toks.push_back(pick_from(mat.label_markers[0], rng));
    while (int(toks.size()) < len) toks.push_back(pick_from(mat.content, rng));
    std::shuffle(toks.begin(), toks.end(), rng);
    return {toks};
  }
  if (spec.kind == "qa_span") {
    const int plen = len_d(rng);
    const int key = pick_from(mat.keys, rng);
    std::vector<int> passage;
    for (int i = 0; i < plen; ++i) passage.push_back(pick_from(mat.content, rng));
    const int p = std::uniform_int_distribution<int>(0, plen - spec.span_len)(rng);
    passage[std::size_t(p)] = mat.key_answer.at(key);
    return {{key}, passage};
  }
  // sl_tag
  const int len = len_d(rng);
  std::bernoulli_distribution is_marker(0.4);
  std::vector<int> toks;
  for (int i = 0; i < len; ++i) {
    if (is_marker(rng)) {
      const auto& set =
          mat.label_markers[std::uniform_int_distribution<std::size_t>(0, mat.label_markers.size() - 1)(rng)];
      toks.push_back(pick_from(set, rng));
    } else {
      toks.push_back(pick_from(mat.content, rng));
    }
  }
  return {toks};
}

Example gen_example(const FamilySpec& spec, const FamilyMaterial& mat, std::mt19937_64& rng) {
  Example ex;
  ex.segments = gen_segments(spec, mat, rng);
  ex.target = apply_rule(spec, mat, ex.segments);
  if (spec.kind == "cr_classify" && spec.noise > 0.0 &&
      std::bernoulli_distribution(spec.noise)(rng)) {
    ex.target = std::uniform_int_distribution<int>(0, spec.n_labels - 1)(rng);
  }
  return ex;
}

}  // namespace

Task generate_task(const FamilySpec& spec, int sibling_index, std::size_t n_train,
                   std::size_t n_dev, std::uint64_t master_seed) {
  const FamilyMaterial mat = derive_material(spec, master_seed);
  auto rng = make_rng(master_seed, "task/" + spec.id + "/" + std::to_string(sibling_index));
  Task t;
  t.id = spec.id + "_" + std::to_string(sibling_index);
  t.family = spec.id;
  t.cls = spec.task_class();
  if (spec.kind == "cr_classify") {
    t.metric = Metric::kAccuracy;
    t.labels = {"classes", spec.n_labels};
  } else if (spec.kind == "cr_regress") {
    t.metric = Metric::kSpearman;
    t.labels = {"real", 0};
  } else if (spec.kind == "qa_span") {
    t.metric = Metric::kSpanF1;
    t.labels = {"span", 0};
  } else {
    t.metric = Metric::kTokenF1;
    t.labels = {"tags", spec.n_labels + 1};
  }
  std::set<std::string> seen;
  auto fill = [&](Dataset& ds, std::size_t n) {
    std::size_t attempts = 0;
    while (ds.examples.size() < n) {
      if (++attempts > 100 * n + 1000) {
        throw ValidationError("family " + spec.id + ": cannot generate " + std::to_string(n) +
                              " distinct examples; enlarge vocab or lengths");
      }
      Example ex = gen_example(spec, mat, rng);
      if (seen.insert(example_key(ex.segments)).second) ds.examples.push_back(std::move(ex));
    }
  };
  fill(t.train, n_train);
  fill(t.dev, n_dev);
  return t;
}

std::vector<std::vector<int>> pretrain_corpus(const std::vector<FamilySpec>& families,
                                              std::size_t sequences, std::size_t max_tokens,
                                              std::uint64_t master_seed) {
  if (families.empty()) throw ValidationError("pretrain corpus needs at least one family");
  std::vector<FamilyMaterial> mats;
  for (const auto& f : families) mats.push_back(derive_material(f, master_seed));
  auto rng = make_rng(master_seed, "pretrain-corpus");
  std::vector<std::vector<int>> out;
  out.reserve(sequences);
  for (std::size_t i = 0; i < sequences; ++i) {
    const std::size_t f = i % families.size();
    auto segs = gen_segments(families[f], mats[f], rng);
    std::vector<int> seq;
    for (const auto& s : segs) seq.insert(seq.end(), s.begin(), s.end());
    if (seq.size() > max_tokens) seq.resize(max_tokens);
    out.push_back(std::move(seq));
  }
  return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && v[idx[j]] == v[idx[i]]) ++j;
    const double r = (double(i) + double(j - 1)) / 2.0 + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ValidationError("spearman: mismatched or empty inputs");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;  // constant ranking carries no signal
  return num / std::sqrt(va * vb);
}

double span_overlap_f1(std::pair<int, int> gold, std::pair<int, int> pred) {
  const int g0 = gold.first, g1 = gold.second, p0 = pred.first, p1 = pred.second;
  if (g0 > g1 || p0 > p1) throw ValidationError("span with start > end");
  const int inter = std::max(0, std::min(g1, p1) - std::max(g0, p0) + 1);
  if (inter == 0) return 0.0;
  const double prec = double(inter) / double(p1 - p0 + 1);
  const double rec = double(inter) / double(g1 - g0 + 1);
  return 2.0 * prec * rec / (prec + rec);
}

double evaluate_metric(Metric metric, const std::vector<Target>& gold,
                       const std::vector<Target>& pred) {
  if (gold.size() != pred.size() || gold.empty()) {
    throw ValidationError("evaluate_metric: mismatched or empty prediction list");
  }
  switch (metric) {
    case Metric::kAccuracy: {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        if (std::get<int>(gold[i]) == std::get<int>(pred[i])) ++hit;
      }
      return 100.0 * double(hit) / double(gold.size());
    }
    case Metric::kSpearman: {
      std::vector<double> g, p;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        g.push_back(std::get<double>(gold[i]));
        p.push_back(std::get<double>(pred[i]));
      }
      return 100.0 * spearman(g, p);
    }
    case Metric::kSpanF1: {
      double acc = 0.0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        acc += span_overlap_f1(std::get<std::pair<int, int>>(gold[i]),
                               std::get<std::pair<int, int>>(pred[i]));
      }
      return 100.0 * acc / double(gold.size());
    }
    case Metric::kTokenF1: {
      std::size_t tp = 0, pden = 0, rden = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        const auto& g = std::get<std::vector<int>>(gold[i]);
        const auto& p = std::get<std::vector<int>>(pred[i]);
        if (g.size() != p.size()) throw ValidationError("token_f1: tag length mismatch");
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (p[k] != 0) ++pden;
          if (g[k] != 0) ++rden;
          if (g[k] != 0 && g[k] == p[k]) ++tp;
        }
      }
      if (pden + rden == 0) return 100.0;  // nothing to find, nothing predicted
      return 100.0 * 2.0 * double(tp) / double(pden + rden);
    }
  }
  throw ValidationError("bad metric");
}

Dataset resample(const Dataset& d, std::size_t limit, std::uint64_t seed) {
  if (d.examples.empty()) throw ValidationError("resample of empty dataset");
  if (limit >= d.size()) return d;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::size_t> chosen;
  std::sample(idx.begin(), idx.end(), std::back_inserter(chosen), limit, rng);
  Dataset out;
  for (std::size_t i : chosen) out.examples.push_back(d.examples[i]);
  return out;
}

json target_to_json(const Target& t) {
  if (std::holds_alternative<int>(t)) return std::get<int>(t);
  if (std::holds_alternative<double>(t)) return std::get<double>(t);
  if (std::holds_alternative<std::pair<int, int>>(t)) {
    const auto& s = std::get<std::pair<int, int>>(t);
    return json::array({s.first, s.second});
  }
  return std::get<std::vector<int>>(t);
}

Target target_from_json(const json& j, const LabelSpace& labels) {
  if (labels.type == "classes") {
    const int y = j.get<int>();
    if (y < 0 || y >= labels.count) throw ValidationError("class label out of range");
    return y;
  }
  if (labels.type == "real") return j.get<double>();
  if (labels.type == "span") {
    if (!j.is_array() || j.size() != 2) throw ValidationError("span target must be [start,end]");
    const int s = j[0].get<int>(), e = j[1].get<int>();
    if (s < 0 || e < s) throw ValidationError("invalid span bounds");
    return std::make_pair(s, e);
  }
  if (labels.type == "tags") {
    std::vector<int> tags = j.get<std::vector<int>>();
    for (int v : tags) {
      if (v < 0 || v >= labels.count) throw ValidationError("tag out of range");
    }
    return tags;
  }
  throw ValidationError("unknown label space '" + labels.type + "'");
}

namespace {

void write_jsonl(const std::string& path, const Dataset& ds) {
  std::string out;
  for (const auto& ex : ds.examples) {
    json j{{"segments", ex.segments}, {"target", target_to_json(ex.target)}};
    out += j.dump();
    out.push_back('\n');
  }
  atomic_write_file(path, out);
}

Dataset read_jsonl(const std::string& path, const LabelSpace& labels) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path, lineno, e.what());
    }
    try {
      Example ex;
      ex.segments = j.at("segments").get<std::vector<std::vector<int>>>();
      if (ex.segments.empty()) throw ValidationError("example with no segments");
      ex.target = target_from_json(j.at("target"), labels);
      if (labels.type == "tags" &&
          std::get<std::vector<int>>(ex.target).size() != ex.segments[0].size()) {
        throw ValidationError("tag count != token count");
      }
      if (labels.type == "span") {
        const auto sp = std::get<std::pair<int, int>>(ex.target);
        if (ex.segments.size() < 2 || sp.second >= int(ex.segments[1].size())) {
          throw ValidationError("span outside passage");
        }
      }
      ds.examples.push_back(std::move(ex));
    } catch (const Error& e) {
      throw ParseError(path, lineno, e.what());
    } catch (const json::exception& e) {
      throw ParseError(path, lineno, e.what());
    }
  }
  return ds;
}

}  // namespace

void save_task(const Task& t, const std::string& dir) {
  const fs::path root = fs::path(dir) / t.id;
  fs::create_directories(root);
  write_jsonl((root / "train.jsonl").string(), t.train);
  write_jsonl((root / "dev.jsonl").string(), t.dev);
  json manifest{{"id", t.id},
                {"family", t.family},
                {"class", to_string(t.cls)},
                {"metric", to_string(t.metric)},
                {"label_space", t.labels.to_json()},
                {"train", "train.jsonl"},
                {"dev", "dev.jsonl"}};
  atomic_write_file((root / "manifest.json").string(), manifest.dump(2) + "\n");
}

Task load_task(const std::string& manifest_path) {
  json j;
  try {
    j = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ParseError(manifest_path, 0, e.what());
  }
  Task t;
  try {
    t.id = j.at("id").get<std::string>();
    t.family = j.value("family", "");
    t.cls = task_class_from(j.at("class").get<std::string>());
    t.metric = metric_from(j.at("metric").get<std::string>());
    t.labels = LabelSpace::from_json(j.at("label_space"));
    const fs::path dir = fs::path(manifest_path).parent_path();
    t.train = read_jsonl((dir / j.at("train").get<std::string>()).string(), t.labels);
    t.dev = read_jsonl((dir / j.at("dev").get<std::string>()).string(), t.labels);
  } catch (const json::exception& e) {
    throw ParseError(manifest_path, 0, e.what());
  }
  if (t.train.examples.empty() || t.dev.examples.empty()) {
    throw ValidationError("task " + t.id + " has an empty split");
  }
  return t;
}

std::vector<Task> load_task_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> manifests;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      manifests.push_back(entry.path() / "manifest.json");
    }
  }
  std::sort(manifests.begin(), manifests.end());
  if (manifests.empty()) throw IoError("no task manifests under " + dir);
  std::vector<Task> out;
  for (const auto& m : manifests) out.push_back(load_task(m.string()));
  std::sort(out.begin(), out.end(), [](const Task& a, const Task& b) { return a.id < b.id; });
  return out;
}

}  // namespace taskemb::tasks
