#include "taskemb/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "taskemb/common.hpp"

namespace taskemb::enc {

using ad::Tensor;
using nlohmann::json;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*ln(2*pi)

// Weight init scale: residual-branch outputs must stay comparable to the
// unit-scale normalized stream, or example information never reaches the
// [CLS] slot (calibrated during build).
double init_std(std::size_t d_model) { return 1.0 / std::sqrt(double(d_model)); }

// Little-endian byte image of a double vector (defined layout on any host).
std::string doubles_to_bytes(const std::vector<double>& v) {
  std::string out(v.size() * 8, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    for (int b = 0; b < 8; ++b) out[i * 8 + std::size_t(b)] = char((bits >> (8 * b)) & 0xff);
  }
  return out;
}

std::vector<double> bytes_to_doubles(const std::vector<unsigned char>& bytes) {
  if (bytes.size() % 8 != 0) throw ValidationError("weight blob not a multiple of 8 bytes");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[i * 8 + std::size_t(b)];
    std::memcpy(&out[i], &bits, 8);
  }
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size <= std::size_t(kFirstContentId)) {
    throw ValidationError("vocab_size must exceed the reserved ids");
  }
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ValidationError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0 || d_ffn == 0) throw ValidationError("n_layers and d_ffn must be positive");
  if (max_len < 4) throw ValidationError("max_len too small for [CLS] token [SEP]");
}

json EncoderConfig::to_json() const {
  return json{{"vocab_size", vocab_size}, {"d_model", d_model},   {"n_layers", n_layers},
              {"n_heads", n_heads},       {"d_ffn", d_ffn},       {"max_len", max_len},
              {"trailing_sep", trailing_sep}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.max_len = j.value("max_len", c.max_len);
  c.trailing_sep = j.value("trailing_sep", c.trailing_sep);
  c.validate();
  return c;
}

std::string EncoderConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

EncodedInput encode_input(const EncoderConfig& cfg, const std::vector<std::vector<int>>& segments) {
  cfg.validate();
  if (segments.empty() || segments.size() > 2) {
    throw ValidationError("encode_input expects 1 or 2 segments");
  }
  EncodedInput out;
  out.ids.push_back(kClsId);
  out.segment_ids.push_back(0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].empty()) throw ValidationError("empty segment");
    out.seg_begin.push_back(out.ids.size());
    out.seg_len.push_back(segments[s].size());
    for (int tok : segments[s]) {
      if (tok < kFirstContentId || std::size_t(tok) >= cfg.vocab_size) {
        throw ValidationError("token id " + std::to_string(tok) + " outside content range");
      }
      out.ids.push_back(tok);
      out.segment_ids.push_back(int(s));
    }
    const bool last = s + 1 == segments.size();
    if (!last || cfg.trailing_sep) {
      out.ids.push_back(kSepId);
      out.segment_ids.push_back(int(s));
    }
  }
  if (out.ids.size() > cfg.max_len) {
    throw ValidationError("encoded length " + std::to_string(out.ids.size()) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
  }
  return out;
}

int hash_token(const EncoderConfig& cfg, const std::string& token) {
  const std::uint64_t h = fnv1a64(token);
  return kFirstContentId + int(h % (cfg.vocab_size - std::size_t(kFirstContentId)));
}

EncodedInput encode_text(const EncoderConfig& cfg,
                         const std::vector<std::vector<std::string>>& segments) {
  std::vector<std::vector<int>> ids;
  for (const auto& seg : segments) {
    std::vector<int> s;
    for (const auto& tok : seg) s.push_back(hash_token(cfg, tok));
    ids.push_back(std::move(s));
  }
  return encode_input(cfg, ids);
}

void FeatureExtractor::register_params() {
  const std::size_t d = cfg_.d_model;
  auto reg = [&](const std::string& name, const std::string& component, std::size_t layer,
                 std::size_t rows, std::size_t cols) {
    infos_.push_back({name, component, layer, rows, cols});
    params_.emplace(name, Tensor::zeros(rows, cols, true));
  };
  reg("embeddings.word", "token_embeddings", ParamInfo::kNoLayer, cfg_.vocab_size, d);
  reg("embeddings.position", "token_embeddings", ParamInfo::kNoLayer, cfg_.max_len, d);
  reg("embeddings.segment", "token_embeddings", ParamInfo::kNoLayer, 2, d);
  reg("embeddings.ln.gain", "token_embeddings", ParamInfo::kNoLayer, 1, d);
  reg("embeddings.ln.bias", "token_embeddings", ParamInfo::kNoLayer, 1, d);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    reg(p + "attn.wq", "attention", l, d, d);
    reg(p + "attn.bq", "attention", l, 1, d);
    reg(p + "attn.wk", "attention", l, d, d);
    reg(p + "attn.bk", "attention", l, 1, d);
    reg(p + "attn.wv", "attention", l, d, d);
    reg(p + "attn.bv", "attention", l, 1, d);
    reg(p + "attn.wo", "attention", l, d, d);
    reg(p + "attn.bo", "attention", l, 1, d);
    reg(p + "attn.ln.gain", "attention", l, 1, d);
    reg(p + "attn.ln.bias", "attention", l, 1, d);
    reg(p + "ffn.w1", "feed_forward", l, d, cfg_.d_ffn);
    reg(p + "ffn.b1", "feed_forward", l, 1, cfg_.d_ffn);
    reg(p + "ffn.w2", "feed_forward", l, cfg_.d_ffn, d);
    reg(p + "ffn.b2", "feed_forward", l, 1, d);
    reg(p + "out.ln.gain", "layer_output", l, 1, d);
    reg(p + "out.ln.bias", "layer_output", l, 1, d);
  }
}

FeatureExtractor::FeatureExtractor(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  register_params();
}

FeatureExtractor FeatureExtractor::init(const EncoderConfig& cfg, std::uint64_t seed) {
  FeatureExtractor fe(cfg);
  auto rng = make_rng(seed, "extractor-init");
  std::normal_distribution<double> gauss(0.0, init_std(cfg.d_model));
  for (const auto& info : fe.infos_) {
    auto& vals = fe.params_.at(info.name).mutable_value();
    const bool is_gain = info.name.ends_with("ln.gain");
    const bool is_bias = info.name.ends_with("ln.bias") || info.name.ends_with(".bq") ||
                         info.name.ends_with(".bk") || info.name.ends_with(".bv") ||
                         info.name.ends_with(".bo") || info.name.ends_with(".b1") ||
                         info.name.ends_with(".b2");
    for (auto& v : vals) v = is_gain ? 1.0 : is_bias ? 0.0 : gauss(rng);
  }
  return fe;
}

Tensor FeatureExtractor::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<Tensor> FeatureExtractor::params() const {
  std::vector<Tensor> out;
  out.reserve(infos_.size());
  for (const auto& info : infos_) out.push_back(params_.at(info.name));
  return out;
}

std::size_t FeatureExtractor::param_count() const {
  std::size_t n = 0;
  for (const auto& info : infos_) n += info.rows * info.cols;
  return n;
}

FeatureExtractor::Forward FeatureExtractor::forward(const EncodedInput& in) const {
  if (in.ids.empty() || in.ids.size() > cfg_.max_len) {
    throw ValidationError("encoded input length out of range");
  }
  const std::size_t L = in.ids.size();
  const std::size_t d = cfg_.d_model;
  const std::size_t dh = d / cfg_.n_heads;
  auto P = [&](const std::string& n) { return params_.at(n); };

  Tensor x = ad::add(ad::add(ad::embedding_gather(P("embeddings.word"), in.ids),
                             ad::slice_rows(P("embeddings.position"), 0, L)),
                     ad::embedding_gather(P("embeddings.segment"), in.segment_ids));
  x = ad::layer_norm_rows(x, P("embeddings.ln.gain"), P("embeddings.ln.bias"));

  Forward fwd;
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Tensor q = ad::add(ad::matmul(x, P(p + "attn.wq")), P(p + "attn.bq"));
    Tensor k = ad::add(ad::matmul(x, P(p + "attn.wk")), P(p + "attn.bk"));
    Tensor v = ad::add(ad::matmul(x, P(p + "attn.wv")), P(p + "attn.bv"));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
      Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
      Tensor att = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
      heads.push_back(ad::matmul(att, vh));
    }
    Tensor a = ad::add(ad::matmul(ad::concat_cols(heads), P(p + "attn.wo")), P(p + "attn.bo"));
    Tensor h1 = ad::layer_norm_rows(ad::add(x, a), P(p + "attn.ln.gain"), P(p + "attn.ln.bias"));
    Tensor f = ad::add(
        ad::matmul(ad::gelu(ad::add(ad::matmul(h1, P(p + "ffn.w1")), P(p + "ffn.b1"))),
                   P(p + "ffn.w2")),
        P(p + "ffn.b2"));
    x = ad::layer_norm_rows(ad::add(h1, f), P(p + "out.ln.gain"), P(p + "out.ln.bias"));
    fwd.layer_outputs.push_back(x);
  }
  fwd.final = x;
  return fwd;
}

FeatureExtractor FeatureExtractor::clone() const {
  FeatureExtractor out(cfg_);
  for (const auto& info : infos_) {
    out.params_.at(info.name).mutable_value() = params_.at(info.name).value();
  }
  return out;
}

std::vector<double> FeatureExtractor::flat_values() const {
  std::vector<double> out;
  out.reserve(param_count());
  for (const auto& info : infos_) {
    const auto& v = params_.at(info.name).value();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void FeatureExtractor::set_flat_values(const std::vector<double>& v) {
  if (v.size() != param_count()) {
    throw DimensionError("set_flat_values", std::to_string(param_count()),
                         std::to_string(v.size()));
  }
  std::size_t off = 0;
  for (const auto& info : infos_) {
    auto& dst = params_.at(info.name).mutable_value();
    std::copy(v.begin() + long(off), v.begin() + long(off + dst.size()), dst.begin());
    off += dst.size();
  }
}

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kClassifier: return "classifier";
    case HeadKind::kRegressor: return "regressor";
    case HeadKind::kSpan: return "span";
    case HeadKind::kTagger: return "tagger";
  }
  throw ValidationError("bad head kind");
}

HeadKind head_kind_from(const std::string& s) {
  if (s == "classifier") return HeadKind::kClassifier;
  if (s == "regressor") return HeadKind::kRegressor;
  if (s == "span") return HeadKind::kSpan;
  if (s == "tagger") return HeadKind::kTagger;
  throw ValidationError("unknown head kind '" + s + "'");
}

namespace {

Tensor init_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double std_dev) {
  std::normal_distribution<double> gauss(0.0, std_dev);
  std::vector<double> v(r * c);
  for (auto& x : v) x = gauss(rng);
  return Tensor::from(r, c, std::move(v), true);
}

}  // namespace

Head Head::classifier(std::size_t d_model, int n_classes, std::uint64_t seed) {
  if (n_classes < 2) throw ValidationError("classifier needs >= 2 classes");
  Head h;
  h.kind_ = HeadKind::kClassifier;
  h.out_dim_ = n_classes;
  auto rng = make_rng(seed, "head-init");
  h.params_.emplace("w", init_tensor(d_model, std::size_t(n_classes), rng, init_std(d_model)));
  h.params_.emplace("b", Tensor::zeros(1, std::size_t(n_classes), true));
  return h;
}

Head Head::regressor(std::size_t d_model, std::uint64_t seed) {
  Head h;
  h.kind_ = HeadKind::kRegressor;
  h.out_dim_ = 1;
  auto rng = make_rng(seed, "head-init");
  h.params_.emplace("w", init_tensor(d_model, 1, rng, init_std(d_model)));
  h.params_.emplace("b", Tensor::zeros(1, 1, true));
  return h;
}

Head Head::span(std::size_t d_model, std::uint64_t seed) {
  Head h;
  h.kind_ = HeadKind::kSpan;
  h.out_dim_ = 2;
  auto rng = make_rng(seed, "head-init");
  h.params_.emplace("ws", init_tensor(d_model, 1, rng, init_std(d_model)));
  h.params_.emplace("bs", Tensor::zeros(1, 1, true));
  h.params_.emplace("we", init_tensor(d_model, 1, rng, init_std(d_model)));
  h.params_.emplace("be", Tensor::zeros(1, 1, true));
  return h;
}

Head Head::tagger(std::size_t d_model, int n_tags, std::uint64_t seed) {
  if (n_tags < 2) throw ValidationError("tagger needs >= 2 tags");
  Head h;
  h.kind_ = HeadKind::kTagger;
  h.out_dim_ = n_tags;
  auto rng = make_rng(seed, "head-init");
  h.params_.emplace("w", init_tensor(d_model, std::size_t(n_tags), rng, init_std(d_model)));
  h.params_.emplace("b", Tensor::zeros(1, std::size_t(n_tags), true));
  return h;
}

Head Head::for_task(const tasks::Task& t, std::size_t d_model, std::uint64_t seed) {
  if (t.labels.type == "classes") return classifier(d_model, t.labels.count, seed);
  if (t.labels.type == "real") return regressor(d_model, seed);
  if (t.labels.type == "span") return span(d_model, seed);
  if (t.labels.type == "tags") return tagger(d_model, t.labels.count, seed);
  throw ValidationError("no head for label space '" + t.labels.type + "'");
}

std::vector<Tensor> Head::params() const {
  std::vector<Tensor> out;
  for (const auto& [name, p] : params_) out.push_back(p);
  return out;
}

namespace {

// Squashed regression mean sigma(w.f + b): generated regression targets are
// fractions, and a bounded mean keeps the quadratic loss stable under SGD.
Tensor regression_mean(const std::map<std::string, Tensor>& params, const Tensor& final_rep) {
  Tensor z = ad::add(ad::matmul(ad::slice_rows(final_rep, 0, 1), params.at("w")),
                     params.at("b"));
  return ad::pick(ad::softmax_rows(ad::concat_cols({z, Tensor::scalar(0.0)})), 0, 0);
}

// enc-coordinate passage window for span tasks.
std::pair<std::size_t, std::size_t> passage_window(const EncodedInput& in) {
  if (in.seg_begin.size() != 2) throw ValidationError("span task expects two segments");
  return {in.seg_begin[1], in.seg_begin[1] + in.seg_len[1]};
}

std::size_t argmax_range(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Deterministic draw from unnormalized non-negative weights.
std::size_t draw_index(const std::vector<double>& w, std::size_t lo, std::size_t hi,
                       std::mt19937_64& rng) {
  double total = 0.0;
  for (std::size_t i = lo; i < hi; ++i) total += w[i];
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (std::size_t i = lo; i < hi; ++i) {
    u -= w[i];
    if (u <= 0.0) return i;
  }
  return hi - 1;
}

}  // namespace

Tensor Head::log_likelihood(const FeatureExtractor::Forward& f, const EncodedInput& in,
                            const tasks::Target& target) const {
  switch (kind_) {
    case HeadKind::kClassifier: {
      const int y = std::get<int>(target);
      if (y < 0 || y >= out_dim_) throw ValidationError("class label out of range");
      Tensor logits = ad::add(ad::matmul(ad::slice_rows(f.final, 0, 1), params_.at("w")),
                              params_.at("b"));
      return ad::pick(ad::log_softmax_rows(logits), 0, std::size_t(y));
    }
    case HeadKind::kRegressor: {
      const double y = std::get<double>(target);
      Tensor d = ad::sub(regression_mean(params_, f.final), Tensor::scalar(y));
      return ad::add(ad::scale(ad::mul(d, d), -0.5), Tensor::scalar(-kHalfLog2Pi));
    }
    case HeadKind::kSpan: {
      const auto [s, e] = std::get<std::pair<int, int>>(target);
      const auto [lo, hi] = passage_window(in);
      if (s < 0 || e < s || lo + std::size_t(e) >= hi) {
        throw ValidationError("gold span outside passage");
      }
      Tensor start = ad::transpose(ad::add(ad::matmul(f.final, params_.at("ws")), params_.at("bs")));
      Tensor end = ad::transpose(ad::add(ad::matmul(f.final, params_.at("we")), params_.at("be")));
      return ad::add(ad::pick(ad::log_softmax_rows(start), 0, lo + std::size_t(s)),
                     ad::pick(ad::log_softmax_rows(end), 0, lo + std::size_t(e)));
    }
    case HeadKind::kTagger: {
      const auto& tags = std::get<std::vector<int>>(target);
      if (tags.size() != in.seg_len[0]) throw ValidationError("tag count != token count");
      for (int t : tags) {
        if (t < 0 || t >= out_dim_) throw ValidationError("tag out of range");
      }
      Tensor rows = ad::slice_rows(f.final, in.seg_begin[0], in.seg_begin[0] + in.seg_len[0]);
      Tensor logits = ad::add(ad::matmul(rows, params_.at("w")), params_.at("b"));
      return ad::sum_all(ad::pick_rows(ad::log_softmax_rows(logits), tags));
    }
  }
  throw ValidationError("bad head kind");
}

tasks::Target Head::predict(const FeatureExtractor::Forward& f, const EncodedInput& in) const {
  switch (kind_) {
    case HeadKind::kClassifier: {
      Tensor logits = ad::add(ad::matmul(ad::slice_rows(f.final, 0, 1), params_.at("w")),
                              params_.at("b"));
      return int(argmax_range(logits.value(), 0, logits.size()));
    }
    case HeadKind::kRegressor: {
      return regression_mean(params_, f.final).item();
    }
    case HeadKind::kSpan: {
      const auto [lo, hi] = passage_window(in);
      Tensor start = ad::add(ad::matmul(f.final, params_.at("ws")), params_.at("bs"));
      Tensor end = ad::add(ad::matmul(f.final, params_.at("we")), params_.at("be"));
      const std::size_t s = argmax_range(start.value(), lo, hi);
      const std::size_t e = argmax_range(end.value(), s, hi);
      return std::make_pair(int(s - lo), int(e - lo));
    }
    case HeadKind::kTagger: {
      Tensor rows = ad::slice_rows(f.final, in.seg_begin[0], in.seg_begin[0] + in.seg_len[0]);
      Tensor logits = ad::add(ad::matmul(rows, params_.at("w")), params_.at("b"));
      std::vector<int> tags;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        tags.push_back(int(argmax_range(logits.value(), r * logits.cols(), (r + 1) * logits.cols()) -
                           r * logits.cols()));
      }
      return tags;
    }
  }
  throw ValidationError("bad head kind");
}

tasks::Target Head::sample(const FeatureExtractor::Forward& f, const EncodedInput& in,
                           std::mt19937_64& rng) const {
  switch (kind_) {
    case HeadKind::kClassifier: {
      Tensor probs = ad::softmax_rows(ad::add(
          ad::matmul(ad::slice_rows(f.final, 0, 1), params_.at("w")), params_.at("b")));
      return int(draw_index(probs.value(), 0, probs.size(), rng));
    }
    case HeadKind::kRegressor: {
      return regression_mean(params_, f.final).item() +
             std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    case HeadKind::kSpan: {
      // Restricted to the passage window and renormalized there.
      const auto [lo, hi] = passage_window(in);
      Tensor start = ad::softmax_rows(
          ad::transpose(ad::add(ad::matmul(f.final, params_.at("ws")), params_.at("bs"))));
      Tensor end = ad::softmax_rows(
          ad::transpose(ad::add(ad::matmul(f.final, params_.at("we")), params_.at("be"))));
      const std::size_t s = draw_index(start.value(), lo, hi, rng);
      std::size_t e = draw_index(end.value(), lo, hi, rng);
      if (e < s) e = s;
      return std::make_pair(int(s - lo), int(e - lo));
    }
    case HeadKind::kTagger: {
      Tensor rows = ad::slice_rows(f.final, in.seg_begin[0], in.seg_begin[0] + in.seg_len[0]);
      Tensor probs = ad::softmax_rows(ad::add(ad::matmul(rows, params_.at("w")), params_.at("b")));
      std::vector<int> tags;
      for (std::size_t r = 0; r < probs.rows(); ++r) {
        tags.push_back(int(draw_index(probs.value(), r * probs.cols(), (r + 1) * probs.cols(), rng) -
                           r * probs.cols()));
      }
      return tags;
    }
  }
  throw ValidationError("bad head kind");
}

Head Head::clone() const {
  Head out;
  out.kind_ = kind_;
  out.out_dim_ = out_dim_;
  for (const auto& [name, p] : params_) {
    out.params_.emplace(name, Tensor::from(p.rows(), p.cols(), p.value(), true));
  }
  return out;
}

json Head::to_json() const {
  json params;
  for (const auto& [name, p] : params_) {
    params[name] = json{{"rows", p.rows()},
                        {"cols", p.cols()},
                        {"data", base64_encode(doubles_to_bytes(p.value()).data(), p.size() * 8)}};
  }
  return json{{"kind", to_string(kind_)}, {"out_dim", out_dim_}, {"params", params}};
}

Head Head::from_json(const json& j) {
  Head h;
  h.kind_ = head_kind_from(j.at("kind").get<std::string>());
  h.out_dim_ = j.at("out_dim").get<int>();
  for (const auto& [name, pj] : j.at("params").items()) {
    const auto rows = pj.at("rows").get<std::size_t>();
    const auto cols = pj.at("cols").get<std::size_t>();
    auto vals = bytes_to_doubles(base64_decode(pj.at("data").get<std::string>()));
    if (vals.size() != rows * cols) throw IntegrityError("head blob size mismatch for " + name);
    h.params_.emplace(name, Tensor::from(rows, cols, std::move(vals), true));
  }
  return h;
}

Tensor Model::log_likelihood(const EncodedInput& in, const tasks::Target& target) const {
  if (!head) throw ValidationError("model has no task head");
  return head->log_likelihood(extractor.forward(in), in, target);
}

tasks::Target Model::predict(const EncodedInput& in) const {
  if (!head) throw ValidationError("model has no task head");
  return head->predict(extractor.forward(in), in);
}

Model Model::clone() const {
  return Model{extractor.clone(), head ? std::optional<Head>(head->clone()) : std::nullopt};
}

void save_model(const Model& m, const std::string& path) {
  json components;
  for (const auto& info : m.extractor.param_infos()) {
    const auto p = m.extractor.param(info.name);
    json entry{{"rows", info.rows},
               {"cols", info.cols},
               {"data", base64_encode(doubles_to_bytes(p.value()).data(), p.size() * 8)}};
    if (info.layer != ParamInfo::kNoLayer) entry["layer"] = info.layer;
    components[info.component]["params"][info.name] = std::move(entry);
  }
  json j{{"format", "taskemb-model-v1"},
         {"config", m.extractor.config().to_json()},
         {"components", components},
         {"head", m.head ? m.head->to_json() : json(nullptr)}};
  j["hash"] = hex64(fnv1a64(j.dump()));
  atomic_write_file(path, j.dump(2) + "\n");
}

Model load_model(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path, 0, e.what());
  }
  if (j.value("format", "") != "taskemb-model-v1") {
    throw ValidationError("unrecognized model format in " + path);
  }
  const std::string stored = j.at("hash").get<std::string>();
  json without = j;
  without.erase("hash");
  if (hex64(fnv1a64(without.dump())) != stored) {
    throw IntegrityError("model file hash mismatch: " + path);
  }
  Model m{FeatureExtractor(EncoderConfig::from_json(j.at("config"))), std::nullopt};
  std::size_t loaded = 0;
  for (const auto& [component, cj] : j.at("components").items()) {
    (void)component;
    for (const auto& [name, pj] : cj.at("params").items()) {
      const auto p = m.extractor.param(name);  // throws on unknown name
      auto vals = bytes_to_doubles(base64_decode(pj.at("data").get<std::string>()));
      if (vals.size() != p.size()) throw IntegrityError("blob size mismatch for " + name);
      p.node()->value = std::move(vals);
      ++loaded;
    }
  }
  if (loaded != m.extractor.param_infos().size()) {
    throw IntegrityError("model file missing parameters");
  }
  if (!j.at("head").is_null()) m.head = Head::from_json(j.at("head"));
  return m;
}

std::string model_file_hash(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path, 0, e.what());
  }
  return j.at("hash").get<std::string>();
}

Model pretrain_reference_model(const EncoderConfig& cfg,
                               const std::vector<std::vector<int>>& corpus,
                               const PretrainConfig& pc, std::uint64_t seed) {
  cfg.validate();
  if (corpus.empty()) throw ValidationError("empty pretraining corpus");
  Model m{FeatureExtractor::init(cfg, derive_seed(seed, "pretrain")), std::nullopt};
  auto rng = make_rng(seed, "pretrain-steps");
  const std::size_t cap = cfg.max_len - 2;  // room for [CLS] and [SEP]
  auto params = m.extractor.params();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t step = 0; step < pc.steps; ++step) {
    if (step % corpus.size() == 0) std::shuffle(order.begin(), order.end(), rng);
    const auto& raw = corpus[order[step % corpus.size()]];
    if (raw.empty()) throw ValidationError("empty corpus sequence");
    std::vector<int> seq(raw.begin(), raw.begin() + std::min(raw.size(), cap));
    EncodedInput in = encode_input(cfg, {seq});
    // Mask a subset of content positions, then reconstruct EVERY content
    // position. Unmasked positions anchor per-position token identity —
    // predicting masked positions alone lets training collapse all
    // representations to the corpus marginal on weakly-predictable text.
    std::vector<int> truth(in.ids.begin() + long(in.seg_begin[0]),
                           in.ids.begin() + long(in.seg_begin[0] + in.seg_len[0]));
    std::vector<std::size_t> masked;
    std::bernoulli_distribution flip(pc.mask_prob);
    for (std::size_t i = in.seg_begin[0]; i < in.seg_begin[0] + in.seg_len[0]; ++i) {
      if (flip(rng)) masked.push_back(i);
    }
    if (masked.empty()) {
      masked.push_back(in.seg_begin[0] +
                       std::uniform_int_distribution<std::size_t>(0, in.seg_len[0] - 1)(rng));
    }
    for (std::size_t i : masked) in.ids[i] = kMaskId;
    auto fwd = m.extractor.forward(in);
    // Tied output projection onto the word-embedding table.
    Tensor logp = ad::log_softmax_rows(ad::matmul_nt(fwd.final, m.extractor.param("embeddings.word")));
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t k = 0; k < truth.size(); ++k) {
      acc = ad::add(acc, ad::pick(logp, in.seg_begin[0] + k, std::size_t(truth[k])));
    }
    Tensor loss = ad::scale(acc, -1.0 / double(truth.size()));
    if (!std::isfinite(loss.item())) {
      throw Error("pretraining diverged: non-finite loss at step " + std::to_string(step));
    }
    ad::backward(loss);
    for (auto& p : params) {
      auto& vals = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= pc.lr * g[i];
    }
  }
  return m;
}

std::vector<double> per_example_grad(const Model& m, const EncodedInput& in,
                                     const tasks::Target& target) {
  ad::backward(m.log_likelihood(in, target));
  std::vector<double> out;
  out.reserve(m.extractor.param_count());
  for (const auto& p : m.extractor.params()) {
    const auto& g = p.grad();
    if (g.empty()) {
      out.insert(out.end(), p.size(), 0.0);
    } else {
      out.insert(out.end(), g.begin(), g.end());
    }
  }
  return out;
}

}  // namespace taskemb::enc
