#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "taskemb/common.hpp"
#include "taskemb/encoder.hpp"

using namespace taskemb;
using enc::EncodedInput;
using enc::EncoderConfig;
using enc::FeatureExtractor;
using enc::Head;
using enc::Model;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ffn = 16;
  cfg.max_len = 32;
  return cfg;
}

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("taskemb_enc_test_" + name);
}

}  // namespace

TEST_CASE("encode_input inserts specials and tracks segments") {
  EncoderConfig cfg = small_cfg();

  EncodedInput two = enc::encode_input(cfg, {{5, 6}, {7, 8, 9}});
  CHECK(two.ids == std::vector<int>{enc::kClsId, 5, 6, enc::kSepId, 7, 8, 9, enc::kSepId});
  CHECK(two.segment_ids == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(two.seg_begin == std::vector<std::size_t>{1, 4});
  CHECK(two.seg_len == std::vector<std::size_t>{2, 3});

  EncodedInput one = enc::encode_input(cfg, {{5, 6}});
  CHECK(one.ids == std::vector<int>{enc::kClsId, 5, 6, enc::kSepId});

  cfg.trailing_sep = false;
  CHECK(enc::encode_input(cfg, {{5, 6}}).ids == std::vector<int>{enc::kClsId, 5, 6});
  CHECK(enc::encode_input(cfg, {{5}, {6}}).ids ==
        std::vector<int>{enc::kClsId, 5, enc::kSepId, 6});
}

TEST_CASE("encode_input validates tokens, arity, and length") {
  EncoderConfig cfg = small_cfg();
  CHECK_THROWS_AS(enc::encode_input(cfg, {}), ValidationError);
  CHECK_THROWS_AS(enc::encode_input(cfg, {{4}, {5}, {6}}), ValidationError);
  CHECK_THROWS_AS(enc::encode_input(cfg, {{enc::kMaskId - 1}}), ValidationError);
  CHECK_THROWS_AS(enc::encode_input(cfg, {{int(cfg.vocab_size)}}), ValidationError);
  CHECK_THROWS_AS(enc::encode_input(cfg, {std::vector<int>(cfg.max_len, 5)}), ValidationError);
  CHECK_THROWS_AS(enc::encode_input(cfg, {{}}), ValidationError);
}

TEST_CASE("hash_token folds strings into the content range deterministically") {
  EncoderConfig cfg = small_cfg();
  for (const std::string& tok : {"alpha", "beta", "x", ""}) {
    int id = enc::hash_token(cfg, tok);
    CHECK(id >= enc::kFirstContentId);
    CHECK(std::size_t(id) < cfg.vocab_size);
    CHECK(id == enc::hash_token(cfg, tok));
  }
  EncodedInput in = enc::encode_text(cfg, {{"alpha", "beta"}});
  CHECK(in.ids.size() == 4);
  CHECK(in.ids[1] == enc::hash_token(cfg, "alpha"));
}

TEST_CASE("parameter registry covers every block in documented order") {
  EncoderConfig cfg = small_cfg();
  FeatureExtractor fe(cfg);
  const auto& infos = fe.param_infos();
  CHECK(infos.size() == 5 + cfg.n_layers * 16);
  CHECK(infos[0].name == "embeddings.word");
  CHECK(infos[0].component == "token_embeddings");
  CHECK(infos[0].rows == cfg.vocab_size);
  CHECK(infos[5].name == "layer0.attn.wq");

  std::map<std::string, std::size_t> per_component;
  std::size_t total = 0;
  for (const auto& i : infos) {
    per_component[i.component]++;
    total += i.rows * i.cols;
    if (i.component == "token_embeddings") CHECK(i.layer == enc::ParamInfo::kNoLayer);
    else CHECK(i.layer < cfg.n_layers);
  }
  CHECK(per_component["token_embeddings"] == 5);
  CHECK(per_component["attention"] == 10 * cfg.n_layers);
  CHECK(per_component["feed_forward"] == 4 * cfg.n_layers);
  CHECK(per_component["layer_output"] == 2 * cfg.n_layers);
  CHECK(fe.param_count() == total);

  const std::size_t d = cfg.d_model;
  const std::size_t expected =
      cfg.vocab_size * d + cfg.max_len * d + 2 * d + 2 * d +
      cfg.n_layers * (4 * (d * d + d) + 2 * d + 2 * (d * cfg.d_ffn) + cfg.d_ffn + d + 2 * d);
  CHECK(fe.param_count() == expected);
}

TEST_CASE("seeded init is deterministic and seed-sensitive") {
  EncoderConfig cfg = small_cfg();
  auto a = FeatureExtractor::init(cfg, 7);
  auto b = FeatureExtractor::init(cfg, 7);
  auto c = FeatureExtractor::init(cfg, 8);
  CHECK(a.flat_values() == b.flat_values());
  CHECK(a.flat_values() != c.flat_values());
  // Layer-norm gains start at one, biases at zero.
  for (double v : a.param("layer0.out.ln.gain").value()) CHECK(v == 1.0);
  for (double v : a.param("layer0.attn.bq").value()) CHECK(v == 0.0);
}

TEST_CASE("forward produces per-layer outputs of the right shape") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 3);
  EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}, {8, 9}});
  auto fwd = fe.forward(in);
  CHECK(fwd.final.rows() == in.length());
  CHECK(fwd.final.cols() == cfg.d_model);
  CHECK(fwd.layer_outputs.size() == cfg.n_layers);
  CHECK(fwd.layer_outputs.back().value() == fwd.final.value());
  for (double v : fwd.final.value()) CHECK(std::isfinite(v));
  // Bitwise repeatable.
  CHECK(fe.forward(in).final.value() == fwd.final.value());
}

TEST_CASE("uniform-output log-likelihoods match closed forms") {
  EncoderConfig cfg = small_cfg();
  // All-zero extractor: layer norms have zero gain, so every representation
  // row is exactly zero and each head sees zero features.
  FeatureExtractor zero(cfg);

  SUBCASE("classifier over 4 classes") {
    Model m{zero.clone(), Head::classifier(cfg.d_model, 4, 1)};
    EncodedInput in = enc::encode_input(cfg, {{5, 6}});
    double ll = m.log_likelihood(in, tasks::Target(2)).item();
    CHECK(ll == doctest::Approx(std::log(0.25)).epsilon(1e-12));
    CHECK(std::get<int>(m.predict(in)) == 0);  // ties resolve to the first class
  }

  SUBCASE("tagger: three tokens, five tags") {
    Model m{zero.clone(), Head::tagger(cfg.d_model, 5, 1)};
    EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}});
    double ll = m.log_likelihood(in, tasks::Target(std::vector<int>{0, 4, 2})).item();
    CHECK(ll == doctest::Approx(3.0 * std::log(0.2)).epsilon(1e-12));
    CHECK(ll == doctest::Approx(-4.8283137373023015).epsilon(1e-12));
  }

  SUBCASE("span: ten encoded positions") {
    Model m{zero.clone(), Head::span(cfg.d_model, 1)};
    EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}, {8, 9, 10, 11}});
    REQUIRE(in.length() == 10);
    double ll = m.log_likelihood(in, tasks::Target(std::make_pair(0, 1))).item();
    CHECK(ll == doctest::Approx(2.0 * std::log(0.1)).epsilon(1e-12));
    CHECK(ll == doctest::Approx(-4.605170185988091).epsilon(1e-12));
  }

  SUBCASE("regressor: unit-variance gaussian around squashed mean") {
    Model m{zero.clone(), Head::regressor(cfg.d_model, 1)};
    EncodedInput in = enc::encode_input(cfg, {{5, 6}});
    // Zero features give a squashed mean of exactly 0.5.
    double ll = m.log_likelihood(in, tasks::Target(1.5)).item();
    CHECK(ll == doctest::Approx(-0.5 * (1.5 - 0.5) * (1.5 - 0.5) - 0.5 * std::log(2.0 * M_PI))
                    .epsilon(1e-12));
    CHECK(std::get<double>(m.predict(in)) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("log-likelihood rejects malformed targets") {
  EncoderConfig cfg = small_cfg();
  FeatureExtractor zero(cfg);
  Model cls{zero.clone(), Head::classifier(cfg.d_model, 3, 1)};
  EncodedInput one = enc::encode_input(cfg, {{5, 6}});
  CHECK_THROWS_AS(cls.log_likelihood(one, tasks::Target(3)).item(), ValidationError);

  Model tag{zero.clone(), Head::tagger(cfg.d_model, 3, 1)};
  CHECK_THROWS_AS(tag.log_likelihood(one, tasks::Target(std::vector<int>{0})).item(),
                  ValidationError);

  Model sp{zero.clone(), Head::span(cfg.d_model, 1)};
  EncodedInput two = enc::encode_input(cfg, {{5, 6}, {7, 8}});
  CHECK_THROWS_AS(sp.log_likelihood(two, tasks::Target(std::make_pair(0, 2))).item(),
                  ValidationError);
  CHECK_THROWS_AS(sp.log_likelihood(one, tasks::Target(std::make_pair(0, 0))).item(),
                  ValidationError);
}

TEST_CASE("span prediction stays inside the passage window") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 11);
  Model m{fe.clone(), Head::span(cfg.d_model, 5)};
  EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}, {8, 9, 10, 11}});
  auto [s, e] = std::get<std::pair<int, int>>(m.predict(in));
  CHECK(s >= 0);
  CHECK(e >= s);
  CHECK(e < int(in.seg_len[1]));
}

TEST_CASE("sampled labels are deterministic under a fixed rng and well-formed") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 5);

  Model cls{fe.clone(), Head::classifier(cfg.d_model, 3, 2)};
  EncodedInput one = enc::encode_input(cfg, {{5, 6, 7}});
  auto f1 = cls.extractor.forward(one);
  auto r1 = make_rng(9, "sample");
  auto r2 = make_rng(9, "sample");
  for (int i = 0; i < 20; ++i) {
    int ya = std::get<int>(cls.head->sample(f1, one, r1));
    int yb = std::get<int>(cls.head->sample(f1, one, r2));
    CHECK(ya == yb);
    CHECK(ya >= 0);
    CHECK(ya < 3);
  }

  Model sp{fe.clone(), Head::span(cfg.d_model, 2)};
  EncodedInput two = enc::encode_input(cfg, {{5, 6, 7}, {8, 9, 10, 11}});
  auto f2 = sp.extractor.forward(two);
  auto r3 = make_rng(10, "sample");
  for (int i = 0; i < 20; ++i) {
    auto [s, e] = std::get<std::pair<int, int>>(sp.head->sample(f2, two, r3));
    CHECK(s >= 0);
    CHECK(e >= s);
    CHECK(e < int(two.seg_len[1]));
    // The sampled span must be a valid gold target for the likelihood.
    CHECK(std::isfinite(sp.log_likelihood(two, tasks::Target(std::make_pair(s, e))).item()));
  }

  Model tag{fe.clone(), Head::tagger(cfg.d_model, 4, 2)};
  auto f3 = tag.extractor.forward(one);
  auto r4 = make_rng(11, "sample");
  auto tags = std::get<std::vector<int>>(tag.head->sample(f3, one, r4));
  CHECK(tags.size() == one.seg_len[0]);
  for (int t : tags) {
    CHECK(t >= 0);
    CHECK(t < 4);
  }
}

TEST_CASE("per-example gradient is full-length, deterministic, and nonzero") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 21);
  Model m{fe.clone(), Head::classifier(cfg.d_model, 3, 4)};
  EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}, {8, 9}});
  auto g1 = enc::per_example_grad(m, in, tasks::Target(1));
  auto g2 = enc::per_example_grad(m, in, tasks::Target(1));
  CHECK(g1.size() == m.extractor.param_count());
  CHECK(g1 == g2);
  double norm = 0.0;
  for (double v : g1) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("clone decouples parameter storage") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 2);
  auto copy = fe.clone();
  CHECK(copy.flat_values() == fe.flat_values());
  fe.param("embeddings.word").mutable_value()[0] += 1.0;
  CHECK(copy.flat_values() != fe.flat_values());
}

TEST_CASE("model files round-trip bitwise and detect tampering") {
  EncoderConfig cfg = small_cfg();
  auto fe = FeatureExtractor::init(cfg, 31);
  Model m{fe.clone(), Head::tagger(cfg.d_model, 4, 7)};
  auto path = tmp_path("roundtrip.json");
  enc::save_model(m, path.string());

  Model back = enc::load_model(path.string());
  CHECK(back.extractor.flat_values() == m.extractor.flat_values());
  REQUIRE(back.head.has_value());
  CHECK(back.head->kind() == enc::HeadKind::kTagger);
  CHECK(back.head->out_dim() == 4);
  EncodedInput in = enc::encode_input(cfg, {{5, 6, 7}});
  CHECK(std::get<std::vector<int>>(back.predict(in)) ==
        std::get<std::vector<int>>(m.predict(in)));

  CHECK(enc::model_file_hash(path.string()).size() == 16);

  // Saving the identical model twice produces identical bytes.
  auto path2 = tmp_path("roundtrip2.json");
  enc::save_model(m, path2.string());
  CHECK(read_file(path.string()) == read_file(path2.string()));
  CHECK(enc::model_file_hash(path.string()) == enc::model_file_hash(path2.string()));

  // Headless models round-trip too.
  Model bare{fe.clone(), std::nullopt};
  auto path3 = tmp_path("bare.json");
  enc::save_model(bare, path3.string());
  CHECK_FALSE(enc::load_model(path3.string()).head.has_value());

  // Corrupt one character of the stored weights: integrity check trips.
  std::string text = read_file(path.string());
  auto pos = text.find("\"data\": \"");
  REQUIRE(pos != std::string::npos);
  pos += 10;
  text[pos] = text[pos] == 'A' ? 'B' : 'A';
  auto bad = tmp_path("tampered.json");
  {
    std::ofstream out(bad);
    out << text;
  }
  CHECK_THROWS_AS(enc::load_model(bad.string()), IntegrityError);

  std::filesystem::remove(path);
  std::filesystem::remove(path2);
  std::filesystem::remove(path3);
  std::filesystem::remove(bad);
}

TEST_CASE("masked-token pretraining is deterministic and moves the loss") {
  EncoderConfig cfg = small_cfg();
  auto corpus_rng = make_rng(1, "corpus");
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < 8; ++i) {
    std::vector<int> seq(20);
    for (auto& t : seq) {
      t = std::uniform_int_distribution<int>(enc::kFirstContentId, int(cfg.vocab_size) - 1)(
          corpus_rng);
    }
    corpus.push_back(seq);
  }

  enc::PretrainConfig pc;
  pc.steps = 60;
  pc.lr = 0.1;
  Model a = enc::pretrain_reference_model(cfg, corpus, pc, 42);
  Model b = enc::pretrain_reference_model(cfg, corpus, pc, 42);
  CHECK(a.extractor.flat_values() == b.extractor.flat_values());
  CHECK(a.extractor.flat_values() != FeatureExtractor::init(cfg, derive_seed(42, "pretrain"))
                                          .flat_values());

  // Mean masked-token log-likelihood should beat the untrained baseline.
  auto mean_ll = [&](const Model& m) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& seq : corpus) {
      EncodedInput in = enc::encode_input(cfg, {seq});
      auto fwd = m.extractor.forward(in);
      auto logp = ad::log_softmax_rows(
          ad::matmul_nt(fwd.final, m.extractor.param("embeddings.word")));
      for (std::size_t i = in.seg_begin[0]; i < in.seg_begin[0] + in.seg_len[0]; ++i) {
        total += logp.value()[i * cfg.vocab_size + std::size_t(in.ids[i])];
        ++n;
      }
    }
    return total / double(n);
  };
  Model fresh{FeatureExtractor::init(cfg, derive_seed(42, "pretrain")), std::nullopt};
  CHECK(mean_ll(a) > mean_ll(fresh));
}
