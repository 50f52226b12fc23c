#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskemb/autodiff.hpp"
#include "taskemb/tasks.hpp"

// A miniature bidirectional transformer encoder plus the task heads that sit
// on top of it. The feature extractor (everything below the head) is the
// object embedded by the Fisher machinery, so its parameters carry stable
// names and a fixed flattening order grouped into four components:
// token_embeddings, attention, feed_forward, layer_output.
namespace taskemb::enc {

inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kFirstContentId = 3;

struct EncoderConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 64;
  std::size_t max_len = 64;
  bool trailing_sep = true;  // [CLS] s1 [SEP] s2 [SEP] vs no final [SEP]

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  std::string hash() const;  // over the canonical JSON form
};

// Token ids with specials inserted, plus segment bookkeeping. seg_begin[k]
// is the encoded position of segment k's first token.
struct EncodedInput {
  std::vector<int> ids;
  std::vector<int> segment_ids;
  std::vector<std::size_t> seg_begin;
  std::vector<std::size_t> seg_len;
  std::size_t length() const { return ids.size(); }
};

EncodedInput encode_input(const EncoderConfig& cfg, const std::vector<std::vector<int>>& segments);
// Fold arbitrary string tokens into the content id range.
int hash_token(const EncoderConfig& cfg, const std::string& token);
EncodedInput encode_text(const EncoderConfig& cfg,
                         const std::vector<std::vector<std::string>>& segments);

struct ParamInfo {
  std::string name;
  std::string component;  // token_embeddings | attention | feed_forward | layer_output
  std::size_t layer;      // 0-based; npos for the embedding block
  std::size_t rows, cols;
  static constexpr std::size_t kNoLayer = std::size_t(-1);
};

class FeatureExtractor {
 public:
  explicit FeatureExtractor(const EncoderConfig& cfg);  // zero-valued params
  static FeatureExtractor init(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  ad::Tensor param(const std::string& name) const;
  std::vector<ad::Tensor> params() const;  // flattening order == param_infos()
  std::size_t param_count() const;

  struct Forward {
    ad::Tensor final;                      // [L, d_model]
    std::vector<ad::Tensor> layer_outputs; // one per layer; back() == final
  };
  Forward forward(const EncodedInput& in) const;

  FeatureExtractor clone() const;
  std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& v);

 private:
  EncoderConfig cfg_;
  std::vector<ParamInfo> infos_;
  std::map<std::string, ad::Tensor> params_;
  void register_params();
};

enum class HeadKind { kClassifier, kRegressor, kSpan, kTagger };
std::string to_string(HeadKind k);
HeadKind head_kind_from(const std::string& s);

// Task-specific output layer. Discarded and re-initialized between the two
// fine-tuning stages; excluded from Fisher embeddings.
class Head {
 public:
  static Head classifier(std::size_t d_model, int n_classes, std::uint64_t seed);
  static Head regressor(std::size_t d_model, std::uint64_t seed);
  static Head span(std::size_t d_model, std::uint64_t seed);
  static Head tagger(std::size_t d_model, int n_tags, std::uint64_t seed);
  static Head for_task(const tasks::Task& t, std::size_t d_model, std::uint64_t seed);

  HeadKind kind() const { return kind_; }
  int out_dim() const { return out_dim_; }
  std::vector<ad::Tensor> params() const;

  // log P(target | input); a scalar graph node.
  ad::Tensor log_likelihood(const FeatureExtractor::Forward& f, const EncodedInput& in,
                            const tasks::Target& target) const;
  tasks::Target predict(const FeatureExtractor::Forward& f, const EncodedInput& in) const;
  // Draw a label from the model's own output distribution (sampled-label
  // Fisher mode).
  tasks::Target sample(const FeatureExtractor::Forward& f, const EncodedInput& in,
                       std::mt19937_64& rng) const;

  Head clone() const;
  nlohmann::json to_json() const;
  static Head from_json(const nlohmann::json& j);

 private:
  Head() = default;
  HeadKind kind_ = HeadKind::kClassifier;
  int out_dim_ = 0;
  std::map<std::string, ad::Tensor> params_;
};

struct Model {
  FeatureExtractor extractor;
  std::optional<Head> head;

  ad::Tensor log_likelihood(const EncodedInput& in, const tasks::Target& target) const;
  tasks::Target predict(const EncodedInput& in) const;
  Model clone() const;
};

// Versioned JSON model file: config record, per-component base64 blocks of
// little-endian 64-bit reals, optional head block, whole-file content hash.
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);  // throws IntegrityError on hash mismatch
std::string model_file_hash(const std::string& path);

// Masked-token pretraining over an unlabeled corpus; returns the shared
// reference extractor all later fine-tuning starts from.
struct PretrainConfig {
  std::size_t steps = 400;
  double lr = 0.1;
  double mask_prob = 0.15;
};
Model pretrain_reference_model(const EncoderConfig& cfg,
                               const std::vector<std::vector<int>>& corpus,
                               const PretrainConfig& pc, std::uint64_t seed);

// Gradient of log-likelihood w.r.t. the extractor parameters only, flattened
// in param_infos() order. Head gradients are discarded.
std::vector<double> per_example_grad(const Model& m, const EncodedInput& in,
                                     const tasks::Target& target);

}  // namespace taskemb::enc
