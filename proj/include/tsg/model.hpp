#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tsg/backbone.hpp"
#include "tsg/datamodel.hpp"
#include "tsg/nn.hpp"
#include "tsg/objectives.hpp"
#include "tsg/pgmf.hpp"
#include "tsg/pin.hpp"
#include "tsg/promptpool.hpp"
#include "tsg/pseudoquery.hpp"

namespace tsg::model {

struct ModelConfig {
  int T = 128;
  int D = 128;
  int D_in = 64;
  int num_heads = 8;
  int num_layers = 1;
  double dropout = 0.2;
  int embed_dim_in = 300;
  int vocab_size = 0;  // required
  bool freeze_embeddings = false;

  bool use_pin = true;
  bool use_prompt = true;

  int prompt_len = 2;
  int pool_size = 20;
  double key_pull_weight = 0.1;
  int max_mask_slots = 64;

  bool start_from_first_lstm = true;
  int full_enum_max_t = 64;
  double decode_gamma = 1.0;

  double extend_ratio = 0.25;
  double t_min = 0.5;
  double t_max = 1.0;

  void validate() const;
};

/// One preprocessed video/query pair: features resampled to the model's T,
/// the tokenized query, and the selected (not yet masked) pseudo-queries.
struct Sample {
  datamodel::VideoFeatures video;
  datamodel::MomentAnnotation annotation;
  std::vector<int> query_ids;
  pseudoquery::PseudoQuerySet pseudo;
};

/// Everything one training forward produces. The graph owns the tape; the
/// caller seeds the backward pass (per-sample loss plus contrastive pull on
/// the pooled pair) and harvests parameter gradients.
struct TrainForward {
  nn::Graph graph;
  ad::Var sample_loss;  // lambda2*l_pre + lambda3*l_bound + key pull
  ad::Var v_tilde;      // valid when the intermediary branch ran
  ad::Var p_tilde;
  double l_pre = 0.0;
  double l_bound = 0.0;
  double l_key = 0.0;
  int retrieved_entry = -1;
  pgmf::PgmfOutput out;
  objectives::SupervisionLabels labels;
};

struct Prediction {
  pgmf::GroundingPrediction pred;
  double pred_start_sec = 0.0;
  double pred_end_sec = 0.0;
  int retrieved_entry = -1;
};

/// Embedding-table-backed token embedder for pseudo-query scoring.
class TableEmbedder : public pseudoquery::TextEmbedder {
 public:
  TableEmbedder(const backbone::EmbeddingTable& table, const datamodel::Vocabulary& vocab)
      : table_(table), vocab_(vocab) {}

  Mat embed_tokens(const std::vector<std::string>& tokens) const override;

 private:
  const backbone::EmbeddingTable& table_;
  const datamodel::Vocabulary& vocab_;
};

class GroundingModel {
 public:
  explicit GroundingModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const backbone::EmbeddingTable& embeddings() const { return *embed_; }
  backbone::EmbeddingTable& embeddings() { return *embed_; }
  const promptpool::PromptPool& pool() const { return *pool_; }
  const pin::Pin& intermediary() const { return *pin_; }

  void init(uint64_t seed) { params_.init_params(seed); }

  /// Training-mode forward. `pseudo_ids` are the (masked) pseudo-query token
  /// ids, `mask_positions` the ascending masked positions within them; rng
  /// drives dropout masks when dropout > 0.
  void forward_train(const Sample& sample, const std::vector<int>& pseudo_ids,
                     const std::vector<int>& mask_positions,
                     const objectives::LossWeights& weights, double dropout, Rng* rng,
                     TrainForward& out) const;

  /// Inference: no pseudo-queries; the ground-truth query retrieves the
  /// prompt. Decoded frames are mapped back to seconds.
  Prediction predict(const Sample& sample) const;

  /// Cosine between the pooled visual and pooled pseudo-query features of
  /// one sample (evaluation mode, no dropout).
  double pair_cosine(const Sample& sample, const std::vector<int>& pseudo_ids,
                     const std::vector<int>& mask_positions) const;

  pgmf::TemporalMap2D map_for(int valid_frames) const;

 private:
  ModelConfig cfg_;
  nn::ParamStore params_;
  std::unique_ptr<backbone::EmbeddingTable> embed_;
  std::unique_ptr<backbone::VisualEncoder> visual_;
  std::unique_ptr<backbone::TextualEncoder> textual_;
  std::unique_ptr<pin::Pin> pin_;
  std::unique_ptr<promptpool::PromptPool> pool_;
  std::unique_ptr<pgmf::Pgmf> pgmf_;
};

}  // namespace tsg::model
