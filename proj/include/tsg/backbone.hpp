#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tsg/datamodel.hpp"
#include "tsg/nn.hpp"

namespace tsg::backbone {

struct EncoderConfig {
  int D = 128;
  int num_heads = 8;
  double dropout = 0.2;
  int embed_dim_in = 300;
  int num_layers = 1;

  void validate() const {
    TSG_CHECK(D >= 1 && num_heads >= 1 && D % num_heads == 0,
              "encoder config: D=" << D << " must be divisible by num_heads=" << num_heads);
    TSG_CHECK(dropout >= 0.0 && dropout < 1.0, "encoder config: dropout outside [0,1)");
    TSG_CHECK(embed_dim_in >= 1, "encoder config: embed_dim_in must be positive");
    TSG_CHECK(num_layers >= 0, "encoder config: negative num_layers");
  }
};

/// Per-forward context: training mode enables dropout, drawing masks from
/// the provided stream (deterministic given the caller's seeding).
struct ForwardCtx {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  bool dropout_active() const { return training && dropout > 0.0 && rng != nullptr; }
};

/// Token embedding table. Row kMaskTokenId is the dedicated mask embedding.
/// Trainable by default; a frozen table binds as a constant.
class EmbeddingTable {
 public:
  EmbeddingTable(nn::ParamStore& ps, const std::string& name, int vocab_size, int dim,
                 bool frozen = false);

  /// Lookup with tape gradients; rows at and beyond `valid` are zero.
  ad::Var lookup(nn::Graph& g, const std::vector<int>& ids, int valid) const;
  /// Plain value lookup for scoring paths that must not train.
  Mat lookup_values(const std::vector<int>& ids) const;

  /// Load "token v1 v2 ... vN" lines; tokens absent from `vocab` are
  /// skipped, tokens present keep their random init if the file lacks them.
  void load_pretrained(const std::filesystem::path& path, const datamodel::Vocabulary& vocab);

  int vocab_size() const { return static_cast<int>(weights_->value.rows()); }
  int dim() const { return static_cast<int>(weights_->value.cols()); }
  nn::Parameter& weights() { return *weights_; }

 private:
  nn::Parameter* weights_;
  bool frozen_;
};

/// Self-attention block: layer_norm(x + dropout(attention delta)), padded
/// rows pinned to zero.
struct EncoderBlock {
  nn::MhaLayer attn;
  nn::LayerNormLayer ln;

  static EncoderBlock create(nn::ParamStore& ps, const std::string& name,
                             const EncoderConfig& cfg);
  ad::Var apply(nn::Graph& g, ad::Var x, int valid, const ForwardCtx& ctx) const;
};

/// Projection + attention stack over frame features.
class VisualEncoder {
 public:
  VisualEncoder(nn::ParamStore& ps, const std::string& name, int d_in, const EncoderConfig& cfg);

  /// T x D_in -> T x D; padded rows stay exactly zero.
  ad::Var encode(nn::Graph& g, const Mat& features, int valid_frames,
                 const ForwardCtx& ctx) const;

 private:
  EncoderConfig cfg_;
  nn::LinearLayer proj_;
  std::vector<EncoderBlock> blocks_;
};

/// Embedding lookup + projection + attention stack over token ids.
class TextualEncoder {
 public:
  TextualEncoder(nn::ParamStore& ps, const std::string& name, EmbeddingTable* embed,
                 const EncoderConfig& cfg);

  ad::Var encode(nn::Graph& g, const std::vector<int>& token_ids, int valid_tokens,
                 const ForwardCtx& ctx) const;

 private:
  EncoderConfig cfg_;
  EmbeddingTable* embed_;
  nn::LinearLayer proj_;
  std::vector<EncoderBlock> blocks_;
};

/// Row-stochastic cross-modal similarity: softmax over valid query tokens of
/// FC(V) FC(Q)^T. Every row sums to one; padded token columns carry zero.
class CrossSimilarity {
 public:
  CrossSimilarity(nn::ParamStore& ps, const std::string& name, int d);

  ad::Var apply(nn::Graph& g, ad::Var v_enc, ad::Var q_enc, int valid_tokens) const;

 private:
  nn::LinearLayer fc_v_, fc_q_;
};

}  // namespace tsg::backbone
