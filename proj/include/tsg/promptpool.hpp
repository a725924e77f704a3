#pragma once

#include <string>

#include "tsg/backbone.hpp"
#include "tsg/nn.hpp"

namespace tsg::promptpool {

struct PoolConfig {
  int pool_size = 20;
  int prompt_len = 2;  // N
  int D = 128;
  int num_heads = 8;
  double key_pull_weight = 0.1;
};

/// Learnable prompt pool with cosine key retrieval and a single-layer
/// self-attention refinement stage.
class PromptPool {
 public:
  PromptPool(nn::ParamStore& ps, const std::string& name, const PoolConfig& cfg);

  /// Entry with the highest cosine(key, key_feat); ties break toward the
  /// lowest index. Deterministic for a fixed pool state.
  int retrieve_index(const Eigen::RowVectorXd& key_feat) const;

  ad::Var prompt(nn::Graph& g, int index) const;  // N x D
  ad::Var key(nn::Graph& g, int index) const;     // 1 x D

  /// Self-attention over [prompt; pseudo-query features]; returns the first
  /// N rows. Pass an invalid Var (or p_valid 0) when no pseudo-queries
  /// exist, e.g. at inference.
  ad::Var refine(nn::Graph& g, ad::Var prompt_rows, ad::Var p_feat, int p_valid) const;

  /// key_pull_weight * (1 - cosine(key[index], stop_grad(query_key))); the
  /// surrogate that trains pool keys toward the queries that select them.
  ad::Var key_pull_loss(nn::Graph& g, int index, ad::Var query_key) const;

  const PoolConfig& config() const { return cfg_; }
  int pool_size() const { return cfg_.pool_size; }
  int prompt_len() const { return cfg_.prompt_len; }
  const Mat& key_values() const { return keys_->value; }

 private:
  PoolConfig cfg_;
  nn::Parameter* keys_ = nullptr;     // pool_size x D
  nn::Parameter* prompts_ = nullptr;  // (pool_size * N) x D
  nn::MhaLayer refine_attn_;
};

struct Prepended {
  ad::Var q_hat;
  int valid = 0;
};

/// Q-hat = [prompt rows; query rows]; prompt rows are always valid, the
/// query's padded suffix stays the padded suffix.
Prepended prepend_prompt(ad::Var prompt_rows, ad::Var q_feat, int q_valid);

}  // namespace tsg::promptpool
