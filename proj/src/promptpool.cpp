#include "tsg/promptpool.hpp"

namespace tsg::promptpool {

using ad::Var;

PromptPool::PromptPool(nn::ParamStore& ps, const std::string& name, const PoolConfig& cfg)
    : cfg_(cfg) {
  TSG_CHECK(cfg.pool_size >= 1, "prompt pool: pool_size must be >= 1");
  TSG_CHECK(cfg.prompt_len >= 0, "prompt pool: negative prompt length");
  TSG_CHECK(cfg.D >= 1 && cfg.D % cfg.num_heads == 0, "prompt pool: bad D/num_heads");
  keys_ = &ps.add(name + ".keys", cfg.pool_size, cfg.D, nn::Init::kNormalScaled);
  prompts_ = &ps.add(name + ".prompts", cfg.pool_size * std::max(cfg.prompt_len, 1), cfg.D,
                     nn::Init::kNormalScaled);
  refine_attn_ = nn::MhaLayer::create(ps, name + ".refine", cfg.D, cfg.num_heads);
}

int PromptPool::retrieve_index(const Eigen::RowVectorXd& key_feat) const {
  TSG_CHECK(key_feat.size() == cfg_.D, "retrieve: key dimension mismatch");
  TSG_CHECK(key_feat.allFinite(), "retrieve: non-finite key");
  double qn = key_feat.norm();
  TSG_CHECK(qn > 0.0, "retrieve: zero-norm key");
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg_.pool_size; ++i) {
    double kn = keys_->value.row(i).norm();
    TSG_CHECK(kn > 0.0, "retrieve: pool key " << i << " has zero norm");
    double score = keys_->value.row(i).dot(key_feat) / (kn * qn);
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

Var PromptPool::prompt(nn::Graph& g, int index) const {
  TSG_CHECK(index >= 0 && index < cfg_.pool_size, "prompt: index out of range");
  return ad::slice_rows(g.use(*prompts_), index * cfg_.prompt_len, cfg_.prompt_len);
}

Var PromptPool::key(nn::Graph& g, int index) const {
  TSG_CHECK(index >= 0 && index < cfg_.pool_size, "key: index out of range");
  return ad::slice_rows(g.use(*keys_), index, 1);
}

Var PromptPool::refine(nn::Graph& g, Var prompt_rows, Var p_feat, int p_valid) const {
  const int n = static_cast<int>(prompt_rows.rows());
  if (n == 0) return prompt_rows;
  Var seq = prompt_rows;
  int valid = n;
  if (p_feat.valid() && p_valid > 0) {
    seq = ad::concat_rows({prompt_rows, p_feat});
    valid = n + p_valid;
  }
  Var refined = refine_attn_.apply(g, seq, valid, seq, valid);
  return ad::slice_rows(refined, 0, n);
}

Var PromptPool::key_pull_loss(nn::Graph& g, int index, Var query_key) const {
  Var k = key(g, index);
  Var cos = ad::cosine_sim(k, ad::stop_grad(query_key));
  Var one = g.tape.scalar(1.0);
  return ad::scale(ad::sub(one, cos), cfg_.key_pull_weight);
}

Prepended prepend_prompt(Var prompt_rows, Var q_feat, int q_valid) {
  TSG_CHECK(q_valid >= 1 && q_valid <= q_feat.rows(), "prepend_prompt: bad query valid count");
  const int n = static_cast<int>(prompt_rows.rows());
  if (n == 0) return {q_feat, q_valid};
  TSG_CHECK(prompt_rows.cols() == q_feat.cols(), "prepend_prompt: dim mismatch");
  return {ad::concat_rows({prompt_rows, q_feat}), n + q_valid};
}

}  // namespace tsg::promptpool
