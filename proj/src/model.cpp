#include "tsg/model.hpp"

namespace tsg::model {

using ad::Var;

void ModelConfig::validate() const {
  TSG_CHECK(T >= 1 && D >= 1 && D_in >= 1, "model config: bad dimensions");
  TSG_CHECK(num_heads >= 1 && D % num_heads == 0, "model config: D not divisible by heads");
  TSG_CHECK(vocab_size > datamodel::kMaskTokenId + 1, "model config: vocab_size unset or tiny");
  TSG_CHECK(dropout >= 0.0 && dropout < 1.0, "model config: dropout outside [0,1)");
  TSG_CHECK(prompt_len >= 0 && pool_size >= 1, "model config: bad prompt pool shape");
  TSG_CHECK(0.0 <= t_min && t_min < t_max && t_max <= 1.0, "model config: bad IoU thresholds");
}

Mat TableEmbedder::embed_tokens(const std::vector<std::string>& tokens) const {
  return table_.lookup_values(vocab_.encode(tokens));
}

GroundingModel::GroundingModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  backbone::EncoderConfig enc;
  enc.D = cfg.D;
  enc.num_heads = cfg.num_heads;
  enc.dropout = cfg.dropout;
  enc.embed_dim_in = cfg.embed_dim_in;
  enc.num_layers = cfg.num_layers;

  embed_ = std::make_unique<backbone::EmbeddingTable>(params_, "embed", cfg.vocab_size,
                                                      cfg.embed_dim_in, cfg.freeze_embeddings);
  visual_ = std::make_unique<backbone::VisualEncoder>(params_, "visual", cfg.D_in, enc);
  textual_ = std::make_unique<backbone::TextualEncoder>(params_, "textual", embed_.get(), enc);

  pin::PinConfig pc;
  pc.D = cfg.D;
  pc.max_mask_slots = cfg.max_mask_slots;
  pin_ = std::make_unique<pin::Pin>(params_, "pin", pc);

  promptpool::PoolConfig plc;
  plc.pool_size = cfg.pool_size;
  plc.prompt_len = cfg.prompt_len;
  plc.D = cfg.D;
  plc.num_heads = cfg.num_heads;
  plc.key_pull_weight = cfg.key_pull_weight;
  pool_ = std::make_unique<promptpool::PromptPool>(params_, "pool", plc);

  pgmf::PgmfConfig gc;
  gc.D = cfg.D;
  gc.num_heads = cfg.num_heads;
  gc.decode_gamma = cfg.decode_gamma;
  gc.full_enum_max_t = cfg.full_enum_max_t;
  gc.start_from_first_lstm = cfg.start_from_first_lstm;
  pgmf_ = std::make_unique<pgmf::Pgmf>(params_, "pgmf", gc);
}

pgmf::TemporalMap2D GroundingModel::map_for(int valid_frames) const {
  return pgmf::TemporalMap2D::build(cfg_.T, valid_frames, cfg_.full_enum_max_t);
}

namespace {

Eigen::RowVectorXd mean_valid_values(const Mat& m, int valid) {
  TSG_CHECK(valid >= 1, "mean over zero rows");
  return m.topRows(valid).colwise().mean();
}

}  // namespace

void GroundingModel::forward_train(const Sample& sample, const std::vector<int>& pseudo_ids,
                                   const std::vector<int>& mask_positions,
                                   const objectives::LossWeights& weights, double dropout,
                                   Rng* rng, TrainForward& out) const {
  TSG_CHECK(sample.video.frames() == cfg_.T, "forward_train: video not resampled to T");
  backbone::ForwardCtx ctx;
  ctx.training = true;
  ctx.dropout = dropout;
  ctx.rng = rng;

  nn::Graph& g = out.graph;
  const int t_valid = sample.video.valid_frames;
  const int l_query = static_cast<int>(sample.query_ids.size());

  Var v_enc = visual_->encode(g, sample.video.features, t_valid, ctx);
  Var q_enc = textual_->encode(g, sample.query_ids, l_query, ctx);

  Var q_hat = q_enc;
  int q_valid = l_query;
  Var key_loss;

  const bool pseudo_active = (cfg_.use_pin || cfg_.use_prompt) && !pseudo_ids.empty();
  Var p_feat;
  int l_g = static_cast<int>(pseudo_ids.size());
  if (pseudo_active) {
    p_feat = textual_->encode(g, pseudo_ids, l_g, ctx);
  }

  if (cfg_.use_pin && pseudo_active) {
    out.v_tilde = pin_->pool_visual(g, v_enc, t_valid);
    Var tokens =
        pin_->visual_semantic_tokens(g, out.v_tilde, static_cast<int>(mask_positions.size()));
    p_feat = pin::inject_tokens(p_feat, mask_positions, tokens);
    out.p_tilde = pin_->pool_pseudo(g, p_feat, l_g);
  }

  if (cfg_.use_prompt && pseudo_active && cfg_.prompt_len > 0) {
    // Training-time key: mean-pooled pseudo-query features (post-injection).
    Eigen::RowVectorXd key_vec = mean_valid_values(p_feat.val(), l_g);
    out.retrieved_entry = pool_->retrieve_index(key_vec);
    Var prompt = pool_->prompt(g, out.retrieved_entry);
    Var refined = pool_->refine(g, prompt, p_feat, l_g);
    auto prep = promptpool::prepend_prompt(refined, q_enc, l_query);
    q_hat = prep.q_hat;
    q_valid = prep.valid;
    Var query_key = ad::mean_valid_rows(p_feat, l_g);
    key_loss = pool_->key_pull_loss(g, out.retrieved_entry, query_key);
  }

  pgmf::TemporalMap2D map = map_for(t_valid);
  out.out = pgmf_->forward(g, v_enc, t_valid, q_hat, q_valid, map, ctx);

  out.labels = objectives::make_labels(sample.annotation, cfg_.T, t_valid, map,
                                       cfg_.extend_ratio, cfg_.t_min, cfg_.t_max);
  Var l_pre = objectives::loss_pre(out.out.p_start, out.out.p_end, out.out.p_highlight,
                                   out.labels, weights.lambda1, t_valid);
  Var l_bound = objectives::loss_bound(out.out.p_match, out.labels);
  out.l_pre = l_pre.scalar();
  out.l_bound = l_bound.scalar();

  Var loss = ad::add(ad::scale(l_pre, weights.lambda2), ad::scale(l_bound, weights.lambda3));
  if (key_loss.valid()) {
    out.l_key = key_loss.scalar();
    loss = ad::add(loss, key_loss);
  }
  TSG_CHECK(std::isfinite(loss.scalar()), "forward_train: non-finite sample loss");
  out.sample_loss = loss;
}

Prediction GroundingModel::predict(const Sample& sample) const {
  TSG_CHECK(sample.video.frames() == cfg_.T, "predict: video not resampled to T");
  backbone::ForwardCtx ctx;  // evaluation mode: no dropout

  nn::Graph g;
  const int t_valid = sample.video.valid_frames;
  const int l_query = static_cast<int>(sample.query_ids.size());

  Var v_enc = visual_->encode(g, sample.video.features, t_valid, ctx);
  Var q_enc = textual_->encode(g, sample.query_ids, l_query, ctx);

  Prediction res;
  Var q_hat = q_enc;
  int q_valid = l_query;
  if (cfg_.use_prompt && cfg_.prompt_len > 0) {
    // No pseudo-queries at inference: the query itself is the key.
    Eigen::RowVectorXd key_vec = mean_valid_values(q_enc.val(), l_query);
    res.retrieved_entry = pool_->retrieve_index(key_vec);
    Var prompt = pool_->prompt(g, res.retrieved_entry);
    Var refined = pool_->refine(g, prompt, ad::Var{}, 0);
    auto prep = promptpool::prepend_prompt(refined, q_enc, l_query);
    q_hat = prep.q_hat;
    q_valid = prep.valid;
  }

  pgmf::TemporalMap2D map = map_for(t_valid);
  pgmf::PgmfOutput out = pgmf_->forward(g, v_enc, t_valid, q_hat, q_valid, map, ctx);

  res.pred.p_start = out.p_start.val().col(0);
  res.pred.p_end = out.p_end.val().col(0);
  res.pred.p_highlight = out.p_highlight.val().col(0);
  res.pred.p_match = out.p_match.val().col(0);
  res.pred.decoded = pgmf::decode_moment(res.pred.p_start, res.pred.p_end, res.pred.p_match, map,
                                         cfg_.decode_gamma);
  auto [lo, hi] = datamodel::span_to_seconds(res.pred.decoded.first, res.pred.decoded.second,
                                             t_valid, sample.video.duration_sec);
  res.pred_start_sec = lo;
  res.pred_end_sec = hi;
  return res;
}

double GroundingModel::pair_cosine(const Sample& sample, const std::vector<int>& pseudo_ids,
                                   const std::vector<int>& mask_positions) const {
  TSG_CHECK(!pseudo_ids.empty(), "pair_cosine: no pseudo-query tokens");
  backbone::ForwardCtx ctx;
  nn::Graph g;
  const int t_valid = sample.video.valid_frames;
  const int l_g = static_cast<int>(pseudo_ids.size());
  Var v_enc = visual_->encode(g, sample.video.features, t_valid, ctx);
  Var p_feat = textual_->encode(g, pseudo_ids, l_g, ctx);
  Var v_tilde = pin_->pool_visual(g, v_enc, t_valid);
  Var tokens = pin_->visual_semantic_tokens(g, v_tilde, static_cast<int>(mask_positions.size()));
  p_feat = pin::inject_tokens(p_feat, mask_positions, tokens);
  Var p_tilde = pin_->pool_pseudo(g, p_feat, l_g);
  return (v_tilde.val().row(0).array() * p_tilde.val().row(0).array()).sum();
}

}  // namespace tsg::model
