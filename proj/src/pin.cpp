#include "tsg/pin.hpp"

#include <cmath>

namespace tsg::pin {

using ad::Var;

Pin::Pin(nn::ParamStore& ps, const std::string& name, const PinConfig& cfg) : cfg_(cfg) {
  TSG_CHECK(cfg.D >= 1, "pin: bad hidden dim");
  TSG_CHECK(cfg.eps_min > 0 && cfg.eps_min <= cfg.eps_init && cfg.eps_init <= cfg.eps_max,
            "pin: inconsistent temperature bounds");
  f_theta_ = nn::LinearLayer::create(ps, name + ".f_theta", cfg.D, cfg.D);
  f_sigma_ = nn::LinearLayer::create(ps, name + ".f_sigma", cfg.D, cfg.D);
  f_delta_hidden_ = nn::LinearLayer::create(ps, name + ".f_delta.hidden", cfg.D, cfg.D);
  f_delta_out_ = nn::LinearLayer::create(ps, name + ".f_delta.out", cfg.D, cfg.D);
  slot_offsets_ =
      &ps.add(name + ".slot_offsets", cfg.max_mask_slots, cfg.D, nn::Init::kNormalScaled);
  log_eps_ = &ps.add(name + ".log_eps", 1, 1, nn::Init::kConstant, std::log(cfg.eps_init));
}

namespace {

Var pooled_branch(nn::Graph& g, const nn::LinearLayer& branch, Var x, int valid) {
  TSG_CHECK(valid >= 1, "pin pooling: all rows masked");
  TSG_CHECK(all_finite(x.val()), "pin pooling: non-finite input");
  Var projected = ad::add(x, branch.apply(g, x));  // single layer with residual
  return ad::l2_normalize(ad::mean_valid_rows(projected, valid));
}

}  // namespace

Var Pin::pool_visual(nn::Graph& g, Var v_enc, int valid) const {
  return pooled_branch(g, f_theta_, v_enc, valid);
}

Var Pin::pool_pseudo(nn::Graph& g, Var p_feat, int valid) const {
  return pooled_branch(g, f_sigma_, p_feat, valid);
}

PooledPair Pin::pool_pair(nn::Graph& g, Var v_enc, int v_valid, Var p_feat, int p_valid) const {
  return {pool_visual(g, v_enc, v_valid), pool_pseudo(g, p_feat, p_valid)};
}

Var Pin::epsilon(nn::Graph& g) const {
  return ad::exp_clamp(g.use(*log_eps_), cfg_.eps_min, cfg_.eps_max);
}

double Pin::epsilon_value() const {
  return std::clamp(std::exp(log_eps_->value(0, 0)), cfg_.eps_min, cfg_.eps_max);
}

Var Pin::visual_semantic_tokens(nn::Graph& g, Var v_tilde, int n_o) const {
  TSG_CHECK(n_o >= 0, "visual_semantic_tokens: negative count");
  TSG_CHECK(n_o <= cfg_.max_mask_slots,
            "visual_semantic_tokens: " << n_o << " slots exceed the configured maximum "
                                       << cfg_.max_mask_slots);
  Var hidden = ad::tanh_op(f_delta_hidden_.apply(g, v_tilde));
  Var token = f_delta_out_.apply(g, hidden);  // 1 x D
  if (n_o == 0) return g.tape.constant(Mat(0, token.cols()));
  Var tiled = ad::repeat_row(token, n_o);
  Var offsets = ad::slice_rows(g.use(*slot_offsets_), 0, n_o);
  return ad::add(tiled, offsets);
}

Var contrastive_loss(Var batch_v, Var batch_p, Var epsilon) {
  TSG_CHECK(batch_v.rows() >= 1 && batch_v.rows() == batch_p.rows() &&
                batch_v.cols() == batch_p.cols(),
            "contrastive_loss: batch shape mismatch");
  TSG_CHECK(all_finite(batch_v.val()) && all_finite(batch_p.val()),
            "contrastive_loss: non-finite batch");
  for (Eigen::Index r = 0; r < batch_v.rows(); ++r) {
    TSG_CHECK(std::abs(batch_v.val().row(r).norm() - 1.0) < 1e-6,
              "contrastive_loss: visual row " << r << " not unit norm");
    TSG_CHECK(std::abs(batch_p.val().row(r).norm() - 1.0) < 1e-6,
              "contrastive_loss: pseudo-query row " << r << " not unit norm");
  }
  // z[i][j] = eps * p_i . v_j ; queries over videos in rows, and the
  // transpose covers the video-to-query direction.
  Var z = ad::vscale(ad::matmul(batch_p, ad::transpose(batch_v)), epsilon);
  return ad::add(ad::nll_diag(z), ad::nll_diag(ad::transpose(z)));
}

double contrastive_loss_value(const Mat& batch_v, const Mat& batch_p, double epsilon) {
  ad::Tape t;
  Var v = t.leaf(batch_v, false), p = t.leaf(batch_p, false);
  return contrastive_loss(v, p, t.scalar(epsilon)).scalar();
}

Var inject_tokens(Var p_feat, const std::vector<int>& positions, Var tokens) {
  TSG_CHECK(static_cast<Eigen::Index>(positions.size()) == tokens.rows(),
            "inject_tokens: positions/token count mismatch");
  for (size_t i = 1; i < positions.size(); ++i)
    TSG_CHECK(positions[i - 1] < positions[i], "inject_tokens: positions must be ascending");
  if (positions.empty()) return p_feat;
  return ad::replace_rows(p_feat, positions, tokens);
}

}  // namespace tsg::pin
