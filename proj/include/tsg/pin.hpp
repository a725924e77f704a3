#pragma once

#include <string>
#include <vector>

#include "tsg/backbone.hpp"
#include "tsg/nn.hpp"

namespace tsg::pin {

struct PinConfig {
  int D = 128;
  int max_mask_slots = 64;
  double eps_init = 1.0 / 0.07;
  double eps_min = 1.0;
  double eps_max = 100.0;
};

struct PooledPair {
  ad::Var v_tilde;  // 1 x D, unit norm
  ad::Var p_tilde;  // 1 x D, unit norm
};

/// Contrastive intermediary: branch projections with residual, the learnable
/// temperature, and the visual-semantic-token head used to fill masked
/// pseudo-query positions.
class Pin {
 public:
  Pin(nn::ParamStore& ps, const std::string& name, const PinConfig& cfg);

  /// normalize(mean over valid rows of x + linear(x)), the visual branch.
  ad::Var pool_visual(nn::Graph& g, ad::Var v_enc, int valid) const;
  /// Same for the pseudo-query branch.
  ad::Var pool_pseudo(nn::Graph& g, ad::Var p_feat, int valid) const;

  PooledPair pool_pair(nn::Graph& g, ad::Var v_enc, int v_valid, ad::Var p_feat,
                       int p_valid) const;

  /// Temperature as exp of a free parameter, clamped to [eps_min, eps_max].
  ad::Var epsilon(nn::Graph& g) const;
  double epsilon_value() const;

  /// n_o copies of the MLP image of v_tilde, plus a learnable offset per
  /// slot. n_o == 0 yields an empty matrix.
  ad::Var visual_semantic_tokens(nn::Graph& g, ad::Var v_tilde, int n_o) const;

  int max_mask_slots() const { return cfg_.max_mask_slots; }

 private:
  PinConfig cfg_;
  nn::LinearLayer f_theta_, f_sigma_;
  nn::LinearLayer f_delta_hidden_, f_delta_out_;
  nn::Parameter* slot_offsets_ = nullptr;
  nn::Parameter* log_eps_ = nullptr;
};

/// InfoNCE over in-batch negatives with diagonal positives, both directions.
/// Rows of both batches must be unit-norm and finite.
ad::Var contrastive_loss(ad::Var batch_v, ad::Var batch_p, ad::Var epsilon);

/// Value-only convenience for tests and metrics.
double contrastive_loss_value(const Mat& batch_v, const Mat& batch_p, double epsilon);

/// Row at positions[i] replaced by tokens.row(i); positions must be strictly
/// ascending (slot order pairs with ascending positions).
ad::Var inject_tokens(ad::Var p_feat, const std::vector<int>& positions, ad::Var tokens);

}  // namespace tsg::pin
