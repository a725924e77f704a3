#pragma once

#include "tsg/datamodel.hpp"
#include "tsg/nn.hpp"
#include "tsg/pgmf.hpp"

namespace tsg::objectives {

inline constexpr double kProbClamp = 1e-7;

struct SupervisionLabels {
  int start_frame = 0;
  int end_frame = 0;
  Vec y_start;      // one-hot over T
  Vec y_end;        // one-hot over T
  Vec y_highlight;  // 0/1 over T, ones cover the extended span
  Vec y_match;      // scaled IoU in [0,1] per candidate

  void validate() const;
};

struct LossWeights {
  double lambda1 = 5.0;  // highlight term inside the prediction loss
  double lambda2 = 1.0;  // prediction loss
  double lambda3 = 1.0;  // boundary loss
  double lambda4 = 0.5;  // contrastive loss
};

/// Ground truth for one sample. Span endpoints come from the center-of-bin
/// time mapping; the highlight band extends the span by extend_ratio on each
/// side; y_match linearly rescales candidate IoU between t_min and t_max.
SupervisionLabels make_labels(const datamodel::MomentAnnotation& ann, int t_frames,
                              int valid_frames, const pgmf::TemporalMap2D& map,
                              double extend_ratio, double t_min, double t_max);

/// 0.5 * [CE(P_s, Y_s) + CE(P_e, Y_e)] + lambda1 * mean BCE(P_h, Y_h) over
/// valid frames.
ad::Var loss_pre(ad::Var p_start, ad::Var p_end, ad::Var p_highlight,
                 const SupervisionLabels& labels, double lambda1, int valid_frames);

/// Mean binary cross entropy of candidate scores against the scaled IoU.
ad::Var loss_bound(ad::Var p_match, const SupervisionLabels& labels);

/// lambda2 * l_pre + lambda3 * l_bound + lambda4 * l_con. Rejects non-finite
/// components by name. Pass an invalid l_con to drop the contrastive term.
ad::Var total_loss(ad::Var l_pre, ad::Var l_bound, ad::Var l_con, const LossWeights& w);

}  // namespace tsg::objectives
