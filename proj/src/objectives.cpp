#include "tsg/objectives.hpp"

#include <cmath>

namespace tsg::objectives {

void SupervisionLabels::validate() const {
  TSG_CHECK(start_frame <= end_frame, "labels: start after end");
  TSG_CHECK(y_start.sum() == 1.0 && y_start(start_frame) == 1.0, "labels: y_start not one-hot");
  TSG_CHECK(y_end.sum() == 1.0 && y_end(end_frame) == 1.0, "labels: y_end not one-hot");
  for (int f = start_frame; f <= end_frame; ++f)
    TSG_CHECK(y_highlight(f) == 1.0, "labels: highlight must cover the span");
  TSG_CHECK(y_match.minCoeff() >= 0.0 && y_match.maxCoeff() <= 1.0,
            "labels: y_match outside [0,1]");
}

SupervisionLabels make_labels(const datamodel::MomentAnnotation& ann, int t_frames,
                              int valid_frames, const pgmf::TemporalMap2D& map,
                              double extend_ratio, double t_min, double t_max) {
  ann.validate();
  TSG_CHECK(0.0 <= t_min && t_min < t_max && t_max <= 1.0, "make_labels: bad IoU thresholds");
  TSG_CHECK(extend_ratio >= 0.0, "make_labels: negative extend ratio");
  TSG_CHECK(valid_frames >= 1 && valid_frames <= t_frames, "make_labels: bad valid_frames");
  TSG_CHECK(map.t_frames() == t_frames && map.valid_frames() == valid_frames,
            "make_labels: map geometry mismatch");
  TSG_CHECK(ann.end_sec <= ann.duration_sec,
            "make_labels: annotation for " << ann.video_id << " ends outside the video");

  SupervisionLabels out;
  out.start_frame =
      datamodel::start_frame_for_time(ann.start_sec, valid_frames, ann.duration_sec);
  out.end_frame = datamodel::end_frame_for_time(ann.end_sec, valid_frames, ann.duration_sec);
  if (out.end_frame < out.start_frame) out.end_frame = out.start_frame;

  out.y_start = Vec::Zero(t_frames);
  out.y_end = Vec::Zero(t_frames);
  out.y_start(out.start_frame) = 1.0;
  out.y_end(out.end_frame) = 1.0;

  int span = out.end_frame - out.start_frame + 1;
  int ext = static_cast<int>(std::llround(extend_ratio * span));
  int lo = std::max(0, out.start_frame - ext);
  int hi = std::min(valid_frames - 1, out.end_frame + ext);
  out.y_highlight = Vec::Zero(t_frames);
  for (int f = lo; f <= hi; ++f) out.y_highlight(f) = 1.0;

  out.y_match = Vec::Zero(map.candidate_count());
  for (int c = 0; c < map.candidate_count(); ++c) {
    auto [i, j] = map.cells()[c];
    auto [clo, chi] = datamodel::span_to_seconds(i, j, valid_frames, ann.duration_sec);
    double iou = interval_iou(clo, chi, ann.start_sec, ann.end_sec);
    out.y_match(c) = std::clamp((iou - t_min) / (t_max - t_min), 0.0, 1.0);
  }
  out.validate();
  return out;
}

ad::Var loss_pre(ad::Var p_start, ad::Var p_end, ad::Var p_highlight,
                 const SupervisionLabels& labels, double lambda1, int valid_frames) {
  TSG_CHECK(p_start.rows() == labels.y_start.size() && p_end.rows() == labels.y_end.size(),
            "loss_pre: endpoint shape mismatch");
  TSG_CHECK(p_highlight.rows() == labels.y_highlight.size(), "loss_pre: highlight shape mismatch");
  ad::Var ce_s = ad::cross_entropy_prob(p_start, labels.start_frame, kProbClamp);
  ad::Var ce_e = ad::cross_entropy_prob(p_end, labels.end_frame, kProbClamp);
  ad::Var span_term = ad::scale(ad::add(ce_s, ce_e), 0.5);
  ad::Var bce_h = ad::bce_mean(p_highlight, labels.y_highlight, valid_frames, kProbClamp);
  return ad::add(span_term, ad::scale(bce_h, lambda1));
}

ad::Var loss_bound(ad::Var p_match, const SupervisionLabels& labels) {
  TSG_CHECK(p_match.rows() >= 1, "loss_bound: no candidates");
  TSG_CHECK(p_match.rows() == labels.y_match.size(), "loss_bound: candidate count mismatch");
  return ad::bce_mean(p_match, labels.y_match, static_cast<int>(p_match.rows()), kProbClamp);
}

ad::Var total_loss(ad::Var l_pre, ad::Var l_bound, ad::Var l_con, const LossWeights& w) {
  TSG_CHECK(std::isfinite(l_pre.scalar()), "total_loss: prediction loss is not finite");
  TSG_CHECK(std::isfinite(l_bound.scalar()), "total_loss: boundary loss is not finite");
  ad::Var total = ad::add(ad::scale(l_pre, w.lambda2), ad::scale(l_bound, w.lambda3));
  if (l_con.valid()) {
    TSG_CHECK(std::isfinite(l_con.scalar()), "total_loss: contrastive loss is not finite");
    total = ad::add(total, ad::scale(l_con, w.lambda4));
  }
  return total;
}

}  // namespace tsg::objectives
