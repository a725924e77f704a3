#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tsg/backbone.hpp"
#include "tsg/nn.hpp"

namespace tsg::pgmf {

struct PgmfConfig {
  int D = 128;
  int num_heads = 8;
  double decode_gamma = 1.0;
  /// Full (i <= j) candidate enumeration up to this many frames; longer
  /// videos switch to stride-doubling sparse sampling.
  int full_enum_max_t = 64;
  /// Start head reads the first LSTM layer when true, else the second.
  bool start_from_first_lstm = true;
};

/// Candidate geometry of the T x T span map: which (i, j) cells exist and
/// their flat order. Flat index c corresponds to cells()[c].
class TemporalMap2D {
 public:
  static TemporalMap2D build(int t_frames, int valid_frames, int full_enum_max_t);

  const std::vector<std::pair<int, int>>& cells() const { return cells_; }
  int candidate_count() const { return static_cast<int>(cells_.size()); }
  int t_frames() const { return t_frames_; }
  int valid_frames() const { return valid_frames_; }

  /// Flat index of cell (i, j), or -1 when the cell is not a candidate.
  int index_of(int i, int j) const;

 private:
  int t_frames_ = 0;
  int valid_frames_ = 0;
  std::vector<std::pair<int, int>> cells_;
  std::vector<int> flat_;  // t*t lookup, -1 for non-candidates
};

/// Elementwise span max over frames i..j for every candidate cell; row c of
/// the result is cell cells()[c]. Diagonal cells equal the frame feature.
ad::Var build_2d_map(nn::Graph& g, ad::Var v_enc, const TemporalMap2D& map);

/// Self-attention on the visual stream, then symmetric cross-attention with
/// the (already self-attended) query stream.
struct FuseBranch {
  nn::MhaLayer self_v, cross_vq, cross_qv;

  static FuseBranch create(nn::ParamStore& ps, const std::string& name, const PgmfConfig& cfg);
};

struct Fused {
  ad::Var v2;  // visual stream after cross-attention
  ad::Var q2;  // query stream after cross-attention
};

Fused fuse(nn::Graph& g, const FuseBranch& branch, ad::Var x, int x_valid, ad::Var q_prime,
           int q_valid);

/// The context-query projection head: A = FC(V)FC(Q)^T/sqrt(D), then
/// FC([V; V .* (A_r Q); A_r A_c^T V]) with row/column softmaxes of A.
struct ContextQueryFuse {
  nn::LinearLayer fc_v, fc_q, fc_out;

  static ContextQueryFuse create(nn::ParamStore& ps, const std::string& name,
                                 const PgmfConfig& cfg);
  ad::Var apply(nn::Graph& g, ad::Var v2, int v_valid, ad::Var q2, int q_valid) const;
};

/// Every prediction the fusion module emits for one sample, as graph nodes.
struct PgmfOutput {
  ad::Var p_start;      // T x 1, sums to 1 over valid frames
  ad::Var p_end;        // T x 1
  ad::Var p_highlight;  // T x 1, sigmoid scores
  ad::Var p_match;      // C x 1, sigmoid scores per candidate
};

/// Value snapshot used for decoding and evaluation.
struct GroundingPrediction {
  Vec p_start;
  Vec p_end;
  Vec p_highlight;
  Vec p_match;
  std::pair<int, int> decoded{0, 0};
};

class Pgmf {
 public:
  Pgmf(nn::ParamStore& ps, const std::string& name, const PgmfConfig& cfg);

  /// Full fusion pass: frame branch (endpoints + highlight) and flattened
  /// 2D-map branch (matching scores). q_hat is the prompt-prepended query.
  PgmfOutput forward(nn::Graph& g, ad::Var v_enc, int valid_frames, ad::Var q_hat, int q_valid,
                     const TemporalMap2D& map, const backbone::ForwardCtx& ctx) const;

  const PgmfConfig& config() const { return cfg_; }

  // Exposed for focused tests.
  const FuseBranch& frame_branch() const { return frame_; }
  const ContextQueryFuse& frame_cqa() const { return cqa_frame_; }

 private:
  PgmfConfig cfg_;
  nn::MhaLayer q_self_;  // shared F(Q-hat) across both branches
  FuseBranch frame_, map_;
  ContextQueryFuse cqa_frame_, cqa_map_;
  nn::LstmLayer lstm1_, lstm2_;
  nn::LinearLayer fc_start_, fc_end_;
  nn::LinearLayer conv_highlight_;  // kernel-1 Conv1D head
  nn::LinearLayer conv_match_;      // 1x1 Conv2D head over candidate cells
};

/// argmax over candidates of P_s[i] * P_e[j] * P_m[c]^gamma; ties prefer the
/// smallest i, then the smallest j.
std::pair<int, int> decode_moment(const Vec& p_start, const Vec& p_end, const Vec& p_match,
                                  const TemporalMap2D& map, double gamma);

}  // namespace tsg::pgmf
