#include "tsg/pgmf.hpp"

#include <cmath>

namespace tsg::pgmf {

using ad::Var;

TemporalMap2D TemporalMap2D::build(int t_frames, int valid_frames, int full_enum_max_t) {
  TSG_CHECK(t_frames >= 1, "temporal map: T must be >= 1");
  TSG_CHECK(valid_frames >= 1 && valid_frames <= t_frames, "temporal map: bad valid_frames");
  TemporalMap2D m;
  m.t_frames_ = t_frames;
  m.valid_frames_ = valid_frames;
  m.flat_.assign(static_cast<size_t>(t_frames) * t_frames, -1);

  auto add_cell = [&](int i, int j) {
    m.flat_[static_cast<size_t>(i) * t_frames + j] = static_cast<int>(m.cells_.size());
    m.cells_.emplace_back(i, j);
  };

  if (valid_frames <= full_enum_max_t) {
    for (int i = 0; i < valid_frames; ++i)
      for (int j = i; j < valid_frames; ++j) add_cell(i, j);
  } else {
    // Stride-doubling sparse sampling: short spans are dense, the start
    // stride doubles with each length octave. Diagonal cells stay present.
    for (int i = 0; i < valid_frames; ++i) {
      for (int j = i; j < valid_frames; ++j) {
        int len = j - i + 1;
        int stride = 1;
        int bound = full_enum_max_t / 4;
        while (len > bound) {
          stride *= 2;
          bound *= 2;
        }
        if (len == 1 || (i % stride == 0 && (len % stride == 0))) add_cell(i, j);
      }
    }
  }
  return m;
}

int TemporalMap2D::index_of(int i, int j) const {
  if (i < 0 || j < 0 || i >= t_frames_ || j >= t_frames_) return -1;
  return flat_[static_cast<size_t>(i) * t_frames_ + j];
}

Var build_2d_map(nn::Graph& g, Var v_enc, const TemporalMap2D& map) {
  (void)g;
  TSG_CHECK(v_enc.rows() == map.t_frames(), "build_2d_map: frame count mismatch");
  return ad::span_max(v_enc, map.cells());
}

FuseBranch FuseBranch::create(nn::ParamStore& ps, const std::string& name,
                              const PgmfConfig& cfg) {
  FuseBranch b;
  b.self_v = nn::MhaLayer::create(ps, name + ".self_v", cfg.D, cfg.num_heads);
  b.cross_vq = nn::MhaLayer::create(ps, name + ".cross_vq", cfg.D, cfg.num_heads);
  b.cross_qv = nn::MhaLayer::create(ps, name + ".cross_qv", cfg.D, cfg.num_heads);
  return b;
}

Fused fuse(nn::Graph& g, const FuseBranch& branch, Var x, int x_valid, Var q_prime,
           int q_valid) {
  Var v1 = branch.self_v.apply(g, x, x_valid, x, x_valid);
  Var v2 = branch.cross_vq.apply(g, v1, x_valid, q_prime, q_valid);
  Var q2 = branch.cross_qv.apply(g, q_prime, q_valid, v1, x_valid);
  return {v2, q2};
}

ContextQueryFuse ContextQueryFuse::create(nn::ParamStore& ps, const std::string& name,
                                          const PgmfConfig& cfg) {
  ContextQueryFuse c;
  c.fc_v = nn::LinearLayer::create(ps, name + ".fc_v", cfg.D, cfg.D);
  c.fc_q = nn::LinearLayer::create(ps, name + ".fc_q", cfg.D, cfg.D);
  c.fc_out = nn::LinearLayer::create(ps, name + ".fc_out", 3 * cfg.D, cfg.D);
  return c;
}

Var ContextQueryFuse::apply(nn::Graph& g, Var v2, int v_valid, Var q2, int q_valid) const {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(v2.cols()));
  Var logits =
      ad::scale(ad::matmul(fc_v.apply(g, v2), ad::transpose(fc_q.apply(g, q2))), inv_sqrt_d);
  Var a_r = ad::row_softmax(logits, v_valid, q_valid);
  Var a_c = ad::col_softmax(logits, v_valid, q_valid);
  Var c2q = ad::matmul(a_r, q2);                               // rows attend over query tokens
  Var q2c = ad::matmul(ad::matmul(a_r, ad::transpose(a_c)), v2);
  Var cat = ad::concat_cols({v2, ad::cmul(v2, c2q), q2c});
  return ad::mask_rows(fc_out.apply(g, cat), v_valid);
}

Pgmf::Pgmf(nn::ParamStore& ps, const std::string& name, const PgmfConfig& cfg) : cfg_(cfg) {
  TSG_CHECK(cfg.D >= 1 && cfg.num_heads >= 1 && cfg.D % cfg.num_heads == 0,
            "pgmf: D must be divisible by num_heads");
  q_self_ = nn::MhaLayer::create(ps, name + ".q_self", cfg.D, cfg.num_heads);
  frame_ = FuseBranch::create(ps, name + ".frame", cfg);
  map_ = FuseBranch::create(ps, name + ".map", cfg);
  cqa_frame_ = ContextQueryFuse::create(ps, name + ".frame_cqa", cfg);
  cqa_map_ = ContextQueryFuse::create(ps, name + ".map_cqa", cfg);
  lstm1_ = nn::LstmLayer::create(ps, name + ".lstm1", cfg.D, cfg.D);
  lstm2_ = nn::LstmLayer::create(ps, name + ".lstm2", cfg.D, cfg.D);
  fc_start_ = nn::LinearLayer::create(ps, name + ".fc_start", cfg.D, 1);
  fc_end_ = nn::LinearLayer::create(ps, name + ".fc_end", cfg.D, 1);
  conv_highlight_ = nn::LinearLayer::create(ps, name + ".conv_highlight", cfg.D, 1);
  conv_match_ = nn::LinearLayer::create(ps, name + ".conv_match", cfg.D, 1);
}

PgmfOutput Pgmf::forward(nn::Graph& g, Var v_enc, int valid_frames, Var q_hat, int q_valid,
                         const TemporalMap2D& map, const backbone::ForwardCtx& ctx) const {
  (void)ctx;
  TSG_CHECK(map.t_frames() == v_enc.rows(), "pgmf: map/frames mismatch");
  TSG_CHECK(map.valid_frames() == valid_frames, "pgmf: map valid_frames mismatch");

  // Shared query self-attention, used by both branches.
  Var q_prime = q_self_.apply(g, q_hat, q_valid, q_hat, q_valid);

  // Frame branch: endpoints and highlighting.
  Fused f = fuse(g, frame_, v_enc, valid_frames, q_prime, q_valid);
  Var v3 = cqa_frame_.apply(g, f.v2, valid_frames, f.q2, q_valid);
  Var h1 = lstm1_.apply(g, v3, valid_frames);
  Var h2 = lstm2_.apply(g, h1, valid_frames);
  Var start_in = cfg_.start_from_first_lstm ? h1 : h2;
  PgmfOutput out;
  out.p_start = ad::col_softmax(fc_start_.apply(g, start_in), valid_frames, 1);
  out.p_end = ad::col_softmax(fc_end_.apply(g, h2), valid_frames, 1);
  out.p_highlight = ad::sigmoid(conv_highlight_.apply(g, v3));

  // Map branch: matching scores over candidate cells.
  Var flat = build_2d_map(g, v_enc, map);
  const int c_count = map.candidate_count();
  Fused fm = fuse(g, map_, flat, c_count, q_prime, q_valid);
  Var vm3 = cqa_map_.apply(g, fm.v2, c_count, fm.q2, q_valid);
  out.p_match = ad::sigmoid(conv_match_.apply(g, vm3));
  return out;
}

std::pair<int, int> decode_moment(const Vec& p_start, const Vec& p_end, const Vec& p_match,
                                  const TemporalMap2D& map, double gamma) {
  TSG_CHECK(p_start.size() == map.t_frames() && p_end.size() == map.t_frames(),
            "decode_moment: endpoint length mismatch");
  TSG_CHECK(p_match.size() == map.candidate_count(), "decode_moment: match length mismatch");
  int best_i = 0, best_j = 0;
  double best = -1.0;
  for (int c = 0; c < map.candidate_count(); ++c) {
    auto [i, j] = map.cells()[c];
    double score = p_start(i) * p_end(j) * std::pow(p_match(c), gamma);
    if (score > best) {
      best = score;
      best_i = i;
      best_j = j;
    }
  }
  TSG_CHECK(best >= 0.0, "decode_moment: no candidates");
  return {best_i, best_j};
}

}  // namespace tsg::pgmf
