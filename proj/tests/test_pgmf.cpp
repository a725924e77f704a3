#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "tsg/pgmf.hpp"

using namespace tsg;
using namespace tsg::pgmf;
using tsgtest::fd_worst_rel_error;
using tsgtest::random_mat;

namespace {

PgmfConfig small_cfg(int d = 16, int heads = 4) {
  PgmfConfig cfg;
  cfg.D = d;
  cfg.num_heads = heads;
  return cfg;
}

}  // namespace

TEST_CASE("candidate enumeration: full triangle at small T") {
  auto m1 = TemporalMap2D::build(1, 1, 64);
  CHECK(m1.candidate_count() == 1);
  CHECK(m1.cells()[0] == std::pair<int, int>{0, 0});

  auto m4 = TemporalMap2D::build(4, 4, 64);
  CHECK(m4.candidate_count() == 10);  // T(T+1)/2
  CHECK(m4.index_of(0, 2) >= 0);
  CHECK(m4.index_of(2, 0) == -1);
  // Flat index round trip.
  for (int c = 0; c < m4.candidate_count(); ++c) {
    auto [i, j] = m4.cells()[c];
    CHECK(m4.index_of(i, j) == c);
  }

  // Padded frames are excluded from the candidate set.
  auto mp = TemporalMap2D::build(6, 4, 64);
  CHECK(mp.candidate_count() == 10);
  CHECK(mp.index_of(0, 5) == -1);
}

TEST_CASE("sparse enumeration beyond the full-enumeration bound") {
  auto sparse = TemporalMap2D::build(128, 128, 64);
  int full = 128 * 129 / 2;
  CHECK(sparse.candidate_count() < full);
  CHECK(sparse.candidate_count() > 128);
  // Every diagonal cell is a candidate.
  for (int i = 0; i < 128; ++i) CHECK(sparse.index_of(i, i) >= 0);
  // Every cell respects i <= j < valid.
  for (auto [i, j] : sparse.cells()) {
    CHECK(i <= j);
    CHECK(j < 128);
  }
}

TEST_CASE("2d map cells hold the elementwise span max") {
  Mat v(3, 2);
  v << 1, 0, 0, 2, 3, 1;
  auto map = TemporalMap2D::build(3, 3, 64);
  nn::Graph g;
  ad::Var flat = build_2d_map(g, g.tape.constant(v), map);
  int c02 = map.index_of(0, 2);
  CHECK(flat.val()(c02, 0) == 3.0);
  CHECK(flat.val()(c02, 1) == 2.0);
  // Diagonal cells equal the frame feature exactly.
  for (int i = 0; i < 3; ++i) {
    int c = map.index_of(i, i);
    CHECK((flat.val().row(c) - v.row(i)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("2d map equals a naive span scan for random small T (property)") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    int t = 1 + static_cast<int>(rng.uniform_int(16));
    int d = 1 + static_cast<int>(rng.uniform_int(5));
    Mat v = random_mat(rng, t, d);
    auto map = TemporalMap2D::build(t, t, 64);
    nn::Graph g;
    ad::Var flat = build_2d_map(g, g.tape.constant(v), map);
    REQUIRE(map.candidate_count() == t * (t + 1) / 2);
    for (int c = 0; c < map.candidate_count(); ++c) {
      auto [i, j] = map.cells()[c];
      for (int col = 0; col < d; ++col) {
        double mx = -1e300;
        for (int r = i; r <= j; ++r) mx = std::max(mx, v(r, col));
        CHECK(flat.val()(c, col) == mx);
      }
    }
  }
}

TEST_CASE("fuse preserves lengths and is deterministic") {
  nn::ParamStore ps;
  PgmfConfig cfg = small_cfg();
  FuseBranch branch = FuseBranch::create(ps, "b", cfg);
  ps.init_params(4);
  Rng rng(5);
  Mat x = random_mat(rng, 10, 16), q = random_mat(rng, 14, 16);

  nn::Graph g1;
  Fused f1 = fuse(g1, branch, g1.tape.constant(x), 10, g1.tape.constant(q), 14);
  CHECK(f1.v2.rows() == 10);
  CHECK(f1.q2.rows() == 14);

  nn::Graph g2;
  Fused f2 = fuse(g2, branch, g2.tape.constant(x), 10, g2.tape.constant(q), 14);
  CHECK((f1.v2.val() - f2.v2.val()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((f1.q2.val() - f2.q2.val()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fuse ignores padded query tokens") {
  nn::ParamStore ps;
  PgmfConfig cfg = small_cfg();
  FuseBranch branch = FuseBranch::create(ps, "b", cfg);
  ps.init_params(6);
  Rng rng(7);
  Mat x = random_mat(rng, 8, 16);
  Mat q = random_mat(rng, 6, 16);
  q.bottomRows(2).setZero();
  Mat q_poked = q;
  q_poked.row(5) = random_mat(rng, 1, 16);

  nn::Graph g1, g2;
  Fused a = fuse(g1, branch, g1.tape.constant(x), 8, g1.tape.constant(q), 4);
  Fused b = fuse(g2, branch, g2.tape.constant(x), 8, g2.tape.constant(q_poked), 4);
  CHECK((a.v2.val() - b.v2.val()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("context-query fuse: softmax normalizations and gradient") {
  nn::ParamStore ps;
  PgmfConfig cfg = small_cfg(8, 2);
  ContextQueryFuse cqa = ContextQueryFuse::create(ps, "cqa", cfg);
  ps.init_params(8);
  Rng rng(9);
  int t = 6, l = 4;
  Mat v0 = random_mat(rng, t, 8), q0 = random_mat(rng, l, 8);

  // Row/column stochasticity of the internal attention matrices, observed
  // through the public op by reconstructing them here.
  nn::Graph g;
  ad::Var v = g.tape.leaf(v0, true);
  ad::Var q = g.tape.constant(q0);
  ad::Var out = cqa.apply(g, v, t, q, l);
  CHECK(out.rows() == t);
  CHECK(out.cols() == 8);
  CHECK(all_finite(out.val()));

  Mat logits = ((v0 * cqa.fc_v.w->value).rowwise() + cqa.fc_v.b->value.row(0)) *
               (((q0 * cqa.fc_q.w->value).rowwise() + cqa.fc_q.b->value.row(0)).transpose());
  logits /= std::sqrt(8.0);
  ad::Tape t2;
  ad::Var ar = ad::row_softmax(t2.leaf(logits, false), t, l);
  ad::Var ac = ad::col_softmax(t2.leaf(logits, false), t, l);
  for (int r = 0; r < t; ++r) CHECK(std::abs(ar.val().row(r).sum() - 1.0) < 1e-6);
  for (int c = 0; c < l; ++c) CHECK(std::abs(ac.val().col(c).sum() - 1.0) < 1e-6);

  // Gradient w.r.t. the visual stream.
  Mat w = random_mat(rng, t, 8);
  ad::Var root = ad::matmul(ad::matmul(g.tape.constant(Mat::Ones(1, t)),
                                       ad::cmul(out, g.tape.constant(w))),
                            g.tape.constant(Mat::Ones(8, 1)));
  g.tape.backward(root);
  auto loss = [&](const Mat& m) {
    nn::Graph s;
    ad::Var vv = s.tape.leaf(m, false);
    ad::Var oo = cqa.apply(s, vv, t, s.tape.constant(q0), l);
    return ad::matmul(ad::matmul(s.tape.constant(Mat::Ones(1, t)),
                                 ad::cmul(oo, s.tape.constant(w))),
                      s.tape.constant(Mat::Ones(8, 1)))
        .scalar();
  };
  CHECK(fd_worst_rel_error(v0, g.tape.grad(v), loss) < 1e-4);
}

TEST_CASE("single query token: matches the closed-form attention") {
  nn::ParamStore ps;
  PgmfConfig cfg = small_cfg(8, 2);
  ContextQueryFuse cqa = ContextQueryFuse::create(ps, "cqa", cfg);
  ps.init_params(10);
  Rng rng(11);
  int t = 5;
  Mat v0 = random_mat(rng, t, 8), q0 = random_mat(rng, 1, 8);

  nn::Graph g;
  ad::Var out = cqa.apply(g, g.tape.constant(v0), t, g.tape.constant(q0), 1);

  // With one token the row softmax is an all-ones column, so block two is
  // v .* (1 q) and block three broadcasts the column-softmax mix of v rows.
  Mat logits = ((v0 * cqa.fc_v.w->value).rowwise() + cqa.fc_v.b->value.row(0)) *
               (((q0 * cqa.fc_q.w->value).rowwise() + cqa.fc_q.b->value.row(0)).transpose()) /
               std::sqrt(8.0);
  Eigen::ArrayXd col = logits.col(0).array();
  Eigen::ArrayXd ac = (col - col.maxCoeff()).exp();
  ac /= ac.sum();
  Mat c2q(t, 8), q2c(t, 8);
  Eigen::RowVectorXd mix = Eigen::RowVectorXd::Zero(8);
  for (int r = 0; r < t; ++r) mix += ac(r) * v0.row(r);
  for (int r = 0; r < t; ++r) {
    c2q.row(r) = q0.row(0);
    q2c.row(r) = mix;
  }
  Mat cat(t, 24);
  cat << v0, v0.cwiseProduct(c2q), q2c;
  Mat expect = (cat * cqa.fc_out.w->value).rowwise() + cqa.fc_out.b->value.row(0);
  CHECK((out.val() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("full forward: endpoint distributions, highlight, matching scores") {
  nn::ParamStore ps;
  PgmfConfig cfg = small_cfg();
  Pgmf net(ps, "pgmf", cfg);
  ps.init_params(12);
  Rng rng(13);

  int t = 8, valid = 6, lq = 5;
  Mat v = random_mat(rng, t, 16);
  v.bottomRows(t - valid).setZero();
  Mat q = random_mat(rng, lq, 16);
  auto map = TemporalMap2D::build(t, valid, 64);

  backbone::ForwardCtx ctx;
  nn::Graph g;
  PgmfOutput out =
      net.forward(g, g.tape.constant(v), valid, g.tape.constant(q), lq, map, ctx);

  CHECK(out.p_start.rows() == t);
  CHECK(out.p_start.val().col(0).head(valid).sum() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(out.p_end.val().col(0).head(valid).sum() == doctest::Approx(1.0).epsilon(1e-6));
  // Padded frames carry exactly zero probability.
  CHECK(out.p_start.val().col(0).tail(t - valid).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.p_end.val().col(0).tail(t - valid).cwiseAbs().maxCoeff() == 0.0);
  // Highlight scores and matching scores live in (0, 1).
  for (int f = 0; f < valid; ++f) {
    CHECK(out.p_highlight.val()(f, 0) > 0.0);
    CHECK(out.p_highlight.val()(f, 0) < 1.0);
  }
  CHECK(out.p_match.rows() == map.candidate_count());
  for (int c = 0; c < map.candidate_count(); ++c) {
    CHECK(out.p_match.val()(c, 0) > 0.0);
    CHECK(out.p_match.val()(c, 0) < 1.0);
  }
}

TEST_CASE("single-frame video: both endpoint distributions are [1]") {
  nn::ParamStore ps;
  Pgmf net(ps, "pgmf", small_cfg());
  ps.init_params(14);
  Rng rng(15);
  Mat v = random_mat(rng, 1, 16), q = random_mat(rng, 3, 16);
  auto map = TemporalMap2D::build(1, 1, 64);
  backbone::ForwardCtx ctx;
  nn::Graph g;
  PgmfOutput out = net.forward(g, g.tape.constant(v), 1, g.tape.constant(q), 3, map, ctx);
  CHECK(out.p_start.val()(0, 0) == doctest::Approx(1.0));
  CHECK(out.p_end.val()(0, 0) == doctest::Approx(1.0));
  CHECK(out.p_match.rows() == 1);
}

TEST_CASE("zero-weight heads emit 0.5 scores") {
  nn::ParamStore ps;
  Pgmf net(ps, "pgmf", small_cfg());
  ps.init_params(16);
  // Zero the conv heads: sigmoid(0) = 0.5 everywhere.
  ps.find("pgmf.conv_highlight.w")->value.setZero();
  ps.find("pgmf.conv_highlight.b")->value.setZero();
  ps.find("pgmf.conv_match.w")->value.setZero();
  ps.find("pgmf.conv_match.b")->value.setZero();
  Rng rng(17);
  Mat v = random_mat(rng, 4, 16), q = random_mat(rng, 3, 16);
  auto map = TemporalMap2D::build(4, 4, 64);
  backbone::ForwardCtx ctx;
  nn::Graph g;
  PgmfOutput out = net.forward(g, g.tape.constant(v), 4, g.tape.constant(q), 3, map, ctx);
  CHECK(out.p_match.rows() == 10);
  for (int c = 0; c < 10; ++c) CHECK(out.p_match.val()(c, 0) == doctest::Approx(0.5));
  for (int f = 0; f < 4; ++f) CHECK(out.p_highlight.val()(f, 0) == doctest::Approx(0.5));
}

TEST_CASE("padding invariance: appending padded frames changes nothing") {
  nn::ParamStore ps;
  Pgmf net(ps, "pgmf", small_cfg());
  ps.init_params(18);
  Rng rng(19);
  int valid = 5, lq = 4;
  Mat v_short = random_mat(rng, valid, 16);
  Mat v_long = Mat::Zero(valid + 3, 16);
  v_long.topRows(valid) = v_short;
  Mat q = random_mat(rng, lq, 16);

  backbone::ForwardCtx ctx;
  nn::Graph g1, g2;
  auto map_short = TemporalMap2D::build(valid, valid, 64);
  auto map_long = TemporalMap2D::build(valid + 3, valid, 64);
  PgmfOutput a =
      net.forward(g1, g1.tape.constant(v_short), valid, g1.tape.constant(q), lq, map_short, ctx);
  PgmfOutput b =
      net.forward(g2, g2.tape.constant(v_long), valid, g2.tape.constant(q), lq, map_long, ctx);
  CHECK(map_short.candidate_count() == map_long.candidate_count());
  CHECK((a.p_start.val().col(0).head(valid) - b.p_start.val().col(0).head(valid))
            .cwiseAbs()
            .maxCoeff() < 1e-6);
  CHECK((a.p_end.val().col(0).head(valid) - b.p_end.val().col(0).head(valid))
            .cwiseAbs()
            .maxCoeff() < 1e-6);
  CHECK((a.p_match.val() - b.p_match.val()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("decode: one-hot endpoints, exponent identity, brute-force oracle") {
  auto map = TemporalMap2D::build(5, 5, 64);
  Vec ps = Vec::Zero(5), pe = Vec::Zero(5);
  ps(1) = 1.0;
  pe(3) = 1.0;
  Vec pm = Vec::Constant(map.candidate_count(), 0.5);
  auto [i, j] = decode_moment(ps, pe, pm, map, 1.0);
  CHECK(i == 1);
  CHECK(j == 3);

  Rng rng(20);
  for (int trial = 0; trial < 1000; ++trial) {
    int t = 1 + static_cast<int>(rng.uniform_int(10));
    auto m = TemporalMap2D::build(t, t, 64);
    Vec s(t), e(t), match(m.candidate_count());
    for (int k = 0; k < t; ++k) {
      s(k) = rng.uniform();
      e(k) = rng.uniform();
    }
    for (int k = 0; k < m.candidate_count(); ++k) match(k) = 0.01 + 0.98 * rng.uniform();
    double gamma = rng.uniform() * 2.0;
    auto got = decode_moment(s, e, match, m, gamma);

    // Exhaustive scan with identical tie-breaking.
    std::pair<int, int> best{0, 0};
    double best_score = -1.0;
    for (int a = 0; a < t; ++a)
      for (int b = a; b < t; ++b) {
        double sc = s(a) * e(b) * std::pow(match(m.index_of(a, b)), gamma);
        if (sc > best_score) {
          best_score = sc;
          best = {a, b};
        }
      }
    CHECK(got == best);
    CHECK(got.first <= got.second);

    // gamma = 0 ignores the matching scores entirely.
    auto g0 = decode_moment(s, e, match, m, 0.0);
    std::pair<int, int> best0{0, 0};
    double bs0 = -1.0;
    for (int a = 0; a < t; ++a)
      for (int b = a; b < t; ++b)
        if (s(a) * e(b) > bs0) {
          bs0 = s(a) * e(b);
          best0 = {a, b};
        }
    CHECK(g0 == best0);
  }
}
