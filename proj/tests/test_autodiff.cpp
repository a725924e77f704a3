#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testutil.hpp"
#include "tsg/autodiff.hpp"

using namespace tsg;
using namespace tsg::ad;
using tsgtest::fd_worst_rel_error;
using tsgtest::random_mat;

namespace {

// Sum of all entries as a scalar root, so any op can be driven to a scalar.
Var sum_all(Var x) {
  Tape& t = *x.tape;
  Var ones_r = t.constant(Mat::Ones(1, x.rows()));
  Var ones_c = t.constant(Mat::Ones(x.cols(), 1));
  return matmul(matmul(ones_r, x), ones_c);
}

// Weighted sum with fixed random weights; better than plain sum because it
// breaks symmetry between entries.
Var weighted_sum(Var x, const Mat& w) {
  Tape& t = *x.tape;
  return sum_all(cmul(x, t.constant(w)));
}

}  // namespace

TEST_CASE("matmul chain gradients match finite differences") {
  Rng rng(42);
  Mat a0 = random_mat(rng, 3, 4), b0 = random_mat(rng, 4, 5);
  Mat w = random_mat(rng, 3, 5);

  Tape t;
  Var a = t.leaf(a0, true), b = t.leaf(b0, true);
  Var y = weighted_sum(matmul(a, b), w);
  t.backward(y);

  auto loss_a = [&](const Mat& av) {
    Tape s;
    Var aa = s.leaf(av, false), bb = s.leaf(b0, false);
    return weighted_sum(matmul(aa, bb), w).scalar();
  };
  auto loss_b = [&](const Mat& bv) {
    Tape s;
    Var aa = s.leaf(a0, false), bb = s.leaf(bv, false);
    return weighted_sum(matmul(aa, bb), w).scalar();
  };
  CHECK(fd_worst_rel_error(a0, t.grad(a), loss_a) < 1e-6);
  CHECK(fd_worst_rel_error(b0, t.grad(b), loss_b) < 1e-6);
}

TEST_CASE("row_softmax: valid rows are stochastic, padding is zero") {
  Rng rng(7);
  Mat x0 = random_mat(rng, 5, 6);
  Tape t;
  Var p = row_softmax(t.leaf(x0, false), 4, 3);
  for (int r = 0; r < 4; ++r) {
    CHECK(p.val().row(r).head(3).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(p.val().row(r).tail(3).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(p.val().row(4).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("row_softmax gradient") {
  Rng rng(8);
  Mat x0 = random_mat(rng, 4, 5);
  Mat w = random_mat(rng, 4, 5);
  Tape t;
  Var x = t.leaf(x0, true);
  Var y = weighted_sum(row_softmax(x, 4, 4), w);
  t.backward(y);
  auto loss = [&](const Mat& xv) {
    Tape s;
    return weighted_sum(row_softmax(s.leaf(xv, false), 4, 4), w).scalar();
  };
  CHECK(fd_worst_rel_error(x0, t.grad(x), loss) < 1e-6);
}

TEST_CASE("col_softmax columns sum to one over valid rows") {
  Rng rng(9);
  Mat x0 = random_mat(rng, 6, 4);
  Mat w = random_mat(rng, 6, 4);
  Tape t;
  Var x = t.leaf(x0, true);
  Var p = col_softmax(x, 5, 4);
  for (int c = 0; c < 4; ++c)
    CHECK(p.val().col(c).head(5).sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.val().row(5).cwiseAbs().maxCoeff() == 0.0);
  Var y = weighted_sum(p, w);
  t.backward(y);
  auto loss = [&](const Mat& xv) {
    Tape s;
    return weighted_sum(col_softmax(s.leaf(xv, false), 5, 4), w).scalar();
  };
  CHECK(fd_worst_rel_error(x0, t.grad(x), loss) < 1e-6);
}

TEST_CASE("layer_norm gradient and padded-row behavior") {
  Rng rng(10);
  Mat x0 = random_mat(rng, 5, 8);
  Mat g0 = random_mat(rng, 1, 8), b0 = random_mat(rng, 1, 8);
  Mat w = random_mat(rng, 5, 8);
  Tape t;
  Var x = t.leaf(x0, true), ga = t.leaf(g0, true), be = t.leaf(b0, true);
  Var y = layer_norm(x, ga, be, 4);
  CHECK(y.val().row(4).cwiseAbs().maxCoeff() == 0.0);
  Var root = weighted_sum(y, w);
  t.backward(root);

  auto rebuild = [&](const Mat& xv, const Mat& gv, const Mat& bv) {
    Tape s;
    return weighted_sum(layer_norm(s.leaf(xv, false), s.leaf(gv, false), s.leaf(bv, false), 4), w)
        .scalar();
  };
  CHECK(fd_worst_rel_error(x0, t.grad(x), [&](const Mat& m) { return rebuild(m, g0, b0); }) < 1e-5);
  CHECK(fd_worst_rel_error(g0, t.grad(ga), [&](const Mat& m) { return rebuild(x0, m, b0); }) < 1e-6);
  CHECK(fd_worst_rel_error(b0, t.grad(be), [&](const Mat& m) { return rebuild(x0, g0, m); }) < 1e-6);
}

TEST_CASE("mha residual identity with zero output projection") {
  Rng rng(11);
  int d = 16, heads = 4;
  Mat x0 = random_mat(rng, 5, d), c0 = random_mat(rng, 7, d);
  Tape t;
  MhaVars w;
  w.wq = t.leaf(random_mat(rng, d, d), false);
  w.bq = t.leaf(Mat::Zero(1, d), false);
  w.wk = t.leaf(random_mat(rng, d, d), false);
  w.bk = t.leaf(Mat::Zero(1, d), false);
  w.wv = t.leaf(random_mat(rng, d, d), false);
  w.bv = t.leaf(Mat::Zero(1, d), false);
  w.wo = t.leaf(Mat::Zero(d, d), false);
  w.bo = t.leaf(Mat::Zero(1, d), false);
  Var y = mha(t.leaf(x0, false), 5, t.leaf(c0, false), 7, w, heads);
  CHECK((y.val() - x0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mha single-position context mixes exactly that row") {
  Rng rng(12);
  int d = 8, heads = 2;
  Mat x0 = random_mat(rng, 3, d), c0 = random_mat(rng, 4, d);
  Tape t;
  MhaVars w;
  auto eye = [&](double s) { return Mat(Mat::Identity(d, d) * s); };
  w.wq = t.leaf(eye(1.0), false);
  w.bq = t.leaf(Mat::Zero(1, d), false);
  w.wk = t.leaf(eye(1.0), false);
  w.bk = t.leaf(Mat::Zero(1, d), false);
  w.wv = t.leaf(eye(1.0), false);
  w.bv = t.leaf(Mat::Zero(1, d), false);
  w.wo = t.leaf(eye(1.0), false);
  w.bo = t.leaf(Mat::Zero(1, d), false);
  // kv_valid = 1: softmax over one position is 1, so att row = ctx row 0.
  Var y = mha(t.leaf(x0, false), 3, t.leaf(c0, false), 1, w, heads);
  Mat expect = x0;
  expect.rowwise() += c0.row(0);
  CHECK((y.val() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mha gradients match finite differences") {
  Rng rng(13);
  int d = 8, heads = 2;
  Mat x0 = random_mat(rng, 4, d), c0 = random_mat(rng, 5, d);
  Mat wq0 = random_mat(rng, d, d, 0.5), wk0 = random_mat(rng, d, d, 0.5);
  Mat wv0 = random_mat(rng, d, d, 0.5), wo0 = random_mat(rng, d, d, 0.5);
  Mat bq0 = random_mat(rng, 1, d, 0.1), bk0 = random_mat(rng, 1, d, 0.1);
  Mat bv0 = random_mat(rng, 1, d, 0.1), bo0 = random_mat(rng, 1, d, 0.1);
  Mat wsum = random_mat(rng, 4, d);

  auto build = [&](Tape& t, const Mat& x, const Mat& c, const Mat& wq, const Mat& wk,
                   const Mat& wv, const Mat& wo, bool needs) {
    MhaVars w;
    w.wq = t.leaf(wq, needs);
    w.bq = t.leaf(bq0, needs);
    w.wk = t.leaf(wk, needs);
    w.bk = t.leaf(bk0, needs);
    w.wv = t.leaf(wv, needs);
    w.bv = t.leaf(bv0, needs);
    w.wo = t.leaf(wo, needs);
    w.bo = t.leaf(bo0, needs);
    Var xv = t.leaf(x, needs), cv = t.leaf(c, needs);
    Var y = mha(xv, 4, cv, 4, w, heads);  // one padded context row
    return std::tuple{weighted_sum(y, wsum), xv, cv, w};
  };

  Tape t;
  auto [root, xv, cv, w] = build(t, x0, c0, wq0, wk0, wv0, wo0, true);
  t.backward(root);

  auto check = [&](const Mat& at, const Mat& analytic, auto replace) {
    auto loss = [&](const Mat& m) {
      Tape s;
      auto args = replace(m);
      auto [r, a, b, c] = std::apply(
          [&](const Mat& x, const Mat& ctx, const Mat& q, const Mat& k, const Mat& v,
              const Mat& o) { return build(s, x, ctx, q, k, v, o, false); },
          args);
      (void)a;
      (void)b;
      (void)c;
      return r.scalar();
    };
    CHECK(fd_worst_rel_error(at, analytic, loss) < 2e-5);
  };

  check(x0, t.grad(xv), [&](const Mat& m) { return std::tuple{m, c0, wq0, wk0, wv0, wo0}; });
  check(c0, t.grad(cv), [&](const Mat& m) { return std::tuple{x0, m, wq0, wk0, wv0, wo0}; });
  check(wq0, t.grad(w.wq), [&](const Mat& m) { return std::tuple{x0, c0, m, wk0, wv0, wo0}; });
  check(wk0, t.grad(w.wk), [&](const Mat& m) { return std::tuple{x0, c0, wq0, m, wv0, wo0}; });
  check(wv0, t.grad(w.wv), [&](const Mat& m) { return std::tuple{x0, c0, wq0, wk0, m, wo0}; });
  check(wo0, t.grad(w.wo), [&](const Mat& m) { return std::tuple{x0, c0, wq0, wk0, wv0, m}; });
}

TEST_CASE("mha ignores padded context rows") {
  Rng rng(14);
  int d = 8;
  Mat x0 = random_mat(rng, 3, d);
  Mat c0 = random_mat(rng, 5, d);
  Mat c1 = c0;
  c1.row(4) = random_mat(rng, 1, d);  // change only the padded row

  auto run = [&](const Mat& c) {
    Tape t;
    MhaVars w;
    Rng wr(99);
    w.wq = t.leaf(random_mat(wr, d, d), false);
    w.bq = t.leaf(random_mat(wr, 1, d), false);
    w.wk = t.leaf(random_mat(wr, d, d), false);
    w.bk = t.leaf(random_mat(wr, 1, d), false);
    w.wv = t.leaf(random_mat(wr, d, d), false);
    w.bv = t.leaf(random_mat(wr, 1, d), false);
    w.wo = t.leaf(random_mat(wr, d, d), false);
    w.bo = t.leaf(random_mat(wr, 1, d), false);
    return Mat(mha(t.leaf(x0, false), 3, t.leaf(c, false), 4, w, 2).val());
  };
  CHECK((run(c0) - run(c1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lstm gradients match finite differences") {
  Rng rng(15);
  int din = 6, h = 5, steps = 7;
  Mat x0 = random_mat(rng, steps, din);
  Mat wih0 = random_mat(rng, din, 4 * h, 0.5);
  Mat whh0 = random_mat(rng, h, 4 * h, 0.5);
  Mat b0 = random_mat(rng, 1, 4 * h, 0.1);
  Mat wsum = random_mat(rng, steps, h);
  int valid = 6;

  Tape t;
  Var x = t.leaf(x0, true), wih = t.leaf(wih0, true), whh = t.leaf(whh0, true),
      b = t.leaf(b0, true);
  Var y = lstm(x, valid, wih, whh, b);
  CHECK(y.val().row(6).cwiseAbs().maxCoeff() == 0.0);
  t.backward(weighted_sum(y, wsum));

  auto loss = [&](const Mat& xv, const Mat& a, const Mat& bb, const Mat& bias) {
    Tape s;
    return weighted_sum(
               lstm(s.leaf(xv, false), valid, s.leaf(a, false), s.leaf(bb, false),
                    s.leaf(bias, false)),
               wsum)
        .scalar();
  };
  CHECK(fd_worst_rel_error(x0, t.grad(x), [&](const Mat& m) { return loss(m, wih0, whh0, b0); }) <
        1e-5);
  CHECK(fd_worst_rel_error(wih0, t.grad(wih),
                           [&](const Mat& m) { return loss(x0, m, whh0, b0); }) < 1e-5);
  CHECK(fd_worst_rel_error(whh0, t.grad(whh),
                           [&](const Mat& m) { return loss(x0, wih0, m, b0); }) < 1e-5);
  CHECK(fd_worst_rel_error(b0, t.grad(b), [&](const Mat& m) { return loss(x0, wih0, whh0, m); }) <
        1e-5);
}

TEST_CASE("span_max matches brute force and routes gradient to the argmax") {
  Rng rng(16);
  Mat x0 = random_mat(rng, 6, 3);
  std::vector<std::pair<int, int>> cells = {{0, 0}, {0, 2}, {1, 4}, {3, 5}, {5, 5}};
  Mat w = random_mat(rng, static_cast<int>(cells.size()), 3);

  Tape t;
  Var x = t.leaf(x0, true);
  Var y = span_max(x, cells);
  for (size_t c = 0; c < cells.size(); ++c) {
    for (int col = 0; col < 3; ++col) {
      double best = -1e300;
      for (int r = cells[c].first; r <= cells[c].second; ++r) best = std::max(best, x0(r, col));
      CHECK(y.val()(static_cast<int>(c), col) == best);
    }
  }
  t.backward(weighted_sum(y, w));
  auto loss = [&](const Mat& xv) {
    Tape s;
    return weighted_sum(span_max(s.leaf(xv, false), cells), w).scalar();
  };
  CHECK(fd_worst_rel_error(x0, t.grad(x), loss) < 1e-6);
}

TEST_CASE("nll_diag closed forms") {
  // Uniform logits: every softmax row is uniform, so the loss is log(B).
  Tape t;
  Var z = t.leaf(Mat::Zero(3, 3), false);
  CHECK(nll_diag(z).scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  // 1x1: softmax of one entry is 1.
  Tape t2;
  Mat one(1, 1);
  one(0, 0) = 4.2;
  CHECK(nll_diag(t2.leaf(one, false)).scalar() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("nll_diag gradient") {
  Rng rng(17);
  Mat z0 = random_mat(rng, 4, 4);
  Tape t;
  Var z = t.leaf(z0, true);
  t.backward(nll_diag(z));
  auto loss = [&](const Mat& m) {
    Tape s;
    return nll_diag(s.leaf(m, false)).scalar();
  };
  CHECK(fd_worst_rel_error(z0, t.grad(z), loss) < 1e-6);
}

TEST_CASE("cross_entropy_prob and bce_mean values") {
  Tape t;
  Mat p(1, 4);
  p << 0.25, 0.25, 0.25, 0.25;
  CHECK(cross_entropy_prob(t.leaf(p, false), 2, 1e-7).scalar() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-9));

  Mat ph(1, 1), yh(1, 1);
  ph << 0.5;
  yh << 0.5;
  CHECK(bce_mean(t.leaf(ph, false), yh, 1, 1e-7).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Perfect one-hot prediction is tiny but nonzero due to clamping.
  Mat pp(1, 3), yy(1, 3);
  pp << 1.0, 0.0, 0.0;
  yy << 1.0, 0.0, 0.0;
  CHECK(bce_mean(t.leaf(pp, false), yy, 3, 1e-7).scalar() < 1e-6);
  CHECK(cross_entropy_prob(t.leaf(pp, false), 0, 1e-7).scalar() < 1e-6);
}

TEST_CASE("bce_mean gradient") {
  Rng rng(18);
  Mat p0(1, 5);
  for (int i = 0; i < 5; ++i) p0(0, i) = 0.05 + 0.9 * rng.uniform();
  Mat y(1, 5);
  for (int i = 0; i < 5; ++i) y(0, i) = rng.uniform();
  Tape t;
  Var p = t.leaf(p0, true);
  t.backward(bce_mean(p, y, 5, 1e-7));
  auto loss = [&](const Mat& m) {
    Tape s;
    return bce_mean(s.leaf(m, false), y, 5, 1e-7).scalar();
  };
  CHECK(fd_worst_rel_error(p0, t.grad(p), loss) < 1e-6);
}

TEST_CASE("embed_rows accumulates gradient for repeated ids") {
  Rng rng(19);
  Mat table0 = random_mat(rng, 6, 4);
  std::vector<int> ids = {2, 2, 5};
  Mat w = random_mat(rng, 3, 4);
  Tape t;
  Var table = t.leaf(table0, true);
  Var e = embed_rows(table, ids, 3);
  CHECK((e.val().row(0) - table0.row(2)).cwiseAbs().maxCoeff() == 0.0);
  t.backward(weighted_sum(e, w));
  CHECK((t.grad(table).row(2) - (w.row(0) + w.row(1))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((t.grad(table).row(5) - w.row(2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(t.grad(table).row(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("embed_rows rejects out-of-vocabulary ids") {
  Tape t;
  Var table = t.leaf(Mat::Zero(4, 2), false);
  CHECK_THROWS_AS(embed_rows(table, {7}, 1), tsg::Error);
  CHECK_THROWS_AS(embed_rows(table, {-1}, 1), tsg::Error);
}

TEST_CASE("replace_rows semantics and errors") {
  Rng rng(20);
  Mat x0 = random_mat(rng, 5, 3), y0 = random_mat(rng, 2, 3);
  Tape t;
  Var x = t.leaf(x0, true), y = t.leaf(y0, true);
  Var out = replace_rows(x, {1, 3}, y);
  CHECK((out.val().row(1) - y0.row(0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.val().row(3) - y0.row(1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.val().row(0) - x0.row(0)).cwiseAbs().maxCoeff() == 0.0);

  Mat w = random_mat(rng, 5, 3);
  t.backward(weighted_sum(out, w));
  CHECK(t.grad(x).row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t.grad(y).row(0) - w.row(1)).cwiseAbs().maxCoeff() < 1e-12);

  Tape t2;
  Var x2 = t2.leaf(x0, false), y2 = t2.leaf(y0, false);
  CHECK_THROWS_AS(replace_rows(x2, {1, 1}, y2), tsg::Error);
  CHECK_THROWS_AS(replace_rows(x2, {1, 9}, y2), tsg::Error);
}

TEST_CASE("l2_normalize, mean_valid_rows, cosine_sim, exp_clamp gradients") {
  Rng rng(21);
  Mat a0 = random_mat(rng, 1, 6), b0 = random_mat(rng, 1, 6);
  Mat m0 = random_mat(rng, 4, 6);
  Mat w1 = random_mat(rng, 1, 6);

  {
    Tape t;
    Var a = t.leaf(a0, true);
    t.backward(weighted_sum(l2_normalize(a), w1));
    auto loss = [&](const Mat& m) {
      Tape s;
      return weighted_sum(l2_normalize(s.leaf(m, false)), w1).scalar();
    };
    CHECK(fd_worst_rel_error(a0, t.grad(a), loss) < 1e-6);
    CHECK(l2_normalize(t.leaf(a0, false)).val().norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    Tape t;
    Var m = t.leaf(m0, true);
    t.backward(weighted_sum(mean_valid_rows(m, 3), w1));
    auto loss = [&](const Mat& mm) {
      Tape s;
      return weighted_sum(mean_valid_rows(s.leaf(mm, false), 3), w1).scalar();
    };
    CHECK(fd_worst_rel_error(m0, t.grad(m), loss) < 1e-6);
  }
  {
    Tape t;
    Var a = t.leaf(a0, true), b = t.leaf(b0, true);
    t.backward(cosine_sim(a, b));
    auto loss_a = [&](const Mat& m) {
      Tape s;
      return cosine_sim(s.leaf(m, false), s.leaf(b0, false)).scalar();
    };
    auto loss_b = [&](const Mat& m) {
      Tape s;
      return cosine_sim(s.leaf(a0, false), s.leaf(m, false)).scalar();
    };
    CHECK(fd_worst_rel_error(a0, t.grad(a), loss_a) < 1e-6);
    CHECK(fd_worst_rel_error(b0, t.grad(b), loss_b) < 1e-6);
  }
  {
    Tape t;
    Var r = t.scalar(0.5, true);
    Var e = exp_clamp(r, 1.0, 100.0);
    CHECK(e.scalar() == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
    t.backward(e);
    CHECK(t.grad(r)(0, 0) == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
    // Clamped at the ceiling: flat gradient.
    Tape t2;
    Var r2 = t2.scalar(10.0, true);
    Var e2 = exp_clamp(r2, 1.0, 100.0);
    CHECK(e2.scalar() == 100.0);
    t2.backward(e2);
    CHECK(t2.grad(r2).size() == 0);
  }
}

TEST_CASE("stop_grad blocks the backward path") {
  Rng rng(22);
  Mat a0 = random_mat(rng, 2, 3);
  Tape t;
  Var a = t.leaf(a0, true);
  Var y = sum_all(cmul(stop_grad(a), a));
  t.backward(y);
  // d/da of sum(const * a) = const = a0 values, not 2*a0.
  CHECK((t.grad(a) - a0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dropout_mask applies the keep matrix to values and gradients") {
  Rng rng(23);
  Mat x0 = random_mat(rng, 3, 4);
  Mat keep = Mat::Zero(3, 4);
  keep(0, 0) = 2.0;
  keep(1, 2) = 2.0;
  Tape t;
  Var x = t.leaf(x0, true);
  Var y = dropout_mask(x, keep);
  CHECK(y.val()(0, 0) == doctest::Approx(2.0 * x0(0, 0)));
  CHECK(y.val()(2, 3) == 0.0);
  t.backward(sum_all(y));
  CHECK(t.grad(x)(0, 0) == doctest::Approx(2.0));
  CHECK(t.grad(x)(0, 1) == 0.0);
}

TEST_CASE("concat and slice round trip") {
  Rng rng(24);
  Mat a0 = random_mat(rng, 2, 3), b0 = random_mat(rng, 3, 3);
  Tape t;
  Var a = t.leaf(a0, true), b = t.leaf(b0, true);
  Var cat = concat_rows({a, b});
  CHECK(cat.rows() == 5);
  Var back = slice_rows(cat, 2, 3);
  CHECK((back.val() - b0).cwiseAbs().maxCoeff() == 0.0);
  Mat w = random_mat(rng, 3, 3);
  t.backward(weighted_sum(back, w));
  // Nothing flows into the part the slice skipped.
  CHECK((t.grad(a).size() == 0 || t.grad(a).cwiseAbs().maxCoeff() == 0.0));
  CHECK((t.grad(b) - w).cwiseAbs().maxCoeff() < 1e-12);
}
