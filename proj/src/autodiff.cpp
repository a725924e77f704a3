#include "tsg/autodiff.hpp"

#include <cmath>

namespace tsg::ad {

const Mat& Var::val() const {
  TSG_CHECK(valid(), "Var::val on invalid handle");
  return tape->val(*this);
}

double Var::scalar() const {
  const Mat& m = val();
  TSG_CHECK(m.size() == 1, "Var::scalar on non-scalar node " << m.rows() << "x" << m.cols());
  return m(0, 0);
}

Var Tape::leaf(Mat value, bool needs_grad) {
  int id = emit(std::move(value), needs_grad, nullptr);
  return Var{this, id};
}

Var Tape::scalar(double v, bool needs_grad) {
  Mat m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m), needs_grad);
}

int Tape::emit(Mat value, bool needs_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Mat& Tape::val(Var v) const {
  TSG_CHECK(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
            "Tape::val: foreign or invalid Var");
  return nodes_[v.id].value;
}

const Mat& Tape::grad(Var v) const {
  static const Mat kEmpty;
  TSG_CHECK(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
            "Tape::grad: foreign or invalid Var");
  const Node& n = nodes_[v.id];
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

Mat& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  grad_ref(id) += g;
}

void Tape::backward(const std::vector<std::pair<Var, Mat>>& seeds) {
  TSG_CHECK(!backward_done_, "Tape::backward called twice");
  backward_done_ = true;
  for (const auto& [v, g] : seeds) {
    TSG_CHECK(v.tape == this, "backward seed from another tape");
    TSG_CHECK(g.rows() == nodes_[v.id].value.rows() && g.cols() == nodes_[v.id].value.cols(),
              "backward seed shape mismatch");
    grad_ref(v.id) += g;
  }
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
    n.back(*this);
  }
}

void Tape::backward(Var root) {
  TSG_CHECK(root.val().size() == 1, "scalar backward needs a 1x1 root");
  Mat one(1, 1);
  one(0, 0) = 1.0;
  backward({{root, one}});
}

namespace {

Tape* same_tape(Var a, Var b) {
  TSG_CHECK(a.valid() && b.valid(), "op on invalid Var");
  TSG_CHECK(a.tape == b.tape, "op on Vars from different tapes");
  return a.tape;
}

}  // namespace

// Access to node metadata for op builders.
struct OpBuilder {
  static bool needs(Var v) { return v.valid() && v.tape->nodes_[v.id].needs_grad; }
  static Var make(Tape& t, Mat value, bool needs_grad, std::function<void(Tape&)> back) {
    int id = t.emit(std::move(value), needs_grad, needs_grad ? std::move(back) : nullptr);
    return Var{&t, id};
  }
  static void acc(Tape& t, Var v, const Mat& g) { t.accumulate(v.id, g); }
  static const Mat& g(Tape& t, int id) { return t.nodes_[id].grad; }
};

using B = OpBuilder;

Var add(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  TSG_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  bool ng = B::needs(a) || B::needs(b);
  Var out;
  out = B::make(t, a.val() + b.val(), ng, [a, b, out_id = t.size()](Tape& tp) mutable {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, a, g);
    B::acc(tp, b, g);
  });
  return out;
}

Var sub(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  TSG_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  bool ng = B::needs(a) || B::needs(b);
  Var out = B::make(t, a.val() - b.val(), ng, [a, b, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, a, g);
    B::acc(tp, b, Mat(-g));
  });
  return out;
}

Var neg(Var a) { return scale(a, -1.0); }

Var cmul(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  TSG_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), "cmul: shape mismatch");
  bool ng = B::needs(a) || B::needs(b);
  Var out = B::make(t, a.val().cwiseProduct(b.val()), ng, [a, b, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, a, g.cwiseProduct(b.val()));
    B::acc(tp, b, g.cwiseProduct(a.val()));
  });
  return out;
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  bool ng = B::needs(a);
  Var out = B::make(t, a.val() * c, ng, [a, c, out_id = t.size()](Tape& tp) {
    B::acc(tp, a, Mat(B::g(tp, static_cast<int>(out_id)) * c));
  });
  return out;
}

Var vscale(Var a, Var s) {
  Tape& t = *same_tape(a, s);
  TSG_CHECK(s.val().size() == 1, "vscale: scale must be 1x1");
  bool ng = B::needs(a) || B::needs(s);
  double sv = s.val()(0, 0);
  Var out = B::make(t, a.val() * sv, ng, [a, s, sv, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, a, Mat(g * sv));
    Mat ds(1, 1);
    ds(0, 0) = (g.array() * a.val().array()).sum();
    B::acc(tp, s, ds);
  });
  return out;
}

Var matmul(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  TSG_CHECK(a.cols() == b.rows(), "matmul: inner dims " << a.cols() << " vs " << b.rows());
  bool ng = B::needs(a) || B::needs(b);
  Var out = B::make(t, a.val() * b.val(), ng, [a, b, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, a, Mat(g * b.val().transpose()));
    B::acc(tp, b, Mat(a.val().transpose() * g));
  });
  return out;
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  Var out = B::make(t, a.val().transpose(), B::needs(a), [a, out_id = t.size()](Tape& tp) {
    B::acc(tp, a, Mat(B::g(tp, static_cast<int>(out_id)).transpose()));
  });
  return out;
}

Var concat_rows(const std::vector<Var>& parts) {
  TSG_CHECK(!parts.empty(), "concat_rows: empty input");
  Tape& t = *parts.front().tape;
  Eigen::Index cols = parts.front().cols(), rows = 0;
  bool ng = false;
  for (Var p : parts) {
    TSG_CHECK(p.tape == &t, "concat_rows: mixed tapes");
    TSG_CHECK(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || B::needs(p);
  }
  Mat v(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    v.middleRows(r, p.rows()) = p.val();
    r += p.rows();
  }
  Var out = B::make(t, std::move(v), ng, [parts, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    Eigen::Index r = 0;
    for (Var p : parts) {
      B::acc(tp, p, Mat(g.middleRows(r, p.rows())));
      r += p.rows();
    }
  });
  return out;
}

Var concat_cols(const std::vector<Var>& parts) {
  TSG_CHECK(!parts.empty(), "concat_cols: empty input");
  Tape& t = *parts.front().tape;
  Eigen::Index rows = parts.front().rows(), cols = 0;
  bool ng = false;
  for (Var p : parts) {
    TSG_CHECK(p.tape == &t, "concat_cols: mixed tapes");
    TSG_CHECK(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || B::needs(p);
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    v.middleCols(c, p.cols()) = p.val();
    c += p.cols();
  }
  Var out = B::make(t, std::move(v), ng, [parts, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    Eigen::Index c = 0;
    for (Var p : parts) {
      B::acc(tp, p, Mat(g.middleCols(c, p.cols())));
      c += p.cols();
    }
  });
  return out;
}

Var slice_rows(Var a, int start, int n) {
  Tape& t = *a.tape;
  TSG_CHECK(start >= 0 && n >= 0 && start + n <= a.rows(),
            "slice_rows: [" << start << ", " << start + n << ") out of " << a.rows());
  Var out = B::make(t, a.val().middleRows(start, n), B::needs(a),
                    [a, start, n, out_id = t.size()](Tape& tp) {
                      const Mat& g = B::g(tp, static_cast<int>(out_id));
                      Mat da = Mat::Zero(a.rows(), a.cols());
                      da.middleRows(start, n) = g;
                      B::acc(tp, a, da);
                    });
  return out;
}

Var linear(Var x, Var w, Var b) {
  Tape& t = *same_tape(x, w);
  TSG_CHECK(x.cols() == w.rows(), "linear: dims " << x.cols() << " vs " << w.rows());
  Mat v = x.val() * w.val();
  bool ng = B::needs(x) || B::needs(w);
  if (b.valid()) {
    TSG_CHECK(b.tape == &t && b.rows() == 1 && b.cols() == w.cols(), "linear: bad bias shape");
    v.rowwise() += b.val().row(0);
    ng = ng || B::needs(b);
  }
  Var out = B::make(t, std::move(v), ng, [x, w, b, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, x, Mat(g * w.val().transpose()));
    B::acc(tp, w, Mat(x.val().transpose() * g));
    if (b.valid()) B::acc(tp, b, Mat(g.colwise().sum()));
  });
  return out;
}

Var add_rowvec(Var x, Var b) {
  Tape& t = *same_tape(x, b);
  TSG_CHECK(b.rows() == 1 && b.cols() == x.cols(), "add_rowvec: bad shape");
  Mat v = x.val();
  v.rowwise() += b.val().row(0);
  bool ng = B::needs(x) || B::needs(b);
  Var out = B::make(t, std::move(v), ng, [x, b, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    B::acc(tp, x, g);
    B::acc(tp, b, Mat(g.colwise().sum()));
  });
  return out;
}

namespace {

// Softmax of the leading valid block of one row, writes into `out`.
void softmax_row_block(const Mat& x, int r, int vc, Mat& out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < vc; ++c) mx = std::max(mx, x(r, c));
  double denom = 0.0;
  for (int c = 0; c < vc; ++c) denom += std::exp(x(r, c) - mx);
  for (int c = 0; c < vc; ++c) out(r, c) = std::exp(x(r, c) - mx) / denom;
}

}  // namespace

Var row_softmax(Var x, int valid_rows, int valid_cols) {
  Tape& t = *x.tape;
  TSG_CHECK(valid_rows >= 0 && valid_rows <= x.rows(), "row_softmax: bad valid_rows");
  TSG_CHECK(valid_cols >= 1 && valid_cols <= x.cols(), "row_softmax: bad valid_cols");
  Mat v = Mat::Zero(x.rows(), x.cols());
  for (int r = 0; r < valid_rows; ++r) softmax_row_block(x.val(), r, valid_cols, v);
  Var out = B::make(t, std::move(v), B::needs(x),
                    [x, valid_rows, valid_cols, out_id = t.size()](Tape& tp) {
                      const Mat& g = B::g(tp, static_cast<int>(out_id));
                      const Mat& p = tp.val(Var{&tp, static_cast<int>(out_id)});
                      Mat dx = Mat::Zero(x.rows(), x.cols());
                      for (int r = 0; r < valid_rows; ++r) {
                        double dot = 0.0;
                        for (int c = 0; c < valid_cols; ++c) dot += g(r, c) * p(r, c);
                        for (int c = 0; c < valid_cols; ++c)
                          dx(r, c) = p(r, c) * (g(r, c) - dot);
                      }
                      B::acc(tp, x, dx);
                    });
  return out;
}

Var col_softmax(Var x, int valid_rows, int valid_cols) {
  Tape& t = *x.tape;
  TSG_CHECK(valid_rows >= 1 && valid_rows <= x.rows(), "col_softmax: bad valid_rows");
  TSG_CHECK(valid_cols >= 0 && valid_cols <= x.cols(), "col_softmax: bad valid_cols");
  Mat v = Mat::Zero(x.rows(), x.cols());
  for (int c = 0; c < valid_cols; ++c) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < valid_rows; ++r) mx = std::max(mx, x.val()(r, c));
    double denom = 0.0;
    for (int r = 0; r < valid_rows; ++r) denom += std::exp(x.val()(r, c) - mx);
    for (int r = 0; r < valid_rows; ++r) v(r, c) = std::exp(x.val()(r, c) - mx) / denom;
  }
  Var out = B::make(t, std::move(v), B::needs(x),
                    [x, valid_rows, valid_cols, out_id = t.size()](Tape& tp) {
                      const Mat& g = B::g(tp, static_cast<int>(out_id));
                      const Mat& p = tp.val(Var{&tp, static_cast<int>(out_id)});
                      Mat dx = Mat::Zero(x.rows(), x.cols());
                      for (int c = 0; c < valid_cols; ++c) {
                        double dot = 0.0;
                        for (int r = 0; r < valid_rows; ++r) dot += g(r, c) * p(r, c);
                        for (int r = 0; r < valid_rows; ++r)
                          dx(r, c) = p(r, c) * (g(r, c) - dot);
                      }
                      B::acc(tp, x, dx);
                    });
  return out;
}

Var sigmoid(Var x) {
  Tape& t = *x.tape;
  Mat v = (1.0 / (1.0 + (-x.val().array()).exp())).matrix();
  Var out = B::make(t, std::move(v), B::needs(x), [x, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    const Mat& s = tp.val(Var{&tp, static_cast<int>(out_id)});
    B::acc(tp, x, Mat((g.array() * s.array() * (1.0 - s.array())).matrix()));
  });
  return out;
}

Var tanh_op(Var x) {
  Tape& t = *x.tape;
  Mat v = x.val().array().tanh().matrix();
  Var out = B::make(t, std::move(v), B::needs(x), [x, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    const Mat& y = tp.val(Var{&tp, static_cast<int>(out_id)});
    B::acc(tp, x, Mat((g.array() * (1.0 - y.array().square())).matrix()));
  });
  return out;
}

Var layer_norm(Var x, Var gamma, Var beta, int valid_rows, double eps) {
  Tape& t = *same_tape(x, gamma);
  TSG_CHECK(beta.tape == &t, "layer_norm: mixed tapes");
  const int d = static_cast<int>(x.cols());
  TSG_CHECK(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
            "layer_norm: gamma/beta must be 1xD");
  TSG_CHECK(valid_rows >= 0 && valid_rows <= x.rows(), "layer_norm: bad valid_rows");

  using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
  auto aux = std::make_shared<Mat>(Mat::Zero(x.rows(), d));  // normalized rows
  Mat v = Mat::Zero(x.rows(), d);
  std::vector<double> inv_std(valid_rows);
  for (int r = 0; r < valid_rows; ++r) {
    double mu = x.val().row(r).mean();
    double var = (x.val().row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    aux->row(r) = ((x.val().row(r).array() - mu) * is).matrix();
    v.row(r) =
        (aux->row(r).array() * gamma.val().row(0).array() + beta.val().row(0).array()).matrix();
  }
  auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
  bool ng = B::needs(x) || B::needs(gamma) || B::needs(beta);
  Var out = B::make(t, std::move(v), ng,
                    [x, gamma, beta, valid_rows, aux, istd, d, out_id = t.size()](Tape& tp) {
                      const Mat& g = B::g(tp, static_cast<int>(out_id));
                      Mat dx = Mat::Zero(x.rows(), x.cols());
                      Mat dgamma = Mat::Zero(1, d), dbeta = Mat::Zero(1, d);
                      for (int r = 0; r < valid_rows; ++r) {
                        RowArr xhat = aux->row(r).array();
                        RowArr dy = g.row(r).array() * gamma.val().row(0).array();
                        dgamma.row(0).array() += g.row(r).array() * xhat;
                        dbeta.row(0).array() += g.row(r).array();
                        double m1 = dy.mean();
                        double m2 = (dy * xhat).mean();
                        dx.row(r) = ((*istd)[r] * (dy - m1 - xhat * m2)).matrix();
                      }
                      B::acc(tp, x, dx);
                      B::acc(tp, gamma, dgamma);
                      B::acc(tp, beta, dbeta);
                    });
  return out;
}

Var mask_rows(Var x, int valid_rows) {
  Tape& t = *x.tape;
  TSG_CHECK(valid_rows >= 0 && valid_rows <= x.rows(), "mask_rows: bad valid_rows");
  Mat v = x.val();
  v.bottomRows(x.rows() - valid_rows).setZero();
  Var out = B::make(t, std::move(v), B::needs(x), [x, valid_rows, out_id = t.size()](Tape& tp) {
    Mat g = B::g(tp, static_cast<int>(out_id));
    g.bottomRows(x.rows() - valid_rows).setZero();
    B::acc(tp, x, g);
  });
  return out;
}

Var mean_valid_rows(Var x, int valid_rows) {
  Tape& t = *x.tape;
  TSG_CHECK(valid_rows >= 1 && valid_rows <= x.rows(), "mean_valid_rows: bad valid_rows");
  Mat v = x.val().topRows(valid_rows).colwise().mean();
  Var out = B::make(t, std::move(v), B::needs(x), [x, valid_rows, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    Mat dx = Mat::Zero(x.rows(), x.cols());
    dx.topRows(valid_rows).rowwise() += (g.row(0) / static_cast<double>(valid_rows));
    B::acc(tp, x, dx);
  });
  return out;
}

Var l2_normalize(Var x) {
  Tape& t = *x.tape;
  TSG_CHECK(x.rows() == 1, "l2_normalize expects a 1xD row");
  double n = x.val().norm();
  TSG_CHECK(n > 0.0, "l2_normalize: zero vector");
  Mat v = x.val() / n;
  Var out = B::make(t, std::move(v), B::needs(x), [x, n, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    const Mat& y = tp.val(Var{&tp, static_cast<int>(out_id)});
    double dot = (g.array() * y.array()).sum();
    B::acc(tp, x, Mat((g - dot * y) / n));
  });
  return out;
}

Var nll_diag(Var z) {
  Tape& t = *z.tape;
  TSG_CHECK(z.rows() == z.cols() && z.rows() >= 1, "nll_diag: square matrix required");
  const int b = static_cast<int>(z.rows());
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    double mx = z.val().row(r).maxCoeff();
    double lse = mx + std::log((z.val().row(r).array() - mx).exp().sum());
    loss += lse - z.val()(r, r);
  }
  Mat v(1, 1);
  v(0, 0) = loss / b;
  Var out = B::make(t, std::move(v), B::needs(z), [z, b, out_id = t.size()](Tape& tp) {
    double g = B::g(tp, static_cast<int>(out_id))(0, 0);
    Mat dz(b, b);
    for (int r = 0; r < b; ++r) {
      double mx = z.val().row(r).maxCoeff();
      Eigen::ArrayXd e = (z.val().row(r).array() - mx).exp();
      dz.row(r) = (e / e.sum()).matrix();
      dz(r, r) -= 1.0;
    }
    B::acc(tp, z, Mat(dz * (g / b)));
  });
  return out;
}

Var cross_entropy_prob(Var p, int target, double clamp_eps) {
  Tape& t = *p.tape;
  TSG_CHECK(p.rows() == 1 || p.cols() == 1, "cross_entropy_prob: vector expected");
  const int n = static_cast<int>(p.val().size());
  TSG_CHECK(target >= 0 && target < n, "cross_entropy_prob: target " << target << " out of " << n);
  double pt = p.val()(target);
  TSG_CHECK(pt >= -1e-9 && pt <= 1.0 + 1e-9,
            "cross_entropy_prob: probability " << pt << " outside [0,1]");
  bool clamped = pt < clamp_eps || pt > 1.0 - clamp_eps;
  double pc = std::min(std::max(pt, clamp_eps), 1.0 - clamp_eps);
  Mat v(1, 1);
  v(0, 0) = -std::log(pc);
  Var out = B::make(t, std::move(v), B::needs(p),
                    [p, target, pc, clamped, out_id = t.size()](Tape& tp) {
                      double g = B::g(tp, static_cast<int>(out_id))(0, 0);
                      Mat dp = Mat::Zero(p.rows(), p.cols());
                      if (!clamped) dp(target) = -g / pc;
                      B::acc(tp, p, dp);
                    });
  return out;
}

Var bce_mean(Var p, const Mat& y, int valid, double clamp_eps) {
  Tape& t = *p.tape;
  TSG_CHECK(p.rows() == y.rows() && p.cols() == y.cols(), "bce_mean: shape mismatch");
  TSG_CHECK(p.rows() == 1 || p.cols() == 1, "bce_mean: vector expected");
  TSG_CHECK(valid >= 1 && valid <= p.val().size(), "bce_mean: bad valid count");
  double loss = 0.0;
  for (int k = 0; k < valid; ++k) {
    double pv = p.val()(k);
    TSG_CHECK(pv >= -1e-9 && pv <= 1.0 + 1e-9, "bce_mean: probability " << pv << " outside [0,1]");
    double pc = std::min(std::max(pv, clamp_eps), 1.0 - clamp_eps);
    loss -= y(k) * std::log(pc) + (1.0 - y(k)) * std::log(1.0 - pc);
  }
  Mat v(1, 1);
  v(0, 0) = loss / valid;
  auto targets = std::make_shared<Mat>(y);
  Var out = B::make(t, std::move(v), B::needs(p),
                    [p, targets, valid, clamp_eps, out_id = t.size()](Tape& tp) {
                      double g = B::g(tp, static_cast<int>(out_id))(0, 0);
                      Mat dp = Mat::Zero(p.rows(), p.cols());
                      for (int k = 0; k < valid; ++k) {
                        double pv = p.val()(k);
                        if (pv < clamp_eps || pv > 1.0 - clamp_eps) continue;
                        dp(k) = g * (pv - (*targets)(k)) / (pv * (1.0 - pv) * valid);
                      }
                      B::acc(tp, p, dp);
                    });
  return out;
}

Var dropout_mask(Var x, const Mat& keep) {
  Tape& t = *x.tape;
  TSG_CHECK(keep.rows() == x.rows() && keep.cols() == x.cols(), "dropout_mask: shape mismatch");
  auto k = std::make_shared<Mat>(keep);
  Var out = B::make(t, x.val().cwiseProduct(*k), B::needs(x), [x, k, out_id = t.size()](Tape& tp) {
    B::acc(tp, x, Mat(B::g(tp, static_cast<int>(out_id)).cwiseProduct(*k)));
  });
  return out;
}

Var embed_rows(Var table, const std::vector<int>& ids, int valid) {
  Tape& t = *table.tape;
  TSG_CHECK(valid >= 0 && valid <= static_cast<int>(ids.size()), "embed_rows: bad valid count");
  Mat v = Mat::Zero(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (int i = 0; i < valid; ++i) {
    TSG_CHECK(ids[i] >= 0 && ids[i] < table.rows(),
              "embed_rows: token id " << ids[i] << " out of vocabulary (size " << table.rows() << ")");
    v.row(i) = table.val().row(ids[i]);
  }
  auto idv = std::make_shared<std::vector<int>>(ids);
  Var out = B::make(t, std::move(v), B::needs(table),
                    [table, idv, valid, out_id = t.size()](Tape& tp) {
                      const Mat& g = B::g(tp, static_cast<int>(out_id));
                      Mat dt = Mat::Zero(table.rows(), table.cols());
                      for (int i = 0; i < valid; ++i) dt.row((*idv)[i]) += g.row(i);
                      B::acc(tp, table, dt);
                    });
  return out;
}

Var replace_rows(Var x, const std::vector<int>& positions, Var y) {
  Tape& t = *x.tape;
  TSG_CHECK(static_cast<Eigen::Index>(positions.size()) == y.rows(),
            "replace_rows: positions/rows mismatch");
  TSG_CHECK(x.cols() == y.cols() || y.rows() == 0, "replace_rows: column mismatch");
  Mat v = x.val();
  std::vector<bool> seen(x.rows(), false);
  for (size_t i = 0; i < positions.size(); ++i) {
    int p = positions[i];
    TSG_CHECK(p >= 0 && p < x.rows(), "replace_rows: position " << p << " out of range");
    TSG_CHECK(!seen[p], "replace_rows: duplicate position " << p);
    seen[p] = true;
    v.row(p) = y.val().row(static_cast<Eigen::Index>(i));
  }
  auto pos = std::make_shared<std::vector<int>>(positions);
  bool ng = B::needs(x) || B::needs(y);
  Var out = B::make(t, std::move(v), ng, [x, y, pos, out_id = t.size()](Tape& tp) {
    Mat gx = B::g(tp, static_cast<int>(out_id));
    Mat gy(static_cast<Eigen::Index>(pos->size()), x.cols());
    for (size_t i = 0; i < pos->size(); ++i) {
      gy.row(static_cast<Eigen::Index>(i)) = gx.row((*pos)[i]);
      gx.row((*pos)[i]).setZero();
    }
    B::acc(tp, x, gx);
    if (y.rows() > 0) B::acc(tp, y, gy);
  });
  return out;
}

Var repeat_row(Var x, int n) {
  Tape& t = *x.tape;
  TSG_CHECK(x.rows() == 1, "repeat_row expects 1xD");
  TSG_CHECK(n >= 0, "repeat_row: negative count");
  Mat v(n, x.cols());
  for (int i = 0; i < n; ++i) v.row(i) = x.val().row(0);
  Var out = B::make(t, std::move(v), B::needs(x), [x, out_id = t.size()](Tape& tp) {
    B::acc(tp, x, Mat(B::g(tp, static_cast<int>(out_id)).colwise().sum()));
  });
  return out;
}

Var cosine_sim(Var a, Var b) {
  Tape& t = *same_tape(a, b);
  TSG_CHECK(a.rows() == 1 && b.rows() == 1 && a.cols() == b.cols(), "cosine_sim: 1xD rows expected");
  double na = a.val().norm(), nb = b.val().norm();
  TSG_CHECK(na > 0.0 && nb > 0.0, "cosine_sim: zero vector");
  double dot = (a.val().array() * b.val().array()).sum();
  Mat v(1, 1);
  v(0, 0) = dot / (na * nb);
  bool ng = B::needs(a) || B::needs(b);
  Var out = B::make(t, std::move(v), ng, [a, b, na, nb, dot, out_id = t.size()](Tape& tp) {
    double g = B::g(tp, static_cast<int>(out_id))(0, 0);
    double c = dot / (na * nb);
    B::acc(tp, a, Mat(g * (b.val() / (na * nb) - c * a.val() / (na * na))));
    B::acc(tp, b, Mat(g * (a.val() / (na * nb) - c * b.val() / (nb * nb))));
  });
  return out;
}

Var exp_clamp(Var x, double lo, double hi) {
  Tape& t = *x.tape;
  TSG_CHECK(x.val().size() == 1, "exp_clamp: 1x1 expected");
  double e = std::exp(x.val()(0, 0));
  double c = std::min(std::max(e, lo), hi);
  Mat v(1, 1);
  v(0, 0) = c;
  bool active = e > lo && e < hi;
  Var out = B::make(t, std::move(v), B::needs(x), [x, e, active, out_id = t.size()](Tape& tp) {
    if (!active) return;
    Mat dx(1, 1);
    dx(0, 0) = B::g(tp, static_cast<int>(out_id))(0, 0) * e;
    B::acc(tp, x, dx);
  });
  return out;
}

Var stop_grad(Var x) { return x.tape->leaf(x.val(), false); }

// ---------------------------------------------------------------------------
// Fused residual multi-head attention.
// ---------------------------------------------------------------------------

namespace {

struct MhaAux {
  Mat q, k, v, att;  // att: concatenated per-head context mixes, pre-projection
};

}  // namespace

Var mha(Var x, int q_valid, Var ctx, int kv_valid, const MhaVars& w, int num_heads) {
  Tape& t = *same_tape(x, ctx);
  const int d = static_cast<int>(x.cols());
  TSG_CHECK(ctx.cols() == d, "mha: stream dims differ");
  TSG_CHECK(num_heads >= 1 && d % num_heads == 0, "mha: D=" << d << " not divisible by heads");
  TSG_CHECK(q_valid >= 0 && q_valid <= x.rows(), "mha: bad q_valid");
  TSG_CHECK(kv_valid >= 1 && kv_valid <= ctx.rows(), "mha: bad kv_valid");
  const int dh = d / num_heads;
  const int a_rows = static_cast<int>(x.rows());
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d));

  auto aux = std::make_shared<MhaAux>();
  aux->q = x.val() * w.wq.val();
  aux->q.rowwise() += w.bq.val().row(0);
  aux->k = ctx.val() * w.wk.val();
  aux->k.rowwise() += w.bk.val().row(0);
  aux->v = ctx.val() * w.wv.val();
  aux->v.rowwise() += w.bv.val().row(0);
  aux->att = Mat::Zero(a_rows, d);

  for (int h = 0; h < num_heads; ++h) {
    Mat s = aux->q.middleCols(h * dh, dh) * aux->k.middleCols(h * dh, dh).transpose() * inv_scale;
    // Softmax over valid context positions only.
    Mat p = Mat::Zero(a_rows, ctx.rows());
    for (int r = 0; r < a_rows; ++r) softmax_row_block(s, r, kv_valid, p);
    aux->att.middleCols(h * dh, dh) = p.leftCols(kv_valid) * aux->v.topRows(kv_valid).middleCols(h * dh, dh);
  }

  Mat proj = aux->att * w.wo.val();
  proj.rowwise() += w.bo.val().row(0);
  proj.bottomRows(a_rows - q_valid).setZero();
  Mat out_v = x.val() + proj;

  bool ng = B::needs(x) || B::needs(ctx) || B::needs(w.wq) || B::needs(w.wk) ||
            B::needs(w.wv) || B::needs(w.wo) || B::needs(w.bq) || B::needs(w.bk) ||
            B::needs(w.bv) || B::needs(w.bo);

  Var out = B::make(
      t, std::move(out_v), ng,
      [x, ctx, w, aux, q_valid, kv_valid, num_heads, dh, a_rows, inv_scale,
       out_id = t.size()](Tape& tp) {
        const Mat& g = B::g(tp, static_cast<int>(out_id));
        const int d = static_cast<int>(x.cols());

        // Residual path.
        B::acc(tp, x, g);

        Mat dproj = g;
        dproj.bottomRows(a_rows - q_valid).setZero();
        B::acc(tp, w.wo, Mat(aux->att.transpose() * dproj));
        B::acc(tp, w.bo, Mat(dproj.colwise().sum()));
        Mat datt = dproj * w.wo.val().transpose();

        Mat dq = Mat::Zero(a_rows, d);
        Mat dk = Mat::Zero(ctx.rows(), d);
        Mat dv = Mat::Zero(ctx.rows(), d);
        for (int h = 0; h < num_heads; ++h) {
          // Recompute this head's attention probabilities.
          Mat s = aux->q.middleCols(h * dh, dh) * aux->k.middleCols(h * dh, dh).transpose() *
                  inv_scale;
          Mat p = Mat::Zero(a_rows, ctx.rows());
          for (int r = 0; r < a_rows; ++r) softmax_row_block(s, r, kv_valid, p);

          Mat dah = datt.middleCols(h * dh, dh);
          dv.topRows(kv_valid).middleCols(h * dh, dh) +=
              p.leftCols(kv_valid).transpose() * dah;
          Mat dp = dah * aux->v.topRows(kv_valid).middleCols(h * dh, dh).transpose();
          // Softmax backward, restricted to the valid block.
          Mat ds = Mat::Zero(a_rows, kv_valid);
          for (int r = 0; r < a_rows; ++r) {
            double dot = (dp.row(r).array() * p.row(r).head(kv_valid).array()).sum();
            ds.row(r) = (p.row(r).head(kv_valid).array() * (dp.row(r).array() - dot)).matrix();
          }
          dq.middleCols(h * dh, dh) +=
              ds * aux->k.topRows(kv_valid).middleCols(h * dh, dh) * inv_scale;
          dk.topRows(kv_valid).middleCols(h * dh, dh) +=
              ds.transpose() * aux->q.middleCols(h * dh, dh) * inv_scale;
        }

        B::acc(tp, x, Mat(dq * w.wq.val().transpose()));
        B::acc(tp, w.wq, Mat(x.val().transpose() * dq));
        B::acc(tp, w.bq, Mat(dq.colwise().sum()));
        B::acc(tp, ctx, Mat(dk * w.wk.val().transpose() + dv * w.wv.val().transpose()));
        B::acc(tp, w.wk, Mat(ctx.val().transpose() * dk));
        B::acc(tp, w.bk, Mat(dk.colwise().sum()));
        B::acc(tp, w.wv, Mat(ctx.val().transpose() * dv));
        B::acc(tp, w.bv, Mat(dv.colwise().sum()));
      });
  return out;
}

// ---------------------------------------------------------------------------
// Fused single-layer LSTM.
// ---------------------------------------------------------------------------

namespace {

struct LstmAux {
  Mat gi, gf, gc, go;  // T x H post-activation gates
  Mat c, tc;           // cell states and tanh(c)
  Mat h;               // hidden states (equals output rows)
};

inline double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var lstm(Var x, int valid, Var w_ih, Var w_hh, Var b) {
  Tape& t = *same_tape(x, w_ih);
  const int hidden = static_cast<int>(w_hh.rows());
  TSG_CHECK(w_ih.rows() == x.cols() && w_ih.cols() == 4 * hidden, "lstm: w_ih shape");
  TSG_CHECK(w_hh.cols() == 4 * hidden, "lstm: w_hh shape");
  TSG_CHECK(b.rows() == 1 && b.cols() == 4 * hidden, "lstm: bias shape");
  TSG_CHECK(valid >= 0 && valid <= x.rows(), "lstm: bad valid count");
  const int rows = static_cast<int>(x.rows());

  auto aux = std::make_shared<LstmAux>();
  aux->gi = Mat::Zero(rows, hidden);
  aux->gf = Mat::Zero(rows, hidden);
  aux->gc = Mat::Zero(rows, hidden);
  aux->go = Mat::Zero(rows, hidden);
  aux->c = Mat::Zero(rows, hidden);
  aux->tc = Mat::Zero(rows, hidden);
  aux->h = Mat::Zero(rows, hidden);

  Eigen::RowVectorXd h_prev = Eigen::RowVectorXd::Zero(hidden);
  Eigen::RowVectorXd c_prev = Eigen::RowVectorXd::Zero(hidden);
  for (int s = 0; s < valid; ++s) {
    Eigen::RowVectorXd pre = x.val().row(s) * w_ih.val() + h_prev * w_hh.val() + b.val().row(0);
    for (int j = 0; j < hidden; ++j) {
      double i = sigm(pre(j));
      double f = sigm(pre(hidden + j));
      double g = std::tanh(pre(2 * hidden + j));
      double o = sigm(pre(3 * hidden + j));
      double c = f * c_prev(j) + i * g;
      aux->gi(s, j) = i;
      aux->gf(s, j) = f;
      aux->gc(s, j) = g;
      aux->go(s, j) = o;
      aux->c(s, j) = c;
      aux->tc(s, j) = std::tanh(c);
      aux->h(s, j) = o * aux->tc(s, j);
    }
    h_prev = aux->h.row(s);
    c_prev = aux->c.row(s);
  }

  bool ng = B::needs(x) || B::needs(w_ih) || B::needs(w_hh) || B::needs(b);
  Var out = B::make(
      t, aux->h, ng, [x, w_ih, w_hh, b, aux, valid, hidden, out_id = t.size()](Tape& tp) {
        const Mat& g = B::g(tp, static_cast<int>(out_id));
        Mat dx = Mat::Zero(x.rows(), x.cols());
        Mat dwih = Mat::Zero(w_ih.rows(), w_ih.cols());
        Mat dwhh = Mat::Zero(w_hh.rows(), w_hh.cols());
        Mat db = Mat::Zero(1, 4 * hidden);
        Eigen::RowVectorXd dh_carry = Eigen::RowVectorXd::Zero(hidden);
        Eigen::RowVectorXd dc_carry = Eigen::RowVectorXd::Zero(hidden);
        for (int s = valid - 1; s >= 0; --s) {
          Eigen::RowVectorXd dh = g.row(s) + dh_carry;
          Eigen::RowVectorXd dpre(4 * hidden);
          Eigen::RowVectorXd dc_next(hidden);
          for (int j = 0; j < hidden; ++j) {
            double i = aux->gi(s, j), f = aux->gf(s, j), gg = aux->gc(s, j), o = aux->go(s, j);
            double tc = aux->tc(s, j);
            double cprev = s > 0 ? aux->c(s - 1, j) : 0.0;
            double dout_gate = dh(j) * tc;
            double dc = dc_carry(j) + dh(j) * o * (1.0 - tc * tc);
            double di = dc * gg;
            double dgg = dc * i;
            double df = dc * cprev;
            dc_next(j) = dc * f;
            dpre(j) = di * i * (1.0 - i);
            dpre(hidden + j) = df * f * (1.0 - f);
            dpre(2 * hidden + j) = dgg * (1.0 - gg * gg);
            dpre(3 * hidden + j) = dout_gate * o * (1.0 - o);
          }
          dc_carry = dc_next;
          dx.row(s) = dpre * w_ih.val().transpose();
          dwih += x.val().row(s).transpose() * dpre;
          if (s > 0) {
            dwhh += aux->h.row(s - 1).transpose() * dpre;
            dh_carry = dpre * w_hh.val().transpose();
          } else {
            dh_carry.setZero();
          }
          db += dpre;
        }
        B::acc(tp, x, dx);
        B::acc(tp, w_ih, dwih);
        B::acc(tp, w_hh, dwhh);
        B::acc(tp, b, db);
      });
  return out;
}

// ---------------------------------------------------------------------------
// Span max pooling onto an explicit candidate list.
// ---------------------------------------------------------------------------

Var span_max(Var x, const std::vector<std::pair<int, int>>& cells) {
  Tape& t = *x.tape;
  const int d = static_cast<int>(x.cols());
  const int c_count = static_cast<int>(cells.size());
  Mat v(c_count, d);
  auto argmax = std::make_shared<Eigen::MatrixXi>(c_count, d);
  for (int c = 0; c < c_count; ++c) {
    auto [i, j] = cells[c];
    TSG_CHECK(0 <= i && i <= j && j < x.rows(), "span_max: bad cell (" << i << "," << j << ")");
    for (int col = 0; col < d; ++col) {
      double best = x.val()(i, col);
      int best_r = i;
      for (int r = i + 1; r <= j; ++r) {
        if (x.val()(r, col) > best) {
          best = x.val()(r, col);
          best_r = r;
        }
      }
      v(c, col) = best;
      (*argmax)(c, col) = best_r;
    }
  }
  Var out = B::make(t, std::move(v), B::needs(x), [x, argmax, c_count, d, out_id = t.size()](Tape& tp) {
    const Mat& g = B::g(tp, static_cast<int>(out_id));
    Mat dx = Mat::Zero(x.rows(), x.cols());
    for (int c = 0; c < c_count; ++c)
      for (int col = 0; col < d; ++col) dx((*argmax)(c, col), col) += g(c, col);
    B::acc(tp, x, dx);
  });
  return out;
}

}  // namespace tsg::ad
