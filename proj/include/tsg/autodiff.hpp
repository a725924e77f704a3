#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tsg/common.hpp"

namespace tsg::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; invalid by default.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  double scalar() const;
};

/// Reverse-mode tape over Eigen double matrices. Nodes are created in
/// forward order; backward() walks them in reverse exactly once.
///
/// Masking convention: every mask in this codebase is a contiguous valid
/// prefix, so ops take valid row/column counts instead of mask vectors.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value, bool needs_grad = false);
  Var constant(Mat value) { return leaf(std::move(value), false); }
  Var scalar(double v, bool needs_grad = false);

  /// Run reverse accumulation from the given seeds. Call at most once.
  void backward(const std::vector<std::pair<Var, Mat>>& seeds);
  /// Seed a 1x1 node with 1.0.
  void backward(Var root);

  const Mat& val(Var v) const;
  /// Gradient of a node; zero-sized matrix when the node was never touched.
  const Mat& grad(Var v) const;

  size_t size() const { return nodes_.size(); }

 private:
  friend struct Var;
  friend struct OpBuilder;

  struct Node {
    Mat value;
    Mat grad;  // empty until touched
    bool needs_grad = false;
    std::function<void(Tape&)> back;  // null for leaves
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;

  int emit(Mat value, bool needs_grad, std::function<void(Tape&)> back);
  void accumulate(int id, const Mat& g);
  Mat& grad_ref(int id);
};

// ---- element/matrix arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var cmul(Var a, Var b);          // elementwise product
Var scale(Var a, double c);
Var vscale(Var a, Var s);        // multiply by a 1x1 node
Var matmul(Var a, Var b);
Var transpose(Var a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int start, int n);
Var linear(Var x, Var w, Var b);  // x*w (+ row-broadcast b when valid)
Var add_rowvec(Var x, Var b);

// ---- nonlinearities / normalizations ----
/// Softmax over the first valid_cols entries of the first valid_rows rows.
/// Entries outside the valid block are exactly zero.
Var row_softmax(Var x, int valid_rows, int valid_cols);
/// Softmax down the first valid_rows entries of the first valid_cols columns.
Var col_softmax(Var x, int valid_rows, int valid_cols);
Var sigmoid(Var x);
Var tanh_op(Var x);
/// Row-wise layer normalization of the first valid_rows rows; padded rows
/// stay exactly zero.
Var layer_norm(Var x, Var gamma, Var beta, int valid_rows, double eps = 1e-5);
Var mask_rows(Var x, int valid_rows);
Var mean_valid_rows(Var x, int valid_rows);  // -> 1xD
Var l2_normalize(Var x);                     // 1xD, norm must be > 0

// ---- losses ----
/// Mean over rows i of (logsumexp(row_i) - z[i,i]); the InfoNCE diagonal
/// negative log likelihood.
Var nll_diag(Var z);
/// -log(clamp(p[t], eps, 1-eps)) where p is any 1xN / Nx1 probability vector.
Var cross_entropy_prob(Var p, int target, double clamp_eps);
/// Mean binary cross entropy over the first `valid` entries against constant
/// targets y; probabilities clamped to [eps, 1-eps].
Var bce_mean(Var p, const Mat& y, int valid, double clamp_eps);

// ---- structural ----
Var dropout_mask(Var x, const Mat& keep);  // keep holds 0 or 1/keep_prob
/// Row lookup into `table` for the first `valid` ids; remaining rows zero.
Var embed_rows(Var table, const std::vector<int>& ids, int valid);
/// Copy of x with row positions[i] replaced by y.row(i). Positions must be
/// unique and in range.
Var replace_rows(Var x, const std::vector<int>& positions, Var y);
Var repeat_row(Var x, int n);
Var cosine_sim(Var a, Var b);              // 1x1
Var exp_clamp(Var x, double lo, double hi);  // 1x1
Var stop_grad(Var x);

// ---- fused network ops ----
struct MhaVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Residual multi-head attention: out = x + mask(att(x, ctx) * Wo + bo).
/// Attention logits are scaled by 1/sqrt(D) and context positions at or
/// beyond kv_valid are excluded from the softmax. Output rows at or beyond
/// q_valid equal the corresponding x rows (the projection is zeroed there).
/// Per-head softmax matrices are recomputed in the backward pass instead of
/// stored, which keeps large-context tapes small.
Var mha(Var x, int q_valid, Var ctx, int kv_valid, const MhaVars& w, int num_heads);

/// Single-layer LSTM over the first `valid` rows of x; returns the hidden
/// state sequence (T x H), zero rows after `valid`. Gate layout in the
/// weight matrices is [input | forget | cell | output].
Var lstm(Var x, int valid, Var w_ih, Var w_hh, Var b);

/// cells[c] = (i, j) with i <= j; out.row(c) = elementwise max of x rows
/// i..j. Gradient routes to the first attaining row of each max.
Var span_max(Var x, const std::vector<std::pair<int, int>>& cells);

}  // namespace tsg::ad
