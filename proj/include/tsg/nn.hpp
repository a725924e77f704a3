#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tsg/autodiff.hpp"
#include "tsg/common.hpp"

namespace tsg::nn {

enum class Init { kZeros, kOnes, kXavier, kNormalScaled, kConstant };

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Init init = Init::kXavier;
  double init_const = 0.0;

  void zero_grad() { grad.setZero(); }
};

/// Owns every learnable tensor of a model in a stable registration order.
/// Addresses are stable (unique_ptr storage), so modules can hold Parameter*.
class ParamStore {
 public:
  Parameter& add(const std::string& name, int rows, int cols, Init init = Init::kXavier,
                 double init_const = 0.0);
  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& items() const { return items_; }

  size_t count() const { return items_.size(); }
  size_t scalar_count() const;
  void zero_grads();

  /// Seeded init; each parameter draws from a stream keyed by its name, so
  /// values do not depend on registration order.
  void init_params(uint64_t seed);

  /// Global L2 norm of all gradients.
  double grad_norm() const;
  /// Scale all gradients so the global norm is at most max_norm.
  /// Returns the pre-clip norm.
  double clip_grad_norm(double max_norm);

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

/// One forward pass worth of tape plus parameter bindings. A parameter used
/// several times in the same pass maps to a single leaf, so its gradient
/// accumulates naturally.
struct Graph {
  ad::Tape tape;
  std::vector<std::pair<Parameter*, ad::Var>> bound;

  ad::Var use(Parameter& p) {
    for (auto& [bp, v] : bound)
      if (bp == &p) return v;
    ad::Var v = tape.leaf(p.value, true);
    bound.emplace_back(&p, v);
    return v;
  }

  /// Copy accumulated leaf gradients out, aligned with `bound` order.
  std::vector<std::pair<Parameter*, Mat>> take_grads() const;
};

struct LinearLayer {
  Parameter* w = nullptr;
  Parameter* b = nullptr;

  static LinearLayer create(ParamStore& ps, const std::string& name, int in, int out,
                            bool bias = true);
  ad::Var apply(Graph& g, ad::Var x) const;
};

struct MhaLayer {
  Parameter *wq = nullptr, *bq = nullptr, *wk = nullptr, *bk = nullptr;
  Parameter *wv = nullptr, *bv = nullptr, *wo = nullptr, *bo = nullptr;
  int num_heads = 8;

  static MhaLayer create(ParamStore& ps, const std::string& name, int d, int num_heads);
  ad::Var apply(Graph& g, ad::Var x, int q_valid, ad::Var ctx, int kv_valid) const;
};

struct LayerNormLayer {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNormLayer create(ParamStore& ps, const std::string& name, int d);
  ad::Var apply(Graph& g, ad::Var x, int valid_rows) const;
};

struct LstmLayer {
  Parameter *w_ih = nullptr, *w_hh = nullptr, *b = nullptr;

  static LstmLayer create(ParamStore& ps, const std::string& name, int in, int hidden);
  ad::Var apply(Graph& g, ad::Var x, int valid) const;
};

/// Adam with optional global-norm gradient clipping handled by the caller.
class Adam {
 public:
  Adam(ParamStore& ps, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);

 private:
  ParamStore& ps_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace tsg::nn
