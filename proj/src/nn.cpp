#include "tsg/nn.hpp"

#include <cmath>

namespace tsg::nn {

Parameter& ParamStore::add(const std::string& name, int rows, int cols, Init init,
                           double init_const) {
  TSG_CHECK(by_name_.find(name) == by_name_.end(), "duplicate parameter name: " << name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  p->init = init;
  p->init_const = init_const;
  items_.push_back(std::move(p));
  by_name_[name] = items_.back().get();
  return *items_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& p : items_) n += static_cast<size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : items_) p->zero_grad();
}

void ParamStore::init_params(uint64_t seed) {
  for (auto& p : items_) {
    Rng rng(seed_mix(seed, fnv1a(p->name)));
    switch (p->init) {
      case Init::kZeros:
        p->value.setZero();
        break;
      case Init::kOnes:
        p->value.setOnes();
        break;
      case Init::kConstant:
        p->value.setConstant(p->init_const);
        break;
      case Init::kXavier: {
        double bound = std::sqrt(6.0 / (p->value.rows() + p->value.cols()));
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
          for (Eigen::Index j = 0; j < p->value.cols(); ++j)
            p->value(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
        break;
      }
      case Init::kNormalScaled: {
        double s = 1.0 / std::sqrt(static_cast<double>(p->value.cols()));
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
          for (Eigen::Index j = 0; j < p->value.cols(); ++j) p->value(i, j) = rng.normal() * s;
        break;
      }
    }
    p->grad.setZero();
  }
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : items_) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

double ParamStore::clip_grad_norm(double max_norm) {
  double n = grad_norm();
  if (n > max_norm && n > 0.0) {
    double s = max_norm / n;
    for (auto& p : items_) p->grad *= s;
  }
  return n;
}

std::vector<std::pair<Parameter*, Mat>> Graph::take_grads() const {
  std::vector<std::pair<Parameter*, Mat>> out;
  out.reserve(bound.size());
  for (const auto& [p, v] : bound) {
    const Mat& g = tape.grad(v);
    if (g.size() != 0) out.emplace_back(p, g);
  }
  return out;
}

LinearLayer LinearLayer::create(ParamStore& ps, const std::string& name, int in, int out,
                                bool bias) {
  LinearLayer l;
  l.w = &ps.add(name + ".w", in, out, Init::kXavier);
  if (bias) l.b = &ps.add(name + ".b", 1, out, Init::kZeros);
  return l;
}

ad::Var LinearLayer::apply(Graph& g, ad::Var x) const {
  ad::Var bv = b ? g.use(*b) : ad::Var{};
  return ad::linear(x, g.use(*w), bv);
}

MhaLayer MhaLayer::create(ParamStore& ps, const std::string& name, int d, int num_heads) {
  TSG_CHECK(d % num_heads == 0, "MhaLayer: D=" << d << " not divisible by " << num_heads);
  MhaLayer m;
  m.num_heads = num_heads;
  m.wq = &ps.add(name + ".wq", d, d);
  m.bq = &ps.add(name + ".bq", 1, d, Init::kZeros);
  m.wk = &ps.add(name + ".wk", d, d);
  m.bk = &ps.add(name + ".bk", 1, d, Init::kZeros);
  m.wv = &ps.add(name + ".wv", d, d);
  m.bv = &ps.add(name + ".bv", 1, d, Init::kZeros);
  m.wo = &ps.add(name + ".wo", d, d);
  m.bo = &ps.add(name + ".bo", 1, d, Init::kZeros);
  return m;
}

ad::Var MhaLayer::apply(Graph& g, ad::Var x, int q_valid, ad::Var ctx, int kv_valid) const {
  ad::MhaVars w{g.use(*wq), g.use(*bq), g.use(*wk), g.use(*bk),
                g.use(*wv), g.use(*bv), g.use(*wo), g.use(*bo)};
  return ad::mha(x, q_valid, ctx, kv_valid, w, num_heads);
}

LayerNormLayer LayerNormLayer::create(ParamStore& ps, const std::string& name, int d) {
  LayerNormLayer l;
  l.gamma = &ps.add(name + ".gamma", 1, d, Init::kOnes);
  l.beta = &ps.add(name + ".beta", 1, d, Init::kZeros);
  return l;
}

ad::Var LayerNormLayer::apply(Graph& g, ad::Var x, int valid_rows) const {
  return ad::layer_norm(x, g.use(*gamma), g.use(*beta), valid_rows);
}

LstmLayer LstmLayer::create(ParamStore& ps, const std::string& name, int in, int hidden) {
  LstmLayer l;
  l.w_ih = &ps.add(name + ".w_ih", in, 4 * hidden, Init::kXavier);
  l.w_hh = &ps.add(name + ".w_hh", hidden, 4 * hidden, Init::kXavier);
  l.b = &ps.add(name + ".b", 1, 4 * hidden, Init::kZeros);
  return l;
}

ad::Var LstmLayer::apply(Graph& g, ad::Var x, int valid) const {
  return ad::lstm(x, valid, g.use(*w_ih), g.use(*w_hh), g.use(*b));
}

Adam::Adam(ParamStore& ps, double beta1, double beta2, double eps)
    : ps_(ps), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : ps.items()) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(double lr) {
  TSG_CHECK(m_.size() == ps_.items().size(), "Adam: parameter set changed after construction");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < ps_.items().size(); ++i) {
    Parameter& p = *ps_.items()[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    Mat mhat = m_[i] / bc1;
    Mat vhat = v_[i] / bc2;
    p.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps_);
  }
}

}  // namespace tsg::nn
