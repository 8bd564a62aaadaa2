#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"
#include "chunkssl/tape.hpp"

namespace chunkssl {

/// Named parameter arrays in insertion order. Frozen entries (statistics,
/// pretrained sub-models) are stored and checkpointed but never optimised.
template <class T>
class ParamSet {
 public:
  void add(const std::string& name, Array<T> value, bool frozen = false) {
    if (values_.count(name)) throw ConfigError("params: duplicate parameter '" + name + "'");
    names_.push_back(name);
    values_.emplace(name, std::move(value));
    if (frozen) frozen_.insert(name);
  }

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  bool frozen(const std::string& name) const { return frozen_.count(name) != 0; }

  Array<T>& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("params: no parameter '" + name + "'");
    return it->second;
  }
  const Array<T>& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("params: no parameter '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : values_) n += v.size();
    return n;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& n : names_) out.add(n, at(n).template cast<U>(), frozen(n));
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, Array<T>> values_;
  std::set<std::string> frozen_;
};

/// Parameters bound as leaves on one tape.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const ParamSet<T>& params, bool trainable) : tape_(&tape) {
    for (const auto& n : params.names()) {
      vars_.emplace(n, tape.leaf(params.at(n), trainable && !params.frozen(n)));
    }
  }

  Var<T> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("params: no bound parameter '" + name + "'");
    return it->second;
  }

  Tape<T>& tape() const { return *tape_; }

  /// Gradients of every trainable parameter after tape.backward().
  std::map<std::string, Array<T>> gradients(const ParamSet<T>& params) const {
    std::map<std::string, Array<T>> g;
    for (const auto& n : params.names()) {
      if (params.frozen(n)) continue;
      g.emplace(n, tape_->grad(vars_.at(n)));
    }
    return g;
  }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> vars_;
};

/// Adaptive moment estimation.
template <class T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet<T>& params, const std::map<std::string, Array<T>>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Array<T>& p = params.at(name);
      auto [it, fresh] = moments_.try_emplace(name);
      if (fresh) {
        it->second.m.assign(p.size(), 0.0);
        it->second.v.assign(p.size(), 0.0);
      }
      auto& m = it->second.m;
      auto& v = it->second.v;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        p[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Linear warmup to `peak` over `warmup` steps, then inverse-square-root
/// decay. `step` counts from 1.
inline double warmup_inverse_sqrt(long step, double peak, long warmup) {
  warmup = std::max<long>(warmup, 1);
  const double s = static_cast<double>(std::max<long>(step, 1));
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

inline double exponential_decay(long step, double base, double gamma) {
  return base * std::pow(gamma, static_cast<double>(std::max<long>(step - 1, 0)));
}

}  // namespace chunkssl
