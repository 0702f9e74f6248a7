#pragma once

#include <map>
#include <string>
#include <vector>

#include "transfertraj/rng.hpp"
#include "transfertraj/tape.hpp"
#include "transfertraj/types.hpp"

namespace transfertraj {

// Named parameter tensors with stable insertion-order enumeration, so
// checkpoints, optimizer state and finite-difference probes all agree on the
// coordinate layout.
template <typename T>
class ParamStore {
 public:
  using M = ad::Mat<T>;

  int add(const std::string& name, M value) {
    if (index_.count(name) != 0) throw InvalidConfig("duplicate parameter name: " + name);
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return static_cast<int>(names_.size()) - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  M& at(const std::string& name) { return values_[index_at(name)]; }
  const M& at(const std::string& name) const { return values_[index_at(name)]; }

  int count() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  M& value(int i) { return values_[i]; }
  const M& value(int i) const { return values_[i]; }

  std::int64_t scalar_count() const {
    std::int64_t total = 0;
    for (const auto& v : values_) total += v.size();
    return total;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (int i = 0; i < count(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<M> values_;
  std::map<std::string, int> index_;

  int index_at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw InvalidConfig("unknown parameter: " + name);
    return it->second;
  }
};

// Per-forward-pass view binding store parameters to tape leaves on first use.
template <typename T>
class BoundParams {
 public:
  BoundParams(ad::Tape<T>& tape, const ParamStore<T>& store) : tape_(tape), store_(store) {}

  int node(const std::string& name) {
    const auto it = nodes_.find(name);
    if (it != nodes_.end()) return it->second;
    const int id = tape_.leaf(store_.at(name), true);
    nodes_[name] = id;
    return id;
  }

  // Adds tape gradients of every bound parameter into `grads` (keyed like the
  // store; missing keys are created zero-initialized).
  void accumulate_grads(std::map<std::string, ad::Mat<T>>& grads) const {
    for (const auto& [name, id] : nodes_) {
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, tape_.grad(id));
      } else {
        it->second += tape_.grad(id);
      }
    }
  }

 private:
  ad::Tape<T>& tape_;
  const ParamStore<T>& store_;
  std::map<std::string, int> nodes_;
};

// Adam with bias correction; moment buffers are laid out per named parameter.
template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (int i = 0; i < store.count(); ++i) {
      m_.push_back(ad::Mat<T>::Zero(store.value(i).rows(), store.value(i).cols()));
      v_.push_back(ad::Mat<T>::Zero(store.value(i).rows(), store.value(i).cols()));
    }
  }

  void step(ParamStore<T>& store, const std::map<std::string, ad::Mat<T>>& grads) {
    ++t_;
    const T bc1 = T(1) - T(std::pow(beta1_, t_));
    const T bc2 = T(1) - T(std::pow(beta2_, t_));
    for (int i = 0; i < store.count(); ++i) {
      const auto it = grads.find(store.name(i));
      if (it == grads.end()) continue;
      const auto& g = it->second;
      m_[i] = T(beta1_) * m_[i] + (T(1) - T(beta1_)) * g;
      v_[i] = (T(beta2_) * v_[i].array() + (T(1) - T(beta2_)) * g.array().square()).matrix();
      store.value(i).array() -=
          T(lr_) * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + T(eps_));
    }
  }

  int steps_taken() const { return t_; }

  // Accessors used by training-state serialization.
  std::vector<ad::Mat<T>>& m() { return m_; }
  std::vector<ad::Mat<T>>& v() { return v_; }
  void set_steps(int t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<ad::Mat<T>> m_;
  std::vector<ad::Mat<T>> v_;
};

template <typename T>
ad::Mat<T> gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  ad::Mat<T> m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = T(rng.normal(0.0, stddev));
  }
  return m;
}

}  // namespace transfertraj
