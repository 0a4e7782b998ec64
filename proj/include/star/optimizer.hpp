// AdamW with decoupled weight decay.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star {

template <class S>
struct AdamWConfigT {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.95);
  S eps = S(1e-8);
  S weight_decay = S(0.01);
};

using AdamWConfig = AdamWConfigT<float>;

// Owns first/second moments for a fixed registered parameter list. A step
// with any non-finite gradient is rejected as a whole and reported with the
// offending parameter's name.
template <class S>
class AdamWT {
 public:
  explicit AdamWT(AdamWConfigT<S> cfg) : cfg_(cfg) {}

  void register_param(std::string name, TensorT<S> p) {
    Slot s;
    s.name = std::move(name);
    s.param = std::move(p);
    s.m.assign(static_cast<size_t>(s.param.numel()), S(0));
    s.v.assign(static_cast<size_t>(s.param.numel()), S(0));
    slots_.push_back(std::move(s));
  }

  // grad_of returns the gradient buffer for a parameter or nullptr (treated
  // as zero). Typically bound to GradientTapeT::grad.
  void step(const std::function<const std::vector<S>*(const TensorT<S>&)>& grad_of) {
    for (const auto& s : slots_) {
      const std::vector<S>* g = grad_of(s.param);
      if (!g) continue;
      for (S v : *g)
        if (!std::isfinite(v))
          throw TrainingAbort("non-finite gradient for parameter '" + s.name + "'");
    }
    ++t_;
    S bc1 = S(1) - std::pow(cfg_.beta1, static_cast<S>(t_));
    S bc2 = S(1) - std::pow(cfg_.beta2, static_cast<S>(t_));
    for (auto& s : slots_) {
      const std::vector<S>* g = grad_of(s.param);
      auto& theta = s.param.raw_data();
      for (size_t i = 0; i < theta.size(); ++i) {
        S gi = g ? (*g)[i] : S(0);
        s.m[i] = cfg_.beta1 * s.m[i] + (S(1) - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (S(1) - cfg_.beta2) * gi * gi;
        S mhat = s.m[i] / bc1;
        S vhat = s.v[i] / bc2;
        theta[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * theta[i]);
      }
    }
  }

  void step(GradientTapeT<S>& tape) {
    step([&tape](const TensorT<S>& p) { return tape.grad(p); });
  }

  long long step_count() const { return t_; }
  void set_lr(S lr) { cfg_.lr = lr; }
  S lr() const { return cfg_.lr; }
  size_t param_count() const { return slots_.size(); }

 private:
  struct Slot {
    std::string name;
    TensorT<S> param;
    std::vector<S> m, v;
  };
  AdamWConfigT<S> cfg_;
  std::vector<Slot> slots_;
  long long t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace star
