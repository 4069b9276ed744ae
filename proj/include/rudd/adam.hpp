#pragma once

#include <cmath>

#include "rudd/tensor.hpp"

namespace rudd {

template <class R>
struct AdamState {
  Tensor<R> m, v;
  long step = 0;

  explicit AdamState(const std::vector<int>& shape) : m(shape), v(shape) {}
  AdamState() = default;
};

// Standard Adam with bias correction.
template <class R>
void adam_update(Tensor<R>& params, const Tensor<R>& grads, AdamState<R>& st, R lr,
                 R beta1 = R(0.9), R beta2 = R(0.999), R eps = R(1e-8)) {
  if (!params.same_shape(grads)) throw std::invalid_argument("adam: param/grad shape mismatch");
  if (st.m.numel() == 0) st = AdamState<R>(params.shape);
  st.step += 1;
  const R bc1 = R(1) - R(std::pow(double(beta1), double(st.step)));
  const R bc2 = R(1) - R(std::pow(double(beta2), double(st.step)));
  for (size_t i = 0; i < params.numel(); ++i) {
    st.m[i] = beta1 * st.m[i] + (R(1) - beta1) * grads[i];
    st.v[i] = beta2 * st.v[i] + (R(1) - beta2) * grads[i] * grads[i];
    const R mhat = st.m[i] / bc1;
    const R vhat = st.v[i] / bc2;
    params[i] -= lr * mhat / (R(std::sqrt(double(vhat))) + eps);
  }
}

}  // namespace rudd
