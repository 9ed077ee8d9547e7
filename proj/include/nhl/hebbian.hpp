#ifndef NHL_HEBBIAN_HPP
#define NHL_HEBBIAN_HPP

// Soft winner-take-all Hebbian plasticity for the first convolution.
//
// Each of the K filters is a neuron with weight row w_k over a flattened patch
// x (length D = C*kh*kw). Neurons compete per patch through a temperature
// softmax, y_k = exp(u_k/tau) / sum_i exp(u_i/tau) with u_k = w_k . x, and learn
//
//   dw_k = eta * y_k * (R_k * x - (u_k / R_k) * w_k),
//
// which is the unit-sphere soft Hebbian rule applied to w_k / R_k. Its norm
// dynamics are d||w_k||^2/dt = 2 eta y_k u_k (R_k - ||w_k||^2 / R_k), so when
// E[y_k u_k] > 0 the norm is attracted to R_k. With R_k = 1 the rule reduces to
// dw_k = eta * y_k * (x - u_k * w_k).

#include "nhl/tensor.hpp"

#include <cstdint>
#include <vector>

namespace nhl {

enum class RadiusMode { source_norm, fixed };

struct RadiusPolicy {
  RadiusMode mode = RadiusMode::source_norm;
  double value = 1.0;  // used by RadiusMode::fixed
};

struct HebbianLayerState {
  Tensor<float> weights;  // K x D
  Tensor<float> radius;   // K
  double temperature = 1.0;
  double learning_rate = 1e-3;
  std::int64_t update_count = 0;
  Shape kernel_shape;  // K x C x kh x kw

  Index neurons() const { return weights.dim(0); }
  Index patch_size() const { return weights.dim(1); }

  /// Weights viewed as a convolution kernel.
  Tensor<float> kernel() const { return weights.reshaped(kernel_shape); }
  std::vector<double> norms() const;
};

HebbianLayerState init_from_source(const Tensor<float>& conv1_weights, double temperature, double learning_rate,
                                   RadiusPolicy radius = {});

struct SoftWtaOutput {
  Tensor<float> u;  // P x K weighted inputs
  Tensor<float> y;  // P x K soft-WTA activations, rows sum to 1
};

SoftWtaOutput soft_wta_activations(const HebbianLayerState& state, const Tensor<float>& patches);

/// One plasticity step averaged over all P patch rows, applied once.
void hebbian_update(HebbianLayerState& state, const Tensor<float>& patches);

/// Classical Oja step, each row independently, with linear y = w . x, averaged over patches.
Tensor<float> oja_update(const Tensor<float>& weights, const Tensor<float>& patches, double learning_rate);

/// Extracts the batch's conv1 patches and runs one hebbian_update.
void adapt_conv1(HebbianLayerState& state, const Tensor<float>& batch, Index stride, Index padding);

}  // namespace nhl

#endif  // NHL_HEBBIAN_HPP
