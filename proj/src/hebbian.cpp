#include "nhl/hebbian.hpp"

#include "nhl/ops.hpp"

#include <cmath>
#include <string>

namespace nhl {
namespace {

void check_hyperparameters(double temperature, double learning_rate) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ParameterError("hebbian temperature must be > 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ParameterError("hebbian learning rate must be >= 0");  // 0 disables plasticity
}

void check_patches(const Tensor<float>& patches, Index d) {
  if (patches.rank() != 2 || patches.dim(1) != d)
    throw DimensionError("patches " + shape_string(patches.shape()) + " do not match patch size " + std::to_string(d));
  if (!patches.all_finite()) throw NumericError("patches contain non-finite values");
}

}  // namespace

std::vector<double> HebbianLayerState::norms() const {
  const Index K = neurons(), D = patch_size();
  std::vector<double> out(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    double sq = 0.0;
    for (Index d = 0; d < D; ++d) sq += static_cast<double>(weights[k * D + d]) * static_cast<double>(weights[k * D + d]);
    out[static_cast<std::size_t>(k)] = std::sqrt(sq);
  }
  return out;
}

HebbianLayerState init_from_source(const Tensor<float>& conv1_weights, double temperature, double learning_rate,
                                   RadiusPolicy radius) {
  if (conv1_weights.rank() != 4) throw DimensionError("conv1 kernel must be K x C x kh x kw");
  if (!conv1_weights.all_finite()) throw ParameterError("conv1 kernel contains non-finite values");
  check_hyperparameters(temperature, learning_rate);
  HebbianLayerState state;
  state.kernel_shape = conv1_weights.shape();
  const Index K = conv1_weights.dim(0);
  const Index D = conv1_weights.size() / K;
  state.weights = conv1_weights.reshaped({K, D});
  state.temperature = temperature;
  state.learning_rate = learning_rate;
  state.radius = Tensor<float>({K});
  const std::vector<double> norms = state.norms();
  for (Index k = 0; k < K; ++k) {
    double r = radius.mode == RadiusMode::fixed ? radius.value : norms[static_cast<std::size_t>(k)];
    if (!(r > 0.0) || !std::isfinite(r))
      throw ParameterError("hebbian radius for neuron " + std::to_string(k) + " must be > 0 (got " +
                           std::to_string(r) + ")");
    state.radius[k] = static_cast<float>(r);
  }
  return state;
}

SoftWtaOutput soft_wta_activations(const HebbianLayerState& state, const Tensor<float>& patches) {
  check_patches(patches, state.patch_size());
  SoftWtaOutput out;
  out.u = Tensor<float>({patches.dim(0), state.neurons()});
  out.u.matrix().noalias() = patches.matrix() * state.weights.matrix().transpose();
  out.y = softmax(out.u, state.temperature, 1);
  return out;
}

void hebbian_update(HebbianLayerState& state, const Tensor<float>& patches) {
  check_hyperparameters(state.temperature, state.learning_rate);
  const SoftWtaOutput act = soft_wta_activations(state, patches);
  const Index P = patches.dim(0), K = state.neurons(), D = state.patch_size();

  const Eigen::MatrixXd x = patches.matrix().cast<double>();
  const Eigen::MatrixXd y = act.y.matrix().cast<double>();
  const Eigen::MatrixXd u = act.u.matrix().cast<double>();
  const Eigen::MatrixXd yx = y.transpose() * x;                          // K x D: sum_p y_pk x_p
  const Eigen::VectorXd yu = (y.array() * u.array()).colwise().sum();    // K:     sum_p y_pk u_pk
  const double scale = state.learning_rate / static_cast<double>(P);

  Tensor<float> next(state.weights.shape());
  for (Index k = 0; k < K; ++k) {
    const double r = static_cast<double>(state.radius[k]);
    for (Index d = 0; d < D; ++d) {
      const double w = static_cast<double>(state.weights[k * D + d]);
      const double delta = scale * (r * yx(k, d) - (yu(k) / r) * w);
      next[k * D + d] = static_cast<float>(w + delta);
    }
    for (Index d = 0; d < D; ++d)
      if (!std::isfinite(next[k * D + d]))
        throw NumericError("hebbian update produced a non-finite weight for neuron " + std::to_string(k));
  }
  state.weights = std::move(next);
  ++state.update_count;
}

Tensor<float> oja_update(const Tensor<float>& weights, const Tensor<float>& patches, double learning_rate) {
  if (weights.rank() != 2) throw DimensionError("oja weights must be K x D");
  check_patches(patches, weights.dim(1));
  const Index P = patches.dim(0), K = weights.dim(0), D = weights.dim(1);
  const Eigen::MatrixXd x = patches.matrix().cast<double>();
  const Eigen::MatrixXd w = weights.matrix().cast<double>();
  const Eigen::MatrixXd y = x * w.transpose();                       // P x K linear responses
  const Eigen::MatrixXd yx = y.transpose() * x;                      // K x D
  const Eigen::VectorXd yy = y.array().square().colwise().sum();     // K
  const double scale = learning_rate / static_cast<double>(P);
  Tensor<float> next(weights.shape());
  for (Index k = 0; k < K; ++k) {
    for (Index d = 0; d < D; ++d) {
      const auto v = static_cast<float>(w(k, d) + scale * (yx(k, d) - yy(k) * w(k, d)));
      if (!std::isfinite(v)) throw NumericError("oja update produced a non-finite weight for neuron " + std::to_string(k));
      next[k * D + d] = v;
    }
  }
  return next;
}

void adapt_conv1(HebbianLayerState& state, const Tensor<float>& batch, Index stride, Index padding) {
  if (batch.rank() != 4 || batch.dim(1) != state.kernel_shape[1])
    throw DimensionError("batch " + shape_string(batch.shape()) + " does not match conv1 input channels");
  hebbian_update(state, im2col(batch, state.kernel_shape[2], state.kernel_shape[3], stride, padding));
}

}  // namespace nhl
