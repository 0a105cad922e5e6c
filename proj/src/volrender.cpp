#include "qnerf/volrender.hpp"

#include <cmath>

namespace qnerf {

RaySamples sample_stratified(const Ray& ray, int n, Rng* rng) {
  if (n < 2) throw DomainError("stratified sampling needs n >= 2");
  RaySamples s;
  s.t_values.resize(n);
  s.deltas.resize(n);
  s.positions.resize(n, 3);
  const double span = ray.t_far - ray.t_near;
  const double w = span / n;
  for (int i = 0; i < n; ++i) {
    const double u = rng ? rng->uniform() : 0.5;
    s.t_values(i) = ray.t_near + (i + u) * w;
  }
  for (int i = 0; i + 1 < n; ++i) s.deltas(i) = s.t_values(i + 1) - s.t_values(i);
  s.deltas(n - 1) = ray.t_far - s.t_values(n - 1);
  for (int i = 0; i < n; ++i) {
    s.positions.row(i) = ray.origin + s.t_values(i) * ray.direction;
  }
  return s;
}

RenderOutput composite(const Eigen::VectorXd& densities,
                       const Eigen::MatrixXd& features, const RaySamples& samples) {
  const int n = samples.count();
  if (densities.size() != n || features.rows() != n) {
    throw DomainError("composite: lengths disagree");
  }
  const int channels = static_cast<int>(features.cols());
  RenderOutput out;
  out.feature = Eigen::VectorXd::Zero(channels);
  out.weights.resize(n);
  out.alpha.resize(n);

  double transmittance = 1.0;
  double depth_sum = 0.0;
  double weight_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double sigma = densities(i);
    if (sigma < 0) throw DomainError("composite: negative density");
    if (!std::isfinite(sigma)) throw NumericError("composite: non-finite density");
    const double a = 1.0 - std::exp(-sigma * samples.deltas(i));
    const double w = transmittance * a;
    out.alpha(i) = a;
    out.weights(i) = w;
    out.feature.noalias() += w * features.row(i).transpose();
    depth_sum += w * samples.t_values(i);
    weight_sum += w;
    transmittance *= 1.0 - a;
  }
  if (!out.feature.allFinite()) throw NumericError("composite: non-finite feature");
  out.transmittance = transmittance;
  out.opacity = 1.0 - transmittance;
  if (std::abs(weight_sum - out.opacity) > 1e-6) {
    throw NumericError("composite: weights do not sum to opacity");
  }
  out.expected_depth = depth_sum / std::max(out.opacity, kOpacityFloor);
  return out;
}

void composite_backward(const Eigen::VectorXd& densities,
                        const Eigen::MatrixXd& features, const RaySamples& samples,
                        const RenderOutput& out, const Eigen::VectorXd& g_feature,
                        double g_depth, double g_opacity,
                        Eigen::VectorXd& g_densities, Eigen::MatrixXd& g_features) {
  const int n = samples.count();
  g_densities.setZero(n);
  g_features.setZero(n, features.cols());

  // expected_depth = S / M with S = sum(w_i t_i), M = max(opacity, floor)
  const double m = std::max(out.opacity, kOpacityFloor);
  const double depth_sum = out.expected_depth * m;
  const double g_s = g_depth / m;
  double g_op = g_opacity;
  if (out.opacity > kOpacityFloor) g_op += -g_depth * depth_sum / (m * m);

  // With x_i = sigma_i * delta_i:
  //   d w_k / d x_i = T_{i+1} for k = i,  -w_k for k > i,  0 otherwise
  //   d opacity / d x_i = final transmittance
  // The k > i part is a suffix sum of gw_k * w_k.
  Eigen::VectorXd t_prefix(n + 1);
  t_prefix(0) = 1.0;
  for (int i = 0; i < n; ++i) t_prefix(i + 1) = t_prefix(i) * (1.0 - out.alpha(i));

  double suffix = 0.0;
  for (int i = n - 1; i >= 0; --i) {
    const double gw = g_feature.dot(features.row(i)) + g_s * samples.t_values(i);
    const double gx = gw * t_prefix(i + 1) - suffix + g_op * t_prefix(n);
    g_densities(i) = gx * samples.deltas(i);
    g_features.row(i) = out.weights(i) * g_feature.transpose();
    suffix += gw * out.weights(i);
  }
}

}  // namespace qnerf
