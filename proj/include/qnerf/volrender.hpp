#pragma once

#include <optional>

#include "qnerf/common.hpp"
#include "qnerf/geometry.hpp"

namespace qnerf {

// Discretization of one ray: sample positions, increasing t values, and
// segment lengths. deltas[i] = t[i+1] - t[i], with the last delta taken to
// t_far.
struct RaySamples {
  Eigen::Matrix<double, Eigen::Dynamic, 3> positions;
  Eigen::VectorXd t_values;
  Eigen::VectorXd deltas;

  int count() const { return static_cast<int>(t_values.size()); }
};

// rng == nullptr gives bin midpoints; otherwise one uniform draw per bin.
RaySamples sample_stratified(const Ray& ray, int n, Rng* rng);

struct RenderOutput {
  Eigen::VectorXd feature;   // composited feature, C channels
  double expected_depth = 0; // sum(w_i t_i) / max(opacity, 1e-8)
  double opacity = 0;        // 1 - final transmittance
  Eigen::VectorXd weights;   // w_i = T_i alpha_i
  double transmittance = 1;  // final T

  // forward intermediates kept for the backward pass
  Eigen::VectorXd alpha;
};

constexpr double kOpacityFloor = 1e-8;

RenderOutput composite(const Eigen::VectorXd& densities,
                       const Eigen::MatrixXd& features,  // N x C
                       const RaySamples& samples);

// Reverse-mode of composite: given d(loss)/d(feature), d(loss)/d(depth) and
// d(loss)/d(opacity), accumulates d(loss)/d(density_i) and d(loss)/d(f_ic).
void composite_backward(const Eigen::VectorXd& densities,
                        const Eigen::MatrixXd& features,
                        const RaySamples& samples, const RenderOutput& out,
                        const Eigen::VectorXd& g_feature, double g_depth,
                        double g_opacity, Eigen::VectorXd& g_densities,
                        Eigen::MatrixXd& g_features);

struct MapBundle {
  TokenGrid feature;          // res x res x C
  Eigen::VectorXd depth;      // res*res
  Eigen::VectorXd opacity;    // res*res
};

// Renders one composite per pixel-center ray of the camera scaled to `res`.
// `source(x, layer, density, feature)` evaluates the medium at a point.
// With sample_seed absent, samples are deterministic bin midpoints;
// otherwise each pixel gets its own derived stratified stream.
template <typename Source>
MapBundle render_map(Source&& source, const Camera& camera, int layer, int res,
                     int n_samples, std::optional<std::uint64_t> sample_seed,
                     int channels) {
  const Camera cam = scaled_camera(camera, res);
  MapBundle maps;
  maps.feature = TokenGrid(res, channels);
  maps.depth.resize(res * res);
  maps.opacity.resize(res * res);
  parallel_ranges(res, 1, [&](int row_begin, int row_end) {
    Eigen::VectorXd densities(n_samples);
    Eigen::MatrixXd features(n_samples, channels);
    Eigen::VectorXd f(channels);
    for (int i = row_begin; i < row_end; ++i) {
      for (int j = 0; j < res; ++j) {
        const Ray ray = ray_for_pixel(cam, j + 0.5, i + 0.5);
        RaySamples samples;
        if (sample_seed.has_value()) {
          Rng rng(derive_seed(*sample_seed,
                              {static_cast<std::uint64_t>(i),
                               static_cast<std::uint64_t>(j),
                               static_cast<std::uint64_t>(layer)}));
          samples = sample_stratified(ray, n_samples, &rng);
        } else {
          samples = sample_stratified(ray, n_samples, nullptr);
        }
        for (int s = 0; s < n_samples; ++s) {
          double d;
          source(Eigen::Vector3d(samples.positions.row(s)), layer, d, f);
          densities(s) = d;
          features.row(s) = f;
        }
        const RenderOutput out = composite(densities, features, samples);
        const int tok = i * res + j;
        maps.feature.values.row(tok) = out.feature;
        maps.depth(tok) = out.expected_depth;
        maps.opacity(tok) = out.opacity;
      }
    }
  });
  return maps;
}

}  // namespace qnerf
