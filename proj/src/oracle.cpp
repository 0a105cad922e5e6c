#include "qnerf/oracle.hpp"

#include <cmath>

namespace qnerf {

MapBundle render_scene_map(const SyntheticScene& scene, const Camera& camera,
                           int layer, int res, int n_samples,
                           std::optional<std::uint64_t> sample_seed) {
  if (res < 1) throw DomainError("render resolution must be >= 1");
  const int channels = scene.layers.at(layer).channels;
  auto source = [&scene](const Eigen::Vector3d& x, int l, double& d,
                         Eigen::VectorXd& f) { eval_scene(scene, x, l, d, f); };
  return render_map(source, camera, layer, res, n_samples, sample_seed, channels);
}

std::vector<std::uint8_t> silhouette_mask(const SyntheticScene& scene,
                                          const Camera& camera, int res,
                                          double threshold, int n_samples) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw DomainError("silhouette threshold must be in (0, 1)");
  }
  const Camera cam = scaled_camera(camera, res);
  std::vector<std::uint8_t> mask(res * res, 0);
  parallel_ranges(res, 1, [&](int row_begin, int row_end) {
    for (int i = row_begin; i < row_end; ++i) {
      for (int j = 0; j < res; ++j) {
        const Ray ray = ray_for_pixel(cam, j + 0.5, i + 0.5);
        const RaySamples samples = sample_stratified(ray, n_samples, nullptr);
        double transmittance_log = 0.0;
        for (int s = 0; s < n_samples; ++s) {
          transmittance_log -=
              scene_density(scene, samples.positions.row(s)) * samples.deltas(s);
        }
        const double opacity = 1.0 - std::exp(transmittance_log);
        mask[i * res + j] = opacity > threshold ? 1 : 0;
      }
    }
  });
  return mask;
}

std::vector<std::uint8_t> mask_union(const std::vector<std::uint8_t>& a,
                                     const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw DomainError("mask sizes disagree");
  std::vector<std::uint8_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

DepthSupervision make_depth_supervision(const SyntheticScene& original,
                                        const SyntheticScene& edited,
                                        const EditSpec& edit,
                                        const std::vector<Camera>& cameras,
                                        const std::vector<int>& resolutions,
                                        int n_samples, double mask_threshold) {
  const std::vector<int> moved = edited_primitives(edit);
  const SyntheticScene object_before = scene_subset(original, moved);
  const SyntheticScene object_after = scene_subset(edited, moved);

  DepthSupervision sup;
  sup.views.resize(cameras.size());
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    for (int res : resolutions) {
      if (sup.views[v].count(res)) continue;
      const MapBundle maps = render_scene_map(original, cameras[v], 0, res, n_samples);
      std::vector<std::uint8_t> object_union(res * res, 0);
      if (!moved.empty()) {
        object_union = mask_union(
            silhouette_mask(object_before, cameras[v], res, mask_threshold, n_samples),
            silhouette_mask(object_after, cameras[v], res, mask_threshold, n_samples));
      }
      DepthTarget target;
      target.depth = maps.depth;
      target.supervise.resize(res * res);
      for (int i = 0; i < res * res; ++i) {
        target.supervise[i] =
            (!object_union[i] && maps.opacity(i) > mask_threshold) ? 1 : 0;
      }
      sup.views[v].emplace(res, std::move(target));
    }
  }
  return sup;
}

double transmittance_to_point(const SyntheticScene& scene, const Camera& camera,
                              const Eigen::Vector3d& point, int n_samples) {
  const Eigen::Vector3d diff = point - camera.translation;
  const double dist = diff.norm();
  if (dist <= camera.t_near) return 1.0;
  const Eigen::Vector3d dir = diff / dist;
  const double w = (dist - camera.t_near) / n_samples;
  double log_t = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const Eigen::Vector3d x = camera.translation + (camera.t_near + (s + 0.5) * w) * dir;
    log_t -= scene_density(scene, x) * w;
  }
  return std::exp(log_t);
}

}  // namespace qnerf
