#pragma once

#include <map>

#include "qnerf/geometry.hpp"
#include "qnerf/volrender.hpp"

namespace qnerf {

// Analytic renders of a synthetic scene: features, depth and opacity maps at
// any token resolution. These serve as ground truth for field training tests
// and as inputs (targets, controls, supervision) for the toy denoiser.

MapBundle render_scene_map(const SyntheticScene& scene, const Camera& camera,
                           int layer, int res, int n_samples,
                           std::optional<std::uint64_t> sample_seed = {});

// Pixel is inside iff rendered opacity exceeds `threshold` in (0, 1).
std::vector<std::uint8_t> silhouette_mask(const SyntheticScene& scene,
                                          const Camera& camera, int res,
                                          double threshold,
                                          int n_samples = 128);

std::vector<std::uint8_t> mask_union(const std::vector<std::uint8_t>& a,
                                     const std::vector<std::uint8_t>& b);

// Depth supervision for one view at one resolution: expected depth rendered
// from the unedited scene, valid where supervise[i] != 0. Supervision applies
// outside the union of the moved object's silhouettes before and after the
// edit, and only where the original scene is actually opaque (so every
// supervised target is a real surface depth inside [t_near, t_far]).
struct DepthTarget {
  Eigen::VectorXd depth;               // res*res
  std::vector<std::uint8_t> supervise; // res*res
};

// [view][resolution]
struct DepthSupervision {
  std::vector<std::map<int, DepthTarget>> views;
};

DepthSupervision make_depth_supervision(const SyntheticScene& original,
                                        const SyntheticScene& edited,
                                        const EditSpec& edit,
                                        const std::vector<Camera>& cameras,
                                        const std::vector<int>& resolutions,
                                        int n_samples, double mask_threshold);

// Transmittance along the segment from the camera origin to the point
// (quadrature with n_samples midpoints).
double transmittance_to_point(const SyntheticScene& scene, const Camera& camera,
                              const Eigen::Vector3d& point, int n_samples);

}  // namespace qnerf
