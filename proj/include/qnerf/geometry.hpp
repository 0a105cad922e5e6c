#pragma once

#include <cstdint>
#include <vector>

#include "qnerf/common.hpp"

namespace qnerf {

// Convention used throughout: right-handed world frame, the camera looks
// along +z of its local frame, pixel y grows downward. `rotation` maps
// camera coordinates to world coordinates; `translation` is the camera
// origin in world units.
struct Camera {
  int width = 0;
  int height = 0;
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double t_near = 0, t_far = 0;

  void validate() const;
};

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit norm
  double t_near = 0, t_far = 0;
};

Ray ray_for_pixel(const Camera& camera, double px, double py);

// Same frustum at a different pixel resolution (square target grid).
Camera scaled_camera(const Camera& camera, int res);

Camera look_at_camera(const Eigen::Vector3d& position,
                      const Eigen::Vector3d& target, int width, int height,
                      double fov_deg, double t_near, double t_far);

// Cameras on a horizontal circle around `center`, all aimed at it.
std::vector<Camera> camera_ring(int count, double radius, double elevation_deg,
                                const Eigen::Vector3d& center, int base_res,
                                double fov_deg, double t_near, double t_far,
                                double phase_deg = 0.0);

// ---------------------------------------------------------------------------
// Synthetic scenes: soft solid primitives carrying seeded random-Fourier
// feature functions in their local frames, so an edit moves features along
// with geometry. Density and features depend on position only.
// ---------------------------------------------------------------------------

struct Primitive {
  enum class Kind { Sphere, Box };
  Kind kind = Kind::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world-from-local
  double radius = 1.0;                                      // sphere
  Eigen::Vector3d half_extents = Eigen::Vector3d::Ones();   // box
  double density = 1.0;   // interior plateau, >= 0
  double softness = 0.1;  // edge half-width, > 0
};

// cos(freq . x + phase) per channel, unit amplitude
struct FourierFeatureMap {
  Eigen::MatrixXd freq;    // channels x 3
  Eigen::VectorXd phase;   // channels
};

struct SyntheticScene {
  std::vector<Primitive> primitives;
  std::uint64_t feature_seed = 0;
  double feature_scale = 1.0;  // frequency std-dev, rad per world unit
  std::vector<LayerSpec> layers;
  // [primitive][layer], frequencies drawn once at construction
  std::vector<std::vector<FourierFeatureMap>> features;
};

SyntheticScene make_scene(std::vector<Primitive> primitives,
                          std::uint64_t feature_seed, double feature_scale,
                          const std::vector<LayerSpec>& layers);

// Smooth interior indicator in [0, 1]: 1 deep inside, 0 far outside,
// smoothstep across the +-softness band around the surface.
double primitive_weight(const Primitive& p, const Eigen::Vector3d& x);

double scene_density(const SyntheticScene& scene, const Eigen::Vector3d& x);

// density plus the layer's feature vector at x
void eval_scene(const SyntheticScene& scene, const Eigen::Vector3d& x,
                int layer, double& density, Eigen::VectorXd& feature);

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  bool is_identity(double tol = 0.0) const;
};

struct EditSpec {
  std::vector<RigidTransform> transforms;  // one per primitive
};

SyntheticScene apply_edit(const SyntheticScene& scene, const EditSpec& edit);

// Indices of primitives the edit actually moves (non-identity transforms).
std::vector<int> edited_primitives(const EditSpec& edit);

// Sub-scene containing only the listed primitives (shares feature maps).
SyntheticScene scene_subset(const SyntheticScene& scene,
                            const std::vector<int>& indices);

}  // namespace qnerf
