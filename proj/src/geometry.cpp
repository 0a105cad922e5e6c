#include "qnerf/geometry.hpp"

#include <cmath>

namespace qnerf {

void Camera::validate() const {
  if (width < 1 || height < 1) throw DomainError("camera resolution must be positive");
  if (fx <= 0 || fy <= 0) throw DomainError("focal lengths must be positive");
  if (!(t_near > 0) || !(t_near < t_far)) {
    throw DomainError("camera requires 0 < t_near < t_far");
  }
  Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  if (err.norm() >= 1e-9) throw DomainError("camera rotation is not orthonormal");
  if (rotation.determinant() < 0) throw DomainError("camera rotation is not proper");
}

Ray ray_for_pixel(const Camera& camera, double px, double py) {
  if (!(px >= 0.0) || !(px < camera.width) || !(py >= 0.0) || !(py < camera.height)) {
    throw DomainError("pixel (" + format_double(px) + ", " + format_double(py) +
                      ") outside " + std::to_string(camera.width) + "x" +
                      std::to_string(camera.height) + " image");
  }
  Eigen::Vector3d local((px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0);
  Ray ray;
  ray.origin = camera.translation;
  ray.direction = (camera.rotation * local).normalized();
  ray.t_near = camera.t_near;
  ray.t_far = camera.t_far;
  return ray;
}

Camera scaled_camera(const Camera& camera, int res) {
  Camera out = camera;
  const double sx = static_cast<double>(res) / camera.width;
  const double sy = static_cast<double>(res) / camera.height;
  out.width = res;
  out.height = res;
  out.fx = camera.fx * sx;
  out.fy = camera.fy * sy;
  out.cx = camera.cx * sx;
  out.cy = camera.cy * sy;
  return out;
}

Camera look_at_camera(const Eigen::Vector3d& position, const Eigen::Vector3d& target,
                      int width, int height, double fov_deg, double t_near,
                      double t_far) {
  const Eigen::Vector3d up(0, 0, 1);
  Eigen::Vector3d forward = (target - position).normalized();
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-12) {
    // looking straight up or down; pick an arbitrary horizontal right axis
    right = Eigen::Vector3d(1, 0, 0);
  }
  right.normalize();
  // camera y points "down" in world so that pixel y grows downward
  const Eigen::Vector3d down = forward.cross(right).normalized();

  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = forward;
  cam.translation = position;
  const double f = 0.5 * width / std::tan(0.5 * fov_deg * M_PI / 180.0);
  cam.fx = f;
  cam.fy = f;  // square pixels
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.t_near = t_near;
  cam.t_far = t_far;
  cam.validate();
  return cam;
}

std::vector<Camera> camera_ring(int count, double radius, double elevation_deg,
                                const Eigen::Vector3d& center, int base_res,
                                double fov_deg, double t_near, double t_far,
                                double phase_deg) {
  if (count < 1) throw DomainError("camera ring needs at least one view");
  std::vector<Camera> cams;
  cams.reserve(count);
  const double elev = elevation_deg * M_PI / 180.0;
  const double h = radius * std::sin(elev);
  const double r = radius * std::cos(elev);
  for (int v = 0; v < count; ++v) {
    const double a = phase_deg * M_PI / 180.0 + 2.0 * M_PI * v / count;
    Eigen::Vector3d pos = center + Eigen::Vector3d(r * std::cos(a), r * std::sin(a), h);
    cams.push_back(look_at_camera(pos, center, base_res, base_res, fov_deg, t_near, t_far));
  }
  return cams;
}

namespace {

double signed_distance(const Primitive& p, const Eigen::Vector3d& x) {
  switch (p.kind) {
    case Primitive::Kind::Sphere:
      return (x - p.center).norm() - p.radius;
    case Primitive::Kind::Box: {
      const Eigen::Vector3d local = p.rotation.transpose() * (x - p.center);
      const Eigen::Vector3d q = local.cwiseAbs() - p.half_extents;
      const Eigen::Vector3d outside = q.cwiseMax(0.0);
      const double inside = std::min(q.maxCoeff(), 0.0);
      return outside.norm() + inside;
    }
  }
  return 0.0;
}

double smoothstep01(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

double primitive_weight(const Primitive& p, const Eigen::Vector3d& x) {
  const double sd = signed_distance(p, x);
  if (sd <= -p.softness) return 1.0;
  if (sd >= p.softness) return 0.0;
  return smoothstep01((p.softness - sd) / (2.0 * p.softness));
}

SyntheticScene make_scene(std::vector<Primitive> primitives,
                          std::uint64_t feature_seed, double feature_scale,
                          const std::vector<LayerSpec>& layers) {
  SyntheticScene scene;
  scene.primitives = std::move(primitives);
  scene.feature_seed = feature_seed;
  scene.feature_scale = feature_scale;
  scene.layers = layers;
  for (const auto& p : scene.primitives) {
    if (p.density < 0) throw ConfigError("primitive density must be >= 0");
    if (!(p.softness > 0)) throw ConfigError("primitive softness must be > 0");
  }
  scene.features.resize(scene.primitives.size());
  for (std::size_t pi = 0; pi < scene.primitives.size(); ++pi) {
    scene.features[pi].reserve(layers.size());
    for (const auto& layer : layers) {
      Rng rng(derive_seed(feature_seed,
                          {0x6665617475726573ULL, pi, static_cast<std::uint64_t>(layer.id)}));
      FourierFeatureMap map;
      map.freq.resize(layer.channels, 3);
      map.phase.resize(layer.channels);
      for (int c = 0; c < layer.channels; ++c) {
        for (int d = 0; d < 3; ++d) map.freq(c, d) = feature_scale * rng.normal();
        map.phase(c) = rng.uniform(0.0, 2.0 * M_PI);
      }
      scene.features[pi].push_back(std::move(map));
    }
  }
  return scene;
}

double scene_density(const SyntheticScene& scene, const Eigen::Vector3d& x) {
  double d = 0.0;
  for (const auto& p : scene.primitives) d += p.density * primitive_weight(p, x);
  return d;
}

void eval_scene(const SyntheticScene& scene, const Eigen::Vector3d& x, int layer,
                double& density, Eigen::VectorXd& feature) {
  if (layer < 0 || layer >= static_cast<int>(scene.layers.size())) {
    throw DomainError("scene layer index out of range");
  }
  const int channels = scene.layers[layer].channels;
  density = 0.0;
  feature = Eigen::VectorXd::Zero(channels);
  for (std::size_t pi = 0; pi < scene.primitives.size(); ++pi) {
    const Primitive& p = scene.primitives[pi];
    const double w = primitive_weight(p, x);
    if (w == 0.0) continue;
    density += p.density * w;
    const Eigen::Vector3d local = p.rotation.transpose() * (x - p.center);
    const FourierFeatureMap& map = scene.features[pi][layer];
    feature.noalias() += w * (map.freq * local + map.phase).array().cos().matrix();
  }
}

bool RigidTransform::is_identity(double tol) const {
  return (rotation - Eigen::Matrix3d::Identity()).norm() <= tol &&
         translation.norm() <= tol;
}

SyntheticScene apply_edit(const SyntheticScene& scene, const EditSpec& edit) {
  if (edit.transforms.size() != scene.primitives.size()) {
    throw ConfigError("edit has " + std::to_string(edit.transforms.size()) +
                      " transforms for " + std::to_string(scene.primitives.size()) +
                      " primitives");
  }
  SyntheticScene out = scene;
  for (std::size_t pi = 0; pi < out.primitives.size(); ++pi) {
    const RigidTransform& tr = edit.transforms[pi];
    Primitive& p = out.primitives[pi];
    p.center = tr.rotation * p.center + tr.translation;
    p.rotation = tr.rotation * p.rotation;
  }
  return out;
}

std::vector<int> edited_primitives(const EditSpec& edit) {
  std::vector<int> out;
  for (std::size_t i = 0; i < edit.transforms.size(); ++i) {
    if (!edit.transforms[i].is_identity(1e-12)) out.push_back(static_cast<int>(i));
  }
  return out;
}

SyntheticScene scene_subset(const SyntheticScene& scene, const std::vector<int>& indices) {
  SyntheticScene out;
  out.feature_seed = scene.feature_seed;
  out.feature_scale = scene.feature_scale;
  out.layers = scene.layers;
  for (int i : indices) {
    out.primitives.push_back(scene.primitives[i]);
    out.features.push_back(scene.features[i]);
  }
  return out;
}

}  // namespace qnerf
