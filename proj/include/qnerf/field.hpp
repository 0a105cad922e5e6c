#pragma once

#include <optional>

#include "qnerf/common.hpp"
#include "qnerf/oracle.hpp"
#include "qnerf/volrender.hpp"

namespace qnerf {

// A view-independent neural field over 3D positions: sinusoidal positional
// encoding, a shared fully connected trunk, one density head (softplus) and
// one feature head per attention layer. Heads share the trunk, so all layers
// see a single geometry.
//
// Encoding: [x/4, sin(2^k * pi/4 * x), cos(2^k * pi/4 * x)], k < K.
// Trunk and head hidden layers use tanh; head hidden width is trunk_width/2.
struct FieldConfig {
  int encoding_frequencies = 6;  // K
  int trunk_width = 64;          // W
  int trunk_depth = 3;           // D
  std::vector<LayerSpec> layers;

  int encoding_dim() const { return 3 + 6 * encoding_frequencies; }
  int head_hidden() const { return trunk_width / 2; }

  bool operator==(const FieldConfig&) const = default;
};

// Offsets into the flat parameter vector. Weight matrices are stored
// row-major as (in x out), each followed by its bias. Order: trunk layers,
// density head, then per attention layer the head hidden and output linears.
struct LinearSlot {
  int w = 0, b = 0;  // offsets
  int in = 0, out = 0;
};

struct ParamLayout {
  std::vector<LinearSlot> trunk;
  LinearSlot density;
  struct HeadSlot {
    LinearSlot hidden;
    LinearSlot out;
  };
  std::vector<HeadSlot> heads;
  int total = 0;
};

ParamLayout make_layout(const FieldConfig& config);

struct QueryField {
  FieldConfig config;
  ParamLayout layout;
  std::vector<double> params;
};

QueryField init_field(const FieldConfig& config, std::uint64_t seed);

// Density (>= 0) and one feature vector per configured layer at x.
struct FieldSample {
  double density = 0;
  std::vector<Eigen::VectorXd> features;
};

FieldSample field_eval(const QueryField& field, const Eigen::Vector3d& x);

// Losses ------------------------------------------------------------------

// Mean over (ray, layer) elements of the squared L2 distance over channels.
double q_loss(const QuerySet& rendered, const QuerySet& target);

// Masked squared error on expected depth; zero when unsupervised.
double depth_loss(const RenderOutput& render, double target_depth, bool supervised);

// Training ----------------------------------------------------------------

struct TrainConfig {
  int steps = 1000;
  int batch = 64;
  double learning_rate = 5e-3;
  double depth_coefficient = 1.0;
  int n_samples = 32;
  std::uint64_t seed = 0;
};

struct FieldTask {
  const QuerySet* targets = nullptr;
  const std::vector<Camera>* cameras = nullptr;
  const std::vector<LayerSpec>* layers = nullptr;
  const DepthSupervision* depth = nullptr;  // may be null (no depth term)
  double depth_coefficient = 1.0;
  int n_samples = 32;
};

struct TrainResult {
  std::vector<double> history;  // per-step batch loss
  int steps = 0;
};

// One ray of the training set: a token of one view at one layer.
struct RayElement {
  int view = 0, layer = 0, ti = 0, tj = 0;
};

// Loss of a fixed element set; accumulates parameter gradients when grad is
// non-null. sample_seed selects the stratified streams (absent = midpoints).
double batch_loss(const QueryField& field, const FieldTask& task,
                  const std::vector<RayElement>& elements,
                  std::optional<std::uint64_t> sample_seed,
                  std::vector<double>* grad);

// Deterministic loss over every token of every view and layer (midpoint
// samples): the whole-dataset objective, used to compare runs.
double full_loss(const QueryField& field, const FieldTask& task);

// Runs `steps` gradient updates (Adam) over stratified ray batches mixing
// all views and layers uniformly. Warm starts are the caller's field state.
// Throws TrainingError when the loss turns non-finite.
TrainResult train_field(QueryField& field, const FieldTask& task,
                        const TrainConfig& config);

// Rendered query map for one layer at its token resolution.
TokenGrid render_field_queries(const QueryField& field, const Camera& camera,
                               const LayerSpec& layer, int n_samples,
                               std::optional<std::uint64_t> sample_seed = {});

// Feature/depth/opacity maps for one layer at an arbitrary resolution.
MapBundle render_field_map(const QueryField& field, const Camera& camera,
                           int layer, int res, int n_samples,
                           std::optional<std::uint64_t> sample_seed = {});

}  // namespace qnerf
