#include "qnerf/field.hpp"

#include <cmath>
#include <set>

namespace qnerf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWMap = Eigen::Map<const RowMat>;
using GradWMap = Eigen::Map<RowMat>;
using ConstBMap = Eigen::Map<const Eigen::VectorXd>;
using GradBMap = Eigen::Map<Eigen::VectorXd>;

ConstWMap weights_of(const std::vector<double>& p, const LinearSlot& s) {
  return ConstWMap(p.data() + s.w, s.in, s.out);
}
ConstBMap bias_of(const std::vector<double>& p, const LinearSlot& s) {
  return ConstBMap(p.data() + s.b, s.out);
}
GradWMap grad_weights(std::vector<double>& p, const LinearSlot& s) {
  return GradWMap(p.data() + s.w, s.in, s.out);
}
GradBMap grad_bias(std::vector<double>& p, const LinearSlot& s) {
  return GradBMap(p.data() + s.b, s.out);
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kBaseFrequency = M_PI / 4.0;
constexpr double kRawScale = 0.25;
constexpr double kDensityBiasInit = -1.0;

void fill_encoding(const FieldConfig& cfg,
                   const Eigen::Matrix<double, Eigen::Dynamic, 3>& positions,
                   Eigen::MatrixXd& enc) {
  const int n = static_cast<int>(positions.rows());
  enc.resize(n, cfg.encoding_dim());
  enc.leftCols<3>() = kRawScale * positions;
  for (int k = 0; k < cfg.encoding_frequencies; ++k) {
    const double f = kBaseFrequency * std::pow(2.0, k);
    for (int d = 0; d < 3; ++d) {
      enc.col(3 + 6 * k + d) = (f * positions.col(d)).array().sin();
      enc.col(3 + 6 * k + 3 + d) = (f * positions.col(d)).array().cos();
    }
  }
}

struct RayWorkspace {
  Eigen::MatrixXd enc;
  std::vector<Eigen::MatrixXd> hidden;       // post-tanh activations
  Eigen::VectorXd raw_density;
  Eigen::VectorXd density;
  Eigen::MatrixXd head_hidden;               // post-tanh
  Eigen::MatrixXd features;                  // n x C of the active layer
  Eigen::MatrixXd g_features;
  Eigen::VectorXd g_density;
  Eigen::MatrixXd g_a, g_b;                  // scratch for backward
};

// Trunk + density + one feature head over a whole ray of samples.
void forward_ray(const QueryField& field, const RaySamples& samples, int layer,
                 RayWorkspace& ws) {
  const FieldConfig& cfg = field.config;
  const ParamLayout& lay = field.layout;
  fill_encoding(cfg, samples.positions, ws.enc);
  ws.hidden.resize(lay.trunk.size());
  const Eigen::MatrixXd* x = &ws.enc;
  for (std::size_t d = 0; d < lay.trunk.size(); ++d) {
    const LinearSlot& s = lay.trunk[d];
    ws.hidden[d].noalias() = (*x) * weights_of(field.params, s);
    ws.hidden[d].rowwise() += bias_of(field.params, s).transpose();
    ws.hidden[d] = ws.hidden[d].array().tanh();
    x = &ws.hidden[d];
  }
  const Eigen::MatrixXd& h = ws.hidden.back();

  ws.raw_density.noalias() = h * weights_of(field.params, lay.density);
  ws.raw_density.array() += field.params[lay.density.b];
  ws.density.resize(ws.raw_density.size());
  for (int i = 0; i < ws.density.size(); ++i) ws.density(i) = softplus(ws.raw_density(i));

  const ParamLayout::HeadSlot& head = lay.heads[layer];
  ws.head_hidden.noalias() = h * weights_of(field.params, head.hidden);
  ws.head_hidden.rowwise() += bias_of(field.params, head.hidden).transpose();
  ws.head_hidden = ws.head_hidden.array().tanh();
  ws.features.noalias() = ws.head_hidden * weights_of(field.params, head.out);
  ws.features.rowwise() += bias_of(field.params, head.out).transpose();
}

// Reverse of forward_ray given gradients on per-sample density and features.
void backward_ray(const QueryField& field, int layer, RayWorkspace& ws,
                  std::vector<double>& grad) {
  const ParamLayout& lay = field.layout;
  const Eigen::MatrixXd& h = ws.hidden.back();
  const int n = static_cast<int>(h.rows());
  const int width = field.config.trunk_width;

  Eigen::MatrixXd& g_h = ws.g_a;  // gradient wrt trunk output
  g_h.setZero(n, width);

  // feature head
  {
    const ParamLayout::HeadSlot& head = lay.heads[layer];
    Eigen::MatrixXd& g_hh = ws.g_b;
    g_hh.noalias() = ws.g_features * weights_of(field.params, head.out).transpose();
    grad_weights(grad, head.out).noalias() += ws.head_hidden.transpose() * ws.g_features;
    grad_bias(grad, head.out).noalias() += ws.g_features.colwise().sum().transpose();
    g_hh.array() *= 1.0 - ws.head_hidden.array().square();  // tanh'
    grad_weights(grad, head.hidden).noalias() += h.transpose() * g_hh;
    grad_bias(grad, head.hidden).noalias() += g_hh.colwise().sum().transpose();
    g_h.noalias() += g_hh * weights_of(field.params, head.hidden).transpose();
  }

  // density head
  {
    Eigen::VectorXd g_u(n);
    for (int i = 0; i < n; ++i) g_u(i) = ws.g_density(i) * sigmoid(ws.raw_density(i));
    grad_weights(grad, lay.density).noalias() += h.transpose() * g_u;
    grad[lay.density.b] += g_u.sum();
    g_h.noalias() += g_u * weights_of(field.params, lay.density).transpose();
  }

  // trunk
  for (int d = static_cast<int>(lay.trunk.size()) - 1; d >= 0; --d) {
    const LinearSlot& s = lay.trunk[d];
    const Eigen::MatrixXd& input = d == 0 ? ws.enc : ws.hidden[d - 1];
    g_h.array() *= 1.0 - ws.hidden[d].array().square();
    grad_weights(grad, s).noalias() += input.transpose() * g_h;
    grad_bias(grad, s).noalias() += g_h.colwise().sum().transpose();
    if (d > 0) {
      ws.g_b.noalias() = g_h * weights_of(field.params, s).transpose();
      g_h.swap(ws.g_b);
    }
  }
}

void validate_config(const FieldConfig& cfg) {
  if (cfg.encoding_frequencies < 1) throw ConfigError("encoding needs >= 1 frequency");
  if (cfg.trunk_width < 2 || cfg.trunk_depth < 1) throw ConfigError("trunk too small");
  if (cfg.layers.empty()) throw ConfigError("field needs at least one layer");
  std::set<int> ids;
  for (const LayerSpec& l : cfg.layers) {
    if (l.resolution < 2) throw ConfigError("layer resolution must be >= 2");
    if (l.channels < 1) throw ConfigError("layer channels must be >= 1");
    if (!ids.insert(l.id).second) throw ConfigError("duplicate layer id");
  }
}

}  // namespace

ParamLayout make_layout(const FieldConfig& cfg) {
  ParamLayout lay;
  int offset = 0;
  auto add = [&offset](int in, int out) {
    LinearSlot s{offset, offset + in * out, in, out};
    offset += in * out + out;
    return s;
  };
  int in = cfg.encoding_dim();
  for (int d = 0; d < cfg.trunk_depth; ++d) {
    lay.trunk.push_back(add(in, cfg.trunk_width));
    in = cfg.trunk_width;
  }
  lay.density = add(cfg.trunk_width, 1);
  for (const LayerSpec& l : cfg.layers) {
    ParamLayout::HeadSlot head;
    head.hidden = add(cfg.trunk_width, cfg.head_hidden());
    head.out = add(cfg.head_hidden(), l.channels);
    lay.heads.push_back(head);
  }
  lay.total = offset;
  return lay;
}

QueryField init_field(const FieldConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  QueryField field;
  field.config = cfg;
  field.layout = make_layout(cfg);
  field.params.assign(field.layout.total, 0.0);
  Rng rng(derive_seed(seed, {0x6669656c64ULL}));
  auto init_linear = [&](const LinearSlot& s) {
    const double std = 1.0 / std::sqrt(static_cast<double>(s.in));
    for (int i = 0; i < s.in * s.out; ++i) {
      // parameters live on the float32 grid so a fresh field round-trips
      // through the 32-bit checkpoint format bit-exactly
      field.params[s.w + i] = static_cast<double>(static_cast<float>(std * rng.normal()));
    }
  };
  for (const LinearSlot& s : field.layout.trunk) init_linear(s);
  init_linear(field.layout.density);
  field.params[field.layout.density.b] = kDensityBiasInit;
  for (const auto& head : field.layout.heads) {
    init_linear(head.hidden);
    init_linear(head.out);
  }
  return field;
}

FieldSample field_eval(const QueryField& field, const Eigen::Vector3d& x) {
  const ParamLayout& lay = field.layout;
  Eigen::Matrix<double, Eigen::Dynamic, 3> pos(1, 3);
  pos.row(0) = x;
  Eigen::MatrixXd enc;
  fill_encoding(field.config, pos, enc);
  Eigen::RowVectorXd h = enc.row(0);
  for (const LinearSlot& s : lay.trunk) {
    h = (h * weights_of(field.params, s) + bias_of(field.params, s).transpose())
            .array()
            .tanh();
  }
  FieldSample out;
  const double u = (h * weights_of(field.params, lay.density))(0) +
                   field.params[lay.density.b];
  out.density = softplus(u);
  out.features.reserve(lay.heads.size());
  for (const auto& head : lay.heads) {
    Eigen::RowVectorXd g =
        (h * weights_of(field.params, head.hidden) +
         bias_of(field.params, head.hidden).transpose())
            .array()
            .tanh();
    Eigen::RowVectorXd f =
        g * weights_of(field.params, head.out) + bias_of(field.params, head.out).transpose();
    if (!f.allFinite() || !std::isfinite(out.density)) {
      throw NumericError("field evaluation produced non-finite output");
    }
    out.features.push_back(f.transpose());
  }
  return out;
}

double q_loss(const QuerySet& rendered, const QuerySet& target) {
  if (rendered.views.size() != target.views.size()) {
    throw DomainError("q_loss: view counts disagree");
  }
  double sum = 0.0;
  long elements = 0;
  for (std::size_t v = 0; v < rendered.views.size(); ++v) {
    if (rendered.views[v].size() != target.views[v].size()) {
      throw DomainError("q_loss: layer counts disagree");
    }
    for (std::size_t l = 0; l < rendered.views[v].size(); ++l) {
      const TokenGrid& a = rendered.views[v][l];
      const TokenGrid& b = target.views[v][l];
      if (a.res != b.res || a.channels() != b.channels()) {
        throw DomainError("q_loss: grid shapes disagree");
      }
      sum += (a.values - b.values).rowwise().squaredNorm().sum();
      elements += a.tokens();
    }
  }
  return elements == 0 ? 0.0 : sum / static_cast<double>(elements);
}

double depth_loss(const RenderOutput& render, double target_depth, bool supervised) {
  if (!supervised) return 0.0;
  const double d = render.expected_depth - target_depth;
  return d * d;
}

namespace {

struct ElementResult {
  double loss = 0.0;
};

double element_pass(const QueryField& field, const FieldTask& task,
                    const RayElement& el, std::optional<std::uint64_t> sample_seed,
                    double grad_scale, std::vector<double>* grad, RayWorkspace& ws) {
  const LayerSpec& spec = (*task.layers)[el.layer];
  const Camera cam = scaled_camera((*task.cameras)[el.view], spec.resolution);
  const Ray ray = ray_for_pixel(cam, el.tj + 0.5, el.ti + 0.5);
  RaySamples samples;
  if (sample_seed.has_value()) {
    Rng rng(*sample_seed);
    samples = sample_stratified(ray, task.n_samples, &rng);
  } else {
    samples = sample_stratified(ray, task.n_samples, nullptr);
  }
  forward_ray(field, samples, el.layer, ws);
  const RenderOutput out = composite(ws.density, ws.features, samples);

  const int tok = el.ti * spec.resolution + el.tj;
  const Eigen::VectorXd q_target =
      task.targets->views[el.view][el.layer].values.row(tok).transpose();
  const Eigen::VectorXd diff = out.feature - q_target;
  double loss = diff.squaredNorm();

  bool supervised = false;
  double depth_target = 0.0;
  if (task.depth != nullptr) {
    const auto it = task.depth->views[el.view].find(spec.resolution);
    if (it == task.depth->views[el.view].end()) {
      throw ConfigError("depth supervision missing resolution " +
                        std::to_string(spec.resolution));
    }
    supervised = it->second.supervise[tok] != 0;
    depth_target = it->second.depth(tok);
    loss += task.depth_coefficient * depth_loss(out, depth_target, supervised);
  }

  if (grad != nullptr) {
    const Eigen::VectorXd g_feature = 2.0 * grad_scale * diff;
    const double g_depth =
        supervised
            ? 2.0 * task.depth_coefficient * grad_scale * (out.expected_depth - depth_target)
            : 0.0;
    composite_backward(ws.density, ws.features, samples, out, g_feature, g_depth,
                       0.0, ws.g_density, ws.g_features);
    backward_ray(field, el.layer, ws, *grad);
  }
  return loss;
}

}  // namespace

double batch_loss(const QueryField& field, const FieldTask& task,
                  const std::vector<RayElement>& elements,
                  std::optional<std::uint64_t> sample_seed, std::vector<double>* grad) {
  const int count = static_cast<int>(elements.size());
  if (count == 0) return 0.0;
  const double inv = 1.0 / count;
  const int block_size = 8;
  const int blocks = (count + block_size - 1) / block_size;
  std::vector<double> block_losses(blocks, 0.0);
  std::vector<std::vector<double>> block_grads;
  if (grad != nullptr) block_grads.resize(blocks);

  parallel_ranges(count, block_size, [&](int begin, int end) {
    const int blk = begin / block_size;
    RayWorkspace ws;
    std::vector<double>* g = nullptr;
    if (grad != nullptr) {
      block_grads[blk].assign(field.layout.total, 0.0);
      g = &block_grads[blk];
    }
    double loss = 0.0;
    for (int e = begin; e < end; ++e) {
      std::optional<std::uint64_t> seed;
      if (sample_seed.has_value()) {
        seed = derive_seed(*sample_seed, {static_cast<std::uint64_t>(e)});
      }
      loss += element_pass(field, task, elements[e], seed, inv, g, ws);
    }
    block_losses[blk] = loss;
  });

  double total = 0.0;
  for (int b = 0; b < blocks; ++b) total += block_losses[b];
  if (grad != nullptr) {
    GradBMap g(grad->data(), grad->size());
    for (int b = 0; b < blocks; ++b) {
      g += ConstBMap(block_grads[b].data(), block_grads[b].size());
    }
  }
  return total * inv;
}

double full_loss(const QueryField& field, const FieldTask& task) {
  std::vector<RayElement> elements;
  const int views = static_cast<int>(task.cameras->size());
  for (int v = 0; v < views; ++v) {
    for (std::size_t l = 0; l < task.layers->size(); ++l) {
      const int res = (*task.layers)[l].resolution;
      for (int i = 0; i < res; ++i) {
        for (int j = 0; j < res; ++j) {
          elements.push_back({v, static_cast<int>(l), i, j});
        }
      }
    }
  }
  return batch_loss(field, task, elements, std::nullopt, nullptr);
}

TrainResult train_field(QueryField& field, const FieldTask& task,
                        const TrainConfig& config) {
  if (config.steps < 1) throw ConfigError("training needs steps >= 1");
  if (config.batch < 1) throw ConfigError("training needs batch >= 1");
  if (task.targets == nullptr || task.cameras == nullptr || task.layers == nullptr) {
    throw ConfigError("training task is incomplete");
  }
  if (task.cameras->size() < 2) throw ConfigError("training needs >= 2 views");

  const int total = field.layout.total;
  std::vector<double> grad(total), m(total, 0.0), v(total, 0.0);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const int views = static_cast<int>(task.cameras->size());
  const int layer_count = static_cast<int>(task.layers->size());

  TrainResult result;
  result.history.reserve(config.steps);
  std::vector<RayElement> elements(config.batch);
  for (int step = 0; step < config.steps; ++step) {
    Rng batch_rng(derive_seed(config.seed, {0x6261746368ULL, static_cast<std::uint64_t>(step)}));
    for (int b = 0; b < config.batch; ++b) {
      RayElement& el = elements[b];
      el.view = batch_rng.uniform_int(views);
      el.layer = batch_rng.uniform_int(layer_count);
      const int res = (*task.layers)[el.layer].resolution;
      el.ti = batch_rng.uniform_int(res);
      el.tj = batch_rng.uniform_int(res);
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    const std::uint64_t sample_seed =
        derive_seed(config.seed, {0x73616d706cULL, static_cast<std::uint64_t>(step)});
    const double loss = batch_loss(field, task, elements, sample_seed, &grad);
    if (!std::isfinite(loss)) throw TrainingError("training loss diverged", step);

    const double t = step + 1.0;
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (int i = 0; i < total; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      field.params[i] -=
          config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
    result.history.push_back(loss);
    ++result.steps;
  }
  return result;
}

TokenGrid render_field_queries(const QueryField& field, const Camera& camera,
                               const LayerSpec& layer, int n_samples,
                               std::optional<std::uint64_t> sample_seed) {
  int index = -1;
  for (std::size_t l = 0; l < field.config.layers.size(); ++l) {
    if (field.config.layers[l].id == layer.id) index = static_cast<int>(l);
  }
  if (index < 0) throw DomainError("layer id not present in field");
  return render_field_map(field, camera, index, layer.resolution, n_samples,
                          sample_seed)
      .feature;
}

MapBundle render_field_map(const QueryField& field, const Camera& camera, int layer,
                           int res, int n_samples,
                           std::optional<std::uint64_t> sample_seed) {
  const Camera cam = scaled_camera(camera, res);
  const int channels = field.config.layers.at(layer).channels;
  MapBundle maps;
  maps.feature = TokenGrid(res, channels);
  maps.depth.resize(res * res);
  maps.opacity.resize(res * res);
  parallel_ranges(res, 1, [&](int row_begin, int row_end) {
    RayWorkspace ws;
    for (int i = row_begin; i < row_end; ++i) {
      for (int j = 0; j < res; ++j) {
        const Ray ray = ray_for_pixel(cam, j + 0.5, i + 0.5);
        RaySamples samples;
        if (sample_seed.has_value()) {
          Rng rng(derive_seed(*sample_seed, {static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(j),
                                             static_cast<std::uint64_t>(layer)}));
          samples = sample_stratified(ray, n_samples, &rng);
        } else {
          samples = sample_stratified(ray, n_samples, nullptr);
        }
        forward_ray(field, samples, layer, ws);
        const RenderOutput out = composite(ws.density, ws.features, samples);
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
