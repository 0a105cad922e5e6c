#include "qnerf/toydiff.hpp"

#include <cmath>

namespace qnerf {

namespace {

double alpha_bar_value(int T, int t) {
  const double c = std::cos(0.5 * M_PI * static_cast<double>(t) / T);
  double v = std::min(1.0, std::max(1e-6, c * c));
  if (t == 0) v = 1.0;
  return v;
}

}  // namespace

DiffusionSchedule make_schedule(int T) {
  if (T < 2) throw DomainError("diffusion schedule needs T >= 2");
  DiffusionSchedule s;
  s.T = T;
  s.alpha_bar.resize(T + 1);
  for (int t = 0; t <= T; ++t) s.alpha_bar(t) = alpha_bar_value(T, t);
  for (int t = 1; t <= T; ++t) {
    if (!(s.alpha_bar(t) < s.alpha_bar(t - 1))) {
      throw DomainError("schedule not strictly decreasing; T too large for clamp");
    }
  }
  return s;
}

void softmax_rows(Eigen::MatrixXd& m) {
  for (int i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& grid, int r_in, int r_out) {
  if (r_in == r_out) return grid;
  const int channels = static_cast<int>(grid.cols());
  Eigen::MatrixXd out(r_out * r_out, channels);
  const double scale = static_cast<double>(r_in) / r_out;
  for (int i = 0; i < r_out; ++i) {
    const double fy = std::min(std::max((i + 0.5) * scale - 0.5, 0.0),
                               static_cast<double>(r_in - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, r_in - 1);
    const double wy = fy - y0;
    for (int j = 0; j < r_out; ++j) {
      const double fx = std::min(std::max((j + 0.5) * scale - 0.5, 0.0),
                                 static_cast<double>(r_in - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, r_in - 1);
      const double wx = fx - x0;
      out.row(i * r_out + j) =
          (1 - wy) * ((1 - wx) * grid.row(y0 * r_in + x0) + wx * grid.row(y0 * r_in + x1)) +
          wy * ((1 - wx) * grid.row(y1 * r_in + x0) + wx * grid.row(y1 * r_in + x1));
    }
  }
  return out;
}

Eigen::MatrixXd resize_bilinear_adjoint(const Eigen::MatrixXd& grid, int r_in,
                                        int r_out) {
  if (r_in == r_out) return grid;
  const int channels = static_cast<int>(grid.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(r_in * r_in, channels);
  const double scale = static_cast<double>(r_in) / r_out;
  for (int i = 0; i < r_out; ++i) {
    const double fy = std::min(std::max((i + 0.5) * scale - 0.5, 0.0),
                               static_cast<double>(r_in - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, r_in - 1);
    const double wy = fy - y0;
    for (int j = 0; j < r_out; ++j) {
      const double fx = std::min(std::max((j + 0.5) * scale - 0.5, 0.0),
                                 static_cast<double>(r_in - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, r_in - 1);
      const double wx = fx - x0;
      const auto g = grid.row(i * r_out + j);
      out.row(y0 * r_in + x0) += (1 - wy) * (1 - wx) * g;
      out.row(y0 * r_in + x1) += (1 - wy) * wx * g;
      out.row(y1 * r_in + x0) += wy * (1 - wx) * g;
      out.row(y1 * r_in + x1) += wy * wx * g;
    }
  }
  return out;
}

GeneratorWeights make_generator(std::uint64_t seed,
                                const std::vector<LayerSpec>& layers,
                                int latent_res, int latent_channels,
                                int token_dim, double amplitude, int T,
                                std::vector<TokenGrid> targets,
                                std::vector<std::vector<Eigen::VectorXd>> controls) {
  if (layers.empty()) throw ConfigError("generator needs at least one stage");
  if (latent_res < 2 || latent_channels < 1 || token_dim < 1) {
    throw ConfigError("bad generator dimensions");
  }
  GeneratorWeights w;
  w.seed = seed;
  w.latent_res = latent_res;
  w.latent_channels = latent_channels;
  w.token_dim = token_dim;
  w.amplitude = amplitude;
  w.T = T;
  w.targets = std::move(targets);
  w.controls = std::move(controls);

  auto fill = [](Eigen::MatrixXd& m, Rng& rng, double std_dev) {
    for (int i = 0; i < m.rows(); ++i) {
      for (int j = 0; j < m.cols(); ++j) m(i, j) = std_dev * rng.normal();
    }
  };

  int in_channels = latent_channels;
  for (std::size_t s = 0; s < layers.size(); ++s) {
    Rng rng(derive_seed(seed, {0x7374616765ULL, s}));
    GeneratorStage stage;
    stage.resolution = layers[s].resolution;
    stage.channels = layers[s].channels;
    stage.token_embed.resize(in_channels, token_dim);
    fill(stage.token_embed, rng, 1.0 / std::sqrt(static_cast<double>(in_channels)));
    stage.control_embed.resize(token_dim);
    for (int i = 0; i < token_dim; ++i) stage.control_embed(i) = 0.5 * rng.normal();
    const double qk_std = 1.0 / std::sqrt(static_cast<double>(token_dim));
    stage.w_q.resize(token_dim, stage.channels);
    stage.w_k.resize(token_dim, stage.channels);
    stage.w_v.resize(token_dim, stage.channels);
    fill(stage.w_q, rng, qk_std);
    fill(stage.w_k, rng, qk_std);
    fill(stage.w_v, rng, qk_std);
    stage.out_mix.resize(stage.channels, token_dim);
    fill(stage.out_mix, rng, 1.0 / std::sqrt(static_cast<double>(stage.channels)));
    w.stages.push_back(std::move(stage));
    in_channels = token_dim;
  }
  {
    Rng rng(derive_seed(seed, {0x74696d65ULL}));
    w.time_embed.resize(T + 1, token_dim);
    fill(w.time_embed, rng, 0.3);
  }
  {
    Rng rng(derive_seed(seed, {0x726561646f7574ULL}));
    w.readout.resize(token_dim, latent_channels);
    fill(w.readout, rng, 1.0 / std::sqrt(static_cast<double>(token_dim)));
  }
  return w;
}

namespace {

struct StageActivations {
  Eigen::MatrixXd x;
  Eigen::MatrixXd q, k, v;
  Eigen::MatrixXd attn;  // softmax(QK^T / sqrt(C))
  Eigen::MatrixXd y;
};

// Token chain. When pinned_q is non-null its entries replace the queries
// used by attention (the structural channel); keys/values come from the
// source step at stages the injection config selects, otherwise from the
// running propagation.
void run_chain(const GeneratorWeights& w, int view, const TokenGrid& z, int t,
               const std::vector<Eigen::MatrixXd>* pinned_q,
               const SourceStep* kv_source, const KvInjectionConfig* config,
               std::vector<StageActivations>& acts) {
  if (view < 0 || view >= static_cast<int>(w.targets.size())) {
    throw DomainError("generator view index out of range");
  }
  if (t < 0 || t > w.T) throw DomainError("timestep out of range");
  if (z.res != w.latent_res || z.channels() != w.latent_channels) {
    throw DomainError("latent shape mismatch");
  }
  const int step_index = w.T - t + 1;
  acts.resize(w.stages.size());
  const Eigen::MatrixXd* signal = &z.values;
  int r_prev = w.latent_res;
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    const GeneratorStage& stage = w.stages[s];
    StageActivations& a = acts[s];
    const Eigen::MatrixXd up = resize_bilinear(*signal, r_prev, stage.resolution);
    a.x.noalias() = up * stage.token_embed;
    a.x.noalias() += w.controls[view][s] * stage.control_embed.transpose();
    a.x.rowwise() += w.time_embed.row(t);

    if (pinned_q != nullptr) {
      a.q = (*pinned_q)[s];
    } else {
      a.q.noalias() = a.x * stage.w_q;
    }
    const bool injected = kv_source != nullptr && config != nullptr &&
                          config->active(step_index, stage.resolution);
    if (injected) {
      a.k = kv_source->kv[s].k;
      a.v = kv_source->kv[s].v;
    } else {
      a.k.noalias() = a.x * stage.w_k;
      a.v.noalias() = a.x * stage.w_v;
    }
    a.attn.noalias() =
        a.q * a.k.transpose() / std::sqrt(static_cast<double>(stage.channels));
    softmax_rows(a.attn);
    a.y.noalias() = a.attn * a.v;
    a.y = a.x + a.y * stage.out_mix;
    signal = &a.y;
    r_prev = stage.resolution;
  }
}

TokenGrid predict_clean(const GeneratorWeights& w, int view,
                        const std::vector<StageActivations>& acts) {
  const GeneratorStage& last = w.stages.back();
  const Eigen::MatrixXd pooled =
      resize_bilinear(acts.back().y, last.resolution, w.latent_res);
  TokenGrid zhat0(w.latent_res, w.latent_channels);
  zhat0.values = w.targets[view].values + w.amplitude * (pooled * w.readout);
  return zhat0;
}

TokenGrid predict_noise(const GeneratorWeights& w, const TokenGrid& z,
                        const TokenGrid& zhat0, int t) {
  const double ab = alpha_bar_value(w.T, t);
  const double denom = std::max(std::sqrt(1.0 - ab), 1e-6);
  TokenGrid eps(w.latent_res, w.latent_channels);
  eps.values = (z.values - std::sqrt(ab) * zhat0.values) / denom;
  return eps;
}

DenoiseTrace finish_trace(const GeneratorWeights& w, int view, const TokenGrid& z,
                          int t, const std::vector<StageActivations>& clean,
                          const std::vector<StageActivations>& output) {
  DenoiseTrace trace;
  trace.view = view;
  trace.t = t;
  trace.z = z;
  trace.stages.resize(w.stages.size());
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    trace.stages[s].resolution = w.stages[s].resolution;
    trace.stages[s].q = clean[s].q;
    trace.stages[s].k = output[s].k;
    trace.stages[s].v = output[s].v;
  }
  trace.zhat0 = predict_clean(w, view, output);
  trace.epshat = predict_noise(w, z, trace.zhat0, t);
  if (!trace.zhat0.values.allFinite() || !trace.epshat.values.allFinite()) {
    throw NumericError("generator produced non-finite prediction");
  }
  return trace;
}

void validate_injection(const GeneratorWeights& weights,
                        const KvInjectionConfig& config) {
  for (int res : config.resolutions) {
    bool known = false;
    for (const GeneratorStage& s : weights.stages) known |= s.resolution == res;
    if (!known) {
      throw ConfigError("injection resolution " + std::to_string(res) +
                        " matches no layer");
    }
  }
}

}  // namespace

DenoiseTrace generator_forward(const GeneratorWeights& weights, int view,
                               const TokenGrid& z, int t, const SourceStep* source,
                               const KvInjectionConfig* config) {
  if (config != nullptr) validate_injection(weights, *config);
  std::vector<StageActivations> clean;
  run_chain(weights, view, z, t, nullptr, nullptr, nullptr, clean);

  const int step_index = weights.T - t + 1;
  bool any_injection = false;
  if (source != nullptr && config != nullptr) {
    for (const GeneratorStage& s : weights.stages) {
      any_injection |= config->active(step_index, s.resolution);
    }
  }
  if (!any_injection) return finish_trace(weights, view, z, t, clean, clean);

  std::vector<Eigen::MatrixXd> pinned;
  pinned.reserve(clean.size());
  for (const StageActivations& a : clean) pinned.push_back(a.q);
  std::vector<StageActivations> output;
  run_chain(weights, view, z, t, &pinned, source, config, output);
  return finish_trace(weights, view, z, t, clean, output);
}

TokenGrid ddim_step(const TokenGrid& z_t, const DenoiseTrace& trace,
                    const DiffusionSchedule& schedule, int t) {
  if (t < 1) throw DomainError("ddim_step requires t >= 1");
  if (t > schedule.T) throw DomainError("ddim_step: t beyond schedule");
  const double ab_prev = schedule.alpha_bar(t - 1);
  TokenGrid out = z_t;
  out.values = std::sqrt(ab_prev) * trace.zhat0.values +
               std::sqrt(1.0 - ab_prev) * trace.epshat.values;
  if (!out.values.allFinite()) throw NumericError("ddim_step produced non-finite latent");
  return out;
}

DenoiseTrace inject_kv(const GeneratorWeights& weights, const DenoiseTrace& trace,
                       const SourceStep& source, const KvInjectionConfig& config) {
  validate_injection(weights, config);
  std::vector<Eigen::MatrixXd> pinned;
  pinned.reserve(trace.stages.size());
  for (const StageTrace& s : trace.stages) pinned.push_back(s.q);
  std::vector<StageActivations> output;
  run_chain(weights, trace.view, trace.z, trace.t, &pinned, &source, &config, output);

  DenoiseTrace out = trace;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    out.stages[s].k = output[s].k;
    out.stages[s].v = output[s].v;
  }
  out.zhat0 = predict_clean(weights, trace.view, output);
  out.epshat = predict_noise(weights, trace.z, out.zhat0, trace.t);
  return out;
}

QuerySlice extract_queries(const DenoiseTrace& trace) {
  QuerySlice out;
  out.view = trace.view;
  out.timestep = trace.t;
  out.layers.reserve(trace.stages.size());
  for (const StageTrace& s : trace.stages) {
    TokenGrid g;
    g.res = s.resolution;
    g.values = s.q;
    out.layers.push_back(std::move(g));
  }
  return out;
}

TokenGrid guidance_update(const GeneratorWeights& weights, int view,
                          const TokenGrid& z, int t,
                          const std::vector<TokenGrid>& rendered, double alpha,
                          double* objective_out) {
  if (alpha < 0) throw DomainError("guidance alpha must be >= 0");
  if (rendered.size() != weights.stages.size()) {
    throw DomainError("rendered query maps do not match stage count");
  }
  std::vector<StageActivations> acts;
  run_chain(weights, view, z, t, nullptr, nullptr, nullptr, acts);

  double objective = 0.0;
  for (std::size_t s = 0; s < acts.size(); ++s) {
    if (rendered[s].values.rows() != acts[s].q.rows() ||
        rendered[s].values.cols() != acts[s].q.cols()) {
      throw DomainError("rendered query map shape mismatch at stage " +
                        std::to_string(s));
    }
    objective += (acts[s].q - rendered[s].values).squaredNorm();
  }
  if (objective_out != nullptr) *objective_out = objective;

  const int n_stages = static_cast<int>(weights.stages.size());
  Eigen::MatrixXd g_signal;  // gradient wrt the NEXT stage's input signal
  for (int s = n_stages - 1; s >= 0; --s) {
    const GeneratorStage& stage = weights.stages[s];
    const StageActivations& a = acts[s];
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(stage.channels));

    Eigen::MatrixXd g_y;
    if (s == n_stages - 1) {
      g_y = Eigen::MatrixXd::Zero(a.y.rows(), a.y.cols());
    } else {
      const GeneratorStage& next = weights.stages[s + 1];
      const Eigen::MatrixXd g_up = g_signal * next.token_embed.transpose();
      g_y = resize_bilinear_adjoint(g_up, stage.resolution, next.resolution);
    }

    Eigen::MatrixXd g_x = g_y;
    const Eigen::MatrixXd g_av = g_y * stage.out_mix.transpose();
    Eigen::MatrixXd g_attn = g_av * a.v.transpose();
    const Eigen::MatrixXd g_v = a.attn.transpose() * g_av;
    for (int i = 0; i < g_attn.rows(); ++i) {
      const double dot = g_attn.row(i).dot(a.attn.row(i));
      g_attn.row(i) = (g_attn.row(i).array() - dot) * a.attn.row(i).array();
    }
    const Eigen::MatrixXd g_q =
        2.0 * (a.q - rendered[s].values) + g_attn * a.k * inv_sqrt_c;
    const Eigen::MatrixXd g_k = g_attn.transpose() * a.q * inv_sqrt_c;
    g_x.noalias() += g_q * stage.w_q.transpose();
    g_x.noalias() += g_k * stage.w_k.transpose();
    g_x.noalias() += g_v * stage.w_v.transpose();
    g_signal = g_x;
  }
  const Eigen::MatrixXd g_up0 = g_signal * weights.stages[0].token_embed.transpose();
  const Eigen::MatrixXd g_z =
      resize_bilinear_adjoint(g_up0, weights.latent_res, weights.stages[0].resolution);

  if (!g_z.allFinite()) throw NumericError("guidance gradient is non-finite");
  TokenGrid out = z;
  out.values = z.values - alpha * g_z;
  return out;
}

DenoiseTrace direct_replace(const GeneratorWeights& weights, const DenoiseTrace& trace,
                            const std::vector<TokenGrid>& rendered,
                            const SourceStep* source, const KvInjectionConfig* config) {
  if (rendered.size() != weights.stages.size()) {
    throw DomainError("rendered query maps do not match stage count");
  }
  std::vector<Eigen::MatrixXd> pinned;
  pinned.reserve(rendered.size());
  for (std::size_t s = 0; s < rendered.size(); ++s) {
    if (rendered[s].values.rows() != trace.stages[s].q.rows() ||
        rendered[s].values.cols() != trace.stages[s].q.cols()) {
      throw DomainError("rendered query map shape mismatch at stage " +
                        std::to_string(s));
    }
    pinned.push_back(rendered[s].values);
  }
  std::vector<StageActivations> output;
  run_chain(weights, trace.view, trace.z, trace.t, &pinned, source, config, output);

  DenoiseTrace out = trace;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    out.stages[s].q = pinned[s];
    out.stages[s].k = output[s].k;
    out.stages[s].v = output[s].v;
  }
  out.zhat0 = predict_clean(weights, trace.view, output);
  out.epshat = predict_noise(weights, trace.z, out.zhat0, trace.t);
  return out;
}

SourceStep source_step_from(const DenoiseTrace& trace) {
  SourceStep s;
  s.kv.reserve(trace.stages.size());
  for (const StageTrace& st : trace.stages) s.kv.push_back({st.k, st.v});
  s.zhat0 = trace.zhat0;
  s.epshat = trace.epshat;
  return s;
}

}  // namespace qnerf
