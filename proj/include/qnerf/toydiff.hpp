#pragma once

#include <optional>
#include <set>

#include "qnerf/common.hpp"

namespace qnerf {

// Deterministic DDIM-style schedule: alpha_bar(t) = cos^2((pi/2) t/T),
// clamped to [1e-6, 1].
struct DiffusionSchedule {
  int T = 0;
  Eigen::VectorXd alpha_bar;  // T+1 values, alpha_bar(0) = 1
};

DiffusionSchedule make_schedule(int T);

// ---------------------------------------------------------------------------
// Fixed-weight attention generator. Stage s (one per attention layer,
// coarse to fine) upsamples the running signal to its token resolution,
// embeds it together with a per-view control map and a timestep embedding,
// runs one self-attention block residually, and passes the tokens on. The
// final tokens are read out into a predicted clean latent anchored at a
// per-view target:
//   zhat0 = z0_target[view] + amplitude * readout(final tokens).
//
// Queries are the structural channel: key/value injection and direct query
// replacement recompute attention outputs and everything downstream of them
// while the recorded queries stay those of the unmodified propagation.
// ---------------------------------------------------------------------------

struct GeneratorStage {
  int resolution = 0;
  int channels = 0;              // attention channels C of this layer
  Eigen::MatrixXd token_embed;   // C_in x d
  Eigen::VectorXd control_embed; // d
  Eigen::MatrixXd w_q, w_k, w_v; // d x C
  Eigen::MatrixXd out_mix;       // C x d, residual projection
};

struct GeneratorWeights {
  std::uint64_t seed = 0;
  int latent_res = 0;
  int latent_channels = 0;
  int token_dim = 0;
  int T = 0;
  double amplitude = 0;  // A
  std::vector<GeneratorStage> stages;
  Eigen::MatrixXd time_embed;  // (T+1) x d
  Eigen::MatrixXd readout;     // d x latent_channels

  // per-view conditioning
  std::vector<TokenGrid> targets;                      // z0* per view
  std::vector<std::vector<Eigen::VectorXd>> controls;  // [view][stage], r_s^2
};

GeneratorWeights make_generator(std::uint64_t seed,
                                const std::vector<LayerSpec>& layers,
                                int latent_res, int latent_channels,
                                int token_dim, double amplitude, int T,
                                std::vector<TokenGrid> targets,
                                std::vector<std::vector<Eigen::VectorXd>> controls);

// Keys/values of one already-denoised source step, the donors for injection.
struct StageKV {
  Eigen::MatrixXd k, v;
};

struct SourceStep {
  std::vector<StageKV> kv;
  TokenGrid zhat0;
  TokenGrid epshat;
};

struct KvInjectionConfig {
  int start_step = 4;        // 1-based denoising step index
  std::set<int> resolutions; // stages to inject at

  // step_index = T - t + 1 for the step consuming z_t
  bool active(int step_index, int resolution) const {
    return step_index >= start_step && resolutions.count(resolution) > 0;
  }
};

struct StageTrace {
  int resolution = 0;
  Eigen::MatrixXd q;  // recorded queries (never altered by injection)
  Eigen::MatrixXd k;  // keys actually used by the attention output
  Eigen::MatrixXd v;
};

struct DenoiseTrace {
  int view = -1;
  int t = 0;
  TokenGrid z;  // the latent the trace was computed from
  std::vector<StageTrace> stages;
  TokenGrid zhat0;
  TokenGrid epshat;
};

// Forward pass for one view. When `source` and `config` are given, stages
// whose resolution is configured and whose step index has been reached use
// the source keys/values; queries stay the clean propagation's.
DenoiseTrace generator_forward(const GeneratorWeights& weights, int view,
                               const TokenGrid& z, int t,
                               const SourceStep* source = nullptr,
                               const KvInjectionConfig* config = nullptr);

// Deterministic DDIM update (eta = 0); requires t >= 1.
TokenGrid ddim_step(const TokenGrid& z_t, const DenoiseTrace& trace,
                    const DiffusionSchedule& schedule, int t);

// Re-runs the forward with the source keys/values substituted at the
// configured layers. Queries are untouched by construction.
DenoiseTrace inject_kv(const GeneratorWeights& weights, const DenoiseTrace& trace,
                       const SourceStep& source, const KvInjectionConfig& config);

// Query grids of all layers, tagged with the trace's view and timestep.
struct QuerySlice {
  int view = -1;
  int timestep = 0;
  std::vector<TokenGrid> layers;
};

QuerySlice extract_queries(const DenoiseTrace& trace);

// One soft-guidance step on the latent (Eq-style single optimization step):
//   z <- z - alpha * d/dz sum_layers |Q_layer(z) - rendered_layer|^2
// The gradient is exact reverse-mode through embeds, attention softmax,
// residuals and upsampling. Returns the updated latent; the objective value
// before the step can be retrieved through `objective_out`.
TokenGrid guidance_update(const GeneratorWeights& weights, int view,
                          const TokenGrid& z, int t,
                          const std::vector<TokenGrid>& rendered, double alpha,
                          double* objective_out = nullptr);

// Ablation: substitute the rendered maps for the generated queries and
// recompute the attention outputs (and everything downstream).
DenoiseTrace direct_replace(const GeneratorWeights& weights, const DenoiseTrace& trace,
                            const std::vector<TokenGrid>& rendered,
                            const SourceStep* source = nullptr,
                            const KvInjectionConfig* config = nullptr);

SourceStep source_step_from(const DenoiseTrace& trace);

// Bilinear grid resize treated as a linear map; adjoint for backward.
Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& grid, int r_in, int r_out);
Eigen::MatrixXd resize_bilinear_adjoint(const Eigen::MatrixXd& grid, int r_in,
                                        int r_out);

// Row-wise stable softmax, in place.
void softmax_rows(Eigen::MatrixXd& m);

}  // namespace qnerf
