// scratch: finite-difference validation of composite, field and guidance grads
#include <cstdio>
#include <cmath>
#include "qnerf/field.hpp"
#include "qnerf/toydiff.hpp"
#include "qnerf/oracle.hpp"

using namespace qnerf;

static double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(1e-12, b.norm());
}

int main() {
  set_thread_count(1);

  // --- composite backward vs FD ---
  {
    Rng rng(7);
    const int n = 6, c = 3;
    Ray ray{{0, 0, 0}, {0, 0, 1}, 0.5, 2.5};
    RaySamples s = sample_stratified(ray, n, &rng);
    Eigen::VectorXd dens(n);
    Eigen::MatrixXd feat(n, c);
    for (int i = 0; i < n; ++i) {
      dens(i) = 0.3 + rng.uniform();
      for (int j = 0; j < c; ++j) feat(i, j) = rng.normal();
    }
    Eigen::VectorXd gf(c);
    for (int j = 0; j < c; ++j) gf(j) = rng.normal();
    const double gd = rng.normal(), go = rng.normal();
    auto scalar = [&](const Eigen::VectorXd& d, const Eigen::MatrixXd& f) {
      RenderOutput o = composite(d, f, s);
      return gf.dot(o.feature) + gd * o.expected_depth + go * o.opacity;
    };
    RenderOutput out = composite(dens, feat, s);
    Eigen::VectorXd gdens;
    Eigen::MatrixXd gfeat;
    composite_backward(dens, feat, s, out, gf, gd, go, gdens, gfeat);
    Eigen::VectorXd fd(n), an(n);
    const double h = 1e-6;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd dp = dens, dm = dens;
      dp(i) += h;
      dm(i) -= h;
      fd(i) = (scalar(dp, feat) - scalar(dm, feat)) / (2 * h);
      an(i) = gdens(i);
    }
    printf("composite density grad rel err: %.3e\n", rel_err(an, fd));
    Eigen::VectorXd fdf(n * c), anf(n * c);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        Eigen::MatrixXd fp = feat, fm = feat;
        fp(i, j) += h;
        fm(i, j) -= h;
        fdf(i * c + j) = (scalar(dens, fp) - scalar(dens, fm)) / (2 * h);
        anf(i * c + j) = gfeat(i, j);
      }
    printf("composite feature grad rel err: %.3e\n", rel_err(anf, fdf));
  }

  // --- field training gradient vs FD (tiny instance) ---
  {
    FieldConfig fc;
    fc.encoding_frequencies = 2;
    fc.trunk_width = 8;
    fc.trunk_depth = 2;
    fc.layers = {{0, 2, 3}, {1, 4, 2}};
    QueryField field = init_field(fc, 42);

    std::vector<Camera> cams = camera_ring(2, 3.0, 15.0, {0, 0, 0}, 8, 55.0, 1.0, 5.0);
    QuerySet targets;
    targets.timestep = 0;
    targets.views.resize(2);
    Rng rng(9);
    for (int v = 0; v < 2; ++v) {
      for (auto& l : fc.layers) {
        TokenGrid g(l.resolution, l.channels);
        for (int i = 0; i < g.values.rows(); ++i)
          for (int j = 0; j < g.values.cols(); ++j) g.values(i, j) = rng.normal();
        targets.views[v].push_back(g);
      }
    }
    // tiny depth supervision: supervise everything with depth 2.0
    DepthSupervision sup;
    sup.views.resize(2);
    for (int v = 0; v < 2; ++v)
      for (int r : {2, 4}) {
        DepthTarget dt;
        dt.depth = Eigen::VectorXd::Constant(r * r, 2.0);
        dt.supervise.assign(r * r, 1);
        sup.views[v].emplace(r, dt);
      }
    FieldTask task{&targets, &cams, &fc.layers, &sup, 0.7, 2};
    std::vector<RayElement> elements = {{0, 0, 0, 1}, {1, 1, 2, 3}, {0, 1, 1, 1}};
    std::vector<double> grad(field.layout.total, 0.0);
    batch_loss(field, task, elements, std::nullopt, &grad);
    const double h = 1e-6;
    Eigen::VectorXd an(field.layout.total), fd(field.layout.total);
    for (int i = 0; i < field.layout.total; ++i) {
      QueryField fp = field, fm = field;
      fp.params[i] += h;
      fm.params[i] -= h;
      fd(i) = (batch_loss(fp, task, elements, std::nullopt, nullptr) -
               batch_loss(fm, task, elements, std::nullopt, nullptr)) /
              (2 * h);
      an(i) = grad[i];
    }
    printf("field param grad rel err: %.3e (|g|=%.3e)\n", rel_err(an, fd), fd.norm());
  }

  // --- guidance gradient vs FD, stage counts 1..3 ---
  for (int stages = 1; stages <= 3; ++stages) {
    std::vector<LayerSpec> layers;
    for (int s = 0; s < stages; ++s) layers.push_back({s, 4 + 2 * s, 2 + s});
    const int R = 4, C0 = 2, d = 5, T = 10;
    std::vector<TokenGrid> targets(1, TokenGrid(R, C0));
    std::vector<std::vector<Eigen::VectorXd>> controls(1);
    Rng rng(11);
    for (int i = 0; i < R * R; ++i)
      for (int j = 0; j < C0; ++j) targets[0].values(i, j) = rng.normal();
    for (const auto& l : layers) {
      Eigen::VectorXd c(l.resolution * l.resolution);
      for (int i = 0; i < c.size(); ++i) c(i) = rng.uniform();
      controls[0].push_back(c);
    }
    GeneratorWeights w = make_generator(123, layers, R, C0, d, 0.8, T,
                                        targets, controls);
    TokenGrid z(R, C0);
    for (int i = 0; i < R * R; ++i)
      for (int j = 0; j < C0; ++j) z.values(i, j) = rng.normal();
    std::vector<TokenGrid> rendered;
    for (const auto& l : layers) {
      TokenGrid g(l.resolution, l.channels);
      for (int i = 0; i < g.values.rows(); ++i)
        for (int j = 0; j < g.values.cols(); ++j) g.values(i, j) = 0.3 * rng.normal();
      rendered.push_back(g);
    }
    auto objective = [&](const TokenGrid& zz) {
      DenoiseTrace tr = generator_forward(w, 0, zz, 5);
      double o = 0;
      for (std::size_t s = 0; s < tr.stages.size(); ++s)
        o += (tr.stages[s].q - rendered[s].values).squaredNorm();
      return o;
    };
    const double alpha = 0.37;
    TokenGrid z2 = guidance_update(w, 0, z, 5, rendered, alpha);
    Eigen::MatrixXd g_an = (z.values - z2.values) / alpha;
    const double h = 1e-6;
    Eigen::VectorXd an(R * R * C0), fd(R * R * C0);
    int idx = 0;
    for (int i = 0; i < R * R; ++i)
      for (int j = 0; j < C0; ++j) {
        TokenGrid zp = z, zm = z;
        zp.values(i, j) += h;
        zm.values(i, j) -= h;
        fd(idx) = (objective(zp) - objective(zm)) / (2 * h);
        an(idx) = g_an(i, j);
        ++idx;
      }
    printf("guidance grad rel err (%d stages): %.3e (|g|=%.3e)\n", stages,
           rel_err(an, fd), fd.norm());
  }
  return 0;
}
