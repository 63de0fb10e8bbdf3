#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include "loss_cases.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include "surfmap/error.hpp"
#include "surfmap/log.hpp"
#include "surfmap/losses.hpp"
#include "surfmap/synthgen.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

using namespace surfmap;
using namespace surfmap::testing;
using torch::indexing::Slice;

namespace {

struct GtView {
  torch::Tensor uv;  // float64
  torch::Tensor mask;
  torch::Tensor depth;
  torch::Tensor avg_depth;
  CameraPose cam;
};

struct GtScene {
  Instance inst;
  PositionMap posmap;  // float64
  std::vector<GtView> views;
};

GtScene make_scene(uint64_t seed, double amplitude, std::vector<int> view_ids, int n_views = 24) {
  GtScene s;
  s.inst = make_instance({seed, 3, amplitude, 0.35}, 64, 64);
  s.posmap = s.inst.posmap;
  for (int k : view_ids) {
    const auto cam = generate_orbit_camera(k, n_views, 2.0, 15.0, {64, 64}, {128.0, 128.0});
    const auto r = rasterize(s.inst.mesh, cam, cam.forward());
    s.views.push_back({r.uv.to(torch::kFloat64), r.mask, r.depth, render_average_depth(s.posmap, cam), cam});
  }
  return s;
}

// Newton refinement of per-pixel UVs so that the surface point projects onto
// the pixel center exactly. Returns the refined map and the pixels that
// converged.
std::pair<torch::Tensor, torch::Tensor> snap_uv(const torch::Tensor& uv, const torch::Tensor& mask,
                                                const PositionMap& posmap, const CameraPose& cam) {
  auto out = uv.clone();
  auto x = uv.index({mask}).clone();
  const auto idx = mask.nonzero();
  const auto target = torch::stack({idx.select(1, 1), idx.select(1, 0)}, 1).to(torch::kFloat64);
  const double eps = 1e-7;
  auto residual = [&](const torch::Tensor& t) { return project(sample_bilinear(posmap.grid, t), cam).pixel - target; };
  for (int it = 0; it < 8; ++it) {
    const auto f = residual(x);
    auto du = x.clone();
    du.select(1, 0).add_(eps);
    auto dv = x.clone();
    dv.select(1, 1).add_(eps);
    const auto ju = (residual(du) - f) / eps;
    const auto jv = (residual(dv) - f) / eps;
    const auto a = ju.select(1, 0), b = jv.select(1, 0), c = ju.select(1, 1), d = jv.select(1, 1);
    const auto det = a * d - b * c;
    const auto step_u = (d * f.select(1, 0) - b * f.select(1, 1)) / det;
    const auto step_v = (-c * f.select(1, 0) + a * f.select(1, 1)) / det;
    x = torch::nan_to_num(x - torch::stack({step_u, step_v}, 1), 0.5).clamp(0.0, 1.0);
  }
  const auto ok = residual(x).norm(2, -1) < 1e-9;
  out.index_put_({mask}, x);
  auto converged = torch::zeros_like(mask);
  converged.index_put_({mask}, ok);
  return {out, converged};
}

void check_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& loss, const torch::Tensor& x,
                    double tol = 1e-3) {
  CHECK(testing::gradient_error(loss, x) < tol);
}

double brute_reprojection(const torch::Tensor& uv, const torch::Tensor& grid, const CameraPose& cam,
                          const torch::Tensor& mask) {
  const auto c = oracle::from_pose(cam);
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t r = 0; r < mask.size(0); ++r) {
    for (int64_t col = 0; col < mask.size(1); ++col) {
      if (!mask.index({r, col}).item<bool>()) continue;
      const auto p = oracle::bilinear(grid, uv.index({r, col, 0}).item<double>(), uv.index({r, col, 1}).item<double>());
      const auto q = oracle::project(c, {p[0], p[1], p[2]});
      const double dx = (q[0] - col) / c.w, dy = (q[1] - r) / c.w;
      sum += q[2] > 1e-6 ? dx * dx + dy * dy : 1.0 + static_cast<double>(c.h * c.h) / (c.w * c.w);
      ++n;
    }
  }
  return sum / n;
}

double brute_visibility(const torch::Tensor& uv, const torch::Tensor& grid, const torch::Tensor& avg,
                        const CameraPose& cam, const torch::Tensor& mask) {
  const auto c = oracle::from_pose(cam);
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t r = 0; r < mask.size(0); ++r) {
    for (int64_t col = 0; col < mask.size(1); ++col) {
      if (!mask.index({r, col}).item<bool>()) continue;
      const double u = uv.index({r, col, 0}).item<double>(), v = uv.index({r, col, 1}).item<double>();
      const auto p = oracle::bilinear(grid, u, v);
      const auto q = oracle::bilinear(avg, u, v);
      const double z = (c.r.row(2).dot(Eigen::Vector3d(p[0], p[1], p[2]))) + c.t.z();
      const double za = (c.r.row(2).dot(Eigen::Vector3d(q[0], q[1], q[2]))) + c.t.z();
      sum += std::max(0.0, z - za);
      ++n;
    }
  }
  return sum / n;
}

}  // namespace

TEST_CASE("reprojection_loss: ground truth closes the cycle") {
  const auto s = make_scene(7, 0.1, {0, 7, 18});
  for (const auto& v : s.views) {
    const double l = reprojection_loss(v.uv, s.posmap, v.cam, v.mask).item<double>();
    CHECK(l < std::pow(1.5 / 64.0, 2));
  }
}

TEST_CASE("reprojection_loss: translated position map matches the brute-force oracle") {
  const auto s = make_scene(3, 0.1, {4});
  const auto& v = s.views[0];
  auto shifted = s.posmap.grid.clone();
  shifted.select(-1, 0).add_(0.01);
  const double got = reprojection_loss(v.uv, {shifted, s.posmap.validity}, v.cam, v.mask).item<double>();
  const double want = brute_reprojection(v.uv, shifted, v.cam, v.mask);
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
  CHECK(got > 10.0 * reprojection_loss(v.uv, s.posmap, v.cam, v.mask).item<double>());
}

TEST_CASE("reprojection_loss: exact single pixel is zero; empty mask is an error") {
  const auto cam = generate_orbit_camera(3, 24, 2.0, 15.0, {16, 16}, {32.0, 32.0});
  const auto point = unproject({5.0, 9.0}, 1.8, cam);
  auto grid = torch::empty({8, 8, 3}, torch::kFloat64);
  for (int k = 0; k < 3; ++k) grid.select(-1, k).fill_(point[k]);
  auto mask = torch::zeros({16, 16}, torch::kBool);
  mask.index_put_({9, 5}, true);
  const auto uv = torch::rand({16, 16, 2}, torch::kFloat64);
  const PositionMap pm{grid, torch::ones({8, 8}, torch::kBool)};
  CHECK(reprojection_loss(uv, pm, cam, mask).item<double>() < 1e-20);
  CHECK_THROWS_AS(reprojection_loss(uv, pm, cam, torch::zeros({16, 16}, torch::kBool)), DataError);
}

TEST_CASE("reprojection_loss: behind-camera points cost the fixed penalty") {
  const auto cam = generate_orbit_camera(0, 24, 2.0, 0.0, {8, 8}, {16.0, 16.0});
  // Every texel sits 3 units behind the camera.
  const Eigen::Vector3d behind = cam.center() - 3.0 * cam.forward();
  auto grid = torch::empty({4, 4, 3}, torch::kFloat64);
  for (int k = 0; k < 3; ++k) grid.select(-1, k).fill_(behind[k]);
  auto uv = torch::rand({8, 8, 2}, torch::kFloat64).requires_grad_(true);
  const auto l = reprojection_loss(uv, {grid, torch::ones({4, 4}, torch::kBool)}, cam, torch::ones({8, 8}, torch::kBool));
  CHECK(l.item<double>() == doctest::Approx(2.0));
  l.backward();
  CHECK(torch::isfinite(uv.grad()).all().item<bool>());
}

TEST_CASE("visibility_loss: analytic zero cases and the hinge oracle") {
  const auto s = make_scene(5, 0.1, {2});
  const auto& v = s.views[0];
  const auto& avg = s.posmap;
  CHECK(visibility_loss(v.uv, avg, avg, v.cam, v.mask).item<double>() == 0.0);
  const auto random_uv = torch::rand({64, 64, 2}, torch::kFloat64);
  CHECK(visibility_loss(random_uv, avg, avg, v.cam, v.mask).item<double>() == 0.0);

  // Shift along the optical axis: every point is 0.1 deeper than the average.
  const auto f = v.cam.forward();
  auto pushed = avg.grid.clone();
  for (int k = 0; k < 3; ++k) pushed.select(-1, k).add_(0.1 * f[k]);
  CHECK(visibility_loss(v.uv, {pushed, avg.validity}, avg, v.cam, v.mask).item<double>() ==
        doctest::Approx(0.1).epsilon(1e-6));
  auto pulled = avg.grid.clone();
  for (int k = 0; k < 3; ++k) pulled.select(-1, k).add_(-0.1 * f[k]);
  CHECK(visibility_loss(v.uv, {pulled, avg.validity}, avg, v.cam, v.mask).item<double>() == 0.0);

  auto gen = at::detail::createCPUGenerator(17);
  for (int trial = 0; trial < 3; ++trial) {
    const auto residual = (torch::rand({64, 64, 3}, gen, torch::kFloat64) - 0.5) * 0.2;
    const auto grid = avg.grid + residual;
    const double got = visibility_loss(v.uv, {grid, avg.validity}, avg, v.cam, v.mask).item<double>();
    CHECK(got == doctest::Approx(brute_visibility(v.uv, grid, avg.grid, v.cam, v.mask)).epsilon(1e-10));
    CHECK(got > 0.0);
  }
}

TEST_CASE("visibility_loss: rendered-average reference") {
  const auto s = make_scene(0, 0.0, {0});
  const auto& v = s.views[0];
  // Ground truth on the average surface sits at the rendered depth.
  const double l = visibility_loss(v.uv, s.posmap, s.posmap, v.cam, v.mask, DepthReference::kRenderedAverage,
                                   v.avg_depth)
                       .item<double>();
  CHECK(l < 1e-3);
  // Back-side assignment: mirror u by half a turn, which lands behind the
  // visible surface. The average-at-uv form cannot see this; the rendered
  // form penalizes it.
  auto back = v.uv.clone();
  back.select(-1, 0).add_(0.5).remainder_(1.0);
  CHECK(visibility_loss(back, s.posmap, s.posmap, v.cam, v.mask).item<double>() == 0.0);
  CHECK(visibility_loss(back, s.posmap, s.posmap, v.cam, v.mask, DepthReference::kRenderedAverage, v.avg_depth)
            .item<double>() > 0.1);
  CHECK_THROWS_AS(visibility_loss(v.uv, s.posmap, s.posmap, v.cam, v.mask, DepthReference::kRenderedAverage),
                  ShapeError);
}

TEST_CASE("deformation_reg: zero, constant and checkerboard") {
  const auto validity = chart_validity(16);
  CHECK(deformation_reg(torch::zeros({16, 16, 3}, torch::kFloat64), validity).item<double>() == 0.0);

  auto constant = torch::zeros({16, 16, 3}, torch::kFloat64);
  constant.select(-1, 0).fill_(0.07);
  const auto tc = deformation_terms(constant, validity);
  CHECK(tc.smoothness.item<double>() == 0.0);
  CHECK(tc.l2.item<double>() == doctest::Approx(0.0049).epsilon(1e-12));

  const double c = 0.03;
  auto board = torch::zeros({16, 16, 3}, torch::kFloat64);
  for (int r = 0; r < 16; ++r)
    for (int col = 0; col < 16; ++col) board.index_put_({r, col, 0}, (r + col) % 2 ? c : -c);
  const auto tb = deformation_terms(board, validity);
  CHECK(tb.smoothness.item<double>() == doctest::Approx(4 * c * c).epsilon(1e-12));
  CHECK(tb.l2.item<double>() == doctest::Approx(c * c).epsilon(1e-12));

  // Loop oracle on a random field with a random validity mask.
  auto gen = at::detail::createCPUGenerator(9);
  const auto field = torch::rand({10, 10, 3}, gen, torch::kFloat64) - 0.5;
  const auto valid = torch::rand({10, 10}, gen, torch::kFloat64) < 0.8;
  double smooth = 0.0, l2 = 0.0;
  int pairs = 0, texels = 0;
  auto ok = [&](int r, int col) { return valid.index({r, col}).item<bool>(); };
  auto sq = [&](int r0, int c0, int r1, int c1) {
    return (field[r0][c0] - field[r1][c1]).square().sum().item<double>();
  };
  for (int r = 0; r < 10; ++r) {
    for (int col = 0; col < 10; ++col) {
      if (ok(r, col)) {
        l2 += field[r][col].square().sum().item<double>();
        ++texels;
      }
      if (col + 1 < 10 && ok(r, col) && ok(r, col + 1)) {
        smooth += sq(r, col, r, col + 1);
        ++pairs;
      }
      if (r + 1 < 10 && ok(r, col) && ok(r + 1, col)) {
        smooth += sq(r, col, r + 1, col);
        ++pairs;
      }
    }
  }
  const auto tr = deformation_terms(field, valid);
  CHECK(tr.smoothness.item<double>() == doctest::Approx(smooth / pairs).epsilon(1e-12));
  CHECK(tr.l2.item<double>() == doctest::Approx(l2 / texels).epsilon(1e-12));
  CHECK_THROWS_AS(deformation_reg(field, chart_validity(8)), ShapeError);
}

TEST_CASE("multiview_uv_loss: ground truth on adjacent views") {
  const auto s = make_scene(11, 0.1, {0, 1, 2, 3}, 24);
  const auto residual = torch::zeros({64, 64, 3}, torch::kFloat64);
  for (int k = 0; k + 1 < 4; ++k) {
    const auto& a = s.views[k];
    const auto& b = s.views[k + 1];
    const PairSide pa{a.uv, residual, {a.cam, a.mask, a.avg_depth}};
    const PairSide pb{b.uv, residual, {b.cam, b.mask, b.avg_depth}};
    const auto t = multiview_terms(pa, pb, s.posmap);
    CHECK(t.loss.item<double>() < std::pow(2.0 / 64.0, 2));
    CHECK(t.n_12 > 1000);
    CHECK(t.n_21 > 1000);
  }
}

TEST_CASE("multiview_uv_loss: the same view twice is self-consistent") {
  const auto s = make_scene(4, 0.1, {6});
  const auto& v = s.views[0];
  const auto [uv, converged] = snap_uv(v.uv, v.mask, s.posmap, v.cam);
  CHECK(converged.sum().item<int64_t>() > 0.95 * v.mask.sum().item<int64_t>());
  const auto residual = torch::zeros({64, 64, 3}, torch::kFloat64);
  const PairSide a{uv, residual, {v.cam, converged, v.avg_depth}};
  const auto t = multiview_terms(a, a, s.posmap);
  CHECK(t.loss.item<double>() < 1e-6);
  CHECK(t.n_12 > 1000);
}

TEST_CASE("multiview_uv_loss: perturbed region matches the transport oracle") {
  const auto s = make_scene(8, 0.1, {3, 4});
  const auto residual = torch::zeros({64, 64, 3}, torch::kFloat64);
  const auto& a = s.views[0];
  auto uv2 = s.views[1].uv.clone();
  const auto& b = s.views[1];
  // Region fully inside view 2's silhouette and away from the seam.
  auto region = torch::zeros({64, 64}, torch::kBool);
  region.index_put_({Slice(24, 40), Slice(24, 40)}, true);
  REQUIRE(b.mask.index({region}).all().item<bool>());
  const double delta = 0.05;
  uv2.select(-1, 1).index_put_({region}, uv2.select(-1, 1).index({region}) + delta);

  const PairSide pa{a.uv, residual, {a.cam, a.mask, a.avg_depth}};
  const PairSide pb{uv2, residual, {b.cam, b.mask, b.avg_depth}};
  const auto t = multiview_terms(pa, pb, s.posmap);
  const oracle::TransportView oa{a.uv, s.posmap.grid, a.mask, a.avg_depth, a.cam};
  const oracle::TransportView ob{uv2, s.posmap.grid, b.mask, b.avg_depth, b.cam};
  const auto [m12, n12] = oracle::transport(oa, ob, 0.05);
  const auto [m21, n21] = oracle::transport(ob, oa, 0.05);
  CHECK(t.n_12 == n12);
  CHECK(t.n_21 == n21);
  CHECK(t.loss.item<double>() == doctest::Approx(m12 + m21).epsilon(1e-9));
  // Roughly delta^2 times the share of transported pixels touching the region.
  CHECK(t.loss.item<double>() > 0.1 * delta * delta);
}

TEST_CASE("multiview_uv_loss: symmetric under swapping the views") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = make_small_case(seed);
    const PairSide a{c.uv1, c.residual1, {c.cam1, c.mask1, c.avg_depth}};
    const PairSide b{c.uv2, c.residual2, {c.cam2, c.mask2, c.avg_depth}};
    CHECK(multiview_uv_loss(a, b, c.avg).item<double>() ==
          doctest::Approx(multiview_uv_loss(b, a, c.avg).item<double>()).epsilon(1e-12));
  }
}

TEST_CASE("multiview_uv_loss: disjoint views give zero with a warning") {
  const auto s = make_scene(2, 0.0, {0, 12});
  const auto residual = torch::zeros({64, 64, 3}, torch::kFloat64);
  const auto& a = s.views[0];
  const auto& b = s.views[1];
  // Keep only a thin strip of each view's silhouette so nothing survives.
  const PairSide pa{a.uv, residual, {a.cam, a.mask, a.avg_depth}};
  const PairSide pb{b.uv, residual, {b.cam, b.mask, b.avg_depth}};
  log::quiet() = true;
  const int64_t before = log::warning_count();
  const auto t = multiview_terms(pa, pb, s.posmap);
  log::quiet() = false;
  CHECK(t.n_12 + t.n_21 < 50);
  if (t.n_12 + t.n_21 == 0) {
    CHECK(t.loss.item<double>() == 0.0);
    CHECK(log::warning_count() == before + 1);
  }

  auto empty = a.mask.clone().zero_();
  const PairSide ea{a.uv, residual, {a.cam, empty, a.avg_depth}};
  log::quiet() = true;
  const auto te = multiview_terms(ea, ea, s.posmap);
  log::quiet() = false;
  CHECK(te.loss.item<double>() == 0.0);
  CHECK(te.n_12 == 0);
}

TEST_CASE("losses ignore predictions on background pixels") {
  const auto s = make_scene(6, 0.1, {9, 10});
  const auto residual = torch::zeros({64, 64, 3}, torch::kFloat64);
  const auto& a = s.views[0];
  const auto& b = s.views[1];
  auto scramble = [](const torch::Tensor& uv, const torch::Tensor& mask) {
    auto out = uv.clone();
    out.index_put_({mask.logical_not()}, torch::rand({(~mask).sum().item<int64_t>(), 2}, torch::kFloat64));
    return out;
  };
  const auto ua = scramble(a.uv, a.mask), ub = scramble(b.uv, b.mask);
  CHECK(reprojection_loss(a.uv, s.posmap, a.cam, a.mask).item<double>() ==
        reprojection_loss(ua, s.posmap, a.cam, a.mask).item<double>());
  CHECK(visibility_loss(a.uv, s.posmap, s.posmap, a.cam, a.mask).item<double>() ==
        visibility_loss(ua, s.posmap, s.posmap, a.cam, a.mask).item<double>());
  const double before = multiview_uv_loss({a.uv, residual, {a.cam, a.mask, a.avg_depth}},
                                          {b.uv, residual, {b.cam, b.mask, b.avg_depth}}, s.posmap)
                            .item<double>();
  const double after = multiview_uv_loss({ua, residual, {a.cam, a.mask, a.avg_depth}},
                                         {ub, residual, {b.cam, b.mask, b.avg_depth}}, s.posmap)
                           .item<double>();
  CHECK(before == after);
}

TEST_CASE("gradient checks against central differences on 20 random 8x8 cases") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    const auto c = make_small_case(seed);
    const auto s1 = surface(c, c.residual1);

    // Reprojection: w.r.t. uv and w.r.t. position map texels.
    check_gradient([&](const torch::Tensor& uv) { return reprojection_loss(uv, s1, c.cam1, c.mask1); }, c.uv1);
    check_gradient(
        [&](const torch::Tensor& g) { return reprojection_loss(c.uv1, {g, c.avg.validity}, c.cam1, c.mask1); },
        s1.grid);

    // Visibility: w.r.t. uv and residual.
    check_gradient([&](const torch::Tensor& uv) { return visibility_loss(uv, s1, c.avg, c.cam1, c.mask1); }, c.uv1);
    check_gradient(
        [&](const torch::Tensor& r) { return visibility_loss(c.uv1, surface(c, r), c.avg, c.cam1, c.mask1); },
        c.residual1);

    // Deformation regularizer: w.r.t. residual.
    check_gradient([&](const torch::Tensor& r) { return deformation_reg(r, c.avg.validity); }, c.residual1);

    // Cross-view: w.r.t. both UV maps and the source residual.
    auto mv = [&](const torch::Tensor& uv1, const torch::Tensor& uv2, const torch::Tensor& r1) {
      const PairSide a{uv1, r1, {c.cam1, c.mask1, c.avg_depth}};
      const PairSide b{uv2, c.residual2, {c.cam2, c.mask2, c.avg_depth}};
      return multiview_uv_loss(a, b, c.avg);
    };
    REQUIRE(mv(c.uv1, c.uv2, c.residual1).item<double>() > 0.0);
    check_gradient([&](const torch::Tensor& x) { return mv(x, c.uv2, c.residual1); }, c.uv1);
    check_gradient([&](const torch::Tensor& x) { return mv(c.uv1, x, c.residual1); }, c.uv2);
    check_gradient([&](const torch::Tensor& x) { return mv(c.uv1, c.uv2, x); }, c.residual1);
  }
}

namespace {

struct BatchFixture {
  ModelOutput out;
  LossBatch batch;
  PositionMap avg;
};

BatchFixture random_batch(uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  BatchFixture f;
  const auto inst = make_instance({seed, 3, 0.05, 0.35}, 8, 8);
  f.avg = inst.posmap;
  f.out.uv = 0.2 + 0.6 * torch::rand({4, 8, 8, 2}, gen, torch::kFloat64);
  f.out.seg_logits = torch::randn({4, 8, 8, 1}, gen, torch::kFloat64);
  f.out.residual = (torch::rand({4, 8, 8, 3}, gen, torch::kFloat64) - 0.5) * 0.05;
  for (int i = 0; i < 4; ++i) {
    auto mask = torch::rand({8, 8}, gen, torch::kFloat64) < 0.8;
    mask.index_put_({4, 4}, true);
    f.batch.views.push_back(
        {generate_orbit_camera(i, 24, 2.0, 15.0, {8, 8}, {20.0, 20.0}), mask, torch::zeros({8, 8})});
  }
  f.batch.pairs = {{0, 1}, {2, 3}};
  f.batch.gt_uv = torch::rand({4, 8, 8, 2}, gen, torch::kFloat64);
  f.batch.gt_posmap = inst.posmap.grid.unsqueeze(0).expand({4, 8, 8, 3}).clone();
  return f;
}

}  // namespace

TEST_CASE("total_loss: weight selection, recombination and linearity") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto f = random_batch(seed);
    const auto all = total_loss(f.out, f.batch, f.avg, {1, 1, 1, 1, 1, 1, 1});
    CHECK(all.total == doctest::Approx(all.recombined()).epsilon(1e-6));
    CHECK(all.total_tensor.item<double>() == all.total);
    for (double t : {all.repr, all.vis, all.def, all.uv, all.seg, all.sup_uv, all.sup_posmap}) {
      CHECK(t >= 0.0);
      CHECK(std::isfinite(t));
    }

    const auto only_repr = total_loss(f.out, f.batch, f.avg, {1, 0, 0, 0, 0, 0, 0});
    CHECK(only_repr.total == only_repr.repr);

    // Scaling a single weight moves the total along a line through the
    // remaining terms.
    const LossWeights base{};
    const auto b0 = total_loss(f.out, f.batch, f.avg, base);
    CHECK(b0.total == doctest::Approx(b0.recombined()).epsilon(1e-6));
    for (double k : {0.0, 0.5, 2.0, 7.0}) {
      LossWeights w = base;
      w.uv = k;
      const auto bk = total_loss(f.out, f.batch, f.avg, w);
      CHECK(bk.total == doctest::Approx(b0.total + (k - base.uv) * b0.uv).epsilon(1e-9));
    }
  }
}

TEST_CASE("total_loss: single-view batches have no cross-view term") {
  auto f = random_batch(3);
  f.batch.pairs.clear();
  const auto b = total_loss(f.out, f.batch, f.avg, {});
  CHECK(b.uv == 0.0);
  CHECK(b.n_uv_terms == 0);
  f.batch.pairs = {{0, 0}};
  CHECK_THROWS_AS(total_loss(f.out, f.batch, f.avg, {}), ShapeError);
}

TEST_CASE("total_loss: ground truth gives a near-zero total") {
  const auto s = make_scene(12, 0.1, {0, 1});
  ModelOutput out;
  out.uv = torch::stack({s.views[0].uv, s.views[1].uv});
  out.seg_logits = torch::stack({s.views[0].mask, s.views[1].mask}).to(torch::kFloat64).unsqueeze(-1) * 60.0 - 30.0;
  out.residual = torch::zeros({2, 64, 64, 3}, torch::kFloat64);
  LossBatch batch;
  for (const auto& v : s.views) batch.views.push_back({v.cam, v.mask, v.avg_depth});
  batch.pairs = {{0, 1}};
  const auto b = total_loss(out, batch, s.posmap, {});
  CHECK(b.total < 1e-3);
  CHECK(b.vis == 0.0);
  CHECK(b.def == 0.0);
  CHECK(b.to_json().at("n_fg_pixels") == b.n_fg_pixels);
}

TEST_CASE("loss configs: round trip and unknown fields") {
  const auto w = LossWeights::from_json({{"def", 0.5}});
  CHECK(w.def == 0.5);
  CHECK(w.repr == 1.0);
  CHECK(LossWeights::from_json(w.to_json()).to_json() == w.to_json());
  CHECK_THROWS_AS(LossWeights::from_json({{"lambda_def", 0.5}}), ConfigError);
  CHECK_THROWS_AS(LossWeights::from_json({{"def", -1.0}}), ConfigError);
  const auto o = LossOptions::from_json({{"visibility", "rendered_average"}, {"uv_masking", false}});
  CHECK(o.visibility == DepthReference::kRenderedAverage);
  CHECK_FALSE(o.uv_masking);
  CHECK(LossOptions::from_json(o.to_json()).to_json() == o.to_json());
  CHECK_THROWS_AS(LossOptions::from_json({{"visibility", "prose"}}), ConfigError);
}
