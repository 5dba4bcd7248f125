#include "dgs/trainer.hpp"

#include "fd_harness.hpp"
#include "test_support.hpp"

#include <catch2/catch.hpp>

using namespace dgs;
using namespace dgs_test;

namespace {

ImageRGB random_image(Rng& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0, 1);
  ImageRGB img(w, h);
  for (auto& p : img.px) p = Vec3(u(rng), u(rng), u(rng));
  return img;
}

}  // namespace

TEST_CASE("photometric_loss basics") {
  Rng rng(801);
  const ImageRGB a = random_image(rng, 16, 16);
  SECTION("identical images give zero loss and gradient") {
    const auto loss = photometric_loss(a, a);
    REQUIRE(loss.value == 0.0);
    // the ssim gradient cancels algebraically; numerically to machine eps
    for (const auto& g : loss.grad.px) REQUIRE(g.norm() < 1e-14);
  }
  SECTION("constant offset gives that L1 term") {
    ImageRGB b = a;
    for (auto& p : b.px) p.array() += 0.1;  // pre-clamp shift
    const auto loss = photometric_loss(a, b);
    REQUIRE(loss.l1 == Approx(0.1).epsilon(1e-9));
  }
  SECTION("shape mismatch throws") {
    ImageRGB b(15, 16);
    REQUIRE_THROWS_AS(photometric_loss(a, b), ShapeMismatch);
  }
}

TEST_CASE("photometric_loss gradient matches finite differences") {
  Rng rng(809);
  const int W = 16, H = 16;
  ImageRGB x = random_image(rng, W, H);
  const ImageRGB gt = random_image(rng, W, H);
  const auto loss = photometric_loss(x, gt);

  // probe a scattered subset of pixels; SSIM couples an 11x11 neighborhood
  const double h = 1e-6;
  std::uniform_int_distribution<int> upix(0, W * H - 1), uch(0, 2);
  for (int probe = 0; probe < 60; ++probe) {
    const int p = upix(rng);
    const int c = uch(rng);
    ImageRGB xp = x, xm = x;
    xp.px[p][c] += h;
    xm.px[p][c] -= h;
    // skip probes that straddle an L1 sign kink
    if (std::abs(x.px[p][c] - gt.px[p][c]) < 2 * h) continue;
    const double fd =
        (photometric_loss(xp, gt).value - photometric_loss(xm, gt).value) / (2 * h);
    REQUIRE(rel_err(loss.grad.px[p][c], fd, 1e-8) < 1e-4);
  }
}

TEST_CASE("depth_loss") {
  const int W = 8, H = 8;
  ImageF rd(W, H, 3.0), pd(W, H, 3.0), alpha(W, H, 1.0);
  ImageU8 valid(W, H, 1);
  SECTION("equal depths give zero") {
    REQUIRE(depth_loss(rd, alpha, pd, valid).value == 0.0);
  }
  SECTION("all-invalid mask gives zero loss and gradient") {
    valid.fill(0);
    const auto loss = depth_loss(rd, alpha, pd, valid);
    REQUIRE(loss.value == 0.0);
    for (double g : loss.grad.px) REQUIRE(g == 0.0);
  }
  SECTION("low-alpha pixels are excluded") {
    rd.at(2, 2) = 99.0;
    alpha.at(2, 2) = 0.2;
    REQUIRE(depth_loss(rd, alpha, pd, valid).value == 0.0);
  }
  SECTION("matches a direct masked-mean recomputation") {
    Rng rng(811);
    std::uniform_real_distribution<double> u(0.5, 5.0);
    std::uniform_int_distribution<int> bit(0, 1);
    for (auto& v : rd.px) v = u(rng);
    for (auto& v : pd.px) v = u(rng);
    for (auto& v : alpha.px) v = bit(rng) ? 1.0 : 0.3;
    for (auto& v : valid.px) v = bit(rng);
    const auto loss = depth_loss(rd, alpha, pd, valid);
    double acc = 0;
    int count = 0;
    for (size_t i = 0; i < rd.size(); ++i)
      if (valid.px[i] && alpha.px[i] > 0.5) {
        acc += std::abs(rd.px[i] - pd.px[i]);
        ++count;
      }
    REQUIRE(loss.value == Approx(acc / count).epsilon(1e-12));
    // gradient: sign / count on participating pixels
    for (size_t i = 0; i < rd.size(); ++i) {
      if (valid.px[i] && alpha.px[i] > 0.5)
        REQUIRE(loss.grad.px[i] ==
                Approx(((rd.px[i] > pd.px[i]) ? 1.0 : -1.0) / count).epsilon(1e-12));
      else
        REQUIRE(loss.grad.px[i] == 0.0);
    }
  }
}

TEST_CASE("motion_loss straight-through contract") {
  const int W = 6, H = 6;
  const double thr = 0.5;
  SECTION("correctly classified pixel contributes nothing") {
    ImageF V(W, H, 0.0);
    ImageU8 M(W, H, 0);
    V.at(1, 1) = 0.7;
    M.at(1, 1) = 1;
    const auto loss = motion_loss(V, M, thr);
    REQUIRE(loss.value == 0.0);
    REQUIRE(loss.grad.at(1, 1) == 0.0);
  }
  SECTION("false positive pushes velocity down") {
    ImageF V(W, H, 0.0);
    ImageU8 M(W, H, 0);
    V.at(2, 3) = 0.7;  // above threshold but mask says static
    const auto loss = motion_loss(V, M, thr);
    REQUIRE(loss.value == Approx(1.0 / (W * H)).epsilon(1e-12));
    REQUIRE(loss.grad.at(2, 3) == Approx(2.0 / (W * H)).epsilon(1e-12));
  }
  SECTION("exact agreement gives zero everywhere") {
    ImageF V(W, H, 0.9);
    ImageU8 M(W, H, 1);
    REQUIRE(motion_loss(V, M, thr).value == 0.0);
  }
  SECTION("randomized buffers: forward binary, gradient formula exact") {
    Rng rng(821);
    std::uniform_real_distribution<double> u(0, 1);
    std::uniform_int_distribution<int> bit(0, 1);
    ImageF V(W, H);
    ImageU8 M(W, H);
    for (auto& v : V.px) v = u(rng);
    for (auto& m : M.px) m = uint8_t(bit(rng));
    const auto loss = motion_loss(V, M, thr);
    double expect = 0;
    for (size_t i = 0; i < V.size(); ++i) {
      const double vhat = V.px[i] > thr ? 1.0 : 0.0;
      const double m = M.px[i] ? 1.0 : 0.0;
      REQUIRE(loss.grad.px[i] == 2.0 * (vhat - m) / double(W * H));
      expect += sq(vhat - m);
    }
    REQUIRE(loss.value == Approx(expect / (W * H)).epsilon(1e-12));
    // forward value counts misclassifications: always k/N with integer k
    const double k = loss.value * W * H;
    REQUIRE(k == Approx(std::round(k)).margin(1e-9));
  }
}

TEST_CASE("frozen rule zeroes everything but velocity") {
  Rng rng(823);
  const FdCase c = make_fd_case(rng, 4, 24);
  const RenderOutput out = render(c.scene, c.pose, c.delta, c.K, c.t, c.rcfg);

  // motion-style backward: velocity-gradient input only
  const ImageRGB zero_c(c.K.width, c.K.height, Vec3::Zero());
  const ImageF zero_f(c.K.width, c.K.height, 0.0);
  const SceneGrads motion = rasterize_backward(c.scene, out, zero_c, zero_f, c.w_vel);
  const SceneGrads frozen = apply_frozen_rule(motion);
  for (size_t i = 0; i < c.scene.size(); ++i) {
    REQUIRE(frozen.v[i] == motion.v[i]);
    REQUIRE(frozen.mu[i].norm() == 0.0);
    REQUIRE(frozen.log_scale[i].norm() == 0.0);
    REQUIRE(frozen.rot_q[i].norm() == 0.0);
    REQUIRE(frozen.logit_opacity[i] == 0.0);
    REQUIRE(frozen.tau[i] == 0.0);
    REQUIRE(frozen.log_beta[i] == 0.0);
    for (const auto& s : frozen.sh[i]) REQUIRE(s.norm() == 0.0);
  }
  REQUIRE(frozen.pose_delta.norm() == 0.0);

  // the motion pass itself must carry nonzero non-velocity gradients
  double nonv = 0;
  for (size_t i = 0; i < c.scene.size(); ++i) nonv += motion.mu[i].norm();
  REQUIRE(nonv > 1e-8);
}

TEST_CASE("combined pass equals photometric pass plus frozen motion pass") {
  Rng rng(827);
  const FdCase c = make_fd_case(rng, 5, 24);
  const RenderOutput out = render(c.scene, c.pose, c.delta, c.K, c.t, c.rcfg);
  const ImageRGB zero_c(c.K.width, c.K.height, Vec3::Zero());
  const ImageF zero_f(c.K.width, c.K.height, 0.0);

  // one backward with both inputs vs two single-term backwards
  const SceneGrads combined = rasterize_backward(c.scene, out, c.w_color, c.w_depth, c.w_vel);
  const SceneGrads photo = rasterize_backward(c.scene, out, c.w_color, c.w_depth, zero_f);
  const SceneGrads motion = rasterize_backward(c.scene, out, zero_c, zero_f, c.w_vel);

  for (size_t i = 0; i < c.scene.size(); ++i) {
    REQUIRE((combined.mu[i] - photo.mu[i] - motion.mu[i]).norm() < 1e-10);
    REQUIRE(std::abs(combined.logit_opacity[i] - photo.logit_opacity[i] -
                     motion.logit_opacity[i]) < 1e-10);
    REQUIRE((combined.v[i] - photo.v[i] - motion.v[i]).norm() < 1e-10);
  }
  REQUIRE((combined.pose_delta - photo.pose_delta - motion.pose_delta).norm() < 1e-10);

  // trainer composition: photometric grads plus velocity-only motion grads
  const SceneGrads frozen = apply_frozen_rule(motion);
  for (size_t i = 0; i < c.scene.size(); ++i) {
    REQUIRE(photo.mu[i] == (photo.mu[i] + frozen.mu[i]));
    REQUIRE((photo.v[i] + frozen.v[i] - (photo.v[i] + motion.v[i])).norm() == 0.0);
  }
}

TEST_CASE("adam_update") {
  SECTION("zero gradient leaves the parameter unchanged") {
    double x = 1.5, m = 0, v = 0;
    adam_update(x, 0.0, m, v, 1, 0.1);
    REQUIRE(x == 1.5);
  }
  SECTION("first step moves by about -lr * sign(g)") {
    for (double g : {0.3, -2.0, 1e-4}) {
      double x = 0, m = 0, v = 0;
      adam_update(x, g, m, v, 1, 0.1);
      REQUIRE(x == Approx(-0.1 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-6));
    }
  }
  SECTION("1-d quadratic converges within 500 steps") {
    // f(x) = (x - 3)^2, grad = 2 (x - 3)
    double x = -5, m = 0, v = 0;
    for (int t = 1; t <= 500; ++t) adam_update(x, 2 * (x - 3), m, v, t, 0.1);
    REQUIRE(std::abs(x - 3.0) < 1e-3);
  }
}

TEST_CASE("optimizer skips non-finite gradients and keeps parameters") {
  SceneConfig cfg;
  GaussianScene scene(cfg);
  DynamicGaussian g;
  g.sh.assign(4, Vec3::Zero());
  scene.mutable_gaussians().push_back(g);
  AdamOptimizer opt(1, 4, 0);
  SceneGrads grads;
  grads.resize(1, 4);
  grads.mu[0] = Vec3(std::numeric_limits<double>::quiet_NaN(), 0, 0);
  REQUIRE_THROWS_AS(opt.step_scene(scene, grads, LearningRates{}, 1.0), NonFiniteGradient);
  REQUIRE(scene.gaussians()[0].mu.norm() == 0.0);
  REQUIRE(opt.step_count() == 0);
}

TEST_CASE("adam renormalizes quaternions after each step") {
  SceneConfig cfg;
  GaussianScene scene(cfg);
  DynamicGaussian g;
  g.sh.assign(4, Vec3::Zero());
  scene.mutable_gaussians().push_back(g);
  AdamOptimizer opt(1, 4, 0);
  SceneGrads grads;
  grads.resize(1, 4);
  grads.rot_q[0] = Vec4(0.5, -0.3, 0.2, 0.1);
  opt.step_scene(scene, grads, LearningRates{}, 1.0);
  REQUIRE(scene.gaussians()[0].rot_q.norm() == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("densify_and_prune") {
  SceneConfig cfg;
  TrainSchedule sched;
  sched.grad_densify_thr = 0.1;
  sched.prune_opacity_thr = 0.005;
  const double extent = 10.0;

  auto base_gaussian = [](double opacity) {
    DynamicGaussian g;
    g.logit_opacity = logit(opacity);
    g.sh.assign(4, Vec3::Zero());
    g.log_scale = Vec3::Constant(std::log(0.05));  // small: clones
    g.v = Vec3(1, 2, 3);
    g.tau = 0.7;
    g.log_beta = -1.0;
    return g;
  };

  SECTION("low gradients leave the population unchanged") {
    GaussianScene scene(cfg);
    for (int i = 0; i < 5; ++i) scene.mutable_gaussians().push_back(base_gaussian(0.5));
    DensifyAccum accum;
    accum.resize(5);
    const auto rep = densify_and_prune(scene, accum, sched, extent);
    REQUIRE(scene.size() == 5);
    REQUIRE(rep.cloned == 0);
    REQUIRE(rep.split == 0);
  }
  SECTION("large high-gradient gaussian splits into two, count +1") {
    GaussianScene scene(cfg);
    auto g = base_gaussian(0.5);
    g.log_scale = Vec3::Constant(std::log(0.5));  // above 0.01 * extent
    scene.mutable_gaussians().push_back(g);
    scene.mutable_gaussians().push_back(base_gaussian(0.5));
    DensifyAccum accum;
    accum.resize(2);
    accum.mu_grad_sum[0] = Vec3(0.5, 0, 0);
    accum.mu_grad_norm_sum[0] = 0.5;
    accum.count[0] = 1;
    const auto rep = densify_and_prune(scene, accum, sched, extent);
    REQUIRE(rep.split == 1);
    REQUIRE(scene.size() == 3);
    // children inherit velocity, tau and beta
    for (const auto& child : scene.gaussians()) {
      REQUIRE(child.v == Vec3(1, 2, 3));
      REQUIRE(child.tau == 0.7);
      REQUIRE(child.log_beta == -1.0);
    }
  }
  SECTION("small high-gradient gaussian clones, shifted, count +1") {
    GaussianScene scene(cfg);
    scene.mutable_gaussians().push_back(base_gaussian(0.5));
    DensifyAccum accum;
    accum.resize(1);
    accum.mu_grad_sum[0] = Vec3(1, 0, 0);
    accum.mu_grad_norm_sum[0] = 1.0;
    accum.count[0] = 1;
    const auto rep = densify_and_prune(scene, accum, sched, extent);
    REQUIRE(rep.cloned == 1);
    REQUIRE(scene.size() == 2);
    REQUIRE(scene.gaussians()[1].mu.x() < scene.gaussians()[0].mu.x());  // moved against grad
  }
  SECTION("pruning everything triggers the minimum-population guard") {
    GaussianScene scene(cfg);
    for (int i = 0; i < 150; ++i)
      scene.mutable_gaussians().push_back(base_gaussian(0.001 + 1e-5 * i));
    DensifyAccum accum;
    accum.resize(150);
    const auto rep = densify_and_prune(scene, accum, sched, extent);
    REQUIRE(rep.min_population_triggered);
    REQUIRE(scene.size() == 100);
    // survivors are the most opaque
    for (const auto& g : scene.gaussians())
      REQUIRE(g.opacity() >= 0.001 + 1e-5 * 50 - 1e-9);
  }
}

TEST_CASE("optimizer state serialization round trips") {
  AdamOptimizer opt(3, 4, 2);
  SceneConfig cfg;
  GaussianScene scene(cfg);
  for (int i = 0; i < 3; ++i) {
    DynamicGaussian g;
    g.sh.assign(4, Vec3::Constant(0.1));
    scene.mutable_gaussians().push_back(g);
  }
  SceneGrads grads;
  grads.resize(3, 4);
  for (int i = 0; i < 3; ++i) grads.mu[i] = Vec3(0.1 * i, -0.2, 0.3);
  opt.step_scene(scene, grads, LearningRates{}, 1.0);
  PoseDelta d;
  opt.step_delta(1, d, (Vec6() << 1, 2, 3, 4, 5, 6).finished(), 1e-3);

  std::stringstream ss;
  opt.serialize(ss);
  AdamOptimizer back;
  back.deserialize(ss);
  REQUIRE(back.step_count() == opt.step_count());

  // identical further steps evolve identically
  GaussianScene s1 = scene, s2 = scene;
  opt.step_scene(s1, grads, LearningRates{}, 1.0);
  back.step_scene(s2, grads, LearningRates{}, 1.0);
  for (int i = 0; i < 3; ++i)
    REQUIRE((s1.gaussians()[i].mu - s2.gaussians()[i].mu).norm() == 0.0);
}
