#include "dgs/synthdata.hpp"

#include "dgs/odometry.hpp"

#include "test_support.hpp"

#include <catch2/catch.hpp>

#include <filesystem>

using namespace dgs;
using namespace dgs_test;

namespace {

SceneSpec single_wall_spec(double z, int frames = 3) {
  SceneSpec s;
  s.frame_count = frames;
  s.fps = 10;
  s.width = 48;
  s.height = 48;
  s.focal = 48;
  CameraPose key;
  s.camera_keys = {key};
  BillboardSpec wall;
  wall.axis = 2;
  wall.offset = z;
  wall.center2 = Vec2(0, 0);
  wall.half2 = Vec2(100, 100);
  s.billboards.push_back(wall);
  return s;
}

}  // namespace

TEST_CASE("fronto-parallel wall gives constant z depth and empty mask") {
  const SceneSpec spec = single_wall_spec(5.0);
  const SyntheticDataset ds = generate(spec);
  REQUIRE(ds.size() == 3);
  for (double d : ds.depth[0].px) REQUIRE(d == Approx(5.0).epsilon(1e-12));
  for (uint8_t m : ds.mask[0].px) REQUIRE(m == 0);
  // z-depth convention: the euclidean ray length at the corners is longer
  const Vec3 corner_dir((0.5 - 24.0) / 48.0, (0.5 - 24.0) / 48.0, 1.0);
  REQUIRE(corner_dir.norm() * 5.0 > 5.0);
}

TEST_CASE("advancing camera grows a box footprint monotonically") {
  SceneSpec s;
  s.frame_count = 10;
  s.fps = 10;
  s.width = 64;
  s.height = 64;
  s.focal = 64;
  CameraPose start, end;
  end.timestamp = 0.9;
  end.t = Vec3(0, 0, 3.0);  // 0.33 units per frame toward the box
  s.camera_keys = {start, end};
  BoxSpec box;
  box.center = Vec3(0, 0, 6);
  box.half = Vec3(0.8, 0.8, 0.8);
  s.boxes.push_back(box);
  BillboardSpec wall;
  wall.axis = 2;
  wall.offset = 30;
  wall.center2 = Vec2(0, 0);
  wall.half2 = Vec2(100, 100);
  s.billboards.push_back(wall);

  const SyntheticDataset ds = generate(s);
  std::vector<int> counts;
  for (size_t f = 0; f < ds.size(); ++f) {
    int count = 0;
    for (double d : ds.depth[f].px)
      if (d < 10.0) ++count;  // pixels on the box, not the wall
    counts.push_back(count);
  }
  // monotone up to pixel quantization, strictly growing overall
  for (size_t f = 1; f < counts.size(); ++f) REQUIRE(counts[f] >= counts[f - 1]);
  REQUIRE(counts.back() > 2 * counts.front());
}

TEST_CASE("moving billboard mask matches the analytic projected rectangle") {
  SceneSpec s;
  s.frame_count = 5;
  s.fps = 10;
  s.width = 64;
  s.height = 64;
  s.focal = 64;
  CameraPose key;
  s.camera_keys = {key};
  BillboardSpec mover;
  mover.axis = 2;
  mover.offset = 8.0;
  mover.center2 = Vec2(-2.0, 0.0);  // (x, y)
  mover.half2 = Vec2(1.0, 0.75);
  mover.dynamic = true;
  mover.velocity = Vec3(2.0, 0, 0);
  s.billboards.push_back(mover);
  BillboardSpec wall;
  wall.axis = 2;
  wall.offset = 40;
  wall.center2 = Vec2(0, 0);
  wall.half2 = Vec2(200, 200);
  s.billboards.push_back(wall);

  const SyntheticDataset ds = generate(s);
  for (size_t f = 0; f < ds.size(); ++f) {
    const double time = f / s.fps;
    const double cx = -2.0 + 2.0 * time;
    // count pixel centers whose rays pass through the rectangle at z=8
    int expect = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double wx = (x + 0.5 - 32.0) / 64.0 * 8.0;
        const double wy = (y + 0.5 - 32.0) / 64.0 * 8.0;
        if (std::abs(wx - cx) <= 1.0 && std::abs(wy - 0.0) <= 0.75) ++expect;
      }
    int got = 0;
    for (uint8_t m : ds.mask[f].px) got += m;
    REQUIRE(got == expect);
  }
}

TEST_CASE("ground-truth relative poses compose to the trajectory") {
  const SceneSpec spec = preset_static_street();
  const SyntheticDataset ds = generate(spec);
  const auto frames = oracle_frames(ds, NoiseSpec{});
  const Trajectory chained = chain_poses(frames);
  // chained is anchored at identity; compare after aligning to gt
  const double metrics = aligned_ate(chained, ds.gt_poses);
  REQUIRE(metrics < 1e-9);
}

TEST_CASE("depth, mask and rgb stay mutually consistent on presets") {
  const SyntheticDataset ds = generate(preset_one_mover());
  size_t dynamic_px = 0;
  for (size_t f = 0; f < ds.size(); ++f) {
    for (size_t i = 0; i < ds.depth[f].px.size(); ++i) {
      REQUIRE(ds.depth[f].px[i] > 0.0);  // the wall backs every ray
      if (ds.mask[f].px[i]) ++dynamic_px;
    }
  }
  REQUIRE(dynamic_px > 500);  // the mover is visible across the run
}

TEST_CASE("export then re-import round trips") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "dgs_synth_export";
  fs::remove_all(dir);
  SceneSpec spec = preset_static_street();
  spec.frame_count = 4;
  {
    // retime the swaying path onto the shorter run so it stays non-collinear
    CameraPose a, b, c;
    b.timestamp = 0.15;
    b.t = Vec3(0.05, -0.01, 0.15);
    c.timestamp = 0.3;
    c.t = Vec3(0, 0, 0.3);
    spec.camera_keys = {a, b, c};
  }
  const SyntheticDataset ds = generate(spec);
  export_dataset(ds, dir.string());

  DiskProvider provider(dir.string());
  REQUIRE(provider.size() == 4);
  REQUIRE(provider.has_masks());
  REQUIRE(provider.intrinsics().fx == Approx(ds.K.fx));

  const auto oracle = oracle_frames(ds, NoiseSpec{});
  for (size_t i = 0; i < 4; ++i) {
    const Frame& a = provider.frame(i);
    const Frame& b = oracle[i];
    // rgb round-trips through 8-bit quantization
    double max_rgb = 0;
    for (size_t p = 0; p < a.image.size(); ++p)
      max_rgb = std::max(max_rgb, (a.image.px[p] - b.image.px[p]).cwiseAbs().maxCoeff());
    REQUIRE(max_rgb <= 0.5 / 255.0 + 1e-12);
    // depth is float32-lossless
    for (size_t p = 0; p < a.depth.size(); ++p)
      REQUIRE(a.depth.px[p] == Approx(b.depth.px[p]).epsilon(1e-6));
    for (size_t p = 0; p < a.motion_mask.size(); ++p)
      REQUIRE(int(a.motion_mask.px[p]) == int(b.motion_mask.px[p]));
    REQUIRE((a.rel_pose.t - b.rel_pose.t).norm() < 1e-12);
  }

  // chained rel poses land on the exported gt trajectory after alignment
  const Trajectory gt = load_tum((dir / "gt_poses.tum").string());
  const Trajectory chained = chain_poses(provider.all_frames());
  REQUIRE(aligned_ate(chained, gt) < 1e-9);
  fs::remove_all(dir);
}

TEST_CASE("re-export with the same seed is byte-identical") {
  namespace fs = std::filesystem;
  const auto d1 = fs::temp_directory_path() / "dgs_synth_a";
  const auto d2 = fs::temp_directory_path() / "dgs_synth_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  SceneSpec spec = preset_one_mover();
  spec.frame_count = 3;
  export_dataset(generate(spec, 7), d1.string());
  export_dataset(generate(spec, 7), d2.string());
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    std::ifstream a(entry.path(), std::ios::binary), b(d2 / rel, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    REQUIRE(sa == sb);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("spec validation rejects degenerate scenes") {
  SceneSpec s;
  s.camera_keys = {CameraPose{}};
  REQUIRE_THROWS_AS(generate(s), EmptyScene);  // no static primitive
  SceneSpec w = single_wall_spec(5.0);
  w.boxes.push_back(BoxSpec{});
  w.boxes.back().dynamic = true;
  w.boxes.back().velocity = Vec3(1.0 / 0.0, 0, 0);
  REQUIRE_THROWS_AS(generate(w), Error);
}
