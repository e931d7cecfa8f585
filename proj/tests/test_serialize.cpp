#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sfmlab/core.hpp"
#include "sfmlab/image_io.hpp"
#include "sfmlab/scene.hpp"
#include "sfmlab/serialize.hpp"

using namespace sfmlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "sfmlab_serialize_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

scene::MultiViewScene small_scene() {
  scene::SceneSpec spec;
  spec.num_views = 4;
  spec.num_patches = 3;
  spec.image_width = 96;
  spec.image_height = 72;
  spec.texture_size = 32;
  spec.seed = 11;
  return scene::generate_scene(spec);
}

}  // namespace

TEST_CASE("scene json round trip is bit exact") {
  const auto sc = small_scene();
  const auto j = serialize::scene_to_json(sc);
  const auto path = temp_dir() / "scene.json";
  serialize::save_json(path.string(), j);
  const auto sc2 = serialize::scene_from_json(serialize::load_json(path.string()));

  REQUIRE(sc2.num_views() == sc.num_views());
  REQUIRE(sc2.patches.size() == sc.patches.size());
  CHECK(sc2.image_width == sc.image_width);
  CHECK(sc2.rng_seed == sc.rng_seed);
  for (int v = 0; v < sc.num_views(); ++v) {
    CHECK((sc2.poses[v].R - sc.poses[v].R).norm() == 0.0);  // doubles via base-10? no: json
    CHECK((sc2.poses[v].t - sc.poses[v].t).norm() == 0.0);
    CHECK(sc2.intrinsics[v].fx == sc.intrinsics[v].fx);
  }
  for (size_t p = 0; p < sc.patches.size(); ++p) {
    // Texture payloads travel as base64 raw doubles: exact.
    CHECK(sc2.patches[p].texture.data == sc.patches[p].texture.data);
    CHECK((sc2.patches[p].origin - sc.patches[p].origin).norm() == 0.0);
    // The frame is rebuilt from corner differences: one subtraction of
    // rounding, not bit exact.
    CHECK((sc2.patches[p].edge_u - sc.patches[p].edge_u).norm() < 1e-12);
    CHECK((sc2.patches[p].edge_v - sc.patches[p].edge_v).norm() < 1e-12);
  }

  // Same scene serialized twice gives byte-identical files.
  const auto path2 = temp_dir() / "scene2.json";
  serialize::save_json(path2.string(), serialize::scene_to_json(sc));
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("scene_from_json rejects malformed documents") {
  CHECK_THROWS_AS(serialize::scene_from_json(nlohmann::json::object()), ValidationError);
  auto j = serialize::scene_to_json(small_scene());
  j["patches"][0]["corners"] = {1.0, 2.0, 3.0};
  CHECK_THROWS_AS(serialize::scene_from_json(j), ValidationError);
}

TEST_CASE("format_float pins nine significant digits") {
  CHECK(serialize::format_float(0.5) == "0.5");
  CHECK(serialize::format_float(1.0 / 3.0) == "0.333333333");
  CHECK(serialize::format_float(123456789.0) == "123456789");
  CHECK(serialize::format_float(-2.5e-7) == "-2.5e-07");
  CHECK(serialize::format_float(0.0) == "0");
}

TEST_CASE("stats csv row matches a hand-built oracle") {
  sfm::SfmStats s;
  s.num_views = 12;
  s.registered_views = 11;
  s.registered_ratio = 11.0 / 12.0;
  s.triangulated_keypoints = 456;
  s.total_points = 123;
  s.mean_reprojection_px = 0.25;
  s.collapse_ratio = 1.0 / 3.0;
  CHECK(serialize::stats_csv_header() ==
        "num_views,registered_views,registered_ratio,triangulated_keypoints,"
        "total_points,mean_reprojection_px,collapse_ratio");
  CHECK(serialize::stats_csv_row(s) == "12,11,0.916666667,456,123,0.25,0.333333333");
  const auto j = serialize::stats_to_json(s);
  CHECK(j["registered_views"] == 11);
  CHECK(j["total_points"] == 123);
}

TEST_CASE("pfm round trip preserves values to float precision") {
  ImageBuffer img(17, 9);
  Rng rng(3);
  for (double& v : img.data) v = rng_uniform(rng, -2.0, 2.0);  // PFM is not clamped
  const auto path = (temp_dir() / "img.pfm").string();
  io::write_pfm(path, img);
  const auto back = io::read_pfm(path);
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  for (size_t i = 0; i < img.size(); ++i)
    CHECK(back.data[i] == static_cast<double>(static_cast<float>(img.data[i])));
  CHECK_THROWS_AS(io::read_pfm((temp_dir() / "missing.pfm").string()), Error);
}

TEST_CASE("png writer emits a valid deterministic signature") {
  ImageBuffer img(8, 6);
  Rng rng(4);
  for (double& v : img.data) v = rng_uniform(rng);
  const auto p1 = temp_dir() / "a.png";
  const auto p2 = temp_dir() / "b.png";
  io::write_png_gray(p1.string(), img);
  io::write_png_gray(p2.string(), img);
  const auto bytes = slurp(p1);
  REQUIRE(bytes.size() > 8);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  for (int i = 0; i < 8; ++i) CHECK(static_cast<unsigned char>(bytes[i]) == sig[i]);
  CHECK(bytes == slurp(p2));
  CHECK_THROWS_AS(io::write_png_gray(p1.string(), img, 12), ValidationError);
}

TEST_CASE("reconstruction json and text outputs agree with the state") {
  // Minimal hand-built state: 2 cameras, 1 point observed twice.
  sfm::PoseGraph graph;
  graph.num_views = 2;
  graph.features.resize(2);
  graph.features[0].keypoints = {{10.5, 20.25, 1.0, 8}};
  graph.features[1].keypoints = {{30.0, 40.0, 1.0, 8}};

  sfm::ReconstructionState state;
  state.registered[0] = geometry::CameraPose{};
  geometry::CameraPose p1;
  p1.t = geometry::Vec3(1, 0, 0);
  state.registered[1] = p1;
  sfm::TrackPoint tp;
  tp.X = geometry::Vec3(0.25, -0.5, 4.0);
  tp.observations = {{0, 0}, {1, 0}};
  state.points.push_back(tp);
  state.critical_edges = {{0, 1}};
  state.stats = sfm::compute_stats(state, 2);

  const auto j = serialize::reconstruction_to_json(state, graph);
  REQUIRE(j["cameras"].size() == 2);
  REQUIRE(j["points"].size() == 1);
  CHECK(j["points"][0]["xyz"][2] == 4.0);
  CHECK(j["points"][0]["track"][0]["x"] == 10.5);
  CHECK(j["critical_edges"][0][1] == 1);
  CHECK(j["stats"]["registered_views"] == 2);

  sfm::SfmConfig cfg;
  cfg.intrinsics.assign(2, geometry::CameraIntrinsics{100, 100, 48, 36});
  const auto dir = (temp_dir() / "text").string();
  serialize::write_text_reconstruction(dir, state, graph, cfg);
  const auto cameras = slurp(dir + "/cameras.txt");
  CHECK(cameras == "# camera_id fx fy cx cy\n0 100 100 48 36\n1 100 100 48 36\n");
  const auto points = slurp(dir + "/points3D.txt");
  CHECK(points == "# point_id x y z track(view keypoint ...)\n0 0.25 -0.5 4 0 0 1 0\n");
  CHECK(slurp(dir + "/images.txt").find("\n0 1 0 0 0 1 0 0 0 1 0 0 0\n") != std::string::npos);
}

TEST_CASE("manifest serialization and hex hashes") {
  CHECK(serialize::hex64(0) == "0000000000000000");
  CHECK(serialize::hex64(0xdeadbeefULL) == "00000000deadbeef");

  serialize::RunManifest m;
  m.command = "generate";
  m.seed = 42;
  m.config = {{"views", 12}};
  m.input_hashes["scene.json"] = serialize::hex64(1);
  m.outputs = {"view_000.pfm"};
  const auto j = serialize::manifest_to_json(m);
  CHECK(j["command"] == "generate");
  CHECK(j["seed"] == 42);
  CHECK(j["input_hashes"]["scene.json"] == "0000000000000001");
  CHECK(j["outputs"][0] == "view_000.pfm");
  CHECK(j["wall_seconds"] == 0.0);
}

TEST_CASE("file_hash is content determined") {
  const auto pa = temp_dir() / "ha.bin";
  const auto pb = temp_dir() / "hb.bin";
  std::ofstream(pa, std::ios::binary) << "identical payload";
  std::ofstream(pb, std::ios::binary) << "identical payload";
  CHECK(io::file_hash(pa.string()) == io::file_hash(pb.string()));
  std::ofstream(pb, std::ios::binary) << "different payload";
  CHECK(io::file_hash(pa.string()) != io::file_hash(pb.string()));
}
