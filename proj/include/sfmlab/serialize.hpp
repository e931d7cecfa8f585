#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfmlab/core.hpp"
#include "sfmlab/scene.hpp"
#include "sfmlab/sfm.hpp"

namespace sfmlab::serialize {

using geometry::CameraIntrinsics;
using geometry::CameraPose;
using nlohmann::json;
using nlohmann::ordered_json;

// CSV floats are fixed at 9 significant digits for stable diffing.
inline std::string format_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

namespace detail {

inline std::string encode_doubles(const std::vector<double>& v) {
  std::vector<unsigned char> bytes(v.size() * sizeof(double));
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& s) {
  const auto bytes = base64_decode(s);
  if (bytes.size() % sizeof(double) != 0)
    throw ValidationError("decode_doubles: payload is not a multiple of 8 bytes");
  std::vector<double> v(bytes.size() / sizeof(double));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

}  // namespace detail

inline ordered_json scene_to_json(const scene::MultiViewScene& sc) {
  ordered_json j;
  j["image_size"] = {sc.image_width, sc.image_height};
  j["seed"] = sc.rng_seed;
  j["cameras"] = ordered_json::array();
  for (int v = 0; v < sc.num_views(); ++v) {
    const auto& K = sc.intrinsics[v];
    const auto& P = sc.poses[v];
    ordered_json cam;
    cam["fx"] = K.fx;
    cam["fy"] = K.fy;
    cam["cx"] = K.cx;
    cam["cy"] = K.cy;
    std::vector<double> R;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) R.push_back(P.R(r, c));
    cam["R"] = R;
    cam["t"] = {P.t.x(), P.t.y(), P.t.z()};
    j["cameras"].push_back(cam);
  }
  j["patches"] = ordered_json::array();
  for (const auto& p : sc.patches) {
    ordered_json jp;
    std::vector<double> corners;
    for (const auto& c : p.corners()) {
      corners.push_back(c.x());
      corners.push_back(c.y());
      corners.push_back(c.z());
    }
    jp["corners"] = corners;
    jp["texture_width"] = p.texture.width;
    jp["texture_height"] = p.texture.height;
    jp["texture"] = detail::encode_doubles(p.texture.data);
    j["patches"].push_back(jp);
  }
  return j;
}

inline scene::MultiViewScene scene_from_json(const json& j) {
  scene::MultiViewScene sc;
  if (!j.contains("cameras") || !j.contains("patches") || !j.contains("image_size"))
    throw ValidationError("scene_from_json: missing required keys");
  sc.image_width = j["image_size"][0].get<int>();
  sc.image_height = j["image_size"][1].get<int>();
  sc.rng_seed = j.value("seed", uint64_t{0});
  for (const auto& cam : j["cameras"]) {
    CameraIntrinsics K;
    K.fx = cam["fx"].get<double>();
    K.fy = cam["fy"].get<double>();
    K.cx = cam["cx"].get<double>();
    K.cy = cam["cy"].get<double>();
    sc.intrinsics.push_back(K);
    const auto R = cam["R"].get<std::vector<double>>();
    const auto t = cam["t"].get<std::vector<double>>();
    if (R.size() != 9 || t.size() != 3)
      throw ValidationError("scene_from_json: camera pose must be 9 + 3 floats");
    CameraPose P;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) P.R(r, c) = R[r * 3 + c];
    P.t = geometry::Vec3(t[0], t[1], t[2]);
    sc.poses.push_back(P);
  }
  for (const auto& jp : j["patches"]) {
    const auto corners = jp["corners"].get<std::vector<double>>();
    if (corners.size() != 12)
      throw ValidationError("scene_from_json: patch corners must be 12 floats");
    scene::TexturedPatch p;
    const geometry::Vec3 c0(corners[0], corners[1], corners[2]);
    const geometry::Vec3 c1(corners[3], corners[4], corners[5]);
    const geometry::Vec3 c3(corners[9], corners[10], corners[11]);
    p.origin = c0;
    p.edge_u = c1 - c0;
    p.edge_v = c3 - c0;
    p.texture = ImageBuffer(jp["texture_width"].get<int>(), jp["texture_height"].get<int>());
    p.texture.data = detail::decode_doubles(jp["texture"].get<std::string>());
    if (p.texture.data.size() != static_cast<size_t>(p.texture.width) * p.texture.height)
      throw ValidationError("scene_from_json: texture payload size mismatch");
    sc.patches.push_back(p);
  }
  return sc;
}

inline void save_json(const std::string& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("save_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

inline json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("load_json: cannot open " + path);
  return json::parse(in);
}

inline ordered_json stats_to_json(const sfm::SfmStats& s) {
  ordered_json j;
  j["num_views"] = s.num_views;
  j["registered_views"] = s.registered_views;
  j["registered_ratio"] = s.registered_ratio;
  j["triangulated_keypoints"] = s.triangulated_keypoints;
  j["total_points"] = s.total_points;
  j["mean_reprojection_px"] = s.mean_reprojection_px;
  j["collapse_ratio"] = s.collapse_ratio;
  return j;
}

inline std::string stats_csv_header() {
  return "num_views,registered_views,registered_ratio,triangulated_keypoints,"
         "total_points,mean_reprojection_px,collapse_ratio";
}

inline std::string stats_csv_row(const sfm::SfmStats& s) {
  std::string row;
  row += std::to_string(s.num_views) + ",";
  row += std::to_string(s.registered_views) + ",";
  row += format_float(s.registered_ratio) + ",";
  row += std::to_string(s.triangulated_keypoints) + ",";
  row += std::to_string(s.total_points) + ",";
  row += format_float(s.mean_reprojection_px) + ",";
  row += format_float(s.collapse_ratio);
  return row;
}

inline ordered_json reconstruction_to_json(const sfm::ReconstructionState& state,
                                           const sfm::PoseGraph& graph) {
  ordered_json j;
  j["cameras"] = ordered_json::array();
  for (const auto& [v, pose] : state.registered) {
    ordered_json cam;
    cam["view"] = v;
    std::vector<double> R;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) R.push_back(pose.R(r, c));
    cam["R"] = R;
    cam["t"] = {pose.t.x(), pose.t.y(), pose.t.z()};
    j["cameras"].push_back(cam);
  }
  j["points"] = ordered_json::array();
  for (const auto& tp : state.points) {
    if (!tp.valid) continue;
    ordered_json pt;
    pt["xyz"] = {tp.X.x(), tp.X.y(), tp.X.z()};
    ordered_json track = ordered_json::array();
    for (const auto& [v, k] : tp.observations) {
      const auto& kp = graph.features[v].keypoints[k];
      track.push_back({{"view", v}, {"keypoint", k}, {"x", kp.x}, {"y", kp.y}});
    }
    pt["track"] = track;
    j["points"].push_back(pt);
  }
  j["critical_edges"] = state.critical_edges;
  j["no_valid_initial_pair"] = state.no_valid_initial_pair;
  j["ba_diverged"] = state.ba_diverged;
  j["stats"] = stats_to_json(state.stats);
  return j;
}

// Text triple-file layout (cameras/images/points3D) for external viewers.
inline void write_text_reconstruction(const std::string& dir,
                                      const sfm::ReconstructionState& state,
                                      const sfm::PoseGraph& graph,
                                      const sfm::SfmConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir + "/cameras.txt");
    out << "# camera_id fx fy cx cy\n";
    for (const auto& [v, pose] : state.registered) {
      const auto& K = cfg.intrinsics[v];
      out << v << " " << format_float(K.fx) << " " << format_float(K.fy) << " "
          << format_float(K.cx) << " " << format_float(K.cy) << "\n";
    }
  }
  {
    std::ofstream out(dir + "/images.txt");
    out << "# image_id R(row major, 9) t(3)\n";
    for (const auto& [v, pose] : state.registered) {
      out << v;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out << " " << format_float(pose.R(r, c));
      out << " " << format_float(pose.t.x()) << " " << format_float(pose.t.y()) << " "
          << format_float(pose.t.z()) << "\n";
    }
  }
  {
    std::ofstream out(dir + "/points3D.txt");
    out << "# point_id x y z track(view keypoint ...)\n";
    int pid = 0;
    for (const auto& tp : state.points) {
      if (!tp.valid) continue;
      out << pid++ << " " << format_float(tp.X.x()) << " " << format_float(tp.X.y()) << " "
          << format_float(tp.X.z());
      for (const auto& [v, k] : tp.observations) out << " " << v << " " << k;
      out << "\n";
    }
  }
}

struct RunManifest {
  std::string command;
  ordered_json config;
  uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;   // path -> hex hash
  std::vector<std::string> outputs;
  double wall_seconds = 0;
};

inline std::string hex64(uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ordered_json manifest_to_json(const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["input_hashes"] = m.input_hashes;
  j["outputs"] = m.outputs;
  j["wall_seconds"] = m.wall_seconds;
  return j;
}

}  // namespace sfmlab::serialize
