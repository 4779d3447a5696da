#pragma once

// JSONL keypoint exchange format, one object per frame:
//   frame           int
//   body            17 x [x, y]            normalized image coordinates
//   left_hand_rot   16 x 9 (row-major)     joint rotation matrices
//   right_hand_rot  16 x 9 (row-major)
//   hand_joints_3d  optional 2 x 21 x 3    camera-space points [left, right]
//   hand_joints_2d  optional 2 x 21 x 2    pixel coordinates   [left, right]

#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosh/error.hpp"
#include "cosh/gesture.hpp"

namespace coshdit {

struct FrameKeypoints {
  int frame = 0;
  BodyKeypoints2D body;
  std::array<Mat3, kHandJoints> left_hand_rot{};
  std::array<Mat3, kHandJoints> right_hand_rot{};
  std::optional<std::array<std::array<Vec3, kHandPoints>, 2>> hand_joints_3d;
  std::optional<std::array<std::array<Vec2, kHandPoints>, 2>> hand_joints_2d;
};

namespace detail {

inline nlohmann::json rot_to_json(const std::array<Mat3, kHandJoints>& rots) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Mat3& r : rots) {
    nlohmann::json flat = nlohmann::json::array();
    for (double v : r.m) flat.push_back(v);
    arr.push_back(std::move(flat));
  }
  return arr;
}

inline std::array<Mat3, kHandJoints> rot_from_json(const nlohmann::json& arr,
                                                   const char* field) {
  if (!arr.is_array() || arr.size() != kHandJoints)
    throw IoError(std::string("keypoints: ") + field + " must be 16 x 9");
  std::array<Mat3, kHandJoints> out{};
  for (std::size_t j = 0; j < kHandJoints; ++j) {
    const auto& flat = arr[j];
    if (!flat.is_array() || flat.size() != 9)
      throw IoError(std::string("keypoints: ") + field + " entry is not 9 values");
    for (std::size_t i = 0; i < 9; ++i) out[j].m[i] = flat[i].get<double>();
  }
  return out;
}

}  // namespace detail

inline nlohmann::json frame_to_json(const FrameKeypoints& f) {
  nlohmann::json o;
  o["frame"] = f.frame;
  nlohmann::json body = nlohmann::json::array();
  for (const Vec2& p : f.body.points) body.push_back({p.x, p.y});
  o["body"] = std::move(body);
  o["left_hand_rot"] = detail::rot_to_json(f.left_hand_rot);
  o["right_hand_rot"] = detail::rot_to_json(f.right_hand_rot);
  if (f.hand_joints_3d) {
    nlohmann::json hands = nlohmann::json::array();
    for (const auto& hand : *f.hand_joints_3d) {
      nlohmann::json pts = nlohmann::json::array();
      for (const Vec3& p : hand) pts.push_back({p.x, p.y, p.z});
      hands.push_back(std::move(pts));
    }
    o["hand_joints_3d"] = std::move(hands);
  }
  if (f.hand_joints_2d) {
    nlohmann::json hands = nlohmann::json::array();
    for (const auto& hand : *f.hand_joints_2d) {
      nlohmann::json pts = nlohmann::json::array();
      for (const Vec2& p : hand) pts.push_back({p.x, p.y});
      hands.push_back(std::move(pts));
    }
    o["hand_joints_2d"] = std::move(hands);
  }
  return o;
}

inline FrameKeypoints frame_from_json(const nlohmann::json& o) {
  FrameKeypoints f;
  f.frame = o.at("frame").get<int>();
  const auto& body = o.at("body");
  if (!body.is_array() || body.size() != kBodyJoints)
    throw IoError("keypoints: body must have 17 points");
  for (std::size_t j = 0; j < kBodyJoints; ++j) {
    f.body.points[j].x = body[j].at(0).get<double>();
    f.body.points[j].y = body[j].at(1).get<double>();
  }
  f.left_hand_rot = detail::rot_from_json(o.at("left_hand_rot"), "left_hand_rot");
  f.right_hand_rot = detail::rot_from_json(o.at("right_hand_rot"), "right_hand_rot");
  if (o.contains("hand_joints_3d")) {
    std::array<std::array<Vec3, kHandPoints>, 2> hands{};
    const auto& arr = o.at("hand_joints_3d");
    if (!arr.is_array() || arr.size() != 2) throw IoError("keypoints: hand_joints_3d must be 2 x 21 x 3");
    for (std::size_t h = 0; h < 2; ++h) {
      if (arr[h].size() != kHandPoints) throw IoError("keypoints: hand_joints_3d must be 2 x 21 x 3");
      for (std::size_t j = 0; j < kHandPoints; ++j)
        hands[h][j] = {arr[h][j].at(0).get<double>(), arr[h][j].at(1).get<double>(),
                       arr[h][j].at(2).get<double>()};
    }
    f.hand_joints_3d = hands;
  }
  if (o.contains("hand_joints_2d")) {
    std::array<std::array<Vec2, kHandPoints>, 2> hands{};
    const auto& arr = o.at("hand_joints_2d");
    if (!arr.is_array() || arr.size() != 2) throw IoError("keypoints: hand_joints_2d must be 2 x 21 x 2");
    for (std::size_t h = 0; h < 2; ++h) {
      if (arr[h].size() != kHandPoints) throw IoError("keypoints: hand_joints_2d must be 2 x 21 x 2");
      for (std::size_t j = 0; j < kHandPoints; ++j)
        hands[h][j] = {arr[h][j].at(0).get<double>(), arr[h][j].at(1).get<double>()};
    }
    f.hand_joints_2d = hands;
  }
  return f;
}

inline void write_keypoints_jsonl(const std::string& path,
                                  const std::vector<FrameKeypoints>& frames) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const FrameKeypoints& f : frames) out << frame_to_json(f).dump() << '\n';
}

inline std::vector<FrameKeypoints> read_keypoints_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<FrameKeypoints> frames;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json o = nlohmann::json::parse(line, nullptr, false);
    if (o.is_discarded())
      throw IoError(path + ":" + std::to_string(lineno) + ": invalid JSON");
    frames.push_back(frame_from_json(o));
  }
  return frames;
}

}  // namespace coshdit
