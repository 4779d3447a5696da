#pragma once

// Hybrid gesture codec: 17 upper-body keypoints become 16 planar bone
// angles (lifted to the shared 6D rotation encoding) plus bone lengths and
// the root position; each hand contributes 16 joint rotations. Frozen
// layout of the packed 306-vector:
//   [0,96)    bone angle 6D blocks
//   [96,112)  bone lengths
//   [112,114) root (x, y)
//   [114,210) left hand 6D blocks
//   [210,306) right hand 6D blocks

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cosh/error.hpp"
#include "cosh/rotation.hpp"

namespace coshdit {

constexpr int kBodyJoints = 17;
constexpr int kBodyBones = 16;
constexpr int kHandJoints = 16;       // rotation-bearing joints
constexpr int kHandPoints = 21;       // FK joints + 5 fingertips
constexpr int kBodyDim = 114;         // 16*6 + 16 + 2
constexpr int kHandDim = 96;          // 16*6
constexpr int kGestureDim = 306;      // 114 + 96 + 96

constexpr int kAngleOffset = 0;
constexpr int kLengthOffset = 96;
constexpr int kRootOffset = 112;
constexpr int kLeftHandOffset = 114;
constexpr int kRightHandOffset = 210;

struct Vec2 {
  double x = 0, y = 0;
};

struct BodyKeypoints2D {
  std::array<Vec2, kBodyJoints> points{};

  void validate() const {
    for (const Vec2& p : points)
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ValidationError("body keypoints: non-finite coordinate");
  }
};

// 16 bones spanning 17 joints. Bone index b belongs to child joint
// (b < root ? b : b + 1), so bone order is frozen by joint order.
struct KinematicTree {
  std::array<int, kBodyJoints> parent{};
  int root = 0;

  // Canonical upper-body table: neck-rooted head chain, two arms, and four
  // palm anchor points per wrist.
  static KinematicTree default_tree() {
    KinematicTree t;
    t.root = 0;
    t.parent = {
        -1,  // 0 neck
        0,   // 1 nose
        1,   // 2 head top
        0,   // 3 left shoulder
        0,   // 4 right shoulder
        3,   // 5 left elbow
        4,   // 6 right elbow
        5,   // 7 left wrist
        6,   // 8 right wrist
        7, 7, 7, 7,    // 9..12 left palm anchors
        8, 8, 8, 8,    // 13..16 right palm anchors
    };
    return t;
  }

  int bone_child(int bone) const { return bone < root ? bone : bone + 1; }
  int bone_of_joint(int joint) const { return joint < root ? joint : joint - 1; }

  void validate() const {
    if (root < 0 || root >= kBodyJoints) throw ValidationError("kinematic tree: bad root");
    if (parent[static_cast<std::size_t>(root)] != -1)
      throw ValidationError("kinematic tree: root must have parent -1");
    for (int j = 0; j < kBodyJoints; ++j) {
      if (j == root) continue;
      const int p = parent[static_cast<std::size_t>(j)];
      if (p < 0 || p >= kBodyJoints || p == j)
        throw ValidationError("kinematic tree: bad parent for joint " + std::to_string(j));
      // follow parents to the root; > kBodyJoints hops means a cycle
      int cur = j, hops = 0;
      while (cur != root) {
        cur = parent[static_cast<std::size_t>(cur)];
        if (cur < 0 || ++hops > kBodyJoints)
          throw ValidationError("kinematic tree: joint " + std::to_string(j) +
                                " does not reach the root");
      }
    }
  }

  // parents before children
  std::vector<int> topological_order() const {
    std::vector<int> order;
    order.reserve(kBodyJoints);
    std::array<bool, kBodyJoints> placed{};
    order.push_back(root);
    placed[static_cast<std::size_t>(root)] = true;
    while (static_cast<int>(order.size()) < kBodyJoints) {
      bool progress = false;
      for (int j = 0; j < kBodyJoints; ++j) {
        if (placed[static_cast<std::size_t>(j)] || j == root) continue;
        if (placed[static_cast<std::size_t>(parent[static_cast<std::size_t>(j)])]) {
          order.push_back(j);
          placed[static_cast<std::size_t>(j)] = true;
          progress = true;
        }
      }
      if (!progress) throw ValidationError("kinematic tree: unreachable joints");
    }
    return order;
  }
};

enum class HandSide { kLeft, kRight };

// Standard 16-joint articulated hand: wrist + 3 joints per finger, ordered
// [wrist, thumb x3, index x3, middle x3, ring x3, pinky x3].
struct HandPose {
  std::array<Mat3, kHandJoints> joint_rotations{};
  HandSide side = HandSide::kLeft;

  static HandPose identity(HandSide s) {
    HandPose h;
    h.side = s;
    return h;
  }

  void validate() const {
    for (const Mat3& r : joint_rotations) {
      if (r.orthonormality_residual() > 1e-6)
        throw ValidationError("hand pose: joint rotation not orthonormal");
      if (r.det() <= 0.0) throw ValidationError("hand pose: joint rotation not proper");
    }
  }
};

struct HybridGesture {
  std::vector<double> values = std::vector<double>(kGestureDim, 0.0);

  void validate() const {
    if (static_cast<int>(values.size()) != kGestureDim)
      throw ShapeError("hybrid gesture: length " + std::to_string(values.size()));
    for (double v : values)
      if (!std::isfinite(v)) throw ValidationError("hybrid gesture: non-finite entry");
    for (int b = 0; b < kBodyBones; ++b)
      if (values[static_cast<std::size_t>(kLengthOffset + b)] < 0.0)
        throw ValidationError("hybrid gesture: negative bone length");
    for (int i = 0; i < 2; ++i) {
      const double r = values[static_cast<std::size_t>(kRootOffset + i)];
      if (r < 0.0 || r > 1.0) throw ValidationError("hybrid gesture: root outside [0,1]");
    }
    // every 6D block must decode to a proper rotation
    for (int off = 0; off < kGestureDim; ) {
      if (off == kLengthOffset) { off = kLeftHandOffset; continue; }
      Sixd v;
      for (int i = 0; i < 6; ++i) v[static_cast<std::size_t>(i)] = values[static_cast<std::size_t>(off + i)];
      const Mat3 r = sixd_to_rotation(v);
      if (r.det() <= 0.0) throw ValidationError("hybrid gesture: invalid 6D block");
      off += 6;
    }
  }
};

// planar angle <-> 6D block of R_z(theta); body angles share the hand codec
inline Sixd planar_angle_to_6d(double theta) { return rotation_to_6d(Mat3::rot_z(theta)); }

inline double sixd_to_planar_angle(const Sixd& v) {
  const Mat3 r = sixd_to_rotation(v);
  return std::atan2(r(1, 0), r(0, 0));
}

inline std::vector<double> encode_body(const BodyKeypoints2D& k, const KinematicTree& tree) {
  tree.validate();
  k.validate();
  std::vector<double> out(kBodyDim, 0.0);
  for (int j = 0; j < kBodyJoints; ++j) {
    if (j == tree.root) continue;
    const int b = tree.bone_of_joint(j);
    const Vec2& c = k.points[static_cast<std::size_t>(j)];
    const Vec2& p = k.points[static_cast<std::size_t>(tree.parent[static_cast<std::size_t>(j)])];
    const double dx = c.x - p.x, dy = c.y - p.y;
    const double len = std::hypot(dx, dy);
    if (len < 1e-6) throw DegenerateInputError("encode_body: zero-length bone " + std::to_string(b));
    const Sixd a = planar_angle_to_6d(std::atan2(dy, dx));
    for (int i = 0; i < 6; ++i) out[static_cast<std::size_t>(kAngleOffset + 6 * b + i)] = a[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(kLengthOffset + b)] = len;
  }
  out[kRootOffset] = k.points[static_cast<std::size_t>(tree.root)].x;
  out[kRootOffset + 1] = k.points[static_cast<std::size_t>(tree.root)].y;
  return out;
}

inline BodyKeypoints2D decode_body(const std::vector<double>& v, const KinematicTree& tree) {
  if (static_cast<int>(v.size()) != kBodyDim)
    throw ShapeError("decode_body: expected 114 values, got " + std::to_string(v.size()));
  tree.validate();
  BodyKeypoints2D k;
  k.points[static_cast<std::size_t>(tree.root)] = {v[kRootOffset], v[kRootOffset + 1]};
  for (int j : tree.topological_order()) {
    if (j == tree.root) continue;
    const int b = tree.bone_of_joint(j);
    Sixd a;
    for (int i = 0; i < 6; ++i) a[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(kAngleOffset + 6 * b + i)];
    const double theta = sixd_to_planar_angle(a);
    const double len = v[static_cast<std::size_t>(kLengthOffset + b)];
    if (len < 0.0) throw DegenerateInputError("decode_body: negative bone length");
    const Vec2& p = k.points[static_cast<std::size_t>(tree.parent[static_cast<std::size_t>(j)])];
    k.points[static_cast<std::size_t>(j)] = {p.x + len * std::cos(theta), p.y + len * std::sin(theta)};
  }
  return k;
}

inline void pack_hand(const HandPose& hand, std::vector<double>& out, int offset) {
  for (int j = 0; j < kHandJoints; ++j) {
    const Sixd v = rotation_to_6d(hand.joint_rotations[static_cast<std::size_t>(j)]);
    for (int i = 0; i < 6; ++i) out[static_cast<std::size_t>(offset + 6 * j + i)] = v[static_cast<std::size_t>(i)];
  }
}

inline HandPose unpack_hand(const std::vector<double>& g, int offset, HandSide side) {
  HandPose h;
  h.side = side;
  for (int j = 0; j < kHandJoints; ++j) {
    Sixd v;
    for (int i = 0; i < 6; ++i) v[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(offset + 6 * j + i)];
    h.joint_rotations[static_cast<std::size_t>(j)] = sixd_to_rotation(v);
  }
  return h;
}

inline HybridGesture pack_gesture(const std::vector<double>& body, const HandPose& left,
                                  const HandPose& right) {
  if (static_cast<int>(body.size()) != kBodyDim)
    throw ShapeError("pack_gesture: body block must have 114 values");
  left.validate();
  right.validate();
  HybridGesture g;
  std::copy(body.begin(), body.end(), g.values.begin());
  pack_hand(left, g.values, kLeftHandOffset);
  pack_hand(right, g.values, kRightHandOffset);
  return g;
}

struct UnpackedGesture {
  std::vector<double> body;
  HandPose left;
  HandPose right;
};

inline UnpackedGesture unpack_gesture(const HybridGesture& g) {
  if (static_cast<int>(g.values.size()) != kGestureDim)
    throw ShapeError("unpack_gesture: length " + std::to_string(g.values.size()));
  UnpackedGesture u;
  u.body.assign(g.values.begin(), g.values.begin() + kBodyDim);
  u.left = unpack_hand(g.values, kLeftHandOffset, HandSide::kLeft);
  u.right = unpack_hand(g.values, kRightHandOffset, HandSide::kRight);
  return u;
}

// Repair a raw decoder output so it satisfies the HybridGesture invariants:
// 6D blocks are re-orthonormalized (identity on degenerate blocks), lengths
// clamped non-negative, root clamped to [0,1].
inline std::vector<double> sanitize_gesture(const std::vector<double>& raw) {
  if (static_cast<int>(raw.size()) != kGestureDim)
    throw ShapeError("sanitize_gesture: length " + std::to_string(raw.size()));
  std::vector<double> out = raw;
  auto fix_block = [&](int off) {
    Sixd v;
    for (int i = 0; i < 6; ++i) v[static_cast<std::size_t>(i)] = out[static_cast<std::size_t>(off + i)];
    Sixd clean{1, 0, 0, 0, 1, 0};
    try {
      clean = rotation_to_6d(sixd_to_rotation(v));
    } catch (const Error&) {
    }
    for (int i = 0; i < 6; ++i) out[static_cast<std::size_t>(off + i)] = clean[static_cast<std::size_t>(i)];
  };
  for (int b = 0; b < kBodyBones; ++b) fix_block(kAngleOffset + 6 * b);
  for (int j = 0; j < kHandJoints; ++j) {
    fix_block(kLeftHandOffset + 6 * j);
    fix_block(kRightHandOffset + 6 * j);
  }
  for (int b = 0; b < kBodyBones; ++b) {
    double& len = out[static_cast<std::size_t>(kLengthOffset + b)];
    if (!(len >= 0.0)) len = 0.0;
  }
  for (int i = 0; i < 2; ++i) {
    double& r = out[static_cast<std::size_t>(kRootOffset + i)];
    r = std::min(1.0, std::max(0.0, std::isfinite(r) ? r : 0.5));
  }
  return out;
}

// ---------------------------------------------------------------------------
// canonical hand skeleton and forward kinematics

// FK joint order matches HandPose order; five fingertips are appended to
// give the 21-point set (indices 16..20, thumb..pinky).
struct HandSkeleton {
  std::array<int, kHandPoints> parent;
  std::array<Vec3, kHandPoints> offset;  // bone vector in the parent frame

  static HandSkeleton canonical() {
    HandSkeleton s;
    s.parent = {-1, 0, 1,  2,  0,  4,  5,  0,  7,  8, 0,
                10, 11, 0, 13, 14, 3,  6,  9,  12, 15};
    auto set = [&](int j, double x, double y, double z) {
      s.offset[static_cast<std::size_t>(j)] = {x, y, z};
    };
    set(0, 0, 0, 0);
    // metacarpal fan, fingers along +x, spread in y
    set(1, 0.030, 0.035, 0.0);   // thumb base
    set(4, 0.090, 0.025, 0.0);   // index knuckle
    set(7, 0.095, 0.000, 0.0);   // middle knuckle
    set(10, 0.090, -0.025, 0.0); // ring knuckle
    set(13, 0.080, -0.045, 0.0); // pinky knuckle
    // segment lengths
    const double prox = 0.035, mid = 0.025, tip = 0.020;
    for (int f = 0; f < 5; ++f) {
      const int base = 1 + 3 * f;
      set(base + 1, prox, 0, 0);
      set(base + 2, mid, 0, 0);
      set(16 + f, tip, 0, 0);
    }
    return s;
  }
};

// FK joints whose 2D projections correspond to the body palm anchors
// (index/middle/ring/pinky knuckles), plus the wrist at index 0.
constexpr std::array<int, 4> kPalmAnchorFkJoints = {4, 7, 10, 13};

inline std::array<Vec3, kHandPoints> hand_fk(const HandPose& pose,
                                             const HandSkeleton& skel = HandSkeleton::canonical(),
                                             double scale = 1.0) {
  std::array<Vec3, kHandPoints> pos;
  std::array<Mat3, kHandPoints> rot;
  const double mirror = pose.side == HandSide::kLeft ? -1.0 : 1.0;
  pos[0] = {0, 0, 0};
  rot[0] = pose.joint_rotations[0];
  for (int j = 1; j < kHandPoints; ++j) {
    const int p = skel.parent[static_cast<std::size_t>(j)];
    Vec3 off = skel.offset[static_cast<std::size_t>(j)];
    off.y *= mirror;  // left hand mirrors the finger fan
    pos[static_cast<std::size_t>(j)] = pos[static_cast<std::size_t>(p)] +
                                       rot[static_cast<std::size_t>(p)] * (off * scale);
    rot[static_cast<std::size_t>(j)] =
        j < kHandJoints ? rot[static_cast<std::size_t>(p)] * pose.joint_rotations[static_cast<std::size_t>(j)]
                        : rot[static_cast<std::size_t>(p)];
  }
  return pos;
}

}  // namespace coshdit
