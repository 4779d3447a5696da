#pragma once

// Geometric-aware alignment: fit a per-frame camera-space translation so the
// projected 3D hand joints land on their 2D image points, with a temporal
// penalty on the depth component between consecutive frames.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cosh/error.hpp"
#include "cosh/gesture.hpp"
#include "cosh/optim.hpp"
#include "cosh/rotation.hpp"

namespace coshdit {

class BehindCameraError : public Error {
 public:
  using Error::Error;
};

struct HandTranslation {
  double x = 0, y = 0, z = 0;
};

// Thrown when the optimizer walks a point to non-positive depth; carries the
// last iterate that still projected validly.
class ProjectedDepthError : public Error {
 public:
  ProjectedDepthError(const std::string& msg, HandTranslation last)
      : Error(msg), last_valid(last) {}
  HandTranslation last_valid;
};

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ValidationError("intrinsics: focal lengths must be positive");
  }
};

struct AlignmentFrame {
  std::vector<Vec3> joints_3d;
  std::vector<Vec2> joints_2d;
};

struct AlignmentProblem {
  std::vector<AlignmentFrame> frames;
  CameraIntrinsics intrinsics;
  double lambda_tr = 10.0;

  void validate() const {
    intrinsics.validate();
    if (lambda_tr < 0) throw ValidationError("alignment: lambda_tr must be non-negative");
    if (frames.empty()) throw ValidationError("alignment: no frames");
    for (const AlignmentFrame& f : frames) {
      if (f.joints_3d.size() != f.joints_2d.size())
        throw ValidationError("alignment: 3D/2D joint counts differ");
      if (f.joints_3d.empty()) throw DegenerateInputError("alignment: frame without joints");
    }
  }
};

inline Vec2 project_point(const Vec3& p, const HandTranslation& t, const CameraIntrinsics& cam) {
  const double depth = p.z + t.z;
  if (!(depth > 1e-6)) throw BehindCameraError("project_point: non-positive depth");
  return {cam.fx * (p.x + t.x) / depth + cam.cx, cam.fy * (p.y + t.y) / depth + cam.cy};
}

struct AlignResult {
  HandTranslation translation;
  double loss = 0;    // objective value (includes the temporal term when active)
  double rms_px = 0;  // sqrt(mean squared pixel residual) at the returned translation
};

namespace detail {

struct LossGrad {
  double loss = 0;      // reprojection part, mean over joints
  double gx = 0, gy = 0, gz = 0;
};

inline LossGrad reprojection_loss_grad(const AlignmentFrame& f, const CameraIntrinsics& cam,
                                       const HandTranslation& t) {
  LossGrad r;
  const std::size_t n = f.joints_3d.size();
  for (std::size_t k = 0; k < n; ++k) {
    const Vec3& p = f.joints_3d[k];
    const double z = p.z + t.z;
    if (!(z > 1e-6)) throw BehindCameraError("alignment: joint behind camera");
    const double x = p.x + t.x, y = p.y + t.y;
    const double u = cam.fx * x / z + cam.cx;
    const double v = cam.fy * y / z + cam.cy;
    const double ru = u - f.joints_2d[k].x;
    const double rv = v - f.joints_2d[k].y;
    r.loss += ru * ru + rv * rv;
    r.gx += 2.0 * ru * cam.fx / z;
    r.gy += 2.0 * rv * cam.fy / z;
    r.gz += -2.0 * (ru * cam.fx * x + rv * cam.fy * y) / (z * z);
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.loss *= inv;
  r.gx *= inv;
  r.gy *= inv;
  r.gz *= inv;
  return r;
}

}  // namespace detail

// Estimate the depth offset by matching the projected x/y extent of the 3D
// joints to the 2D extent (similar triangles); avoids the behind-camera
// basin. X/Y start at zero.
inline HandTranslation initial_translation_estimate(const AlignmentFrame& f,
                                                    const CameraIntrinsics& cam) {
  double min3x = 1e300, max3x = -1e300, min3y = 1e300, max3y = -1e300;
  double min2x = 1e300, max2x = -1e300, min2y = 1e300, max2y = -1e300;
  double zsum = 0, zmin = 1e300;
  for (std::size_t k = 0; k < f.joints_3d.size(); ++k) {
    const Vec3& p = f.joints_3d[k];
    min3x = std::min(min3x, p.x); max3x = std::max(max3x, p.x);
    min3y = std::min(min3y, p.y); max3y = std::max(max3y, p.y);
    zsum += p.z;
    zmin = std::min(zmin, p.z);
    min2x = std::min(min2x, f.joints_2d[k].x); max2x = std::max(max2x, f.joints_2d[k].x);
    min2y = std::min(min2y, f.joints_2d[k].y); max2y = std::max(max2y, f.joints_2d[k].y);
  }
  const double ext2x = max2x - min2x, ext2y = max2y - min2y;
  double depth;
  if (ext2x >= ext2y && ext2x > 1e-9)
    depth = cam.fx * (max3x - min3x) / ext2x;
  else if (ext2y > 1e-9)
    depth = cam.fy * (max3y - min3y) / ext2y;
  else
    depth = std::max(cam.fx, cam.fy) * 1e-3;  // single point: arbitrary positive depth
  const double zmean = zsum / static_cast<double>(f.joints_3d.size());
  HandTranslation t;
  t.z = depth - zmean;
  if (zmin + t.z < 1e-3) t.z = 1e-3 - zmin;  // keep every joint in front of the camera
  return t;
}

// Adam descent on the 3-vector. With a single correspondence the problem is
// under-determined: the residual still goes to zero but the recovered
// translation is not unique.
inline AlignResult align_frame(const AlignmentFrame& f, const CameraIntrinsics& cam,
                               HandTranslation init, int iterations, double lambda_tr = 0.0,
                               const HandTranslation* prev = nullptr) {
  cam.validate();
  if (f.joints_3d.size() != f.joints_2d.size())
    throw ValidationError("align_frame: 3D/2D joint counts differ");
  if (f.joints_3d.empty()) throw DegenerateInputError("align_frame: no correspondences");

  auto total = [&](const HandTranslation& t) {
    detail::LossGrad lg = detail::reprojection_loss_grad(f, cam, t);
    if (prev) {
      const double dz = t.z - prev->z;
      lg.loss += lambda_tr * dz * dz;
      lg.gz += 2.0 * lambda_tr * dz;
    }
    return lg;
  };

  Var p = parameter(Tensor({3}, {init.x, init.y, init.z}));
  p->ensure_grad();
  Adam opt({p}, {.lr = 0.01});

  HandTranslation cur = init;
  detail::LossGrad lg = total(cur);  // throws BehindCameraError if init is invalid
  HandTranslation best = cur, last_valid = cur;
  double best_loss = lg.loss;

  for (int it = 0; it < iterations; ++it) {
    p->grad[0] = lg.gx;
    p->grad[1] = lg.gy;
    p->grad[2] = lg.gz;
    opt.step();
    cur = {p->value[0], p->value[1], p->value[2]};
    try {
      lg = total(cur);
    } catch (const BehindCameraError&) {
      throw ProjectedDepthError("align_frame: optimizer reached non-positive depth",
                                last_valid);
    }
    last_valid = cur;
    if (lg.loss < best_loss) {
      best_loss = lg.loss;
      best = cur;
    }
  }

  AlignResult out;
  out.translation = best;
  out.loss = best_loss;
  out.rms_px = std::sqrt(detail::reprojection_loss_grad(f, cam, best).loss);
  return out;
}

// Frame 0: fresh similar-triangles start, 500 iterations, no temporal term.
// Later frames: warm start from the previous result, 250 iterations, with
// lambda_tr pulling the depth toward the previous frame's depth.
inline std::vector<AlignResult> align_sequence(const AlignmentProblem& problem,
                                               int first_frame_iterations = 500,
                                               int later_frame_iterations = 250) {
  problem.validate();
  std::vector<AlignResult> results;
  results.reserve(problem.frames.size());
  for (std::size_t i = 0; i < problem.frames.size(); ++i) {
    if (i == 0) {
      const HandTranslation init =
          initial_translation_estimate(problem.frames[0], problem.intrinsics);
      results.push_back(
          align_frame(problem.frames[0], problem.intrinsics, init, first_frame_iterations));
    } else {
      const HandTranslation prev = results.back().translation;
      results.push_back(align_frame(problem.frames[i], problem.intrinsics, prev,
                                    later_frame_iterations, problem.lambda_tr, &prev));
    }
  }
  return results;
}

}  // namespace coshdit
