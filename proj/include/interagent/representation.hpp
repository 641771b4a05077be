#pragma once

#include <vector>

#include "interagent/simworld.hpp"

namespace interagent::representation {

using simworld::BodySpec;
using simworld::SimState;

// Behavior encodings. All quantities are expressed in the agent's heading
// frame: the root frame reduced to its rotation about the vertical axis, so
// pitch/roll disturbances never leak into the encodings.

using Vec6 = Eigen::Matrix<double, 6, 1>;

/// First two columns of the rotation matrix.
Vec6 encode_rot6d(const Mat3& rot);
/// Gram-Schmidt the two 3-vectors, third column by cross product.
/// Throws DataError when the inputs are parallel or near zero.
Mat3 decode_rot6d(const Vec6& v);

Mat3 heading_rot(double yaw);

struct Proprio {
  double root_height = 0.0;
  Mat local_joint_pos;  // (J-1) x 3, root excluded
  Mat local_rot_6d;     // J x 6
  Mat lin_vel;          // J x 3
  Mat ang_vel;          // J x 3

  Eigen::VectorXd flatten() const;
  static Eigen::Index flat_size(int joints) { return 1 + 3 * (joints - 1) + 12 * joints; }
};

enum class ExteroKind { RS, FIG, SIG };

struct Extero {
  ExteroKind kind = ExteroKind::FIG;
  Eigen::VectorXd values;

  /// RS mirrors the Proprio layout; FIG and SIG carry 3*J^2 edge values.
  static Eigen::Index flat_size(ExteroKind kind, int joints);
};

/// World-frame kinematic snapshot of one agent. The common currency between
/// live simulator states and replayed proprio frames.
struct AgentFrame {
  Vec3 root_pos = Vec3::Zero();
  double root_yaw = 0.0;
  std::vector<Vec3> pos;
  std::vector<Mat3> rot;  // world rotations
  std::vector<Vec3> linvel;
  std::vector<Vec3> angvel;
};

AgentFrame make_frame(const SimState& state, const BodySpec& spec);

/// Reconstruct a world-frame snapshot from a flattened proprio vector and a
/// root placement (x, y, yaw). The height comes from the frame itself.
AgentFrame frame_from_proprio(const Eigen::VectorXd& flat, const BodySpec& spec,
                              const Vec3& root_xy_yaw);

Proprio encode_proprio(const SimState& state, const BodySpec& spec);

/// Directed edges from every ego joint to every joint of the other agent,
/// e_ij = p_i(other) - p_j(ego), rotated into the ego heading frame. The
/// flattened order is other-joint major: (e_11, e_12, ..., e_JJ).
Extero build_fig(const SimState& ego, const SimState& other, const BodySpec& spec);
Extero build_fig(const AgentFrame& ego, const AgentFrame& other);

/// Same edges in world coordinates, before the heading rotation.
Mat fig_world_edges(const SimState& ego, const SimState& other, const BodySpec& spec);

/// The other agent's Proprio-layout state re-expressed in the ego frame.
Extero build_rs(const SimState& ego, const SimState& other, const BodySpec& spec);
Extero build_rs(const AgentFrame& ego, const AgentFrame& other, const BodySpec& spec);

/// Extero of the configured kind (SIG shares the FIG representation).
Extero build_extero(ExteroKind kind, const AgentFrame& ego, const AgentFrame& other,
                    const BodySpec& spec);

struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // floored at kStdFloor

  static constexpr double kStdFloor = 1e-6;
};

/// Per-dimension statistics over dataset rows. Throws DataError when empty.
NormStats fit_norm(const Mat& rows);
Eigen::VectorXd normalize(const Eigen::VectorXd& x, const NormStats& stats);
Eigen::VectorXd denormalize(const Eigen::VectorXd& x, const NormStats& stats);
Mat normalize_rows(const Mat& x, const NormStats& stats);
Mat denormalize_rows(const Mat& x, const NormStats& stats);

/// Joint placement reconstructed from a flattened proprio vector: positions in
/// the heading frame with ground-true heights. Used by the evaluation path,
/// which only sees behavior frames.
struct DecodedPose {
  std::vector<Vec3> joint_pos;
  std::vector<Mat3> joint_rot;
};

DecodedPose decode_proprio(const Eigen::VectorXd& flat, const BodySpec& spec);
std::vector<Vec3> decoded_site_positions(const DecodedPose& pose, const BodySpec& spec);

}  // namespace interagent::representation
