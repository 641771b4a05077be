#include "interagent/representation.hpp"

#include <cmath>

namespace interagent::representation {

using simworld::AgentKinematics;
using simworld::forward_kinematics;

Vec6 encode_rot6d(const Mat3& rot) {
  Vec6 v;
  v.head<3>() = rot.col(0);
  v.tail<3>() = rot.col(1);
  return v;
}

Mat3 decode_rot6d(const Vec6& v) {
  Vec3 a = v.head<3>(), b = v.tail<3>();
  constexpr double kTiny = 1e-8;
  if (a.norm() < kTiny) throw DataError("decode_rot6d: first column near zero");
  Vec3 c0 = a.normalized();
  Vec3 b_perp = b - c0.dot(b) * c0;
  if (b_perp.norm() < kTiny) throw DataError("decode_rot6d: columns are parallel");
  Vec3 c1 = b_perp.normalized();
  Mat3 rot;
  rot.col(0) = c0;
  rot.col(1) = c1;
  rot.col(2) = c0.cross(c1);
  return rot;
}

Mat3 heading_rot(double yaw) {
  return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
}

Eigen::VectorXd Proprio::flatten() const {
  const Eigen::Index j = local_rot_6d.rows();
  Eigen::VectorXd out(flat_size(static_cast<int>(j)));
  Eigen::Index at = 0;
  out(at++) = root_height;
  for (Eigen::Index r = 0; r < local_joint_pos.rows(); ++r)
    for (Eigen::Index c = 0; c < 3; ++c) out(at++) = local_joint_pos(r, c);
  for (Eigen::Index r = 0; r < j; ++r)
    for (Eigen::Index c = 0; c < 6; ++c) out(at++) = local_rot_6d(r, c);
  for (Eigen::Index r = 0; r < j; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) out(at++) = lin_vel(r, c);
  for (Eigen::Index r = 0; r < j; ++r)
    for (Eigen::Index c = 0; c < 3; ++c) out(at++) = ang_vel(r, c);
  return out;
}

Eigen::Index Extero::flat_size(ExteroKind kind, int joints) {
  if (kind == ExteroKind::RS) return Proprio::flat_size(joints);
  return 3 * static_cast<Eigen::Index>(joints) * joints;
}

namespace {

// Local rotation of joint j relative to its parent, from the dof angles.
Mat3 local_rotation(const SimState& state, const BodySpec& spec, int j) {
  const auto& joint = spec.joints[static_cast<size_t>(j)];
  Mat3 local = Mat3::Identity();
  int off = spec.dof_offset(j);
  for (size_t a = 0; a < joint.axes.size(); ++a)
    local = local * Eigen::AngleAxisd(state.q(off + static_cast<int>(a)), joint.axes[a])
                        .toRotationMatrix();
  return local;
}

}  // namespace

AgentFrame make_frame(const SimState& state, const BodySpec& spec) {
  AgentKinematics kin = forward_kinematics(state, spec);
  AgentFrame f;
  f.root_pos = state.root_pos;
  f.root_yaw = state.root_yaw;
  f.pos = std::move(kin.pos);
  f.rot = std::move(kin.rot);
  f.linvel = std::move(kin.linvel);
  f.angvel = std::move(kin.angvel);
  return f;
}

AgentFrame frame_from_proprio(const Eigen::VectorXd& flat, const BodySpec& spec,
                              const Vec3& root_xy_yaw) {
  const int j = spec.joint_count();
  DecodedPose pose = decode_proprio(flat, spec);
  const double yaw = root_xy_yaw.z();
  const double root_h = flat(0);
  Mat3 head = heading_rot(yaw);

  AgentFrame f;
  f.root_yaw = yaw;
  f.root_pos = Vec3(root_xy_yaw.x(), root_xy_yaw.y(), root_h);
  f.pos.resize(static_cast<size_t>(j));
  f.rot.resize(static_cast<size_t>(j));
  f.linvel.resize(static_cast<size_t>(j));
  f.angvel.resize(static_cast<size_t>(j));
  const Eigen::Index vel_at = 1 + 3 * (j - 1) + 6 * j;
  for (int k = 0; k < j; ++k) {
    Vec3 local = pose.joint_pos[static_cast<size_t>(k)] - Vec3(0, 0, root_h);
    f.pos[static_cast<size_t>(k)] = f.root_pos + head * local;
    f.rot[static_cast<size_t>(k)] = head * pose.joint_rot[static_cast<size_t>(k)];
    f.linvel[static_cast<size_t>(k)] = head * Vec3(flat.segment<3>(vel_at + 3 * k));
    f.angvel[static_cast<size_t>(k)] = head * Vec3(flat.segment<3>(vel_at + 3 * j + 3 * k));
  }
  return f;
}

Proprio encode_proprio(const SimState& state, const BodySpec& spec) {
  const int j = spec.joint_count();
  if (j < 2) throw ConfigError("encode_proprio: at least 2 joints required");
  AgentKinematics kin = forward_kinematics(state, spec);
  Mat3 inv_head = heading_rot(state.root_yaw).transpose();

  Proprio p;
  p.root_height = state.root_pos.z();
  p.local_joint_pos.resize(j - 1, 3);
  p.local_rot_6d.resize(j, 6);
  p.lin_vel.resize(j, 3);
  p.ang_vel.resize(j, 3);

  for (int k = 1; k < j; ++k)
    p.local_joint_pos.row(k - 1) =
        (inv_head * (kin.pos[static_cast<size_t>(k)] - state.root_pos)).transpose();

  // root rotation relative to the heading frame is identity by construction
  p.local_rot_6d.row(0) = encode_rot6d(Mat3::Identity()).transpose();
  for (int k = 1; k < j; ++k)
    p.local_rot_6d.row(k) = encode_rot6d(local_rotation(state, spec, k)).transpose();

  for (int k = 0; k < j; ++k) {
    p.lin_vel.row(k) = (inv_head * kin.linvel[static_cast<size_t>(k)]).transpose();
    p.ang_vel.row(k) = (inv_head * kin.angvel[static_cast<size_t>(k)]).transpose();
  }
  return p;
}

Mat fig_world_edges(const SimState& ego, const SimState& other, const BodySpec& spec) {
  const int j = spec.joint_count();
  AgentKinematics ke = forward_kinematics(ego, spec);
  AgentKinematics ko = forward_kinematics(other, spec);
  Mat edges(static_cast<Eigen::Index>(j) * j, 3);
  for (int i = 0; i < j; ++i)
    for (int k = 0; k < j; ++k)
      edges.row(i * j + k) =
          (ko.pos[static_cast<size_t>(i)] - ke.pos[static_cast<size_t>(k)]).transpose();
  return edges;
}

Extero build_fig(const SimState& ego, const SimState& other, const BodySpec& spec) {
  return build_fig(make_frame(ego, spec), make_frame(other, spec));
}

Extero build_fig(const AgentFrame& ego, const AgentFrame& other) {
  const int j = static_cast<int>(ego.pos.size());
  Mat3 inv_head = heading_rot(ego.root_yaw).transpose();
  Extero e;
  e.kind = ExteroKind::FIG;
  e.values.resize(3 * static_cast<Eigen::Index>(j) * j);
  for (int i = 0; i < j; ++i)
    for (int k = 0; k < j; ++k)
      e.values.segment<3>(3 * (i * j + k)) =
          inv_head * (other.pos[static_cast<size_t>(i)] - ego.pos[static_cast<size_t>(k)]);
  return e;
}

Extero build_rs(const SimState& ego, const SimState& other, const BodySpec& spec) {
  return build_rs(make_frame(ego, spec), make_frame(other, spec), spec);
}

Extero build_rs(const AgentFrame& ego, const AgentFrame& other, const BodySpec& spec) {
  const int j = spec.joint_count();
  Mat3 inv_head = heading_rot(ego.root_yaw).transpose();

  Proprio p;
  p.root_height = other.root_pos.z();
  p.local_joint_pos.resize(j - 1, 3);
  p.local_rot_6d.resize(j, 6);
  p.lin_vel.resize(j, 3);
  p.ang_vel.resize(j, 3);

  for (int k = 1; k < j; ++k)
    p.local_joint_pos.row(k - 1) =
        (inv_head * (other.pos[static_cast<size_t>(k)] - ego.root_pos)).transpose();

  // the other agent's root facing, relative to the ego heading
  p.local_rot_6d.row(0) = encode_rot6d(inv_head * heading_rot(other.root_yaw)).transpose();
  for (int k = 1; k < j; ++k) {
    const int parent = spec.joints[static_cast<size_t>(k)].parent;
    Mat3 local = other.rot[static_cast<size_t>(parent)].transpose() * other.rot[static_cast<size_t>(k)];
    p.local_rot_6d.row(k) = encode_rot6d(local).transpose();
  }

  for (int k = 0; k < j; ++k) {
    p.lin_vel.row(k) = (inv_head * other.linvel[static_cast<size_t>(k)]).transpose();
    p.ang_vel.row(k) = (inv_head * other.angvel[static_cast<size_t>(k)]).transpose();
  }

  Extero e;
  e.kind = ExteroKind::RS;
  e.values = p.flatten();
  return e;
}

Extero build_extero(ExteroKind kind, const AgentFrame& ego, const AgentFrame& other,
                    const BodySpec& spec) {
  if (kind == ExteroKind::RS) return build_rs(ego, other, spec);
  Extero e = build_fig(ego, other);
  e.kind = kind;
  return e;
}

NormStats fit_norm(const Mat& rows) {
  if (rows.rows() == 0) throw DataError("fit_norm: empty dataset");
  NormStats s;
  s.mean = rows.colwise().mean().transpose();
  Eigen::VectorXd var =
      (rows.rowwise() - s.mean.transpose()).array().square().colwise().mean().transpose();
  s.std = var.array().sqrt().max(NormStats::kStdFloor);
  return s;
}

Eigen::VectorXd normalize(const Eigen::VectorXd& x, const NormStats& stats) {
  return (x - stats.mean).cwiseQuotient(stats.std);
}

Eigen::VectorXd denormalize(const Eigen::VectorXd& x, const NormStats& stats) {
  return x.cwiseProduct(stats.std) + stats.mean;
}

Mat normalize_rows(const Mat& x, const NormStats& stats) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = normalize(x.row(r).transpose(), stats).transpose();
  return out;
}

Mat denormalize_rows(const Mat& x, const NormStats& stats) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = denormalize(x.row(r).transpose(), stats).transpose();
  return out;
}

DecodedPose decode_proprio(const Eigen::VectorXd& flat, const BodySpec& spec) {
  const int j = spec.joint_count();
  if (flat.size() != Proprio::flat_size(j))
    throw DimensionError("decode_proprio: length does not match the body spec");
  DecodedPose pose;
  pose.joint_pos.resize(static_cast<size_t>(j));
  pose.joint_rot.resize(static_cast<size_t>(j));
  const double root_h = flat(0);
  pose.joint_pos[0] = Vec3(0, 0, root_h);
  for (int k = 1; k < j; ++k) {
    Vec3 rel = flat.segment<3>(1 + 3 * (k - 1));
    pose.joint_pos[static_cast<size_t>(k)] = rel + Vec3(0, 0, root_h);
  }
  const Eigen::Index rot_at = 1 + 3 * (j - 1);
  for (int k = 0; k < j; ++k) {
    Vec6 v = flat.segment<6>(rot_at + 6 * k);
    Mat3 local = decode_rot6d(v);
    if (k == 0)
      pose.joint_rot[0] = local;
    else
      pose.joint_rot[static_cast<size_t>(k)] =
          pose.joint_rot[static_cast<size_t>(spec.joints[static_cast<size_t>(k)].parent)] * local;
  }
  return pose;
}

std::vector<Vec3> decoded_site_positions(const DecodedPose& pose, const BodySpec& spec) {
  std::vector<Vec3> sites;
  sites.push_back(pose.joint_pos[0] + pose.joint_rot[0] * Vec3(0, 0, -spec.stand_height));
  for (int leaf : spec.leaf_joints())
    sites.push_back(pose.joint_pos[static_cast<size_t>(leaf)] +
                    pose.joint_rot[static_cast<size_t>(leaf)] * spec.hand_offset);
  return sites;
}

}  // namespace interagent::representation
