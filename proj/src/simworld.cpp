#include "interagent/simworld.hpp"

#include <cmath>

namespace interagent::simworld {

namespace {

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

Mat3 yaw_rot(double yaw) { return axis_angle(Vec3::UnitZ(), yaw); }

}  // namespace

int BodySpec::dof_count() const {
  int n = 0;
  for (const auto& j : joints) n += static_cast<int>(j.axes.size());
  return n;
}

int BodySpec::dof_offset(int joint) const {
  int n = 0;
  for (int i = 0; i < joint; ++i) n += static_cast<int>(joints[static_cast<size_t>(i)].axes.size());
  return n;
}

std::vector<int> BodySpec::leaf_joints() const {
  std::vector<bool> has_child(joints.size(), false);
  for (const auto& j : joints)
    if (j.parent >= 0) has_child[static_cast<size_t>(j.parent)] = true;
  std::vector<int> leaves;
  for (size_t i = 0; i < joints.size(); ++i)
    if (!has_child[i]) leaves.push_back(static_cast<int>(i));
  return leaves;
}

double BodySpec::total_mass() const {
  double m = 0;
  for (double v : link_mass) m += v;
  return m;
}

void BodySpec::validate() const {
  if (joints.size() < 2) throw ConfigError("body spec needs at least 2 joints");
  if (joints[0].parent != -1) throw ConfigError("joint 0 must be the root");
  for (size_t i = 1; i < joints.size(); ++i) {
    const auto& j = joints[i];
    if (j.parent < 0 || j.parent >= static_cast<int>(i))
      throw ConfigError("topology must be a tree rooted at joint 0");
    if (j.lo.size() != j.axes.size() || j.hi.size() != j.axes.size())
      throw ConfigError("per-dof limit count mismatch");
  }
  if (link_mass.size() != joints.size()) throw ConfigError("one mass per joint required");
}

BodySpec desk_humanoid() {
  BodySpec s;
  auto lim3 = std::vector<double>{-2.8, -2.8, -2.8};
  auto lim3h = std::vector<double>{2.8, 2.8, 2.8};
  Joint root;
  Joint lsh{0, Vec3(0, 0.20, 0.25), {Vec3::UnitY(), Vec3::UnitX(), Vec3::UnitZ()}, lim3, lim3h};
  Joint rsh{0, Vec3(0, -0.20, 0.25), {Vec3::UnitY(), Vec3::UnitX(), Vec3::UnitZ()}, lim3, lim3h};
  Joint lel{1, Vec3(0, 0, -0.28), {Vec3::UnitY()}, {0.0}, {2.7}};
  Joint rel{2, Vec3(0, 0, -0.28), {Vec3::UnitY()}, {0.0}, {2.7}};
  s.joints = {root, lsh, rsh, lel, rel};
  s.link_mass = {3.0, 0.5, 0.5, 0.3, 0.3};
  s.validate();
  return s;
}

BodySpec paper_scale_humanoid() {
  BodySpec s;
  auto ball = std::vector<Vec3>{Vec3::UnitY(), Vec3::UnitX(), Vec3::UnitZ()};
  auto hinge = std::vector<Vec3>{Vec3::UnitY()};
  auto two = std::vector<Vec3>{Vec3::UnitY(), Vec3::UnitX()};
  auto lim = [](size_t n, double v) { return std::vector<double>(n, v); };
  auto J = [&](int parent, Vec3 off, std::vector<Vec3> axes) {
    Joint j;
    j.parent = parent;
    j.offset = off;
    j.lo = lim(axes.size(), -2.8);
    j.hi = lim(axes.size(), 2.8);
    j.axes = std::move(axes);
    return j;
  };
  // 15 joints, 28 actuated dofs: root and head carry no actuators.
  s.joints = {
      J(-1, Vec3(0, 0, 0), {}),                 // 0 root (pelvis)
      J(0, Vec3(0, 0, 0.15), ball),             // 1 spine
      J(1, Vec3(0, 0, 0.20), ball),             // 2 chest
      J(2, Vec3(0, 0, 0.15), two),              // 3 neck
      J(3, Vec3(0, 0, 0.12), {}),               // 4 head
      J(0, Vec3(0, 0.10, -0.05), ball),         // 5 left hip
      J(5, Vec3(0, 0, -0.40), hinge),           // 6 left knee
      J(6, Vec3(0, 0, -0.40), two),             // 7 left ankle
      J(0, Vec3(0, -0.10, -0.05), ball),        // 8 right hip
      J(8, Vec3(0, 0, -0.40), hinge),           // 9 right knee
      J(9, Vec3(0, 0, -0.40), two),             // 10 right ankle
      J(2, Vec3(0, 0.22, 0.05), ball),          // 11 left shoulder
      J(11, Vec3(0, 0, -0.28), hinge),          // 12 left elbow
      J(2, Vec3(0, -0.22, 0.05), ball),         // 13 right shoulder
      J(13, Vec3(0, 0, -0.28), hinge),          // 14 right elbow
  };
  s.link_mass = {8, 4, 4, 1, 2, 3, 2, 1, 3, 2, 1, 1.5, 1, 1.5, 1};
  s.stand_height = 0.95;
  s.validate();
  return s;
}

bool SimState::finite() const {
  return root_pos.allFinite() && std::isfinite(root_yaw) && root_linvel.allFinite() &&
         q.allFinite() && qd.allFinite() && std::isfinite(time);
}

SimState standing_state(const BodySpec& spec, const Vec3& root_xy_yaw) {
  SimState st;
  st.root_pos = Vec3(root_xy_yaw.x(), root_xy_yaw.y(), spec.stand_height);
  st.root_yaw = root_xy_yaw.z();
  st.q = Eigen::VectorXd::Zero(spec.dof_count());
  st.qd = Eigen::VectorXd::Zero(spec.dof_count());
  return st;
}

Eigen::VectorXd pd_torque(const Eigen::VectorXd& q, const Eigen::VectorXd& qd,
                          const Eigen::VectorXd& target, double kp, double kd,
                          double torque_limit) {
  if (q.size() != qd.size() || q.size() != target.size())
    throw DimensionError("pd_torque: q/qd/target length mismatch");
  Eigen::VectorXd tau = kp * (target - q) - kd * qd;
  return tau.cwiseMax(-torque_limit).cwiseMin(torque_limit);
}

AgentKinematics forward_kinematics(const SimState& state, const BodySpec& spec) {
  const int J = spec.joint_count();
  AgentKinematics kin;
  kin.pos.resize(static_cast<size_t>(J));
  kin.rot.resize(static_cast<size_t>(J));
  kin.linvel.resize(static_cast<size_t>(J));
  kin.angvel.resize(static_cast<size_t>(J));

  kin.pos[0] = state.root_pos;
  kin.rot[0] = yaw_rot(state.root_yaw);
  kin.linvel[0] = state.root_linvel;
  kin.angvel[0] = Vec3::Zero();  // root yaw is not a dynamic dof

  for (int j = 1; j < J; ++j) {
    const Joint& joint = spec.joints[static_cast<size_t>(j)];
    const int p = joint.parent;
    const Mat3& rp = kin.rot[static_cast<size_t>(p)];

    Mat3 local = Mat3::Identity();
    Vec3 w_local = Vec3::Zero();  // angular velocity of the local rotation
    int off = spec.dof_offset(j);
    for (size_t a = 0; a < joint.axes.size(); ++a) {
      w_local += local * (joint.axes[a] * state.qd(off + static_cast<int>(a)));
      local = local * axis_angle(joint.axes[a], state.q(off + static_cast<int>(a)));
    }

    kin.rot[static_cast<size_t>(j)] = rp * local;
    Vec3 arm = rp * joint.offset;
    kin.pos[static_cast<size_t>(j)] = kin.pos[static_cast<size_t>(p)] + arm;
    kin.angvel[static_cast<size_t>(j)] = kin.angvel[static_cast<size_t>(p)] + rp * w_local;
    kin.linvel[static_cast<size_t>(j)] =
        kin.linvel[static_cast<size_t>(p)] + kin.angvel[static_cast<size_t>(p)].cross(arm);
  }
  return kin;
}

std::vector<Vec3> site_positions(const AgentKinematics& kin, const BodySpec& spec) {
  std::vector<Vec3> sites;
  sites.push_back(kin.pos[0] + kin.rot[0] * Vec3(0, 0, -spec.stand_height));
  for (int leaf : spec.leaf_joints())
    sites.push_back(kin.pos[static_cast<size_t>(leaf)] +
                    kin.rot[static_cast<size_t>(leaf)] * spec.hand_offset);
  return sites;
}

std::pair<SimState, std::vector<bool>> ground_contact(const SimState& state,
                                                      const BodySpec& spec) {
  SimState out = state;
  AgentKinematics kin = forward_kinematics(state, spec);
  std::vector<Vec3> sites = site_positions(kin, spec);
  double lowest = 0.0;
  for (const Vec3& s : sites) lowest = std::min(lowest, s.z());
  if (lowest < 0.0) {
    out.root_pos.z() -= lowest;  // lift the whole body out of the ground
    out.root_linvel.z() = 0.0;
    for (Vec3& s : sites) s.z() -= lowest;
  }
  std::vector<bool> contact;
  contact.reserve(sites.size());
  for (const Vec3& s : sites) contact.push_back(s.z() <= kContactThreshold);
  return {out, contact};
}

SimState step(const SimState& state, const ActuatorCmd& cmd, const BodySpec& spec,
              double dt) {
  if (!(dt > 0)) throw ContractError("step: dt must be positive");
  if (cmd.target.size() != spec.dof_count())
    throw DimensionError("step: actuator command length mismatch");

  SimState next = state;
  Eigen::VectorXd tau =
      pd_torque(state.q, state.qd, cmd.target, spec.kp, spec.kd, spec.torque_limit);

  // semi-implicit Euler on unit-inertia joint dofs
  next.qd = state.qd + dt * (tau - spec.joint_damping * state.qd);
  next.q = state.q + dt * next.qd;

  // clamp to limits; a clamped dof loses its velocity
  int d = 0;
  for (const auto& joint : spec.joints) {
    for (size_t a = 0; a < joint.axes.size(); ++a, ++d) {
      if (next.q(d) < joint.lo[a]) {
        next.q(d) = joint.lo[a];
        next.qd(d) = 0.0;
      } else if (next.q(d) > joint.hi[a]) {
        next.q(d) = joint.hi[a];
        next.qd(d) = 0.0;
      }
    }
  }

  // root: gravity on the vertical axis, ballistic otherwise
  next.root_linvel.z() = state.root_linvel.z() - spec.gravity * dt;
  next.root_pos = state.root_pos + dt * next.root_linvel;
  next.time = state.time + dt;

  next = ground_contact(next, spec).first;
  if (!next.finite()) throw SimFault("simulation produced a non-finite state");
  return next;
}

double mechanical_energy(const SimState& state, const BodySpec& spec) {
  double e = 0.5 * state.qd.squaredNorm();  // unit-inertia rotational dofs
  double m = spec.total_mass();
  e += 0.5 * m * state.root_linvel.squaredNorm();
  e += m * spec.gravity * state.root_pos.z();
  return e;
}

void SimWorld::step_pair(const ActuatorCmd& cmd0, const ActuatorCmd& cmd1, double dt) {
  agents_[0] = step(agents_[0], cmd0, spec_, dt);
  agents_[1] = step(agents_[1], cmd1, spec_, dt);
}

}  // namespace interagent::simworld
