#pragma once

#include <array>
#include <vector>

#include "interagent/numerics.hpp"

namespace interagent::simworld {

// Deterministic toy dynamics for an articulated humanoid: per-dof unit-inertia
// rotational joints plus a root with gravity on the vertical axis. Ground
// support comes from clamping the body's contact sites, not from a contact
// solver. This is intentionally NOT rigid-body-accurate; it preserves the
// state/action/PD interface of a physics humanoid at a tiny fraction of the
// cost.

struct Joint {
  int parent = -1;                // -1 only for the root
  Vec3 offset = Vec3::Zero();     // from parent joint, in the parent frame
  std::vector<Vec3> axes;         // actuated dof axes, composed in order
  std::vector<double> lo, hi;     // per-dof angle limits
};

struct BodySpec {
  std::vector<Joint> joints;
  std::vector<double> link_mass;
  double kp = 120.0;
  double kd = 26.0;
  double joint_damping = 0.5;
  double torque_limit = 200.0;
  double gravity = 9.81;
  double stand_height = 0.9;             // root height with the base site on the ground
  Vec3 hand_offset = Vec3(0, 0, -0.26);  // contact site on each leaf joint

  int joint_count() const { return static_cast<int>(joints.size()); }
  int dof_count() const;
  int dof_offset(int joint) const;  // first dof index of a joint
  std::vector<int> leaf_joints() const;
  double total_mass() const;
  void validate() const;  // tree rooted at joint 0, sane sizes
};

/// Desk-scale humanoid: root plus two 2-link arms, 8 actuated dofs.
BodySpec desk_humanoid();
/// 15-joint / 28-actuator humanoid matching the full-scale layout.
BodySpec paper_scale_humanoid();

/// Generalized coordinates of one agent.
struct SimState {
  Vec3 root_pos = Vec3::Zero();
  double root_yaw = 0.0;
  Vec3 root_linvel = Vec3::Zero();
  Eigen::VectorXd q;   // per actuated dof
  Eigen::VectorXd qd;  // per actuated dof
  double time = 0.0;

  bool finite() const;
};

/// Target joint angles for the PD actuators.
struct ActuatorCmd {
  Eigen::VectorXd target;  // length == dof count
};

/// World-frame pose and velocity of every joint, root to leaves.
struct AgentKinematics {
  std::vector<Vec3> pos;
  std::vector<Mat3> rot;
  std::vector<Vec3> linvel;
  std::vector<Vec3> angvel;
};

/// Initial standing state for a given spec.
SimState standing_state(const BodySpec& spec, const Vec3& root_xy_yaw = Vec3::Zero());

Eigen::VectorXd pd_torque(const Eigen::VectorXd& q, const Eigen::VectorXd& qd,
                          const Eigen::VectorXd& target, double kp, double kd,
                          double torque_limit);

AgentKinematics forward_kinematics(const SimState& state, const BodySpec& spec);

/// Contact site positions: site 0 sits under the root (the "base"), the rest
/// are the leaf-joint hand sites.
std::vector<Vec3> site_positions(const AgentKinematics& kin, const BodySpec& spec);

/// Clamp the body above the ground plane and report per-site contact flags
/// (height <= 5 mm counts as contact).
std::pair<SimState, std::vector<bool>> ground_contact(const SimState& state,
                                                      const BodySpec& spec);

/// One semi-implicit Euler step of a single agent.
SimState step(const SimState& state, const ActuatorCmd& cmd, const BodySpec& spec,
              double dt);

constexpr double kGravity = 9.81;
constexpr double kContactThreshold = 0.005;  // m
constexpr double kDefaultDt = 1.0 / 30.0;

/// Kinetic + potential energy of the toy dynamics (unit-inertia joints plus
/// the root point mass). Used by stability audits.
double mechanical_energy(const SimState& state, const BodySpec& spec);

/// Two agents sharing a clock. Agents do not collide with each other.
class SimWorld {
 public:
  SimWorld(BodySpec spec, SimState a0, SimState a1)
      : spec_(std::move(spec)), agents_{std::move(a0), std::move(a1)} {}

  const BodySpec& spec() const { return spec_; }
  const SimState& agent(int i) const { return agents_[static_cast<size_t>(i)]; }
  SimState& agent(int i) { return agents_[static_cast<size_t>(i)]; }
  double time() const { return agents_[0].time; }

  void step_pair(const ActuatorCmd& cmd0, const ActuatorCmd& cmd1, double dt);

 private:
  BodySpec spec_;
  std::array<SimState, 2> agents_;
};

}  // namespace interagent::simworld
