#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "interagent/representation.hpp"
#include "oracle_helpers.hpp"

using namespace interagent;
using namespace interagent::representation;
using simworld::BodySpec;
using simworld::Joint;
using simworld::SimState;

namespace {

// Random proper rotation via axis-angle (independent of the codec under test).
Mat3 random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 axis(u(rng), u(rng), u(rng));
  while (axis.norm() < 1e-3) axis = Vec3(u(rng), u(rng), u(rng));
  std::uniform_real_distribution<double> a(-M_PI, M_PI);
  return Eigen::AngleAxisd(a(rng), axis.normalized()).toRotationMatrix();
}

// Chain body with a configurable joint count, for dimension sweeps.
BodySpec chain_spec(int joints) {
  BodySpec s;
  s.joints.push_back(Joint{});
  for (int j = 1; j < joints; ++j) {
    Joint link{j - 1, Vec3(0.15, 0.02 * j, -0.05), {Vec3::UnitY()}, {-2.8}, {2.8}};
    s.joints.push_back(link);
  }
  s.link_mass.assign(static_cast<size_t>(joints), 1.0);
  return s;
}

SimState random_state(std::mt19937_64& rng, const BodySpec& spec) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SimState st = simworld::standing_state(spec);
  st.root_pos = Vec3(u(rng), u(rng), 0.8 + 0.3 * std::abs(u(rng)));
  st.root_yaw = 2.0 * u(rng);
  st.root_linvel = Vec3(u(rng), u(rng), u(rng));
  for (int d = 0; d < spec.dof_count(); ++d) {
    st.q(d) = u(rng);
    st.qd(d) = u(rng);
  }
  return st;
}

// Rigid world motion preserving the ground plane: yaw plus xy translation.
SimState world_moved(const SimState& st, double yaw, const Vec3& t_xy) {
  Mat3 r = heading_rot(yaw);
  SimState out = st;
  out.root_pos = r * st.root_pos + Vec3(t_xy.x(), t_xy.y(), 0.0);
  out.root_yaw = st.root_yaw + yaw;
  out.root_linvel = r * st.root_linvel;
  return out;
}

}  // namespace

TEST_CASE("rot6d encode of identity") {
  Vec6 v = encode_rot6d(Mat3::Identity());
  Vec6 want;
  want << 1, 0, 0, 0, 1, 0;
  CHECK((v - want).norm() == 0.0);
}

TEST_CASE("rot6d decode removes scale via Gram-Schmidt") {
  Vec6 v;
  v << 2, 0, 0, 0, 3, 0;
  CHECK((decode_rot6d(v) - Mat3::Identity()).norm() <= 1e-15);
}

TEST_CASE("rot6d roundtrip on 100 random rotations") {
  std::mt19937_64 rng(41);
  for (int i = 0; i < 100; ++i) {
    Mat3 r = random_rotation(rng);
    Mat3 back = decode_rot6d(encode_rot6d(r));
    CHECK((back - r).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("rot6d decode of degenerate input throws") {
  Vec6 zero = Vec6::Zero();
  CHECK_THROWS_AS(decode_rot6d(zero), DataError);
  Vec6 par;
  par << 1, 0, 0, 2, 0, 0;
  CHECK_THROWS_AS(decode_rot6d(par), DataError);
}

TEST_CASE("rot6d decode is always a proper rotation, even off-manifold") {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    Vec6 v;
    for (int k = 0; k < 6; ++k) v(k) = u(rng);
    Mat3 r;
    try {
      r = decode_rot6d(v);
    } catch (const DataError&) {
      continue;  // legitimately degenerate draw
    }
    CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(std::abs(r.determinant() - 1.0) <= 1e-9);
  }
}

TEST_CASE("proprio flat size: 223 at J=15") {
  CHECK(Proprio::flat_size(15) == 223);
  BodySpec s = simworld::paper_scale_humanoid();
  SimState st = simworld::standing_state(s);
  CHECK(encode_proprio(st, s).flatten().size() == 223);
}

TEST_CASE("proprio of an agent at rest") {
  BodySpec s = simworld::desk_humanoid();
  SimState st = simworld::standing_state(s);
  st.root_pos.z() = 0.9;
  Proprio p = encode_proprio(st, s);
  CHECK(p.root_height == doctest::Approx(0.9));
  CHECK(p.lin_vel.cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.ang_vel.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("proprio is invariant to world yaw and translation") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 10; ++trial) {
    SimState st = random_state(rng, s);
    SimState moved = world_moved(st, 37.0 * M_PI / 180.0, Vec3(1.3, -0.6, 0));
    Eigen::VectorXd a = encode_proprio(st, s).flatten();
    Eigen::VectorXd b = encode_proprio(moved, s).flatten();
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("FIG flat length is 3 J^2 for J in 2..15") {
  std::mt19937_64 rng(53);
  for (int j = 2; j <= 15; ++j) {
    BodySpec s = chain_spec(j);
    SimState a = random_state(rng, s), b = random_state(rng, s);
    Extero e = build_fig(a, b, s);
    CHECK(e.values.size() == 3 * j * j);
    CHECK(Extero::flat_size(ExteroKind::FIG, j) == 3 * j * j);
  }
}

TEST_CASE("FIG: paper-scale edge counts") {
  BodySpec s = simworld::paper_scale_humanoid();
  SimState a = simworld::standing_state(s), b = simworld::standing_state(s, Vec3(1, 0, 0));
  Extero e = build_fig(a, b, s);
  CHECK(e.values.size() == 675);  // 225 edges, 3 values each
}

TEST_CASE("FIG diagonal edges vanish for exactly overlapped skeletons") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(59);
  SimState a = random_state(rng, s);
  Extero e = build_fig(a, a, s);
  const int j = s.joint_count();
  for (int i = 0; i < j; ++i)
    CHECK(e.values.segment<3>(3 * (i * j + i)).norm() == 0.0);
}

TEST_CASE("FIG world-frame edge antisymmetry is exact") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 10; ++trial) {
    SimState a = random_state(rng, s), b = random_state(rng, s);
    Mat ea = fig_world_edges(a, b, s);
    Mat eb = fig_world_edges(b, a, s);
    const int j = s.joint_count();
    for (int i = 0; i < j; ++i)
      for (int k = 0; k < j; ++k)
        CHECK((ea.row(i * j + k) + eb.row(k * j + i)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("FIG norm symmetry across the two agents' graphs") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(67);
  SimState a = random_state(rng, s), b = random_state(rng, s);
  Extero ea = build_fig(a, b, s), eb = build_fig(b, a, s);
  const int j = s.joint_count();
  for (int i = 0; i < j; ++i)
    for (int k = 0; k < j; ++k) {
      double na = ea.values.segment<3>(3 * (i * j + k)).norm();
      double nb = eb.values.segment<3>(3 * (k * j + i)).norm();
      CHECK(std::abs(na - nb) <= 1e-12);
    }
}

TEST_CASE("FIG is invariant under a common rigid world motion") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(71);
  SimState a = random_state(rng, s), b = random_state(rng, s);
  Extero e1 = build_fig(a, b, s);
  Extero e2 = build_fig(world_moved(a, 0.9, Vec3(2, 1, 0)), world_moved(b, 0.9, Vec3(2, 1, 0)), s);
  CHECK((e1.values - e2.values).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("RS layout matches proprio; identity-frame equality") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(73);
  SimState ego = random_state(rng, s), other = random_state(rng, s);
  Extero rs = build_rs(ego, other, s);
  CHECK(rs.values.size() == Proprio::flat_size(s.joint_count()));

  // ego frame == world frame
  ego.root_yaw = 0.0;
  rs = build_rs(ego, other, s);
  auto kin = simworld::forward_kinematics(other, s);
  for (int k = 1; k < s.joint_count(); ++k) {
    Vec3 want = kin.pos[static_cast<size_t>(k)] - ego.root_pos;
    Vec3 got = rs.values.segment<3>(1 + 3 * (k - 1));
    CHECK((want - got).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("RS is invariant under a common rigid world motion") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(79);
  SimState ego = random_state(rng, s), other = random_state(rng, s);
  Extero r1 = build_rs(ego, other, s);
  Extero r2 = build_rs(world_moved(ego, -1.1, Vec3(-3, 0.5, 0)),
                       world_moved(other, -1.1, Vec3(-3, 0.5, 0)), s);
  CHECK((r1.values - r2.values).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("normalization: roundtrip, constant column, recomputed stats") {
  std::mt19937_64 rng(83);
  Mat rows = ia_test::random_mat(rng, 64, 9, -3, 3);
  rows.col(4).setConstant(2.5);  // constant feature
  NormStats stats = fit_norm(rows);

  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd x = ia_test::random_mat(rng, 1, 9).row(0).transpose();
    Eigen::VectorXd back = denormalize(normalize(x, stats), stats);
    CHECK((back - x).cwiseAbs().maxCoeff() <= 1e-10);
  }

  Mat normed = normalize_rows(rows, stats);
  CHECK(normed.allFinite());
  CHECK(normed.col(4).cwiseAbs().maxCoeff() == 0.0);
  for (Eigen::Index c = 0; c < normed.cols(); ++c) {
    if (c == 4) continue;
    double mu = normed.col(c).mean();
    double sd = std::sqrt((normed.col(c).array() - mu).square().mean());
    CHECK(std::abs(mu) < 1e-6);
    CHECK(sd > 0.99);
    CHECK(sd < 1.01);
  }

  CHECK_THROWS_AS(fit_norm(Mat(0, 3)), DataError);
}

TEST_CASE("frame_from_proprio round-trips the simulator frame") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(97);
  SimState ego = random_state(rng, s), other = random_state(rng, s);
  Eigen::VectorXd flat = encode_proprio(other, s).flatten();
  AgentFrame rebuilt = frame_from_proprio(
      flat, s, Vec3(other.root_pos.x(), other.root_pos.y(), other.root_yaw));
  AgentFrame truth = make_frame(other, s);
  for (int k = 0; k < s.joint_count(); ++k) {
    CHECK((rebuilt.pos[static_cast<size_t>(k)] - truth.pos[static_cast<size_t>(k)]).norm() <= 1e-9);
    CHECK((rebuilt.linvel[static_cast<size_t>(k)] - truth.linvel[static_cast<size_t>(k)]).norm() <= 1e-9);
  }

  // exteroception built against a reconstructed agent matches the live one
  Extero live = build_fig(ego, other, s);
  Extero virt = build_fig(make_frame(ego, s), rebuilt);
  CHECK((live.values - virt.values).cwiseAbs().maxCoeff() <= 1e-9);
  Extero rs_live = build_rs(ego, other, s);
  Extero rs_virt = build_rs(make_frame(ego, s), rebuilt, s);
  CHECK((rs_live.values - rs_virt.values).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("decode_proprio reconstructs heading-frame joint placement") {
  BodySpec s = simworld::desk_humanoid();
  std::mt19937_64 rng(89);
  SimState st = random_state(rng, s);
  Eigen::VectorXd flat = encode_proprio(st, s).flatten();
  DecodedPose pose = decode_proprio(flat, s);

  auto kin = simworld::forward_kinematics(st, s);
  Mat3 inv_head = heading_rot(st.root_yaw).transpose();
  for (int k = 0; k < s.joint_count(); ++k) {
    Vec3 want = inv_head * (kin.pos[static_cast<size_t>(k)] - st.root_pos);
    want.z() += st.root_pos.z();
    CHECK((pose.joint_pos[static_cast<size_t>(k)] - want).cwiseAbs().maxCoeff() <= 1e-9);
  }

  // site heights agree with the simulator's world-frame sites
  auto world_sites = simworld::site_positions(kin, s);
  auto decoded = decoded_site_positions(pose, s);
  REQUIRE(world_sites.size() == decoded.size());
  for (size_t i = 0; i < decoded.size(); ++i)
    CHECK(std::abs(decoded[i].z() - world_sites[i].z()) <= 1e-9);
}
