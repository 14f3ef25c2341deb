#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "metaquad/common.hpp"

namespace metaquad {

struct TrajectorySample {
    Vec3 pos = Vec3::Zero();
    Vec3 vel = Vec3::Zero();
    Vec3 acc = Vec3::Zero();
};

/// Desired trajectory sampled at a fixed step `dt`. Sample k sits at time k*dt.
struct Trajectory {
    double dt = 0.0;
    std::vector<TrajectorySample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    double duration() const noexcept {
        return samples.empty() ? 0.0 : static_cast<double>(samples.size() - 1) * dt;
    }
    const TrajectorySample& operator[](std::size_t k) const { return samples[k]; }
};

/// Quintic coefficients c0..c5 of p(t) = sum c_i t^i.
using QuinticCoefficients = Eigen::Matrix<double, 6, 1>;

/// Closed-form minimum-jerk quintic for one axis with position, velocity and
/// acceleration fixed at both ends of [0, T].
QuinticCoefficients min_jerk_coefficients(double p0, double v0, double a0,
                                          double p1, double v1, double a1,
                                          double T);

/// Position, velocity and acceleration of a quintic at local time t.
Eigen::Vector3d eval_quintic(const QuinticCoefficients& c, double t);

/// Samples a three-axis minimum-jerk segment. The duration is rounded up to
/// the next whole multiple of dt so the last sample lands on the end state.
Trajectory min_jerk_segment(const Vec3& p0, const Vec3& v0, const Vec3& a0,
                            const Vec3& p1, const Vec3& v1, const Vec3& a1,
                            double T, double dt);

struct Waypoint {
    Vec3 pos = Vec3::Zero();
    double speed = 0.0; ///< speed hint at the waypoint, m/s
};

/// Boundary velocity at each waypoint: speed hint along the local path tangent.
/// Interior tangents follow the chord between the neighbouring waypoints.
std::vector<Vec3> waypoint_velocities(std::span<const Waypoint> waypoints);

/// Segment durations T = len / average_speed, rounded up to a multiple of dt.
std::vector<double> segment_durations(std::span<const Waypoint> waypoints,
                                      double average_speed, double dt);

/// Concatenated minimum-jerk segments. Junctions share velocity (from
/// waypoint_velocities) and zero acceleration, so the result is C2.
Trajectory multi_waypoint(std::span<const Waypoint> waypoints,
                          std::span<const double> segment_T, double dt);

struct ClosestPoint {
    std::size_t index = 0;
    Vec3 pos = Vec3::Zero();
    double distance = 0.0;
};

/// Nearest trajectory sample to p. Ties resolve to the smallest index.
ClosestPoint closest_point_on_traj(const Trajectory& traj, const Vec3& p);

/// Integral of the squared jerk of a quintic over [0, T].
double jerk_cost(const QuinticCoefficients& c, double T);

} // namespace metaquad
