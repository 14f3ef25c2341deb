#include "metaquad/trajgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace metaquad {

namespace {

std::size_t step_count(double T, double dt) {
    // Tolerate representation error when T is already a multiple of dt.
    return static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
}

} // namespace

QuinticCoefficients min_jerk_coefficients(double p0, double v0, double a0,
                                          double p1, double v1, double a1,
                                          double T) {
    if (!(T > 0.0)) {
        throw Error("min_jerk_coefficients: duration must be positive");
    }
    const double T2 = T * T;
    const double T3 = T2 * T;
    const double T4 = T3 * T;
    const double T5 = T4 * T;
    // Residuals left after the terms fixed by the start state.
    const double dp = p1 - (p0 + v0 * T + 0.5 * a0 * T2);
    const double dv = v1 - (v0 + a0 * T);
    const double da = a1 - a0;

    QuinticCoefficients c;
    c[0] = p0;
    c[1] = v0;
    c[2] = 0.5 * a0;
    c[3] = (10.0 * dp - 4.0 * dv * T + 0.5 * da * T2) / T3;
    c[4] = (-15.0 * dp + 7.0 * dv * T - da * T2) / T4;
    c[5] = (6.0 * dp - 3.0 * dv * T + 0.5 * da * T2) / T5;
    return c;
}

Eigen::Vector3d eval_quintic(const QuinticCoefficients& c, double t) {
    const double t2 = t * t;
    const double t3 = t2 * t;
    const double t4 = t3 * t;
    const double t5 = t4 * t;
    return {
        c[0] + c[1] * t + c[2] * t2 + c[3] * t3 + c[4] * t4 + c[5] * t5,
        c[1] + 2.0 * c[2] * t + 3.0 * c[3] * t2 + 4.0 * c[4] * t3 + 5.0 * c[5] * t4,
        2.0 * c[2] + 6.0 * c[3] * t + 12.0 * c[4] * t2 + 20.0 * c[5] * t3,
    };
}

double jerk_cost(const QuinticCoefficients& c, double T) {
    // jerk(t) = j0 + j1 t + j2 t^2
    const double j0 = 6.0 * c[3];
    const double j1 = 24.0 * c[4];
    const double j2 = 60.0 * c[5];
    const double T2 = T * T;
    const double T3 = T2 * T;
    return j0 * j0 * T + j0 * j1 * T2 + (j1 * j1 + 2.0 * j0 * j2) * T3 / 3.0 +
           j1 * j2 * T2 * T2 / 2.0 + j2 * j2 * T3 * T2 / 5.0;
}

Trajectory min_jerk_segment(const Vec3& p0, const Vec3& v0, const Vec3& a0,
                            const Vec3& p1, const Vec3& v1, const Vec3& a1,
                            double T, double dt) {
    if (!(T > 0.0) || !(dt > 0.0)) {
        throw Error("min_jerk_segment: T and dt must be positive");
    }
    if (dt > T) {
        throw Error("min_jerk_segment: dt exceeds segment duration");
    }
    const std::size_t n = step_count(T, dt);
    const double Tq = static_cast<double>(n) * dt;

    std::array<QuinticCoefficients, 3> coeffs;
    for (int axis = 0; axis < 3; ++axis) {
        coeffs[axis] = min_jerk_coefficients(p0[axis], v0[axis], a0[axis],
                                             p1[axis], v1[axis], a1[axis], Tq);
    }

    Trajectory traj;
    traj.dt = dt;
    traj.samples.resize(n + 1);
    for (std::size_t k = 0; k <= n; ++k) {
        const double t = static_cast<double>(k) * dt;
        TrajectorySample& s = traj.samples[k];
        for (int axis = 0; axis < 3; ++axis) {
            const Eigen::Vector3d pva = eval_quintic(coeffs[axis], t);
            s.pos[axis] = pva[0];
            s.vel[axis] = pva[1];
            s.acc[axis] = pva[2];
        }
    }
    // Pin the end state exactly; evaluation at Tq carries rounding error.
    traj.samples.back() = TrajectorySample{p1, v1, a1};
    traj.samples.front() = TrajectorySample{p0, v0, a0};
    return traj;
}

std::vector<Vec3> waypoint_velocities(std::span<const Waypoint> waypoints) {
    const std::size_t n = waypoints.size();
    std::vector<Vec3> vel(n, Vec3::Zero());
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 tangent = Vec3::Zero();
        if (n >= 2) {
            const std::size_t lo = i == 0 ? 0 : i - 1;
            const std::size_t hi = i + 1 < n ? i + 1 : n - 1;
            tangent = waypoints[hi].pos - waypoints[lo].pos;
        }
        const double len = tangent.norm();
        if (len > 0.0) {
            vel[i] = waypoints[i].speed * tangent / len;
        }
    }
    return vel;
}

std::vector<double> segment_durations(std::span<const Waypoint> waypoints,
                                      double average_speed, double dt) {
    if (!(average_speed > 0.0) || !(dt > 0.0)) {
        throw Error("segment_durations: average speed and dt must be positive");
    }
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < waypoints.size(); ++i) {
        const double len = (waypoints[i + 1].pos - waypoints[i].pos).norm();
        const std::size_t n = std::max<std::size_t>(1, step_count(len / average_speed, dt));
        out.push_back(static_cast<double>(n) * dt);
    }
    return out;
}

Trajectory multi_waypoint(std::span<const Waypoint> waypoints,
                          std::span<const double> segment_T, double dt) {
    if (waypoints.size() < 2) {
        throw Error("multi_waypoint: need at least two waypoints");
    }
    if (segment_T.size() + 1 != waypoints.size()) {
        throw Error("multi_waypoint: segment duration count must be waypoints - 1");
    }
    const std::vector<Vec3> vel = waypoint_velocities(waypoints);

    Trajectory out;
    out.dt = dt;
    for (std::size_t i = 0; i + 1 < waypoints.size(); ++i) {
        const Trajectory seg = min_jerk_segment(waypoints[i].pos, vel[i], Vec3::Zero(),
                                                waypoints[i + 1].pos, vel[i + 1], Vec3::Zero(),
                                                segment_T[i], dt);
        const std::size_t skip = out.samples.empty() ? 0 : 1;
        out.samples.insert(out.samples.end(), seg.samples.begin() + skip, seg.samples.end());
    }
    return out;
}

ClosestPoint closest_point_on_traj(const Trajectory& traj, const Vec3& p) {
    if (traj.empty()) {
        throw Error("closest_point_on_traj: empty trajectory");
    }
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < traj.size(); ++k) {
        // fixed summation order so exact ties resolve to the first index
        const Vec3 d = traj.samples[k].pos - p;
        const double d2 = d.x() * d.x() + d.y() * d.y() + d.z() * d.z();
        if (d2 < best_d2) {
            best_d2 = d2;
            best = k;
        }
    }
    return {best, traj.samples[best].pos, std::sqrt(best_d2)};
}

} // namespace metaquad
