#include "metaquad/quadrotor_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace metaquad {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

// Rotor direction of spin: +1 gives a +z drag torque.
constexpr std::array<double, 4> kSpin{1.0, -1.0, 1.0, -1.0};

double wrap_angle(double a) {
    return std::remainder(a, 2.0 * std::numbers::pi);
}

Vec3 clamp_abs(const Vec3& v, double limit) {
    return v.cwiseMax(-limit).cwiseMin(limit);
}

Eigen::Matrix3d rotation_zyx(const Vec3& att) {
    return (Eigen::AngleAxisd(att[2], Vec3::UnitZ()) *
            Eigen::AngleAxisd(att[1], Vec3::UnitY()) *
            Eigen::AngleAxisd(att[0], Vec3::UnitX()))
        .toRotationMatrix();
}

void check_state(const QuadState::Vector& x, std::size_t step) {
    if (!x.allFinite()) {
        throw DivergenceError("diverged: non-finite state", step);
    }
    if (std::abs(x[6]) >= kHalfPi || std::abs(x[7]) >= kHalfPi) {
        throw DivergenceError("diverged: roll/pitch left (-pi/2, pi/2)", step);
    }
}

} // namespace

QuadState::Vector QuadState::to_vector() const {
    Vector x;
    x << position, velocity, attitude, angular_rate;
    return x;
}

QuadState QuadState::from_vector(const Vector& x) {
    QuadState s;
    s.position = x.segment<3>(0);
    s.velocity = x.segment<3>(3);
    s.attitude = x.segment<3>(6);
    s.angular_rate = x.segment<3>(9);
    return s;
}

void QuadParams::validate() const {
    const bool positive = mass > 0 && arm_length > 0 && (inertia_diag.array() > 0).all() &&
                          thrust_coeff > 0 && drag_torque_coeff > 0 && gravity > 0 &&
                          max_rotor_thrust > 0;
    if (!positive) {
        throw Error("QuadParams: all parameters must be strictly positive");
    }
    if (!(max_rotor_thrust > hover_thrust_per_rotor())) {
        throw Error("QuadParams: max_rotor_thrust cannot sustain hover");
    }
}

Eigen::Matrix4d QuadParams::mixer() const {
    const double torque_ratio = drag_torque_coeff / thrust_coeff;
    Eigen::Matrix4d M;
    for (int i = 0; i < 4; ++i) {
        const double angle = std::numbers::pi / 4.0 + kHalfPi * i;
        const double x = arm_length * std::cos(angle);
        const double y = arm_length * std::sin(angle);
        M(0, i) = 1.0;
        M(1, i) = y;
        M(2, i) = -x;
        M(3, i) = kSpin[i] * torque_ratio;
    }
    return M;
}

void FaultSpec::validate() const {
    if (!((rotor_effectiveness.array() >= 0.0).all() && (rotor_effectiveness.array() <= 1.0).all())) {
        throw Error("FaultSpec: rotor effectiveness must lie in [0, 1]");
    }
    if (!(std::abs(roll_bias) < std::numbers::pi / 6.0)) {
        throw Error("FaultSpec: |roll_bias| must be below pi/6");
    }
}

ControllerOutput controller_step(const QuadState& state, const Vec3& ref_pos, const Vec3& ref_vel,
                                 const QuadParams& params, const ControllerGains& gains,
                                 const ControllerMemory& memory, double dt, double roll_bias) {
    if (!state.to_vector().allFinite() || !ref_pos.allFinite() || !ref_vel.allFinite()) {
        throw Error("invalid state/reference");
    }
    ControllerOutput out;
    ControllerMemory& mem = out.memory;

    // Position loop -> acceleration command.
    const Vec3 pos_err = ref_pos - state.position;
    const Vec3 vel_err = ref_vel - state.velocity;
    mem.pos_integral = clamp_abs(memory.pos_integral + 0.5 * dt * (pos_err + memory.prev_pos_error),
                                 gains.pos_integral_limit);
    mem.prev_pos_error = pos_err;
    const Vec3 acc = gains.pos_kp.cwiseProduct(pos_err) + gains.pos_kd.cwiseProduct(vel_err) +
                     gains.pos_ki.cwiseProduct(mem.pos_integral);

    const double roll = state.attitude[0];
    const double pitch = state.attitude[1];
    const double yaw = state.attitude[2];
    const double g = params.gravity;

    const double collective =
        std::max(0.0, params.mass * (g + acc[2]) / (std::cos(roll) * std::cos(pitch)));

    Vec3 att_cmd;
    att_cmd[0] = std::clamp((acc[0] * std::sin(yaw) - acc[1] * std::cos(yaw)) / g,
                            -gains.max_tilt, gains.max_tilt) + roll_bias;
    att_cmd[1] = std::clamp((acc[0] * std::cos(yaw) + acc[1] * std::sin(yaw)) / g,
                            -gains.max_tilt, gains.max_tilt);
    att_cmd[2] = 0.0;
    out.attitude_command = att_cmd;

    // Attitude loop -> body torque.
    Vec3 att_err = att_cmd - state.attitude;
    att_err[2] = wrap_angle(att_err[2]);
    mem.att_integral = clamp_abs(memory.att_integral + 0.5 * dt * (att_err + memory.prev_att_error),
                                 gains.att_integral_limit);
    mem.prev_att_error = att_err;
    const Vec3 ang_acc = gains.att_kp.cwiseProduct(att_err) -
                         gains.att_kd.cwiseProduct(state.angular_rate) +
                         gains.att_ki.cwiseProduct(mem.att_integral);
    const Vec3 inertia_rate = params.inertia_diag.cwiseProduct(state.angular_rate);
    const Vec3 torque = params.inertia_diag.cwiseProduct(ang_acc) + state.angular_rate.cross(inertia_rate);

    Vec4 wrench;
    wrench << collective, torque;
    const Vec4 thrusts = params.mixer().partialPivLu().solve(wrench);
    out.command.rotor_thrusts = thrusts.cwiseMax(0.0).cwiseMin(params.max_rotor_thrust);
    return out;
}

Vec4 apply_fault(const ControlCommand& cmd, const FaultSpec& fault) {
    return fault.rotor_effectiveness.cwiseProduct(cmd.rotor_thrusts);
}

QuadState::Vector plant_derivative(const QuadState::Vector& x, const Vec4& thrusts,
                                   const QuadParams& params) {
    const Vec3 vel = x.segment<3>(3);
    const Vec3 att = x.segment<3>(6);
    const Vec3 rate = x.segment<3>(9);

    const Vec4 wrench = params.mixer() * thrusts;
    const Vec3 torque = wrench.tail<3>();

    const Vec3 acc = rotation_zyx(att) * Vec3(0.0, 0.0, wrench[0] / params.mass) -
                     Vec3(0.0, 0.0, params.gravity);

    const double sr = std::sin(att[0]);
    const double cr = std::cos(att[0]);
    const double cp = std::cos(att[1]);
    const double tp = std::tan(att[1]);
    Vec3 euler_rate;
    euler_rate[0] = rate[0] + (rate[1] * sr + rate[2] * cr) * tp;
    euler_rate[1] = rate[1] * cr - rate[2] * sr;
    euler_rate[2] = (rate[1] * sr + rate[2] * cr) / cp;

    const Vec3& J = params.inertia_diag;
    const Vec3 rate_dot = (torque - rate.cross(J.cwiseProduct(rate))).cwiseQuotient(J);

    QuadState::Vector dx;
    dx << vel, acc, euler_rate, rate_dot;
    return dx;
}

QuadState plant_step(const QuadState& state, const Vec4& actual_thrusts,
                     const QuadParams& params, double dt) {
    if (!(dt > 0.0)) {
        throw Error("plant_step: dt must be positive");
    }
    if ((actual_thrusts.array() < 0.0).any()) {
        throw Error("plant_step: negative rotor thrust");
    }
    const QuadState::Vector x = state.to_vector();
    const QuadState::Vector k1 = plant_derivative(x, actual_thrusts, params);
    const QuadState::Vector k2 = plant_derivative(x + 0.5 * dt * k1, actual_thrusts, params);
    const QuadState::Vector k3 = plant_derivative(x + 0.5 * dt * k2, actual_thrusts, params);
    const QuadState::Vector k4 = plant_derivative(x + dt * k3, actual_thrusts, params);
    const QuadState::Vector next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    check_state(next, 0);
    return QuadState::from_vector(next);
}

std::size_t SimConfig::substeps() const {
    if (!(control_dt > 0.0) || !(step_dt > 0.0)) {
        throw Error("SimConfig: time steps must be positive");
    }
    const double ratio = step_dt / control_dt;
    const double n = std::round(ratio);
    if (n < 1.0 || std::abs(ratio - n) > 1e-9 * ratio) {
        throw Error("SimConfig: step_dt must be an integer multiple of control_dt");
    }
    return static_cast<std::size_t>(n);
}

Simulator::Simulator(const QuadState& initial, const QuadParams& params,
                     const ControllerGains& gains, const FaultSpec& fault,
                     const SimConfig& config)
    : params_(params), gains_(gains), fault_(fault), config_(config),
      substeps_(config.substeps()), state_(initial) {
    params_.validate();
    fault_.validate();
}

const QuadState& Simulator::advance(const ReferencePoint& ref) {
    try {
        for (std::size_t i = 0; i < substeps_; ++i) {
            const ControllerOutput ctrl =
                controller_step(state_, ref.pos, ref.vel, params_, gains_, memory_,
                                config_.control_dt, fault_.roll_bias);
            memory_ = ctrl.memory;
            state_ = plant_step(state_, apply_fault(ctrl.command, fault_), params_,
                                config_.control_dt);
        }
    } catch (const DivergenceError& e) {
        throw DivergenceError("diverged", step_);
    }
    ++step_;
    return state_;
}

ReferencePoint nominal_reference(const Trajectory& traj, std::size_t k) {
    if (k + 1 >= traj.size()) {
        throw Error("nominal_reference: step index out of range");
    }
    return {traj[k + 1].pos, (traj[k + 1].pos - traj[k].pos) / traj.dt};
}

double RunLog::average_deviation(std::size_t first) const {
    if (first >= samples.size()) {
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t k = first; k < samples.size(); ++k) {
        sum += samples[k].deviation;
    }
    return sum / static_cast<double>(samples.size() - first);
}

double RunLog::max_deviation(std::size_t first) const {
    double m = 0.0;
    for (std::size_t k = first; k < samples.size(); ++k) {
        m = std::max(m, samples[k].deviation);
    }
    return m;
}

RunSample make_run_sample(const Trajectory& traj, std::size_t k, const QuadState& state,
                          const ReferencePoint& reference) {
    RunSample s;
    s.k = k;
    s.t = static_cast<double>(k) * traj.dt;
    s.state = state;
    s.reference = reference;
    s.desired = traj[k];
    s.deviation = closest_point_on_traj(traj, state.position).distance;
    return s;
}

RunLog simulate_tracking(const QuadState& initial, const Trajectory& traj, const FaultSpec& fault,
                         const VehicleConfig& vehicle, const ReferenceSource& reference_override) {
    if (traj.empty()) {
        throw Error("simulate_tracking: empty trajectory");
    }
    SimConfig sim = vehicle.sim;
    if (std::abs(sim.step_dt - traj.dt) > 1e-12) {
        throw Error("simulate_tracking: trajectory step differs from the simulator reference step");
    }
    Simulator simulator(initial, vehicle.params, vehicle.gains, fault, sim);

    RunLog log;
    log.samples.reserve(traj.size());
    log.samples.push_back(make_run_sample(traj, 0, initial, {traj[0].pos, traj[0].vel}));
    for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
        const ReferencePoint ref = reference_override ? reference_override(k, simulator.state())
                                                      : nominal_reference(traj, k);
        simulator.advance(ref);
        log.samples.push_back(make_run_sample(traj, k + 1, simulator.state(), ref));
    }
    return log;
}

} // namespace metaquad
