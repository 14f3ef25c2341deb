#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metaquad/common.hpp"
#include "metaquad/trajgen.hpp"

namespace metaquad {

/// 12-dimensional vehicle state. Attitude is ZYX Euler (roll, pitch, yaw);
/// angular rate is expressed in the body frame.
struct QuadState {
    Vec3 position = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
    Vec3 attitude = Vec3::Zero();
    Vec3 angular_rate = Vec3::Zero();

    using Vector = Eigen::Matrix<double, 12, 1>;
    Vector to_vector() const;
    static QuadState from_vector(const Vector& x);

    static QuadState at_rest(const Vec3& position) {
        QuadState s;
        s.position = position;
        return s;
    }
};

/// Rigid-body plant parameters. Rotors sit in a cross layout: rotor i is on
/// the arm at 45 + 90*(i-1) degrees from body +x, so rotors 1/3 and 2/4 are
/// diagonal pairs. Rotors 1 and 3 spin so that their drag torque is +z.
struct QuadParams {
    double mass = 0.5;
    double arm_length = 0.17;
    Vec3 inertia_diag{4.9e-3, 4.9e-3, 8.8e-3};
    double thrust_coeff = 1.0;
    double drag_torque_coeff = 0.016;
    double gravity = 9.81;
    double max_rotor_thrust = 4.0;

    void validate() const;
    double hover_thrust_per_rotor() const { return mass * gravity / 4.0; }
    /// Maps rotor thrusts to [collective thrust, roll, pitch, yaw torque].
    Eigen::Matrix4d mixer() const;
};

/// Per-rotor thrust-effectiveness multipliers and an additive bias on the
/// commanded roll angle. The identity fault is {1,1,1,1}, 0.
struct FaultSpec {
    Vec4 rotor_effectiveness = Vec4::Ones();
    double roll_bias = 0.0;

    void validate() const;
    static FaultSpec nominal() { return {}; }
    bool is_nominal() const { return rotor_effectiveness == Vec4::Ones() && roll_bias == 0.0; }
};

struct ControlCommand {
    Vec4 rotor_thrusts = Vec4::Zero();
};

/// Cascaded PID gains. Position gains produce an acceleration command (1/s^2,
/// 1/s, 1/s^3); attitude gains produce an angular acceleration command.
struct ControllerGains {
    Vec3 pos_kp{10.0, 10.0, 10.0};
    Vec3 pos_kd{5.7, 5.7, 5.7};
    Vec3 pos_ki{0.0, 0.0, 0.0};
    Vec3 att_kp{150.0, 150.0, 30.0};
    Vec3 att_kd{19.6, 19.6, 10.0};
    Vec3 att_ki{0.0, 0.0, 0.0};
    double max_tilt = 0.6;            ///< rad
    double pos_integral_limit = 1.0;  ///< m*s, per axis
    double att_integral_limit = 0.5;  ///< rad*s, per axis
};

/// Integrator memory carried between controller evaluations.
struct ControllerMemory {
    Vec3 pos_integral = Vec3::Zero();
    Vec3 prev_pos_error = Vec3::Zero();
    Vec3 att_integral = Vec3::Zero();
    Vec3 prev_att_error = Vec3::Zero();
};

struct ControllerOutput {
    ControlCommand command;
    ControllerMemory memory;
    Vec3 attitude_command = Vec3::Zero(); ///< roll, pitch, yaw setpoint actually used
};

/// One evaluation of the fixed baseline controller. Integrals use the
/// trapezoidal rule over `dt`. `roll_bias` is added to the commanded roll.
ControllerOutput controller_step(const QuadState& state, const Vec3& ref_pos, const Vec3& ref_vel,
                                 const QuadParams& params, const ControllerGains& gains,
                                 const ControllerMemory& memory, double dt,
                                 double roll_bias = 0.0);

/// actual_i = eta_i * cmd_i
Vec4 apply_fault(const ControlCommand& cmd, const FaultSpec& fault);

/// Time derivative of the state under the given rotor thrusts.
QuadState::Vector plant_derivative(const QuadState::Vector& x, const Vec4& thrusts,
                                   const QuadParams& params);

/// One RK4 step with thrusts held constant. Throws DivergenceError (step 0)
/// if the result is non-finite or |roll|, |pitch| reach pi/2.
QuadState plant_step(const QuadState& state, const Vec4& actual_thrusts,
                     const QuadParams& params, double dt);

struct SimConfig {
    double control_dt = 1e-3; ///< plant integration and controller rate
    double step_dt = 0.02;    ///< reference update period (one trajectory step)

    /// Controller substeps per reference step; throws unless step_dt is an
    /// integer multiple of control_dt.
    std::size_t substeps() const;
};

struct ReferencePoint {
    Vec3 pos = Vec3::Zero();
    Vec3 vel = Vec3::Zero();
};

/// Closed loop of controller, fault and plant advanced one reference step at a time.
class Simulator {
public:
    Simulator(const QuadState& initial, const QuadParams& params, const ControllerGains& gains,
              const FaultSpec& fault, const SimConfig& config);

    /// Holds `ref` for one reference step and returns the resulting state.
    const QuadState& advance(const ReferencePoint& ref);

    const QuadState& state() const noexcept { return state_; }
    std::size_t step_index() const noexcept { return step_; }

private:
    QuadParams params_;
    ControllerGains gains_;
    FaultSpec fault_;
    SimConfig config_;
    std::size_t substeps_;
    QuadState state_;
    ControllerMemory memory_;
    std::size_t step_ = 0;
};

/// Reference actually applied while moving from step k to k+1 when nothing is
/// overridden: the desired position at k+1 and the backward difference
/// velocity (p(k+1) - p(k)) / dt.
ReferencePoint nominal_reference(const Trajectory& traj, std::size_t k);

struct RunSample {
    std::size_t k = 0;
    double t = 0.0;
    QuadState state;
    ReferencePoint reference; ///< reference that drove the vehicle into this sample
    TrajectorySample desired; ///< desired trajectory sample k
    double deviation = 0.0;   ///< distance to the closest desired sample
};

struct RunLog {
    std::vector<RunSample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    /// Mean deviation over samples [first, end).
    double average_deviation(std::size_t first = 0) const;
    double max_deviation(std::size_t first = 0) const;
};

/// Supplies the reference for the transition k -> k+1 given the state at k.
using ReferenceSource = std::function<ReferencePoint(std::size_t k, const QuadState& state)>;

struct VehicleConfig {
    QuadParams params;
    ControllerGains gains;
    SimConfig sim;
};

/// Flies the whole trajectory. Sample 0 is the initial state; sample k+1 is
/// the state after the k-th reference step. Divergence is rethrown with the
/// offending reference step index.
RunLog simulate_tracking(const QuadState& initial, const Trajectory& traj, const FaultSpec& fault,
                         const VehicleConfig& vehicle,
                         const ReferenceSource& reference_override = {});

/// Builds a log sample for step k, filling the deviation from the trajectory.
RunSample make_run_sample(const Trajectory& traj, std::size_t k, const QuadState& state,
                          const ReferencePoint& reference);

} // namespace metaquad
