#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nr2d3/camera.hpp"
#include "nr2d3/diffusion.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/render.hpp"
#include "nr2d3/rewards.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/schedule.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {

// Per-step weight on the reward-gradient target. `signal` uses the cumulative signal
// scale of the state the reward is probed at (1 at step 0, decaying toward the noise
// end), `constant` keeps it at 1 everywhere.
enum class GammaKind { signal, constant };

GammaKind gamma_kind_from_string(const std::string& name);
std::string gamma_kind_name(GammaKind kind);

// Weight at step t in [0, T]. With `signal` this is the schedule's cumulative scale a[t].
double gamma_schedule(GammaKind kind, int t, const NoiseSchedule& sched);

// One reverse step t -> t-1 lifted out of a trajectory, everything the matching losses
// need: the endpoint states, the step index, the label, and the sampling std actually
// used (for importance-style consumers; the matching losses use the model's own std).
struct Transition {
    Array z_t;
    Array z_prev;
    int t = 0;
    int cond = -1;
    int traj = 0;  // index of the source trajectory within the batch
    double std = 0.0;
};

struct TransitionBatch {
    std::vector<Transition> items;
    int num_trajectories = 0;
};

// Draws ceil(fraction * T) distinct steps per trajectory, uniformly without replacement,
// and returns them in ascending step order per trajectory. fraction must lie in (0, 1];
// every trajectory contributes at least one transition.
TransitionBatch subsample_transitions(const std::vector<Trajectory>& trajs, double fraction, Rng& rng);

// Direct log-reward of a clean latent, bypassing the renderer. Used for view-free toy
// problems where the tilted target is analytically known.
using LatentReward = std::function<Var(Tape&, Var x0)>;

// Shared wiring for the score-matching losses. The policy is the tape-bound network
// (base plus adapter); its EpsVars carry the frozen base used as the prior. Cameras are
// drawn fresh per transition unless `fixed_cameras` pins an explicit view set, in which
// case every transition scores exactly those views (exact camera expectation). A set
// `latent_reward` replaces the render-and-score path entirely and ignores cameras.
struct LossConfig {
    const NoiseSchedule* sched = nullptr;
    const RewardModel* reward = nullptr;
    LatentReward latent_reward;
    RenderConfig render;
    int image_h = 16;
    int image_w = 16;
    double beta = 50.0;
    GammaKind gamma = GammaKind::signal;
    int cameras_per_transition = 1;
    double az_jitter_deg = 60.0;
    double el_jitter_deg = 20.0;
    const std::vector<CameraPose>* fixed_cameras = nullptr;
    // When target_net is set, reward-gradient targets are probed at these frozen
    // parameters instead of the live policy. The targets enter the losses as stop-gradded
    // constants either way; pinning them keeps finite-difference probes of the loss
    // consistent with that convention while the live parameters are perturbed.
    const EpsNet* target_net = nullptr;
    const LowRankAdapter* target_adapter = nullptr;
};

// Reward-gradient target for one view: the gradient of log R(render(xhat(z), cam)) with
// respect to z, where xhat is the policy's one-step clean prediction at step t (z itself
// at step 0). Evaluated on a scratch tape at the current parameter values, so it enters
// the losses as a constant. A degenerate reward (empty mask) yields a zero target.
Array reward_grad_view(const EpsVars& policy, const LossConfig& cfg, const Array& z, int t, int cond,
                       const CameraPose& cam, Rng* rng);

// Mean over transitions and views of
//   || d/dz_prev [log p_theta - log p_base](z_prev | z_t) - gamma_t beta u ||^2
// where u is the stop-gradded reward-gradient target at (z_prev, t-1). The score
// difference is the analytic Gaussian form (mu_theta - mu_base) / sigma_t^2.
Var loss_approx_taped(Tape& tape, const EpsVars& policy, const LossConfig& cfg, const TransitionBatch& batch,
                      Rng& rng);

// The approx residual minus the correction head h(z_prev, t-1). With a zero head this
// matches loss_approx_taped bit for bit on the same batch and rng state.
Var loss_forward_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                       const TransitionBatch& batch, Rng& rng);

// Companion consistency term in the other argument: mean over transitions and views of
//   || d/dz_t [log p_theta - log p_base](z_prev | z_t) + gamma_t beta u + h(z_t, t) ||^2
// with u the reward-gradient target at (z_t, t). The z_t gradient of the Gaussian log
// density needs the network input Jacobian, built as taped first-order ops.
Var loss_reverse_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                       const TransitionBatch& batch, Rng& rng);

// Mean over samples of ||h(z0, 0)||^2, anchoring the correction head to zero at the end
// of the chain.
Var loss_terminal_taped(Tape& tape, const ResVars& resnet, const std::vector<Array>& z0s);

// Full matching objective over whole trajectories: per trajectory, the terminal anchor
// plus (T / k) times the sum of forward + w_b * reverse over k subsampled steps, then
// the mean across trajectories. The step subsample makes it an unbiased estimate of the
// all-steps sum.
Var total_loss_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                     const std::vector<Trajectory>& trajs, double fraction, double w_b, Rng& rng);

// Same objective over a caller-supplied subsample of the given trajectories (items
// grouped by ascending traj index, at least one per trajectory), so one batch can be
// shared with other loss terms.
Var total_loss_taped(Tape& tape, const EpsVars& policy, const ResVars& resnet, const LossConfig& cfg,
                     const std::vector<Trajectory>& trajs, const TransitionBatch& batch, double w_b, Rng& rng);

// Trust-region anchor: lambda * mean over transitions of ||eps_policy(z_t) - eps_ref(z_t)||^2
// against a frozen reference snapshot (typically the merged policy from the previous
// update, so the first step of a round contributes exactly zero).
Var loss_reg_taped(Tape& tape, const EpsVars& policy, const EpsNet& reference, const TransitionBatch& batch,
                   double lambda);

}  // namespace nr2d3
