#pragma once

#include <string>
#include <vector>

#include "nr2d3/losses.hpp"

namespace nr2d3 {

enum class Method { nabla, ddpo, refl, draft, sds3d };

Method method_from_string(const std::string& name);
std::string method_name(Method m);

// approx trains the adapter against the score-difference objective alone; full adds the
// correction head, its reverse-direction term, and the terminal anchor.
enum class LossVariant { approx, full };

LossVariant loss_variant_from_string(const std::string& name);
std::string loss_variant_name(LossVariant v);

// Knobs of one finetuning run. The refl_* range selects the prediction step; -1 picks the
// default late quarter [3T/4, T-1]. The sds_* fields drive the per-latent optimizer only.
struct FinetuneConfig {
    Method method = Method::nabla;
    double beta = 50.0;  // reward temperature
    GammaKind gamma = GammaKind::signal;
    double lambda = 3e3;  // weight of the pull toward the previous-step snapshot
    double w_b = 1.0;     // reverse-term weight in the full objective
    double fraction = 0.4;
    int cameras_per_transition = 1;
    double lr = 1e-4;
    double momentum = 0.9;
    int batch_size = 4;  // trajectories per step
    LossVariant variant = LossVariant::approx;
    int draft_k = 1;  // reward backprop window, final K denoising steps
    int refl_t_lo = -1;
    int refl_t_hi = -1;
    double sds_eta = 1.0;  // reward strength of the latent optimizer
    double sds_lr = 0.02;
    int sds_steps = 400;
};

// Everything a step needs besides the parameters: schedule, reward (an image-space model,
// or a direct latent functional for analytic toys; the functional wins when both are set,
// mirroring the loss module), and the sampling geometry.
struct TrainContext {
    const NoiseSchedule* sched = nullptr;
    const RewardModel* reward = nullptr;
    LatentReward latent_reward;
    RenderConfig render;
    Shape latent_shape;
    int image_h = 16;
    int image_w = 16;
    int cond = 0;
};

// Mutable training state. `base` stays frozen; the adapter carries the finetuned update;
// `snapshot` holds the merged parameters from before the latest update, so it always lags
// the live policy by exactly one step and anchors the trust-region pull.
struct TrainState {
    EpsNet base;
    LowRankAdapter adapter;
    ResidualNet resnet;
    EpsNet snapshot;
    std::vector<Array> vel_a;  // momentum buffers, one per adapter slot
    std::vector<Array> vel_b;
    std::vector<Array> vel_res;  // one per correction-head parameter entry
    int step = 0;
};

// Fresh state around a pretrained net: zero-initialized adapter (so the merged policy
// starts bit-identical to the base), zero correction head, zero momentum.
TrainState make_train_state(const EpsNet& base, int rank, double adapter_scale, const ResidualNetConfig& resnet_cfg,
                            Rng& rng);

struct StepReport {
    int step = 0;
    Method method = Method::nabla;
    double loss = 0.0;
    double loss_main = 0.0;
    double loss_reg = 0.0;
    double mean_log_reward = 0.0;  // batch terminal samples, fixed four-view evaluation
    double kl_to_base = 0.0;       // batch mean of the path log-density ratio to the base
    double wall_seconds = 0.0;
};

// One update each. Every step samples fresh on-policy trajectories, applies one
// gradient-descent-with-momentum update to the adapter (the full variant also trains the
// correction head), refreshes the snapshot, and reports batch statistics through a
// derived rng so the reports never perturb the training stream. A non-finite loss aborts
// with the component breakdown in the message.
StepReport nabla_step(TrainState& state, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

// Trajectory-level policy gradient: advantage = terminal log-reward minus the batch mean,
// pushed through the summed reverse-step log-densities. Needs at least two trajectories
// and a strictly stochastic sampler.
StepReport ddpo_step(TrainState& state, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

// Draws one late step per sample, differentiates the reward of the one-step prediction
// from that state, and ascends it.
StepReport refl_step(TrainState& state, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

// Replays the final K denoising steps on the tape from the stored noise draws and ascends
// the terminal reward through them.
StepReport draft_step(TrainState& state, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

// Dispatch on cfg.method. The latent optimizer below is per sample, not a model update,
// so Method::sds3d is rejected here.
StepReport finetune_step(TrainState& state, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

// Score-distillation optimization of a single latent against the frozen base net: each
// iteration noises the latent at a random step from the low 40% of the chain and descends
// eps_pred - eps - eta * grad log-reward. Cameras are drawn every iteration regardless of
// eta, so a constant reward reproduces the eta 0 iterates bit for bit on the same seed.
// Aborts when the latent norm exceeds 1e3.
Array sds3d_optimize(const EpsNet& base, const TrainContext& ctx, const FinetuneConfig& cfg, Rng& rng);

}  // namespace nr2d3
