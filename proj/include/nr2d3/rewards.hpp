#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/camera.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/render.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/schedule.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {

// Log-reward models over rendered images. Every kind is differentiable with respect to
// the image (and through it the shape latent); the model parameters themselves are frozen
// and enter the tape as constants, so they can never receive gradients.
enum class RewardKind { aesthetic, prompt_sim, normal_estimator, dnc, sds2d };

RewardKind reward_kind_from_string(const std::string& s);
std::string reward_kind_name(RewardKind k);

// Frozen per-pixel network mapping RGB to a unit normal map. Features at each interior
// pixel are the three channel values plus their central differences (9 inputs), pushed
// through one tanh layer and normalized; the one-pixel border is zero like the
// pseudo-normal transform. A fresh instance is random; fit_normal_estimator gives it
// estimator-like behavior by regressing onto pseudo-normals of example renders.
struct NormalEstimator {
    int hidden = 16;
    Array w1{Shape{1}, Flat::Zero(1)};  // [9, hidden]
    Array b1{Shape{1}, Flat::Zero(1)};  // [hidden]
    Array w2{Shape{1}, Flat::Zero(1)};  // [hidden, 3]
    Array b2{Shape{1}, Flat::Zero(1)};  // [3]
};

NormalEstimator make_normal_estimator(Rng& rng, int hidden = 16);

struct EstimatedNormals {
    Var nx, ny, nz;  // [H, W] each, zero border
};

EstimatedNormals estimate_normals_taped(Tape& tape, const NormalEstimator& est, Var r, Var g, Var b, int height,
                                        int width);

// A few plain SGD steps of masked squared error against depth_to_normal targets computed
// from the given renders. Returns the final-step loss (0 if every sample was degenerate).
double fit_normal_estimator(NormalEstimator& est, const std::vector<RenderOut>& samples, int steps, double lr);

struct RewardModel {
    RewardKind kind = RewardKind::aesthetic;
    // aesthetic: chroma_weight * mean squared per-pixel chroma - tv_weight * mean squared
    // neighbor difference
    double chroma_weight = 1.0;
    double tv_weight = 0.25;
    // prompt similarity: cosine between a frozen random projection of the flattened image
    // planes and the label's frozen target vector
    Array proj{Shape{1}, Flat::Zero(1)};     // [feature_dim, 3 H W]
    Array targets{Shape{1}, Flat::Zero(1)};  // [num_labels, feature_dim]
    int image_h = 0;
    int image_w = 0;
    // geometry agreement
    NormalEstimator estimator;
    // frozen toy 2d diffusion over flattened images, scored in expectation
    EpsNet eps2d;
    NoiseSchedule sched2d;
    int sds_samples = 8;
};

RewardModel make_reward_aesthetic(double chroma_weight, double tv_weight);
RewardModel make_reward_prompt(int height, int width, int feature_dim, int num_labels, Rng& rng);
RewardModel make_reward_normal_estimator(Rng& rng, int hidden = 16);
RewardModel make_reward_dnc();
RewardModel make_reward_sds2d(EpsNet eps2d, NoiseSchedule sched, int samples);

// Scalar reward on the tape. `degenerate` marks an empty coverage mask (fully transparent
// render): the value is then a constant 0 so training sees a zero gradient, not an error.
struct TapedScalar {
    Var value;
    bool degenerate = false;
};

// Mean over masked pixels of the inner product between the render's normals and the given
// estimate planes. The mask (alpha >= 0.5, optionally interior-only) is built from values
// and enters as a constant, so gradients flow through both normal maps but not the mask.
TapedScalar masked_normal_agreement(Tape& tape, const TapedRender& render, Var est_nx, Var est_ny, Var est_nz,
                                    bool interior_only);

// Pluggable 2d noise predictor for the expected-denoising reward.
using Eps2D = std::function<Var(Tape&, Var x_t, int t)>;

// -1/samples * sum over (t, eps) draws of ||eps2d(a_t x + s_t eps, t) - eps||^2. Draw
// order per sample: t then the noise array.
TapedScalar log_reward_sds2d_core(Tape& tape, Var flat_rgb, const Eps2D& eps2d, const NoiseSchedule& sched, Rng& rng,
                                  int samples);

// Reward of one rendered view. cond selects the prompt target (prompt_sim only); rng is
// consumed by sds2d only and may be null otherwise.
TapedScalar log_reward_taped(Tape& tape, const RewardModel& model, const TapedRender& render, int cond, Rng* rng);

// Rebuilds a value-level render as tape constants, so rewards can be evaluated (or tests
// can construct synthetic views) without a latent.
TapedRender to_taped(Tape& tape, const RenderOut& out);

double log_reward(const RewardModel& model, const RenderOut& out, int cond, Rng* rng = nullptr,
                  bool* degenerate = nullptr);

// Multi-view lift: the mean over cameras of single-view log-rewards.
struct Reward3DEstimate {
    double value = 0.0;
    std::vector<double> per_camera;
    bool degenerate = false;  // true if any camera produced an empty mask
};

Reward3DEstimate log_reward_3d(const RewardModel& model, const Array& latent, const std::vector<CameraPose>& cameras,
                               int cond, const RenderConfig& cfg, Rng* rng = nullptr);

// Gradient of the camera-mean log-reward with respect to the latent: per-camera gradients
// accumulated in camera order, then divided by the camera count. Degenerate cameras
// contribute exact zeros. Per-camera failures are rethrown with the camera index.
Array grad_log_reward_3d(const RewardModel& model, const Array& latent, const std::vector<CameraPose>& cameras,
                         int cond, const RenderConfig& cfg, Rng* rng = nullptr, Reward3DEstimate* estimate = nullptr);

// Digest of every frozen parameter, for asserting that finetuning never touches a reward.
std::uint64_t reward_checksum(const RewardModel& model);

}  // namespace nr2d3
