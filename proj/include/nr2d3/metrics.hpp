#pragma once

#include <cstdint>
#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/camera.hpp"
#include "nr2d3/diffusion.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/render.hpp"
#include "nr2d3/rewards.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/schedule.hpp"

namespace nr2d3 {

// Evaluation protocol: which labels to condition on, how many samples per label, how
// many fixed orbit views to average per sample. Sample generation is keyed by
// (label, sample index) from the protocol seed, so metric values do not depend on the
// order the labels are listed in.
struct EvalProtocol {
    std::vector<int> labels = {0};
    int samples_per_prompt = 32;  // at least 2, so per-cell covariances are estimable
    int views_per_sample = 4;     // 1 or a multiple of 4, matching the fixed orbit
    std::uint64_t seed = 0;
    bool stochastic = false;  // default: deterministic reverse mean, isolating model change
};

// Frozen random projection from a rendered image to a d-dimensional feature vector, a
// desk-scale stand-in for a pretrained feature backbone. Any two models whose metrics
// are compared must share one extractor; feature_checksum guards that.
struct FeatureExtractor {
    int image_h = 16;
    int image_w = 16;
    int dim = 64;
    Array proj;  // [dim, H*W*3]
};

FeatureExtractor make_feature_extractor(int image_h, int image_w, int dim, Rng& rng);

// Projects an [H, W, 3] render to a feature vector of shape [dim].
Array extract_features(const FeatureExtractor& fx, const Array& rgb);

std::uint64_t feature_checksum(const FeatureExtractor& fx);

// Frozen unit direction in feature space anchoring one label's prompt-similarity score.
// Derived from the extractor checksum, so it is fixed once the extractor is.
Array label_target(const FeatureExtractor& fx, int label);

// Shared evaluation-side description of the generative setup under measurement.
struct MetricsContext {
    const NoiseSchedule* sched = nullptr;
    RenderConfig render;
    Shape latent_shape;
    int image_h = 16;
    int image_w = 16;
};

// Terminal latents for every (label, sample) cell of the protocol, in label list order.
// Each cell's randomness is derived from (seed, label, sample index) alone.
std::vector<std::vector<Array>> eval_latents(const EpsFn& model, const MetricsContext& ctx,
                                             const EvalProtocol& protocol);

// Mean log-reward under the protocol nesting: per-view log-reward, mean over views,
// mean over samples, mean over labels.
double eval_reward(const EpsFn& model, const RewardModel& reward, const MetricsContext& ctx,
                   const EvalProtocol& protocol);

// Prompt-similarity proxy: cosine between each view's frozen feature and the label's
// frozen target direction, nested exactly like eval_reward.
double eval_promptsim(const EpsFn& model, const FeatureExtractor& fx, const MetricsContext& ctx,
                      const EvalProtocol& protocol);

// Frechet distance between two feature clouds (each a list of equal-length vectors):
// |mu_A - mu_B|^2 + tr(S_A + S_B - 2 (S_A S_B)^{1/2}), computed with a symmetric PSD
// square root. A covariance that comes out non-PSD is nudged by 1e-8 I and reported
// through the optional flag. Needs at least two samples per side.
double frechet_distance(const std::vector<Array>& a, const std::vector<Array>& b, bool* regularized = nullptr);

// Per-(label, view) Frechet distance between model renders and base renders at the same
// view, averaged over views then labels. The base model provides the reference cloud.
double eval_frechet(const EpsFn& model, const EpsFn& base, const FeatureExtractor& fx, const MetricsContext& ctx,
                    const EvalProtocol& protocol, bool* regularized = nullptr);

// Monte-Carlo path KL between the finetuned and base reverse chains: the mean over
// finetuned-model trajectories of the summed per-step log-density ratio. Zero exactly
// when the two models coincide, nonnegative in expectation otherwise.
double kl_to_base(const EpsFn& finetuned, const EpsFn& base, const NoiseSchedule& sched, const Shape& shape, int cond,
                  int n_trajectories, Rng& rng);

}  // namespace nr2d3
