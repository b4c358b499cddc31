#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nr2d3/checkpoint.hpp"
#include "nr2d3/config.hpp"
#include "nr2d3/metrics.hpp"
#include "nr2d3/trainers.hpp"

namespace nr2d3 {

// Run-time objects assembled once from a validated config and shared by every phase:
// schedule, reward model, feature extractor, and the latent geometry. Reward and
// extractor parameters are derived from the config seed alone, so two runs with equal
// seeds (and equal relevant fields) score against identical frozen references.
struct Workbench {
    ExperimentConfig cfg;
    NoiseSchedule sched;
    RewardModel reward;
    FeatureExtractor features;
    Shape latent_shape;
    EpsNetConfig net_cfg;
    ResidualNetConfig res_cfg;
    RenderConfig render;
};

Workbench make_workbench(const ExperimentConfig& cfg);

// Built on demand because it points at the workbench's schedule.
MetricsContext metrics_context(const Workbench& wb);

// One evaluation row. `id` names the checkpoint the row was computed from; `step` is its
// training step. kl is nan for latent-optimization output, which has no path density.
struct MetricsRow {
    std::string id;
    int step = 0;
    double reward = 0.0;
    double frechet = 0.0;
    double promptsim = 0.0;
    double kl = 0.0;
};

MetricsRow eval_policy(const Workbench& wb, const EpsFn& policy, const EpsFn& base, const std::string& id, int step);

// Named-parameter round trip between the full training state and a checkpoint container.
// Every tensor that affects future steps is included: base weights, both adapter factors,
// the correction head, the trust-region snapshot, and all momentum buffers.
Checkpoint state_to_checkpoint(const TrainState& state, const std::string& config_text, std::uint64_t rng_state);
void state_from_checkpoint(TrainState& state, const Checkpoint& ck);

// Phase entry points. Each creates cfg.out_dir as needed and throws on bad input with a
// field-level message; the command-line wrapper turns that into a nonzero exit.

// Trains the noise-prediction net on the shape corpus and writes base.ckpt, a loss curve
// (pretrain.csv, pretrain.svg), and debug renders of fresh samples.
void run_pretrain(const ExperimentConfig& cfg);

// Finetunes from base.ckpt (running the pretrain phase first if it is absent),
// checkpointing and scoring every cfg.checkpoint_every steps. If the out dir already
// holds finetune checkpoints, training resumes from the newest and continues to the same
// metrics bytes as an uninterrupted run. A non-finite abort saves abort.ckpt and
// rethrows. With the latent-optimization method this instead optimizes one latent per
// protocol cell against the frozen base and writes a single metrics row.
void run_finetune(const ExperimentConfig& cfg);

// Scores the newest checkpoint (or the base model when only base.ckpt exists) into
// eval.csv without training.
void run_eval(const ExperimentConfig& cfg);

// Makes sure every config has a finished run (finetuning where needed), checks that all
// runs share one pretrained base and one feature extractor, and writes a combined table
// (compare.csv, one final row per method) plus overlaid reward curves and a Pareto
// scatter under out_dir.
void run_compare(const std::vector<std::string>& config_paths, const std::string& out_dir);

}  // namespace nr2d3
