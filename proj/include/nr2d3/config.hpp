#pragma once

#include <cstdint>
#include <string>

#include "nr2d3/dataset.hpp"
#include "nr2d3/metrics.hpp"
#include "nr2d3/nets.hpp"
#include "nr2d3/schedule.hpp"
#include "nr2d3/trainers.hpp"

namespace nr2d3 {

// Everything that determines a run. Serialized as line-oriented `section.key = value`
// text; parse and serialize round-trip losslessly (doubles printed with 17 significant
// digits).
struct ExperimentConfig {
    ScheduleKind schedule_kind = ScheduleKind::LinearAlphaBar;
    int timesteps = 20;

    int net_width = 48;
    int net_depth = 2;
    int net_time_features = 8;
    int net_embed_dim = 4;
    int num_labels = 2;

    int adapter_rank = 4;
    double adapter_scale = 1.0;

    int resnet_width = 24;
    int resnet_depth = 2;
    int resnet_time_features = 8;

    ShapeDatasetConfig dataset;
    int image_size = 16;

    RewardKind reward_kind = RewardKind::aesthetic;
    double reward_chroma_weight = 0.6;
    double reward_tv_weight = 0.2;
    int reward_prompt_features = 16;
    int reward_normal_hidden = 16;
    int reward_sds2d_samples = 4;

    int pretrain_steps = 1200;
    int pretrain_batch = 8;
    double pretrain_lr = 1e-3;
    double pretrain_momentum = 0.9;
    double pretrain_label_dropout = 0.1;

    int finetune_steps = 200;
    FinetuneConfig finetune;

    EvalProtocol eval;
    int eval_feature_dim = 64;
    int eval_kl_trajectories = 64;

    std::uint64_t seed = 1;
    std::string out_dir = "out/run";
    int checkpoint_every = 20;
};

// Parses config text. Unknown keys, malformed lines, duplicate keys, and untypeable
// values are all errors naming the offending line.
ExperimentConfig parse_config(const std::string& text);

// Reads and parses a config file; errors carry the path.
ExperimentConfig load_config(const std::string& path);

std::string serialize_config(const ExperimentConfig& cfg);

// Field-level range validation, separate from parsing so in-memory configs get the
// same checks. Throws with the offending field's name.
void validate_config(const ExperimentConfig& cfg);

}  // namespace nr2d3
