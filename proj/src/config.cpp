#include "nr2d3/config.hpp"

#include <climits>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "nr2d3/losses.hpp"
#include "nr2d3/rewards.hpp"

namespace nr2d3 {
namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& v) {
    std::size_t pos = 0;
    double out;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("trailing characters in number '" + v + "'");
    return out;
}

long long to_ll(const std::string& v) {
    std::size_t pos = 0;
    long long out;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("trailing characters in integer '" + v + "'");
    return out;
}

int to_int(const std::string& v) {
    long long x = to_ll(v);
    if (x < INT_MIN || x > INT_MAX) throw std::invalid_argument("integer out of range: '" + v + "'");
    return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& v) {
    std::size_t pos = 0;
    std::uint64_t out;
    try {
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("trailing characters in integer '" + v + "'");
    return out;
}

bool to_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_int(trim(item)));
    return out;
}

std::string from_int_list(const std::vector<int>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(xs[i]);
    }
    return out;
}

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

using C = ExperimentConfig;

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"schedule.kind", [](C& c, const std::string& v) { c.schedule_kind = schedule_kind_from_string(v); },
         [](const C& c) { return schedule_kind_name(c.schedule_kind); }},
        {"schedule.timesteps", [](C& c, const std::string& v) { c.timesteps = to_int(v); },
         [](const C& c) { return std::to_string(c.timesteps); }},

        {"net.width", [](C& c, const std::string& v) { c.net_width = to_int(v); },
         [](const C& c) { return std::to_string(c.net_width); }},
        {"net.depth", [](C& c, const std::string& v) { c.net_depth = to_int(v); },
         [](const C& c) { return std::to_string(c.net_depth); }},
        {"net.time_features", [](C& c, const std::string& v) { c.net_time_features = to_int(v); },
         [](const C& c) { return std::to_string(c.net_time_features); }},
        {"net.embed_dim", [](C& c, const std::string& v) { c.net_embed_dim = to_int(v); },
         [](const C& c) { return std::to_string(c.net_embed_dim); }},
        {"net.num_labels", [](C& c, const std::string& v) { c.num_labels = to_int(v); },
         [](const C& c) { return std::to_string(c.num_labels); }},

        {"adapter.rank", [](C& c, const std::string& v) { c.adapter_rank = to_int(v); },
         [](const C& c) { return std::to_string(c.adapter_rank); }},
        {"adapter.scale", [](C& c, const std::string& v) { c.adapter_scale = to_double(v); },
         [](const C& c) { return fmt_double(c.adapter_scale); }},

        {"resnet.width", [](C& c, const std::string& v) { c.resnet_width = to_int(v); },
         [](const C& c) { return std::to_string(c.resnet_width); }},
        {"resnet.depth", [](C& c, const std::string& v) { c.resnet_depth = to_int(v); },
         [](const C& c) { return std::to_string(c.resnet_depth); }},
        {"resnet.time_features", [](C& c, const std::string& v) { c.resnet_time_features = to_int(v); },
         [](const C& c) { return std::to_string(c.resnet_time_features); }},

        {"shape.splats", [](C& c, const std::string& v) { c.dataset.splats = to_int(v); },
         [](const C& c) { return std::to_string(c.dataset.splats); }},
        {"shape.position_noise", [](C& c, const std::string& v) { c.dataset.position_noise = to_double(v); },
         [](const C& c) { return fmt_double(c.dataset.position_noise); }},
        {"shape.normal_noise", [](C& c, const std::string& v) { c.dataset.normal_noise = to_double(v); },
         [](const C& c) { return fmt_double(c.dataset.normal_noise); }},
        {"shape.color_noise", [](C& c, const std::string& v) { c.dataset.color_noise = to_double(v); },
         [](const C& c) { return fmt_double(c.dataset.color_noise); }},

        {"image.size", [](C& c, const std::string& v) { c.image_size = to_int(v); },
         [](const C& c) { return std::to_string(c.image_size); }},

        {"reward.kind", [](C& c, const std::string& v) { c.reward_kind = reward_kind_from_string(v); },
         [](const C& c) { return reward_kind_name(c.reward_kind); }},
        {"reward.chroma_weight", [](C& c, const std::string& v) { c.reward_chroma_weight = to_double(v); },
         [](const C& c) { return fmt_double(c.reward_chroma_weight); }},
        {"reward.tv_weight", [](C& c, const std::string& v) { c.reward_tv_weight = to_double(v); },
         [](const C& c) { return fmt_double(c.reward_tv_weight); }},
        {"reward.prompt_features", [](C& c, const std::string& v) { c.reward_prompt_features = to_int(v); },
         [](const C& c) { return std::to_string(c.reward_prompt_features); }},
        {"reward.normal_hidden", [](C& c, const std::string& v) { c.reward_normal_hidden = to_int(v); },
         [](const C& c) { return std::to_string(c.reward_normal_hidden); }},
        {"reward.sds2d_samples", [](C& c, const std::string& v) { c.reward_sds2d_samples = to_int(v); },
         [](const C& c) { return std::to_string(c.reward_sds2d_samples); }},

        {"pretrain.steps", [](C& c, const std::string& v) { c.pretrain_steps = to_int(v); },
         [](const C& c) { return std::to_string(c.pretrain_steps); }},
        {"pretrain.batch", [](C& c, const std::string& v) { c.pretrain_batch = to_int(v); },
         [](const C& c) { return std::to_string(c.pretrain_batch); }},
        {"pretrain.lr", [](C& c, const std::string& v) { c.pretrain_lr = to_double(v); },
         [](const C& c) { return fmt_double(c.pretrain_lr); }},
        {"pretrain.momentum", [](C& c, const std::string& v) { c.pretrain_momentum = to_double(v); },
         [](const C& c) { return fmt_double(c.pretrain_momentum); }},
        {"pretrain.label_dropout", [](C& c, const std::string& v) { c.pretrain_label_dropout = to_double(v); },
         [](const C& c) { return fmt_double(c.pretrain_label_dropout); }},

        {"finetune.steps", [](C& c, const std::string& v) { c.finetune_steps = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune_steps); }},
        {"finetune.method", [](C& c, const std::string& v) { c.finetune.method = method_from_string(v); },
         [](const C& c) { return method_name(c.finetune.method); }},
        {"finetune.beta", [](C& c, const std::string& v) { c.finetune.beta = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.beta); }},
        {"finetune.gamma", [](C& c, const std::string& v) { c.finetune.gamma = gamma_kind_from_string(v); },
         [](const C& c) { return gamma_kind_name(c.finetune.gamma); }},
        {"finetune.lambda", [](C& c, const std::string& v) { c.finetune.lambda = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.lambda); }},
        {"finetune.w_b", [](C& c, const std::string& v) { c.finetune.w_b = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.w_b); }},
        {"finetune.fraction", [](C& c, const std::string& v) { c.finetune.fraction = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.fraction); }},
        {"finetune.cameras_per_transition",
         [](C& c, const std::string& v) { c.finetune.cameras_per_transition = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.cameras_per_transition); }},
        {"finetune.lr", [](C& c, const std::string& v) { c.finetune.lr = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.lr); }},
        {"finetune.momentum", [](C& c, const std::string& v) { c.finetune.momentum = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.momentum); }},
        {"finetune.batch_size", [](C& c, const std::string& v) { c.finetune.batch_size = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.batch_size); }},
        {"finetune.variant", [](C& c, const std::string& v) { c.finetune.variant = loss_variant_from_string(v); },
         [](const C& c) { return loss_variant_name(c.finetune.variant); }},
        {"finetune.draft_k", [](C& c, const std::string& v) { c.finetune.draft_k = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.draft_k); }},
        {"finetune.refl_t_lo", [](C& c, const std::string& v) { c.finetune.refl_t_lo = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.refl_t_lo); }},
        {"finetune.refl_t_hi", [](C& c, const std::string& v) { c.finetune.refl_t_hi = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.refl_t_hi); }},
        {"finetune.sds_eta", [](C& c, const std::string& v) { c.finetune.sds_eta = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.sds_eta); }},
        {"finetune.sds_lr", [](C& c, const std::string& v) { c.finetune.sds_lr = to_double(v); },
         [](const C& c) { return fmt_double(c.finetune.sds_lr); }},
        {"finetune.sds_steps", [](C& c, const std::string& v) { c.finetune.sds_steps = to_int(v); },
         [](const C& c) { return std::to_string(c.finetune.sds_steps); }},

        {"eval.labels", [](C& c, const std::string& v) { c.eval.labels = to_int_list(v); },
         [](const C& c) { return from_int_list(c.eval.labels); }},
        {"eval.samples_per_prompt", [](C& c, const std::string& v) { c.eval.samples_per_prompt = to_int(v); },
         [](const C& c) { return std::to_string(c.eval.samples_per_prompt); }},
        {"eval.views_per_sample", [](C& c, const std::string& v) { c.eval.views_per_sample = to_int(v); },
         [](const C& c) { return std::to_string(c.eval.views_per_sample); }},
        {"eval.seed", [](C& c, const std::string& v) { c.eval.seed = to_u64(v); },
         [](const C& c) { return std::to_string(c.eval.seed); }},
        {"eval.stochastic", [](C& c, const std::string& v) { c.eval.stochastic = to_bool(v); },
         [](const C& c) { return c.eval.stochastic ? "true" : "false"; }},
        {"eval.feature_dim", [](C& c, const std::string& v) { c.eval_feature_dim = to_int(v); },
         [](const C& c) { return std::to_string(c.eval_feature_dim); }},
        {"eval.kl_trajectories", [](C& c, const std::string& v) { c.eval_kl_trajectories = to_int(v); },
         [](const C& c) { return std::to_string(c.eval_kl_trajectories); }},

        {"run.seed", [](C& c, const std::string& v) { c.seed = to_u64(v); },
         [](const C& c) { return std::to_string(c.seed); }},
        {"run.out_dir", [](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) { return c.out_dir; }},
        {"run.checkpoint_every", [](C& c, const std::string& v) { c.checkpoint_every = to_int(v); },
         [](const C& c) { return std::to_string(c.checkpoint_every); }},
    };
    return table;
}

const Field* find_field(const std::string& key) {
    for (const Field& f : fields())
        if (f.key == key) return &f;
    return nullptr;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'section.key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const Field* f = find_field(key);
        if (!f) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        try {
            f->set(cfg, value);
        } catch (const std::exception& e) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": key '" + key + "': " + e.what());
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot read '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config(buf.str());
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::string out;
    std::string section;
    for (const Field& f : fields()) {
        const std::string sec = f.key.substr(0, f.key.find('.'));
        if (sec != section) {
            if (!section.empty()) out += "\n";
            section = sec;
        }
        out += f.key + " = " + f.get(cfg) + "\n";
    }
    return out;
}

void validate_config(const ExperimentConfig& cfg) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    auto positive = [&](int v, const char* name) {
        if (v < 1) fail(std::string(name) + " must be at least 1, got " + std::to_string(v));
    };
    if (cfg.timesteps < 2) fail("schedule.timesteps must be at least 2, got " + std::to_string(cfg.timesteps));
    positive(cfg.net_width, "net.width");
    positive(cfg.net_depth, "net.depth");
    positive(cfg.net_time_features, "net.time_features");
    positive(cfg.net_embed_dim, "net.embed_dim");
    positive(cfg.num_labels, "net.num_labels");
    positive(cfg.adapter_rank, "adapter.rank");
    if (!(cfg.adapter_scale > 0.0)) fail("adapter.scale must be positive, got " + fmt_double(cfg.adapter_scale));
    positive(cfg.resnet_width, "resnet.width");
    positive(cfg.resnet_depth, "resnet.depth");
    positive(cfg.resnet_time_features, "resnet.time_features");
    positive(cfg.dataset.splats, "shape.splats");
    if (cfg.dataset.position_noise < 0.0 || cfg.dataset.normal_noise < 0.0 || cfg.dataset.color_noise < 0.0)
        fail("shape noise levels must be nonnegative");
    if (cfg.image_size < 4) fail("image.size must be at least 4, got " + std::to_string(cfg.image_size));
    if (cfg.reward_chroma_weight < 0.0 || cfg.reward_tv_weight < 0.0) fail("reward weights must be nonnegative");
    positive(cfg.reward_prompt_features, "reward.prompt_features");
    positive(cfg.reward_normal_hidden, "reward.normal_hidden");
    positive(cfg.reward_sds2d_samples, "reward.sds2d_samples");
    if (cfg.pretrain_steps < 0) fail("pretrain.steps must be nonnegative");
    positive(cfg.pretrain_batch, "pretrain.batch");
    if (cfg.pretrain_lr < 0.0) fail("pretrain.lr must be nonnegative");
    if (cfg.pretrain_momentum < 0.0 || cfg.pretrain_momentum >= 1.0) fail("pretrain.momentum must be in [0, 1)");
    if (cfg.pretrain_label_dropout < 0.0 || cfg.pretrain_label_dropout > 1.0)
        fail("pretrain.label_dropout must be in [0, 1]");
    if (cfg.finetune_steps < 0) fail("finetune.steps must be nonnegative");
    if (!(cfg.finetune.beta > 0.0)) fail("finetune.beta must be positive, got " + fmt_double(cfg.finetune.beta));
    if (cfg.finetune.lambda < 0.0) fail("finetune.lambda must be nonnegative");
    if (cfg.finetune.w_b < 0.0) fail("finetune.w_b must be nonnegative");
    if (!(cfg.finetune.fraction > 0.0) || cfg.finetune.fraction > 1.0)
        fail("finetune.fraction must be in (0, 1], got " + fmt_double(cfg.finetune.fraction));
    positive(cfg.finetune.cameras_per_transition, "finetune.cameras_per_transition");
    if (cfg.finetune.lr < 0.0) fail("finetune.lr must be nonnegative");
    if (cfg.finetune.momentum < 0.0 || cfg.finetune.momentum >= 1.0) fail("finetune.momentum must be in [0, 1)");
    positive(cfg.finetune.batch_size, "finetune.batch_size");
    if (cfg.finetune.method == Method::ddpo && cfg.finetune.batch_size < 2)
        fail("finetune.batch_size must be at least 2 for ddpo");
    if (cfg.finetune.method == Method::draft &&
        (cfg.finetune.draft_k < 1 || cfg.finetune.draft_k > cfg.timesteps))
        fail("finetune.draft_k must be in 1..schedule.timesteps");
    if (cfg.finetune.method == Method::refl && cfg.finetune.refl_t_lo >= 0) {
        if (cfg.finetune.refl_t_lo < 1 || cfg.finetune.refl_t_hi < cfg.finetune.refl_t_lo ||
            cfg.finetune.refl_t_hi > cfg.timesteps - 1)
            fail("finetune.refl_t_lo..refl_t_hi must satisfy 1 <= lo <= hi <= timesteps-1");
    }
    if (!(cfg.finetune.sds_lr > 0.0)) fail("finetune.sds_lr must be positive");
    positive(cfg.finetune.sds_steps, "finetune.sds_steps");
    if (cfg.finetune.sds_eta < 0.0) fail("finetune.sds_eta must be nonnegative");
    if (cfg.eval.labels.empty()) fail("eval.labels must name at least one label");
    for (int l : cfg.eval.labels)
        if (l < 0 || l >= cfg.num_labels)
            fail("eval.labels entry " + std::to_string(l) + " outside 0.." + std::to_string(cfg.num_labels - 1));
    if (cfg.eval.samples_per_prompt < 2) fail("eval.samples_per_prompt must be at least 2");
    if (cfg.eval.views_per_sample != 1 &&
        (cfg.eval.views_per_sample < 4 || cfg.eval.views_per_sample % 4 != 0))
        fail("eval.views_per_sample must be 1 or a multiple of 4");
    positive(cfg.eval_feature_dim, "eval.feature_dim");
    positive(cfg.eval_kl_trajectories, "eval.kl_trajectories");
    if (cfg.out_dir.empty()) fail("run.out_dir must not be empty");
    positive(cfg.checkpoint_every, "run.checkpoint_every");
}

}  // namespace nr2d3
