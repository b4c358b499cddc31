#include "nr2d3/experiment.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

#include "nr2d3/dataset.hpp"
#include "nr2d3/image_io.hpp"
#include "nr2d3/svgplot.hpp"

namespace fs = std::filesystem;

namespace nr2d3 {
namespace {

// Stream tags for the frozen artifacts and evaluation draws derived from the config
// seed, keeping them independent of the training stream and of each other.
constexpr std::uint64_t kTagReward = 0x72657761ULL;
constexpr std::uint64_t kTagFeatures = 0x66656174ULL;
constexpr std::uint64_t kTagRenders = 0x72656e64ULL;
constexpr std::uint64_t kTagKl = 0x6b6c3030ULL;
constexpr std::uint64_t kTagSds = 0x73647333ULL;

constexpr const char* kTrainingHeader = "step,method,loss,loss_main,loss_reg,mean_log_reward,kl_to_base";
constexpr const char* kMetricsHeader = "checkpoint,reward,frechet,promptsim,kl_to_base";

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string ckpt_stem(int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06d", step);
    return buf;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void append_csv(const std::string& path, const std::string& header, const std::string& line) {
    const bool fresh = !fs::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    if (fresh) f << header << '\n';
    f << line << '\n';
}

void start_csv(const std::string& path, const std::string& header) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << header << '\n';
}

// Step encoded in a CSV row's first field: either a bare integer or the digit run at
// the end of a checkpoint stem. Rows without digits count as step 0.
int row_step(const std::string& first_field) {
    std::size_t end = first_field.size();
    while (end > 0 && !std::isdigit(static_cast<unsigned char>(first_field[end - 1]))) --end;
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(first_field[begin - 1]))) --begin;
    if (begin == end) return 0;
    return std::stoi(first_field.substr(begin, end - begin));
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

// Drops rows past the resume step, so a resumed run appends after exactly the rows an
// uninterrupted run would have written by then.
void trim_csv(const std::string& path, const std::string& header, int max_step) {
    if (!fs::exists(path)) {
        start_csv(path, header);
        return;
    }
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> kept;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;  // header is rewritten below
        }
        if (line.empty()) continue;
        if (row_step(split_line(line).front()) <= max_step) kept.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    out << header << '\n';
    for (const std::string& k : kept) out << k << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<MetricsRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (line.empty()) continue;
        const std::vector<std::string> f = split_line(line);
        if (f.size() != 5) throw std::runtime_error(path + ": malformed metrics row: " + line);
        MetricsRow r;
        r.id = f[0];
        r.step = row_step(f[0]);
        r.reward = std::stod(f[1]);
        r.frechet = std::stod(f[2]);
        r.promptsim = std::stod(f[3]);
        r.kl = std::stod(f[4]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string metrics_line(const MetricsRow& r) {
    return r.id + "," + fmt17(r.reward) + "," + fmt17(r.frechet) + "," + fmt17(r.promptsim) + "," + fmt17(r.kl);
}

// Checkpoint files of one finetune run, sorted by step.
std::vector<std::pair<int, std::string>> list_checkpoints(const std::string& dir) {
    std::vector<std::pair<int, std::string>> out;
    if (!fs::exists(dir)) return out;
    for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.size() == 16 && name.rfind("ckpt_", 0) == 0 && name.substr(11) == ".ckpt")
            out.emplace_back(std::stoi(name.substr(5, 6)), name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Identity of the trained content: parameter names, shapes, and values plus the rng
// state and step, deliberately excluding the config echo so runs that differ only in
// finetuning fields can still be recognized as sharing one pretrained base.
std::uint64_t checkpoint_identity(const Checkpoint& ck) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed_byte = [&](unsigned char b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    auto feed_u64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) feed_byte(static_cast<unsigned char>(v >> (8 * i)));
    };
    for (const auto& [name, value] : ck.params) {
        for (char c : name) feed_byte(static_cast<unsigned char>(c));
        feed_u64(value.shape().size());
        for (std::int64_t d : value.shape()) feed_u64(static_cast<std::uint64_t>(d));
        for (std::int64_t i = 0; i < value.numel(); ++i) feed_u64(std::bit_cast<std::uint64_t>(value[i]));
    }
    feed_u64(ck.rng_state);
    feed_u64(static_cast<std::uint64_t>(ck.step));
    return h;
}

RewardModel build_reward(const ExperimentConfig& cfg, const NoiseSchedule& sched) {
    Rng rng = Rng(cfg.seed).derive(kTagReward);
    switch (cfg.reward_kind) {
        case RewardKind::aesthetic:
            return make_reward_aesthetic(cfg.reward_chroma_weight, cfg.reward_tv_weight);
        case RewardKind::prompt_sim:
            return make_reward_prompt(cfg.image_size, cfg.image_size, cfg.reward_prompt_features, cfg.num_labels, rng);
        case RewardKind::normal_estimator: {
            RewardModel m = make_reward_normal_estimator(rng, cfg.reward_normal_hidden);
            // The estimator is fitted once against depth-derived normals of corpus
            // renders and then frozen for the whole run.
            ShapeDatasetConfig ds = cfg.dataset;
            ds.num_labels = cfg.num_labels;
            RenderConfig rc;
            const std::vector<CameraPose> cams = base_cameras(4, cfg.image_size, cfg.image_size);
            std::vector<RenderOut> samples;
            for (int label = 0; label < cfg.num_labels; ++label)
                for (int k = 0; k < 4; ++k)
                    samples.push_back(render(draw_shape(ds, label, rng), cams[static_cast<std::size_t>(k)], rc));
            fit_normal_estimator(m.estimator, samples, 120, 0.05);
            return m;
        }
        case RewardKind::dnc:
            return make_reward_dnc();
        case RewardKind::sds2d: {
            EpsNetConfig e;
            e.state_dim = 3 * cfg.image_size * cfg.image_size;
            e.width = 16;
            e.depth = 1;
            e.time_features = 4;
            e.embed_dim = 2;
            e.num_labels = 1;
            return make_reward_sds2d(make_eps_net(e, rng), sched, cfg.reward_sds2d_samples);
        }
    }
    throw std::logic_error("build_reward: unhandled reward kind");
}

// Velocity-buffer SGD identical to the finetuning update rule, for pretraining the
// base net's plain parameters.
void sgd_step(NamedParams& params, std::vector<Array>& vel, const GradientMap& grads, const std::vector<int>& ids,
              double momentum, double lr) {
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        if (!grads.has(ids[i])) continue;  // parameter unused this step, velocity untouched
        vel[i].data() = momentum * vel[i].data() + grads.at(ids[i]).data();
        if (lr != 0.0) params.values[i].data() -= lr * vel[i].data();
    }
}

void load_prefixed(NamedParams& into, const Checkpoint& ck, const std::string& prefix) {
    for (std::size_t i = 0; i < into.count(); ++i) {
        const std::string full = prefix + into.names[i];
        bool found = false;
        for (const auto& [name, value] : ck.params) {
            if (name != full) continue;
            if (value.shape() != into.values[i].shape())
                throw std::runtime_error("checkpoint: parameter " + full + " has unexpected shape");
            into.values[i] = value;
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint: missing parameter " + full);
    }
}

void render_samples(const Workbench& wb, const EpsFn& policy, const std::string& prefix) {
    fs::create_directories(fs::path(prefix).parent_path());
    const CameraPose cam = base_cameras(1, wb.cfg.image_size, wb.cfg.image_size)[0];
    for (int label : wb.cfg.eval.labels) {
        Rng rr = Rng(wb.cfg.eval.seed).derive(kTagRenders + static_cast<std::uint64_t>(label) + 1);
        const Array z =
            sample_trajectory(policy, wb.sched, wb.latent_shape, label, rr, 1.0, 0.0).z[0];
        write_render(prefix + "_l" + std::to_string(label), render(z, cam, wb.render), wb.render.bg_depth);
    }
}

void emit_run_plots(const std::string& dir, const std::vector<MetricsRow>& rows) {
    std::vector<double> xs, rw, fd, ps, kl;
    for (const MetricsRow& r : rows) {
        xs.push_back(r.step);
        rw.push_back(r.reward);
        fd.push_back(r.frechet);
        ps.push_back(r.promptsim);
        kl.push_back(r.kl);
    }
    write_text_file(join(dir, "reward_vs_step.svg"),
                    svg_chart("mean log-reward", "step", "log-reward", {{"reward", xs, rw}}));
    write_text_file(join(dir, "frechet_vs_step.svg"),
                    svg_chart("render distribution distance to base", "step", "frechet", {{"frechet", xs, fd}}));
    write_text_file(join(dir, "promptsim_vs_step.svg"),
                    svg_chart("prompt similarity", "step", "cosine", {{"promptsim", xs, ps}}));
    write_text_file(join(dir, "pareto.svg"),
                    svg_chart("reward against divergence from base", "kl_to_base", "log-reward",
                              {{"checkpoints", kl, rw}}, true));
}

// Base net restored from base.ckpt; the rng continues from the post-pretraining state
// so downstream draws stay one deterministic stream per run.
struct LoadedBase {
    EpsNet net;
    std::uint64_t rng_state = 0;
};

LoadedBase load_base(const Workbench& wb, const std::string& base_path) {
    Checkpoint ck = load_checkpoint(base_path);
    Rng tmp(0);
    LoadedBase out{make_eps_net(wb.net_cfg, tmp), ck.rng_state};
    load_prefixed(out.net.params, ck, "base.");
    return out;
}

// Metrics over a fixed latent set (the latent-optimization output), mirroring the
// nesting eval_reward and friends use for sampled models. The path KL of a latent set
// is undefined and reported as nan.
MetricsRow eval_latent_set(const Workbench& wb, const std::vector<std::vector<Array>>& latents, const EpsFn& base,
                           const std::string& id) {
    const EvalProtocol& proto = wb.cfg.eval;
    MetricsContext ctx = metrics_context(wb);
    const std::vector<CameraPose> cams = base_cameras(proto.views_per_sample, wb.cfg.image_size, wb.cfg.image_size);
    const Rng root(proto.seed);
    std::vector<std::vector<Array>> base_lat = eval_latents(base, ctx, proto);

    MetricsRow row;
    row.id = id;
    row.step = 0;
    row.kl = std::numeric_limits<double>::quiet_NaN();

    double reward_acc = 0.0, sim_acc = 0.0, fd_acc = 0.0;
    for (std::size_t p = 0; p < proto.labels.size(); ++p) {
        const int label = proto.labels[p];
        const Array target = label_target(wb.features, label);
        double r_samples = 0.0, s_samples = 0.0;
        for (int s = 0; s < proto.samples_per_prompt; ++s) {
            const Array& z = latents[p][static_cast<std::size_t>(s)];
            Rng rr = root.derive(kTagSds + 0x100000001b3ULL * (static_cast<std::uint64_t>(label) + 2) +
                                 0xb5297a4d3a2f19c5ULL * (static_cast<std::uint64_t>(s) + 1));
            r_samples += log_reward_3d(wb.reward, z, cams, label, wb.render, &rr).value;
            double view_acc = 0.0;
            for (const CameraPose& cam : cams) {
                Array feat = extract_features(wb.features, render(z, cam, wb.render).rgb);
                const double norm = std::sqrt(feat.data().square().sum());
                view_acc += norm < 1e-12 ? 0.0 : (feat.data() * target.data()).sum() / norm;
            }
            s_samples += view_acc / static_cast<double>(cams.size());
        }
        double fd_views = 0.0;
        for (const CameraPose& cam : cams) {
            std::vector<Array> fa, fb;
            for (const Array& z : latents[p]) fa.push_back(extract_features(wb.features, render(z, cam, wb.render).rgb));
            for (const Array& z : base_lat[p]) fb.push_back(extract_features(wb.features, render(z, cam, wb.render).rgb));
            fd_views += frechet_distance(fa, fb);
        }
        reward_acc += r_samples / proto.samples_per_prompt;
        sim_acc += s_samples / proto.samples_per_prompt;
        fd_acc += fd_views / static_cast<double>(cams.size());
    }
    row.reward = reward_acc / static_cast<double>(proto.labels.size());
    row.promptsim = sim_acc / static_cast<double>(proto.labels.size());
    row.frechet = fd_acc / static_cast<double>(proto.labels.size());
    return row;
}

// One optimized latent per protocol cell, each from its own derived stream.
std::vector<std::vector<Array>> optimize_latents(const Workbench& wb, const EpsNet& base) {
    const EvalProtocol& proto = wb.cfg.eval;
    const Rng root(proto.seed);
    TrainContext ctx;
    ctx.sched = &wb.sched;
    ctx.reward = &wb.reward;
    ctx.render = wb.render;
    ctx.latent_shape = wb.latent_shape;
    ctx.image_h = wb.cfg.image_size;
    ctx.image_w = wb.cfg.image_size;
    std::vector<std::vector<Array>> out(proto.labels.size());
    for (std::size_t p = 0; p < proto.labels.size(); ++p) {
        const int label = proto.labels[p];
        ctx.cond = label;
        for (int s = 0; s < proto.samples_per_prompt; ++s) {
            Rng rr = root.derive(kTagSds + 0x100000001b3ULL * (static_cast<std::uint64_t>(label) + 1) +
                                 0xb5297a4d3a2f19c5ULL * (static_cast<std::uint64_t>(s) + 1));
            out[p].push_back(sds3d_optimize(base, ctx, wb.cfg.finetune, rr));
        }
    }
    return out;
}

// Latent-optimization flow shared by finetune and eval: no model update, a single
// metrics row over the optimized latents.
void run_latent_optimization(const Workbench& wb, const std::string& csv_name) {
    const std::string dir = wb.cfg.out_dir;
    const std::string base_path = join(dir, "base.ckpt");
    if (!fs::exists(base_path)) run_pretrain(wb.cfg);
    LoadedBase base = load_base(wb, base_path);
    std::vector<std::vector<Array>> latents = optimize_latents(wb, base.net);
    MetricsRow row = eval_latent_set(wb, latents, make_eps_fn(base.net), "optimized");
    start_csv(join(dir, csv_name), kMetricsHeader);
    append_csv(join(dir, csv_name), kMetricsHeader, metrics_line(row));
    fs::create_directories(join(dir, "renders"));
    const CameraPose cam = base_cameras(1, wb.cfg.image_size, wb.cfg.image_size)[0];
    for (std::size_t p = 0; p < latents.size(); ++p)
        write_render(join(dir, "renders") + "/optimized_l" + std::to_string(wb.cfg.eval.labels[p]),
                     render(latents[p][0], cam, wb.render), wb.render.bg_depth);
}

TrainContext train_context(const Workbench& wb) {
    TrainContext ctx;
    ctx.sched = &wb.sched;
    ctx.reward = &wb.reward;
    ctx.render = wb.render;
    ctx.latent_shape = wb.latent_shape;
    ctx.image_h = wb.cfg.image_size;
    ctx.image_w = wb.cfg.image_size;
    return ctx;
}

std::string training_line(const StepReport& rep) {
    return std::to_string(rep.step) + "," + method_name(rep.method) + "," + fmt17(rep.loss) + "," +
           fmt17(rep.loss_main) + "," + fmt17(rep.loss_reg) + "," + fmt17(rep.mean_log_reward) + "," +
           fmt17(rep.kl_to_base);
}

}  // namespace

Workbench make_workbench(const ExperimentConfig& cfg) {
    validate_config(cfg);
    Workbench wb;
    wb.cfg = cfg;
    wb.sched = make_schedule(cfg.schedule_kind, cfg.timesteps);
    wb.reward = build_reward(cfg, wb.sched);
    Rng fr = Rng(cfg.seed).derive(kTagFeatures);
    wb.features = make_feature_extractor(cfg.image_size, cfg.image_size, cfg.eval_feature_dim, fr);
    wb.latent_shape = {latent_dim(cfg.dataset.splats)};
    wb.net_cfg.state_dim = static_cast<int>(latent_dim(cfg.dataset.splats));
    wb.net_cfg.width = cfg.net_width;
    wb.net_cfg.depth = cfg.net_depth;
    wb.net_cfg.time_features = cfg.net_time_features;
    wb.net_cfg.embed_dim = cfg.net_embed_dim;
    wb.net_cfg.num_labels = cfg.num_labels;
    wb.res_cfg.state_dim = wb.net_cfg.state_dim;
    wb.res_cfg.width = cfg.resnet_width;
    wb.res_cfg.depth = cfg.resnet_depth;
    wb.res_cfg.time_features = cfg.resnet_time_features;
    return wb;
}

MetricsContext metrics_context(const Workbench& wb) {
    MetricsContext ctx;
    ctx.sched = &wb.sched;
    ctx.render = wb.render;
    ctx.latent_shape = wb.latent_shape;
    ctx.image_h = wb.cfg.image_size;
    ctx.image_w = wb.cfg.image_size;
    return ctx;
}

MetricsRow eval_policy(const Workbench& wb, const EpsFn& policy, const EpsFn& base, const std::string& id, int step) {
    const EvalProtocol& proto = wb.cfg.eval;
    MetricsContext ctx = metrics_context(wb);
    MetricsRow row;
    row.id = id;
    row.step = step;
    row.reward = eval_reward(policy, wb.reward, ctx, proto);
    row.frechet = eval_frechet(policy, base, wb.features, ctx, proto);
    row.promptsim = eval_promptsim(policy, wb.features, ctx, proto);
    const int per_label =
        std::max(1, wb.cfg.eval_kl_trajectories / static_cast<int>(proto.labels.size()));
    double acc = 0.0;
    for (int label : proto.labels) {
        Rng kr = Rng(proto.seed).derive(kTagKl ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(label) + 1)));
        acc += kl_to_base(policy, base, wb.sched, wb.latent_shape, label, per_label, kr);
    }
    row.kl = acc / static_cast<double>(proto.labels.size());
    return row;
}

Checkpoint state_to_checkpoint(const TrainState& state, const std::string& config_text, std::uint64_t rng_state) {
    Checkpoint ck;
    ck.config_text = config_text;
    ck.rng_state = rng_state;
    ck.step = state.step;
    auto put = [&](const std::string& name, const Array& v) { ck.params.emplace_back(name, v); };
    for (std::size_t i = 0; i < state.base.params.count(); ++i)
        put("base." + state.base.params.names[i], state.base.params.values[i]);
    for (std::size_t i = 0; i < state.adapter.A.size(); ++i) {
        put("adapter.a" + std::to_string(i), state.adapter.A[i]);
        put("adapter.b" + std::to_string(i), state.adapter.B[i]);
        put("vel.a" + std::to_string(i), state.vel_a[i]);
        put("vel.b" + std::to_string(i), state.vel_b[i]);
    }
    for (std::size_t i = 0; i < state.resnet.params.count(); ++i) {
        put("resnet." + state.resnet.params.names[i], state.resnet.params.values[i]);
        put("vel.res" + std::to_string(i), state.vel_res[i]);
    }
    for (std::size_t i = 0; i < state.snapshot.params.count(); ++i)
        put("snapshot." + state.snapshot.params.names[i], state.snapshot.params.values[i]);
    return ck;
}

void state_from_checkpoint(TrainState& state, const Checkpoint& ck) {
    std::size_t expected = state.base.params.count() + 4 * state.adapter.A.size() +
                           2 * state.resnet.params.count() + state.snapshot.params.count();
    if (ck.params.size() != expected)
        throw std::runtime_error("checkpoint: holds " + std::to_string(ck.params.size()) + " parameters, state needs " +
                                 std::to_string(expected));
    auto take = [&](const std::string& name, Array& dst) {
        for (const auto& [n, v] : ck.params) {
            if (n != name) continue;
            if (v.shape() != dst.shape()) throw std::runtime_error("checkpoint: parameter " + name + " has unexpected shape");
            dst = v;
            return;
        }
        throw std::runtime_error("checkpoint: missing parameter " + name);
    };
    for (std::size_t i = 0; i < state.base.params.count(); ++i)
        take("base." + state.base.params.names[i], state.base.params.values[i]);
    for (std::size_t i = 0; i < state.adapter.A.size(); ++i) {
        take("adapter.a" + std::to_string(i), state.adapter.A[i]);
        take("adapter.b" + std::to_string(i), state.adapter.B[i]);
        take("vel.a" + std::to_string(i), state.vel_a[i]);
        take("vel.b" + std::to_string(i), state.vel_b[i]);
    }
    for (std::size_t i = 0; i < state.resnet.params.count(); ++i) {
        take("resnet." + state.resnet.params.names[i], state.resnet.params.values[i]);
        take("vel.res" + std::to_string(i), state.vel_res[i]);
    }
    for (std::size_t i = 0; i < state.snapshot.params.count(); ++i)
        take("snapshot." + state.snapshot.params.names[i], state.snapshot.params.values[i]);
    state.step = static_cast<int>(ck.step);
}

void run_pretrain(const ExperimentConfig& cfg) {
    Workbench wb = make_workbench(cfg);
    fs::create_directories(cfg.out_dir);
    Rng rng(cfg.seed);
    EpsNet net = make_eps_net(wb.net_cfg, rng);
    std::vector<Array> vel;
    vel.reserve(net.params.count());
    for (const Array& p : net.params.values) vel.push_back(Array::zeros(p.shape()));
    ShapeDatasetConfig ds = cfg.dataset;
    ds.num_labels = cfg.num_labels;

    const std::string csv_path = join(cfg.out_dir, "pretrain.csv");
    start_csv(csv_path, "step,loss");
    std::vector<double> xs, ys;
    for (int step = 1; step <= cfg.pretrain_steps; ++step) {
        std::vector<Array> x0s;
        std::vector<int> conds;
        x0s.reserve(static_cast<std::size_t>(cfg.pretrain_batch));
        for (int b = 0; b < cfg.pretrain_batch; ++b) {
            const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_labels)));
            x0s.push_back(draw_shape(ds, label, rng));
            conds.push_back(label);
        }
        Tape tape;
        EpsVars vars = bind_eps(tape, net, nullptr);
        Var loss = pretrain_loss(tape, vars, wb.sched, x0s, conds, rng, cfg.pretrain_label_dropout);
        GradientMap grads = backward(tape, loss, vars.base_ids);
        sgd_step(net.params, vel, grads, vars.base_ids, cfg.pretrain_momentum, cfg.pretrain_lr);
        const double lv = loss.val().scalar_value();
        append_csv(csv_path, "step,loss", std::to_string(step) + "," + fmt17(lv));
        xs.push_back(step);
        ys.push_back(lv);
    }

    Checkpoint ck;
    ck.config_text = serialize_config(cfg);
    ck.rng_state = rng.state();
    ck.step = cfg.pretrain_steps;
    for (std::size_t i = 0; i < net.params.count(); ++i)
        ck.params.emplace_back("base." + net.params.names[i], net.params.values[i]);
    save_checkpoint(join(cfg.out_dir, "base.ckpt"), ck);

    write_text_file(join(cfg.out_dir, "pretrain.svg"),
                    svg_chart("pretraining loss", "step", "loss", {{"loss", xs, ys}}));
    render_samples(wb, make_eps_fn(net), join(cfg.out_dir, "renders") + "/base");
}

void run_finetune(const ExperimentConfig& cfg) {
    Workbench wb = make_workbench(cfg);
    fs::create_directories(cfg.out_dir);
    if (wb.cfg.finetune.method == Method::sds3d) {
        run_latent_optimization(wb, "metrics.csv");
        return;
    }

    const std::string base_path = join(cfg.out_dir, "base.ckpt");
    if (!fs::exists(base_path)) run_pretrain(cfg);
    LoadedBase base = load_base(wb, base_path);
    Rng rng(cfg.seed);
    rng.set_state(base.rng_state);
    TrainState st = make_train_state(base.net, cfg.adapter_rank, cfg.adapter_scale, wb.res_cfg, rng);
    const EpsFn base_fn = make_eps_fn(base.net);
    const std::string config_text = serialize_config(cfg);
    const std::string train_csv = join(cfg.out_dir, "training.csv");
    const std::string metrics_csv = join(cfg.out_dir, "metrics.csv");

    const std::vector<std::pair<int, std::string>> existing = list_checkpoints(cfg.out_dir);
    if (!existing.empty()) {
        Checkpoint ck = load_checkpoint(join(cfg.out_dir, existing.back().second));
        if (ck.config_text != config_text)
            throw std::runtime_error("resume: " + existing.back().second +
                                     " was written by a different config; clear the out dir or restore the config");
        state_from_checkpoint(st, ck);
        rng.set_state(ck.rng_state);
        if (st.step > cfg.finetune_steps)
            throw std::runtime_error("resume: checkpoint step " + std::to_string(st.step) +
                                     " exceeds finetune.steps " + std::to_string(cfg.finetune_steps));
        trim_csv(train_csv, kTrainingHeader, st.step);
        trim_csv(metrics_csv, kMetricsHeader, st.step);
    } else {
        start_csv(train_csv, kTrainingHeader);
        start_csv(metrics_csv, kMetricsHeader);
        save_checkpoint(join(cfg.out_dir, ckpt_stem(0) + ".ckpt"), state_to_checkpoint(st, config_text, rng.state()));
        append_csv(metrics_csv, kMetricsHeader,
                   metrics_line(eval_policy(wb, make_eps_fn(st.base, st.adapter), base_fn, ckpt_stem(0), 0)));
    }

    TrainContext ctx = train_context(wb);
    const std::vector<int>& labels = wb.cfg.eval.labels;
    for (int step = st.step + 1; step <= cfg.finetune_steps; ++step) {
        ctx.cond = labels[static_cast<std::size_t>(step - 1) % labels.size()];
        StepReport rep;
        try {
            rep = finetune_step(st, ctx, cfg.finetune, rng);
        } catch (const std::exception& e) {
            // The step functions leave the state untouched when they abort, so this is
            // the last fully applied update plus the current rng position.
            save_checkpoint(join(cfg.out_dir, "abort.ckpt"), state_to_checkpoint(st, config_text, rng.state()));
            throw std::runtime_error("finetune aborted at step " + std::to_string(step) +
                                     " (state saved to abort.ckpt): " + e.what());
        }
        append_csv(train_csv, kTrainingHeader, training_line(rep));
        if (step % cfg.checkpoint_every == 0 || step == cfg.finetune_steps) {
            save_checkpoint(join(cfg.out_dir, ckpt_stem(step) + ".ckpt"),
                            state_to_checkpoint(st, config_text, rng.state()));
            append_csv(metrics_csv, kMetricsHeader,
                       metrics_line(eval_policy(wb, make_eps_fn(st.base, st.adapter), base_fn, ckpt_stem(step), step)));
        }
    }

    emit_run_plots(cfg.out_dir, read_metrics_csv(metrics_csv));
    render_samples(wb, make_eps_fn(st.base, st.adapter), join(cfg.out_dir, "renders") + "/final");
}

void run_eval(const ExperimentConfig& cfg) {
    Workbench wb = make_workbench(cfg);
    fs::create_directories(cfg.out_dir);
    if (wb.cfg.finetune.method == Method::sds3d) {
        run_latent_optimization(wb, "eval.csv");
        return;
    }
    const std::string base_path = join(cfg.out_dir, "base.ckpt");
    if (!fs::exists(base_path)) run_pretrain(cfg);
    LoadedBase base = load_base(wb, base_path);
    const EpsFn base_fn = make_eps_fn(base.net);

    Rng rng(cfg.seed);
    rng.set_state(base.rng_state);
    TrainState st = make_train_state(base.net, cfg.adapter_rank, cfg.adapter_scale, wb.res_cfg, rng);
    std::string id = "base";
    int step = 0;
    const std::vector<std::pair<int, std::string>> existing = list_checkpoints(cfg.out_dir);
    if (!existing.empty()) {
        state_from_checkpoint(st, load_checkpoint(join(cfg.out_dir, existing.back().second)));
        id = existing.back().second.substr(0, existing.back().second.size() - 5);
        step = existing.back().first;
    }
    MetricsRow row = eval_policy(wb, make_eps_fn(st.base, st.adapter), base_fn, id, step);
    const std::string eval_csv = join(cfg.out_dir, "eval.csv");
    start_csv(eval_csv, kMetricsHeader);
    append_csv(eval_csv, kMetricsHeader, metrics_line(row));
}

void run_compare(const std::vector<std::string>& config_paths, const std::string& out_dir) {
    if (config_paths.empty()) throw std::invalid_argument("compare: no configs given");
    std::vector<ExperimentConfig> cfgs;
    cfgs.reserve(config_paths.size());
    for (const std::string& p : config_paths) {
        ExperimentConfig c = load_config(p);
        validate_config(c);
        cfgs.push_back(std::move(c));
    }
    for (std::size_t i = 1; i < cfgs.size(); ++i) {
        if (cfgs[i].seed != cfgs[0].seed)
            throw std::invalid_argument("compare: configs disagree on run.seed; methods must share the seed set");
        if (cfgs[i].eval.seed != cfgs[0].eval.seed || cfgs[i].eval.labels != cfgs[0].eval.labels ||
            cfgs[i].eval.samples_per_prompt != cfgs[0].eval.samples_per_prompt ||
            cfgs[i].eval.views_per_sample != cfgs[0].eval.views_per_sample ||
            cfgs[i].eval.stochastic != cfgs[0].eval.stochastic)
            throw std::invalid_argument("compare: configs disagree on the eval protocol");
        if (cfgs[i].out_dir == cfgs[0].out_dir)
            throw std::invalid_argument("compare: configs share out dir " + cfgs[i].out_dir);
    }
    fs::create_directories(out_dir);

    // Run anything unfinished; finished runs are recognized by a final metrics row.
    for (const ExperimentConfig& c : cfgs) {
        const std::string metrics_csv = join(c.out_dir, "metrics.csv");
        bool finished = false;
        if (fs::exists(metrics_csv)) {
            const std::vector<MetricsRow> rows = read_metrics_csv(metrics_csv);
            if (!rows.empty() &&
                (c.finetune.method == Method::sds3d ? rows.back().id == "optimized"
                                                    : rows.back().step == c.finetune_steps))
                finished = true;
        }
        if (!finished) run_finetune(c);
    }

    // All methods must have finetuned away from one and the same pretrained base.
    std::uint64_t base_identity = 0;
    std::uint64_t fx_checksum = 0;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        const std::uint64_t ident = checkpoint_identity(load_checkpoint(join(cfgs[i].out_dir, "base.ckpt")));
        Rng fr = Rng(cfgs[i].seed).derive(kTagFeatures);
        const std::uint64_t fxc = feature_checksum(
            make_feature_extractor(cfgs[i].image_size, cfgs[i].image_size, cfgs[i].eval_feature_dim, fr));
        if (i == 0) {
            base_identity = ident;
            fx_checksum = fxc;
        } else if (ident != base_identity) {
            throw std::runtime_error("compare: " + cfgs[i].out_dir + "/base.ckpt differs from " + cfgs[0].out_dir +
                                     "/base.ckpt; methods must share the pretrained base");
        } else if (fxc != fx_checksum) {
            throw std::runtime_error("compare: feature extractors differ between configs");
        }
    }

    const std::string table_path = join(out_dir, "compare.csv");
    start_csv(table_path, "method,checkpoint,reward,frechet,promptsim,kl_to_base");
    std::vector<PlotSeries> reward_series, pareto_series;
    std::ostringstream table;
    table << "method      reward        frechet       promptsim     kl_to_base\n";
    for (const ExperimentConfig& c : cfgs) {
        const std::vector<MetricsRow> rows = read_metrics_csv(join(c.out_dir, "metrics.csv"));
        const MetricsRow& last = rows.back();
        const std::string method = method_name(c.finetune.method);
        append_csv(table_path, "", method + "," + metrics_line(last));
        PlotSeries rs{method, {}, {}}, ps{method, {}, {}};
        for (const MetricsRow& r : rows) {
            rs.x.push_back(r.step);
            rs.y.push_back(r.reward);
            ps.x.push_back(r.kl);
            ps.y.push_back(r.reward);
        }
        reward_series.push_back(std::move(rs));
        pareto_series.push_back(std::move(ps));
        table << method << std::string(method.size() < 12 ? 12 - method.size() : 1, ' ') << fmt17(last.reward) << "  "
              << fmt17(last.frechet) << "  " << fmt17(last.promptsim) << "  " << fmt17(last.kl) << '\n';
    }
    write_text_file(join(out_dir, "compare_reward.svg"),
                    svg_chart("mean log-reward by method", "step", "log-reward", reward_series));
    write_text_file(join(out_dir, "compare_pareto.svg"),
                    svg_chart("reward against divergence from base", "kl_to_base", "log-reward", pareto_series, true));
    std::cout << table.str();
}

}  // namespace nr2d3
