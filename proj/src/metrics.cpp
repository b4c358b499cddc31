#include "nr2d3/metrics.hpp"

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nr2d3/parallel.hpp"

namespace nr2d3 {
namespace {

void validate_protocol(const MetricsContext& ctx, const EvalProtocol& protocol) {
    if (!ctx.sched) throw std::invalid_argument("metrics: schedule not set");
    if (shape_numel(ctx.latent_shape) < 1) throw std::invalid_argument("metrics: latent shape is empty");
    if (protocol.labels.empty()) throw std::invalid_argument("metrics: protocol has no labels");
    for (int l : protocol.labels)
        if (l < 0) throw std::invalid_argument("metrics: negative label " + std::to_string(l));
    if (protocol.samples_per_prompt < 2)
        throw std::invalid_argument("metrics: need at least 2 samples per prompt, got " +
                                    std::to_string(protocol.samples_per_prompt));
    if (protocol.views_per_sample < 1) throw std::invalid_argument("metrics: need at least one view per sample");
}

// Per-cell stream tags. Keyed by label identity and sample index (never list position),
// so reordering the label list cannot change any drawn sample.
std::uint64_t cell_tag(std::uint64_t stream, int label, int sample) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL * (stream + 1);
    h ^= 0x100000001b3ULL * (static_cast<std::uint64_t>(label) + 1);
    h ^= 0xb5297a4d3a2f19c5ULL * (static_cast<std::uint64_t>(sample) + 1);
    return h;
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

struct Gaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

Gaussian fit_gaussian(const std::vector<Array>& rows, bool* regularized) {
    const std::int64_t d = rows.front().numel();
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    Eigen::MatrixXd x(n, d);
    for (std::int64_t i = 0; i < n; ++i) {
        const Array& r = rows[static_cast<std::size_t>(i)];
        if (r.numel() != d) throw std::invalid_argument("frechet_distance: feature vectors differ in length");
        for (std::int64_t j = 0; j < d; ++j) x(i, j) = r[j];
    }
    Gaussian g;
    g.mean = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
    g.cov = centered.transpose() * centered / static_cast<double>(n - 1);
    g.cov = 0.5 * (g.cov + g.cov.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10) {
        g.cov += 1e-8 * Eigen::MatrixXd::Identity(d, d);
        if (regularized) *regularized = true;
    }
    return g;
}

}  // namespace

FeatureExtractor make_feature_extractor(int image_h, int image_w, int dim, Rng& rng) {
    if (image_h < 1 || image_w < 1) throw std::invalid_argument("feature extractor: empty image");
    if (dim < 1) throw std::invalid_argument("feature extractor: feature dim must be positive");
    FeatureExtractor fx;
    fx.image_h = image_h;
    fx.image_w = image_w;
    fx.dim = dim;
    const std::int64_t n = static_cast<std::int64_t>(image_h) * image_w * 3;
    fx.proj = rng.normal_array({dim, n});
    fx.proj.data() /= std::sqrt(static_cast<double>(n));  // keeps features O(1) for O(1) pixels
    return fx;
}

Array extract_features(const FeatureExtractor& fx, const Array& rgb) {
    const std::int64_t n = static_cast<std::int64_t>(fx.image_h) * fx.image_w * 3;
    if (rgb.numel() != n)
        throw std::invalid_argument("extract_features: image has " + std::to_string(rgb.numel()) +
                                    " values, extractor expects " + std::to_string(n));
    Array out = Array::zeros({fx.dim});
    for (int d = 0; d < fx.dim; ++d) {
        double acc = 0.0;
        const std::int64_t row = static_cast<std::int64_t>(d) * n;
        for (std::int64_t i = 0; i < n; ++i) acc += fx.proj[row + i] * rgb[i];
        out[d] = acc;
    }
    return out;
}

std::uint64_t feature_checksum(const FeatureExtractor& fx) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed_byte = [&](unsigned char b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    auto feed_u64 = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) feed_byte(static_cast<unsigned char>(v >> (8 * i)));
    };
    feed_u64(static_cast<std::uint64_t>(fx.image_h));
    feed_u64(static_cast<std::uint64_t>(fx.image_w));
    feed_u64(static_cast<std::uint64_t>(fx.dim));
    for (std::int64_t i = 0; i < fx.proj.numel(); ++i) feed_u64(std::bit_cast<std::uint64_t>(fx.proj[i]));
    return h;
}

Array label_target(const FeatureExtractor& fx, int label) {
    if (label < 0) throw std::invalid_argument("label_target: negative label");
    Rng rng(feature_checksum(fx) ^ (0x517cc1b727220a95ULL * (static_cast<std::uint64_t>(label) + 1)));
    Array v = rng.normal_array({fx.dim});
    v.data() /= std::sqrt(v.data().square().sum());
    return v;
}

std::vector<std::vector<Array>> eval_latents(const EpsFn& model, const MetricsContext& ctx,
                                             const EvalProtocol& protocol) {
    validate_protocol(ctx, protocol);
    const Rng root(protocol.seed);
    const double std_scale = protocol.stochastic ? 1.0 : 0.0;
    const std::int64_t samples = protocol.samples_per_prompt;
    std::vector<std::vector<Array>> out(protocol.labels.size(),
                                        std::vector<Array>(static_cast<std::size_t>(samples), Array::zeros({1})));
    // Cells are keyed by (label, sample) alone, so they are independent and each slot
    // write reproduces the sequential result for any worker count.
    parallel_for(static_cast<std::int64_t>(protocol.labels.size()) * samples, [&](std::int64_t i) {
        const std::size_t p = static_cast<std::size_t>(i / samples);
        const int s = static_cast<int>(i % samples);
        Rng r = root.derive(cell_tag(1, protocol.labels[p], s));
        out[p][static_cast<std::size_t>(s)] =
            sample_trajectory(model, *ctx.sched, ctx.latent_shape, protocol.labels[p], r, 1.0, std_scale).z[0];
    });
    return out;
}

double eval_reward(const EpsFn& model, const RewardModel& reward, const MetricsContext& ctx,
                   const EvalProtocol& protocol) {
    std::vector<std::vector<Array>> latents = eval_latents(model, ctx, protocol);
    const Rng root(protocol.seed);
    const std::vector<CameraPose> cams = base_cameras(protocol.views_per_sample, ctx.image_h, ctx.image_w);
    const std::int64_t samples = protocol.samples_per_prompt;
    // Per-cell values are computed in parallel slots; the nested means below then reduce
    // them in a fixed order, keeping the result byte-identical for any worker count.
    std::vector<double> cell(static_cast<std::size_t>(protocol.labels.size()) * static_cast<std::size_t>(samples));
    parallel_for(static_cast<std::int64_t>(cell.size()), [&](std::int64_t i) {
        const std::size_t p = static_cast<std::size_t>(i / samples);
        const int s = static_cast<int>(i % samples);
        Rng rr = root.derive(cell_tag(2, protocol.labels[p], s));
        // The estimate's value is already the per-view mean, the innermost level.
        cell[static_cast<std::size_t>(i)] =
            log_reward_3d(reward, latents[p][static_cast<std::size_t>(s)], cams, protocol.labels[p], ctx.render, &rr)
                .value;
    });
    double label_acc = 0.0;
    for (std::size_t p = 0; p < protocol.labels.size(); ++p) {
        double sample_acc = 0.0;
        for (int s = 0; s < protocol.samples_per_prompt; ++s)
            sample_acc += cell[p * static_cast<std::size_t>(samples) + static_cast<std::size_t>(s)];
        label_acc += sample_acc / static_cast<double>(protocol.samples_per_prompt);
    }
    return label_acc / static_cast<double>(protocol.labels.size());
}

double eval_promptsim(const EpsFn& model, const FeatureExtractor& fx, const MetricsContext& ctx,
                      const EvalProtocol& protocol) {
    if (fx.image_h != ctx.image_h || fx.image_w != ctx.image_w)
        throw std::invalid_argument("eval_promptsim: extractor image size does not match the context");
    std::vector<std::vector<Array>> latents = eval_latents(model, ctx, protocol);
    const std::vector<CameraPose> cams = base_cameras(protocol.views_per_sample, ctx.image_h, ctx.image_w);
    const std::int64_t samples = protocol.samples_per_prompt;
    std::vector<Array> targets;
    targets.reserve(protocol.labels.size());
    for (int label : protocol.labels) targets.push_back(label_target(fx, label));
    std::vector<double> cell(static_cast<std::size_t>(protocol.labels.size()) * static_cast<std::size_t>(samples));
    parallel_for(static_cast<std::int64_t>(cell.size()), [&](std::int64_t i) {
        const std::size_t p = static_cast<std::size_t>(i / samples);
        const std::size_t s = static_cast<std::size_t>(i % samples);
        double view_acc = 0.0;
        for (const CameraPose& cam : cams) {
            Array feat = extract_features(fx, render(latents[p][s], cam, ctx.render).rgb);
            const double norm = std::sqrt(feat.data().square().sum());
            view_acc += norm < 1e-12 ? 0.0 : (feat.data() * targets[p].data()).sum() / norm;
        }
        cell[static_cast<std::size_t>(i)] = view_acc / static_cast<double>(cams.size());
    });
    double label_acc = 0.0;
    for (std::size_t p = 0; p < protocol.labels.size(); ++p) {
        double sample_acc = 0.0;
        for (std::size_t s = 0; s < static_cast<std::size_t>(samples); ++s)
            sample_acc += cell[p * static_cast<std::size_t>(samples) + s];
        label_acc += sample_acc / static_cast<double>(protocol.samples_per_prompt);
    }
    return label_acc / static_cast<double>(protocol.labels.size());
}

double frechet_distance(const std::vector<Array>& a, const std::vector<Array>& b, bool* regularized) {
    if (regularized) *regularized = false;
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("frechet_distance: need at least 2 samples per side");
    Gaussian ga = fit_gaussian(a, regularized);
    Gaussian gb = fit_gaussian(b, regularized);
    if (ga.mean.size() != gb.mean.size())
        throw std::invalid_argument("frechet_distance: feature dimensions differ between sides");
    const Eigen::MatrixXd sa = sqrtm_psd(ga.cov);
    Eigen::MatrixXd cross = sa * gb.cov * sa;
    cross = 0.5 * (cross + cross.transpose());
    const double tr_cross = sqrtm_psd(cross).trace();
    return (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * tr_cross;
}

double eval_frechet(const EpsFn& model, const EpsFn& base, const FeatureExtractor& fx, const MetricsContext& ctx,
                    const EvalProtocol& protocol, bool* regularized) {
    if (regularized) *regularized = false;
    if (fx.image_h != ctx.image_h || fx.image_w != ctx.image_w)
        throw std::invalid_argument("eval_frechet: extractor image size does not match the context");
    std::vector<std::vector<Array>> model_lat = eval_latents(model, ctx, protocol);
    std::vector<std::vector<Array>> base_lat = eval_latents(base, ctx, protocol);
    const std::vector<CameraPose> cams = base_cameras(protocol.views_per_sample, ctx.image_h, ctx.image_w);
    const std::int64_t n_cams = static_cast<std::int64_t>(cams.size());
    std::vector<double> cell(protocol.labels.size() * cams.size());
    std::vector<unsigned char> flags(cell.size(), 0);
    parallel_for(static_cast<std::int64_t>(cell.size()), [&](std::int64_t i) {
        const std::size_t p = static_cast<std::size_t>(i / n_cams);
        const CameraPose& cam = cams[static_cast<std::size_t>(i % n_cams)];
        std::vector<Array> fa, fb;
        fa.reserve(model_lat[p].size());
        fb.reserve(base_lat[p].size());
        for (const Array& z : model_lat[p]) fa.push_back(extract_features(fx, render(z, cam, ctx.render).rgb));
        for (const Array& z : base_lat[p]) fb.push_back(extract_features(fx, render(z, cam, ctx.render).rgb));
        bool cell_flag = false;
        cell[static_cast<std::size_t>(i)] = frechet_distance(fa, fb, &cell_flag);
        flags[static_cast<std::size_t>(i)] = cell_flag ? 1 : 0;
    });
    double label_acc = 0.0;
    for (std::size_t p = 0; p < protocol.labels.size(); ++p) {
        double view_acc = 0.0;
        for (std::size_t c = 0; c < cams.size(); ++c) {
            view_acc += cell[p * cams.size() + c];
            if (flags[p * cams.size() + c] && regularized) *regularized = true;
        }
        label_acc += view_acc / static_cast<double>(cams.size());
    }
    return label_acc / static_cast<double>(protocol.labels.size());
}

double kl_to_base(const EpsFn& finetuned, const EpsFn& base, const NoiseSchedule& sched, const Shape& shape, int cond,
                  int n_trajectories, Rng& rng) {
    if (n_trajectories < 1) throw std::invalid_argument("kl_to_base: need at least one trajectory");
    double acc = 0.0;
    for (int i = 0; i < n_trajectories; ++i) {
        Trajectory traj = sample_trajectory(finetuned, sched, shape, cond, rng);
        acc += path_log_ratio(traj, base, sched);
    }
    return acc / static_cast<double>(n_trajectories);
}

}  // namespace nr2d3
