#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "nr2d3/metrics.hpp"

using namespace nr2d3;

namespace {

void jiggle(NamedParams& params, Rng& rng, double scale) {
    for (Array& v : params.values) {
        Array n = rng.normal_array(v.shape());
        v.data() += scale * n.data();
    }
}

// Small conditional model plus evaluation context. context() points into the rig, so
// call it on the rig's final resting place.
struct MRig {
    EpsNet base;
    NoiseSchedule sched;
    RewardModel reward;
    FeatureExtractor fx;
    int image = 8;

    MetricsContext context() const {
        MetricsContext ctx;
        ctx.sched = &sched;
        ctx.latent_shape = {latent_dim(1)};
        ctx.image_h = image;
        ctx.image_w = image;
        return ctx;
    }
};

MRig make_mrig(std::uint64_t seed, double chroma_w = 0.8, double tv_w = 0.25) {
    Rng rng(seed);
    MRig rig;
    EpsNetConfig nc;
    nc.state_dim = static_cast<int>(latent_dim(1));
    nc.width = 6;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 2;
    rig.base = make_eps_net(nc, rng);
    jiggle(rig.base.params, rng, 0.08);
    rig.sched = make_schedule(ScheduleKind::LinearAlphaBar, 6);
    rig.reward = make_reward_aesthetic(chroma_w, tv_w);
    rig.fx = make_feature_extractor(rig.image, rig.image, 16, rng);
    return rig;
}

EvalProtocol small_protocol() {
    EvalProtocol p;
    p.labels = {0, 1};
    p.samples_per_prompt = 3;
    p.views_per_sample = 4;
    p.seed = 99;
    return p;
}

double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc / static_cast<double>(xs.size());
}

double stderr_of(const std::vector<double>& xs) {
    const double m = mean_of(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - m) * (x - m);
    return std::sqrt(acc / (static_cast<double>(xs.size()) - 1.0) / static_cast<double>(xs.size()));
}

}  // namespace

TEST_CASE("feature extraction is a frozen linear map") {
    Rng rng(3);
    FeatureExtractor fx = make_feature_extractor(4, 4, 8, rng);
    Array a = rng.normal_array({4, 4, 3});
    Array b = rng.normal_array({4, 4, 3});
    Array sum = a;
    sum.data() += b.data();
    Array fa = extract_features(fx, a);
    Array fb = extract_features(fx, b);
    Array fsum = extract_features(fx, sum);
    for (std::int64_t i = 0; i < fx.dim; ++i) CHECK(fsum[i] == doctest::Approx(fa[i] + fb[i]).epsilon(1e-12));

    CHECK_THROWS_AS(extract_features(fx, rng.normal_array({3, 3, 3})), std::invalid_argument);
    CHECK_THROWS_AS(make_feature_extractor(0, 4, 8, rng), std::invalid_argument);
    CHECK_THROWS_AS(make_feature_extractor(4, 4, 0, rng), std::invalid_argument);
}

TEST_CASE("feature checksum pins the extractor bits") {
    Rng r1(7);
    Rng r2(7);
    FeatureExtractor a = make_feature_extractor(4, 4, 8, r1);
    FeatureExtractor b = make_feature_extractor(4, 4, 8, r2);
    CHECK(feature_checksum(a) == feature_checksum(b));
    b.proj[5] += 1e-12;
    CHECK(feature_checksum(a) != feature_checksum(b));
}

TEST_CASE("label targets are frozen unit directions") {
    Rng rng(11);
    FeatureExtractor fx = make_feature_extractor(4, 4, 8, rng);
    Array t0 = label_target(fx, 0);
    Array t1 = label_target(fx, 1);
    CHECK(std::sqrt(t0.data().square().sum()) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bit_equal(t0, label_target(fx, 0)));
    CHECK_FALSE(bit_equal(t0, t1));
    CHECK_THROWS_AS(label_target(fx, -1), std::invalid_argument);
}

TEST_CASE("frechet distance of a cloud against itself vanishes and is symmetric") {
    Rng rng(13);
    std::vector<Array> a, b;
    for (int i = 0; i < 40; ++i) a.push_back(rng.normal_array({3}));
    for (int i = 0; i < 30; ++i) {
        Array v = rng.normal_array({3});
        v.data() = 2.0 * v.data() + 0.5;
        b.push_back(v);
    }
    CHECK(std::abs(frechet_distance(a, a)) <= 1e-8);
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8);
    CHECK(frechet_distance(a, b) > 0.1);

    std::vector<Array> one = {rng.normal_array({3})};
    CHECK_THROWS_AS(frechet_distance(one, a), std::invalid_argument);
    std::vector<Array> wrong = {rng.normal_array({2}), rng.normal_array({2})};
    CHECK_THROWS_AS(frechet_distance(a, wrong), std::invalid_argument);
}

TEST_CASE("frechet distance matches the analytic Gaussian value") {
    Rng rng(17);

    SUBCASE("unit-variance mean shift in one dimension") {
        std::vector<Array> a, b;
        for (int i = 0; i < 10000; ++i) {
            a.push_back(rng.normal_array({1}));
            Array v = rng.normal_array({1});
            v.data() += 1.0;
            b.push_back(v);
        }
        CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(0.1));
    }

    SUBCASE("correlated two-dimensional cloud against the standard normal") {
        // A = L n + mu with L = [[1, 0], [0.5, 1.2]]: covariance eigenvalues are known in
        // closed form, and against the identity the cross term reduces to sqrt(Sigma_A).
        const double mu0 = 0.3, mu1 = -0.2;
        std::vector<Array> a, b;
        for (int i = 0; i < 20000; ++i) {
            Array n = rng.normal_array({2});
            Array v = Array::zeros({2});
            v[0] = n[0] + mu0;
            v[1] = 0.5 * n[0] + 1.2 * n[1] + mu1;
            a.push_back(v);
            b.push_back(rng.normal_array({2}));
        }
        const double tr_cov = 1.0 + (0.25 + 1.44);
        const double det_cov = 1.0 * 1.69 - 0.25;
        const double disc = std::sqrt(tr_cov * tr_cov - 4.0 * det_cov);
        const double l1 = 0.5 * (tr_cov + disc), l2 = 0.5 * (tr_cov - disc);
        const double analytic = mu0 * mu0 + mu1 * mu1 + tr_cov + 2.0 - 2.0 * (std::sqrt(l1) + std::sqrt(l2));
        CHECK(frechet_distance(a, b) == doctest::Approx(analytic).epsilon(0.2));
    }
}

TEST_CASE("evaluation latents are keyed by label and sample, not list order") {
    MRig rig = make_mrig(19);
    MetricsContext ctx = rig.context();
    EvalProtocol p = small_protocol();
    EpsFn model = make_eps_fn(rig.base);

    std::vector<std::vector<Array>> lat = eval_latents(model, ctx, p);
    std::vector<std::vector<Array>> again = eval_latents(model, ctx, p);
    REQUIRE(lat.size() == 2);
    REQUIRE(lat[0].size() == 3);
    for (std::size_t pi = 0; pi < lat.size(); ++pi)
        for (std::size_t s = 0; s < lat[pi].size(); ++s) CHECK(bit_equal(lat[pi][s], again[pi][s]));

    EvalProtocol swapped = p;
    swapped.labels = {1, 0};
    std::vector<std::vector<Array>> sw = eval_latents(model, ctx, swapped);
    for (std::size_t s = 0; s < 3; ++s) {
        CHECK(bit_equal(lat[0][s], sw[1][s]));
        CHECK(bit_equal(lat[1][s], sw[0][s]));
    }

    EvalProtocol noisy = p;
    noisy.stochastic = true;
    CHECK_FALSE(bit_equal(eval_latents(model, ctx, noisy)[0][0], lat[0][0]));
}

TEST_CASE("protocol validation") {
    MRig rig = make_mrig(23);
    MetricsContext ctx = rig.context();
    EpsFn model = make_eps_fn(rig.base);
    auto expect_throw = [&](EvalProtocol p) { CHECK_THROWS_AS(eval_latents(model, ctx, p), std::invalid_argument); };
    EvalProtocol p = small_protocol();
    p.samples_per_prompt = 1;
    expect_throw(p);
    p = small_protocol();
    p.labels = {};
    expect_throw(p);
    p = small_protocol();
    p.labels = {0, -1};
    expect_throw(p);
    p = small_protocol();
    p.views_per_sample = 0;
    expect_throw(p);
    // Off-orbit view counts surface from the camera builder inside the metric itself.
    p = small_protocol();
    p.views_per_sample = 3;
    CHECK_THROWS_AS(eval_reward(model, rig.reward, ctx, p), std::invalid_argument);
}

TEST_CASE("mean reward follows the view, sample, prompt nesting") {
    MRig rig = make_mrig(29);
    MetricsContext ctx = rig.context();
    EvalProtocol p = small_protocol();
    EpsFn model = make_eps_fn(rig.base);

    const double nested = eval_reward(model, rig.reward, ctx, p);

    // Flat-loop oracle: every (label, sample, view) log-reward averaged in one pass.
    std::vector<std::vector<Array>> lat = eval_latents(model, ctx, p);
    std::vector<CameraPose> cams = base_cameras(p.views_per_sample, rig.image, rig.image);
    double flat = 0.0;
    int count = 0;
    for (std::size_t pi = 0; pi < p.labels.size(); ++pi) {
        for (int s = 0; s < p.samples_per_prompt; ++s) {
            Reward3DEstimate est = log_reward_3d(rig.reward, lat[pi][static_cast<std::size_t>(s)], cams, p.labels[pi],
                                                 ctx.render);
            for (double v : est.per_camera) {
                flat += v;
                ++count;
            }
        }
    }
    flat /= static_cast<double>(count);
    CHECK(nested == doctest::Approx(flat).epsilon(1e-12));

    // A constant reward evaluates to exactly that constant.
    RewardModel flat_reward = make_reward_aesthetic(0.0, 0.0);
    CHECK(eval_reward(model, flat_reward, ctx, p) == 0.0);

    // Label order cannot matter.
    EvalProtocol swapped = p;
    swapped.labels = {1, 0};
    CHECK(eval_reward(model, rig.reward, ctx, swapped) == doctest::Approx(nested).epsilon(1e-12));
}

TEST_CASE("prompt similarity follows the same nesting and stays in cosine range") {
    MRig rig = make_mrig(31);
    MetricsContext ctx = rig.context();
    EvalProtocol p = small_protocol();
    EpsFn model = make_eps_fn(rig.base);

    const double nested = eval_promptsim(model, rig.fx, ctx, p);
    CHECK(nested >= -1.0);
    CHECK(nested <= 1.0);

    std::vector<std::vector<Array>> lat = eval_latents(model, ctx, p);
    std::vector<CameraPose> cams = base_cameras(p.views_per_sample, rig.image, rig.image);
    double flat = 0.0;
    int count = 0;
    for (std::size_t pi = 0; pi < p.labels.size(); ++pi) {
        Array target = label_target(rig.fx, p.labels[pi]);
        for (int s = 0; s < p.samples_per_prompt; ++s) {
            for (const CameraPose& cam : cams) {
                Array feat = extract_features(rig.fx, render(lat[pi][static_cast<std::size_t>(s)], cam, ctx.render).rgb);
                const double norm = std::sqrt(feat.data().square().sum());
                flat += norm < 1e-12 ? 0.0 : (feat.data() * target.data()).sum() / norm;
                ++count;
            }
        }
    }
    flat /= static_cast<double>(count);
    CHECK(nested == doctest::Approx(flat).epsilon(1e-12));

    EvalProtocol swapped = p;
    swapped.labels = {1, 0};
    CHECK(eval_promptsim(model, rig.fx, ctx, swapped) == doctest::Approx(nested).epsilon(1e-12));

    FeatureExtractor wrong = rig.fx;
    wrong.image_h = rig.image + 4;
    CHECK_THROWS_AS(eval_promptsim(model, wrong, ctx, p), std::invalid_argument);
}

TEST_CASE("per-view frechet against the base model") {
    MRig rig = make_mrig(37);
    MetricsContext ctx = rig.context();
    EvalProtocol p = small_protocol();
    p.samples_per_prompt = 8;
    EpsFn base = make_eps_fn(rig.base);

    bool flagged = true;
    CHECK(std::abs(eval_frechet(base, base, rig.fx, ctx, p, &flagged)) <= 1e-8);

    // A genuinely different model produces a strictly positive distance.
    Rng rng(41);
    EpsNet moved = rig.base;
    jiggle(moved.params, rng, 0.4);
    EpsFn model = make_eps_fn(moved);
    const double d = eval_frechet(model, base, rig.fx, ctx, p);
    CHECK(d > 1e-6);

    EvalProtocol swapped = p;
    swapped.labels = {1, 0};
    CHECK(eval_frechet(model, base, rig.fx, ctx, swapped) == doctest::Approx(d).epsilon(1e-12));
}

TEST_CASE("path KL to the base model") {
    SUBCASE("identical models give exactly zero") {
        MRig rig = make_mrig(43);
        EpsFn base = make_eps_fn(rig.base);
        Rng rng(47);
        CHECK(kl_to_base(base, base, rig.sched, {latent_dim(1)}, 0, 3, rng) == 0.0);
        CHECK_THROWS_AS(kl_to_base(base, base, rig.sched, {latent_dim(1)}, 0, 0, rng), std::invalid_argument);
    }

    SUBCASE("shifted-mean chain matches the analytic Gaussian KL and stays nonnegative") {
        NoiseSchedule sched = make_schedule(ScheduleKind::LinearAlphaBar, 2);
        const double shift = 0.3;
        EpsFn base = [](const Array& x, int, int) { return Array::zeros(x.shape()); };
        EpsFn fine = [&](const Array& x, int, int) { return Array::constant(x.shape(), shift); };

        // Each reverse step's mean moves by inv_sqrt_alpha * eps_coef * shift at equal
        // std, so the expected per-trajectory log ratio is the summed Gaussian KL.
        double analytic = 0.0;
        for (int t = 1; t <= sched.T; ++t) {
            const PosteriorCoef c = posterior_coef(sched, t);
            const double dmu = c.inv_sqrt_alpha * c.eps_coef * shift;
            analytic += dmu * dmu / (2.0 * sched.post_std[static_cast<std::size_t>(t)] *
                                     sched.post_std[static_cast<std::size_t>(t)]);
        }

        Rng rng(53);
        std::vector<double> draws;
        draws.reserve(10000);
        for (int i = 0; i < 10000; ++i) draws.push_back(kl_to_base(fine, base, sched, {1}, 0, 1, rng));
        const double m = mean_of(draws);
        const double se = stderr_of(draws);
        CAPTURE(m);
        CAPTURE(analytic);
        CAPTURE(se);
        CHECK(std::abs(m - analytic) <= 3.0 * se);
        CHECK(m >= -3.0 * se);
    }
}
