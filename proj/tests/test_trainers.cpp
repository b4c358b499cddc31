#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "nr2d3/gradcheck.hpp"
#include "nr2d3/trainers.hpp"

using namespace nr2d3;

namespace {

void jiggle(NamedParams& params, Rng& rng, double scale) {
    for (Array& v : params.values) {
        Array n = rng.normal_array(v.shape());
        v.data() += scale * n.data();
    }
}

void jiggle_adapter(LowRankAdapter& ad, Rng& rng, double scale) {
    for (Array& b : ad.B) {
        Array n = rng.normal_array(b.shape());
        b.data() += scale * n.data();
    }
}

bool nets_equal(const EpsNet& a, const EpsNet& b) {
    if (a.params.values.size() != b.params.values.size()) return false;
    for (std::size_t i = 0; i < a.params.values.size(); ++i)
        if (!bit_equal(a.params.values[i], b.params.values[i])) return false;
    return true;
}

bool policies_equal(const TrainState& a, const TrainState& b) {
    for (std::size_t i = 0; i < a.adapter.A.size(); ++i)
        if (!bit_equal(a.adapter.A[i], b.adapter.A[i]) || !bit_equal(a.adapter.B[i], b.adapter.B[i])) return false;
    for (std::size_t i = 0; i < a.resnet.params.values.size(); ++i)
        if (!bit_equal(a.resnet.params.values[i], b.resnet.params.values[i])) return false;
    return true;
}

// One-splat training rig: narrow jiggled base net, rank-1 adapter, chroma reward, small
// images. context() points into the rig, so call it on the rig's final resting place.
struct TRig {
    NoiseSchedule sched;
    RewardModel reward;
    TrainState state;
    Shape shape;
    int image = 8;

    TrainContext context() const {
        TrainContext ctx;
        ctx.sched = &sched;
        ctx.reward = &reward;
        ctx.latent_shape = shape;
        ctx.image_h = image;
        ctx.image_w = image;
        ctx.cond = 0;
        return ctx;
    }
};

TRig make_trig(std::uint64_t seed, bool jiggled_adapter, double chroma_w = 0.8, double tv_w = 0.25, int T = 6) {
    Rng rng(seed);
    TRig rig;
    EpsNetConfig nc;
    nc.state_dim = static_cast<int>(latent_dim(1));
    nc.width = 6;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 1;
    EpsNet base = make_eps_net(nc, rng);
    jiggle(base.params, rng, 0.08);
    rig.sched = make_schedule(ScheduleKind::LinearAlphaBar, T);
    rig.reward = make_reward_aesthetic(chroma_w, tv_w);
    ResidualNetConfig rc;
    rc.state_dim = nc.state_dim;
    rc.width = 4;
    rc.depth = 1;
    rc.time_features = 2;
    rig.state = make_train_state(base, 1, 1.0, rc, rng);
    if (jiggled_adapter) jiggle_adapter(rig.state.adapter, rng, 0.05);
    rig.shape = {latent_dim(1)};
    return rig;
}

// Tiny scalar-state setup for estimator math: T = 2 chain, linear latent reward sum(x).
struct ScalarRig {
    NoiseSchedule sched;
    TrainState state;
    Shape shape;

    TrainContext context() const {
        TrainContext ctx;
        ctx.sched = &sched;
        ctx.latent_reward = [](Tape& tape, Var x) { return dot(x, constant(tape, Array::constant(x.val().shape(), 1.0))); };
        ctx.latent_shape = shape;
        return ctx;
    }
};

ScalarRig make_scalar_rig(std::uint64_t seed, int T = 2) {
    Rng rng(seed);
    ScalarRig rig;
    EpsNetConfig nc;
    nc.state_dim = 1;
    nc.width = 2;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 1;
    EpsNet base = make_eps_net(nc, rng);
    jiggle(base.params, rng, 0.1);
    rig.sched = make_schedule(ScheduleKind::LinearAlphaBar, T);
    ResidualNetConfig rc;
    rc.state_dim = 1;
    rc.width = 2;
    rc.depth = 1;
    rc.time_features = 2;
    rig.state = make_train_state(base, 1, 1.0, rc, rng);
    jiggle_adapter(rig.state.adapter, rng, 0.3);
    rig.shape = {1};
    return rig;
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

TEST_CASE("method and loss variant names round-trip") {
    for (Method m : {Method::nabla, Method::ddpo, Method::refl, Method::draft, Method::sds3d})
        CHECK(method_from_string(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_string("sgd"), std::invalid_argument);
    CHECK(loss_variant_from_string("approx") == LossVariant::approx);
    CHECK(loss_variant_from_string("full") == LossVariant::full);
    CHECK(loss_variant_from_string("forward+reverse+terminal") == LossVariant::full);
    CHECK(loss_variant_from_string(loss_variant_name(LossVariant::full)) == LossVariant::full);
    CHECK_THROWS_AS(loss_variant_from_string("exact"), std::invalid_argument);
}

TEST_CASE("fresh training state starts at the base policy with zero momentum") {
    TRig rig = make_trig(3, false);
    const TrainState& st = rig.state;
    CHECK(st.step == 0);
    // Zero-initialized adapter: the merged policy and the snapshot are both the base net.
    CHECK(nets_equal(st.snapshot, st.base));
    CHECK(nets_equal(adapter_merge(st.base, st.adapter), st.base));
    REQUIRE(st.vel_a.size() == st.adapter.A.size());
    REQUIRE(st.vel_b.size() == st.adapter.B.size());
    REQUIRE(st.vel_res.size() == st.resnet.params.values.size());
    for (const Array& v : st.vel_a) CHECK(v.data().abs().maxCoeff() == 0.0);
    for (const Array& v : st.vel_b) CHECK(v.data().abs().maxCoeff() == 0.0);
    for (const Array& v : st.vel_res) CHECK(v.data().abs().maxCoeff() == 0.0);

    Rng rng(5);
    ResidualNetConfig bad;
    bad.state_dim = st.base.cfg.state_dim + 1;
    CHECK_THROWS_AS(make_train_state(st.base, 1, 1.0, bad, rng), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves every parameter untouched but still reports") {
    TRig rig = make_trig(11, true);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    fc.lr = 0.0;
    fc.batch_size = 2;
    fc.beta = 5.0;

    StepReport (*steps[])(TrainState&, const TrainContext&, const FinetuneConfig&, Rng&) = {nabla_step, ddpo_step,
                                                                                            refl_step, draft_step};
    for (auto* step : steps) {
        TrainState st = rig.state;
        const TrainState before = st;
        Rng rng(7);
        StepReport rep = step(st, ctx, fc, rng);
        CHECK(policies_equal(st, before));
        CHECK(st.step == 1);
        CHECK(rep.step == 1);
        CHECK(std::isfinite(rep.loss));
        CHECK(std::isfinite(rep.mean_log_reward));
        CHECK(std::isfinite(rep.kl_to_base));
        CHECK(rep.wall_seconds >= 0.0);
        // The snapshot still refreshes to the pre-update merge, which equals the live one.
        CHECK(nets_equal(st.snapshot, adapter_merge(before.base, before.adapter)));
    }
}

TEST_CASE("constant reward freezes every method exactly") {
    SUBCASE("score matching at the base policy") {
        TRig rig = make_trig(17, false, 0.0, 0.0);  // zero-weight reward, zero adapter
        TrainContext ctx = rig.context();
        FinetuneConfig fc;
        fc.lr = 1e-3;
        fc.batch_size = 2;
        const TrainState before = rig.state;
        Rng rng(23);
        StepReport rep = nabla_step(rig.state, ctx, fc, rng);
        // Score difference and reward target both vanish identically, so the loss and the
        // update are exact zeros and the policy stays the base model bit for bit.
        CHECK(rep.loss == 0.0);
        CHECK(rep.loss_main == 0.0);
        CHECK(rep.loss_reg == 0.0);
        CHECK(policies_equal(rig.state, before));
    }
    SUBCASE("policy gradient, prediction, and replay at a moved policy") {
        TRig rig = make_trig(19, true, 0.0, 0.0);
        TrainContext ctx = rig.context();
        FinetuneConfig fc;
        fc.lr = 1e-2;
        fc.batch_size = 3;
        StepReport (*steps[])(TrainState&, const TrainContext&, const FinetuneConfig&, Rng&) = {ddpo_step, refl_step,
                                                                                                draft_step};
        for (auto* step : steps) {
            TrainState st = rig.state;
            const TrainState before = st;
            Rng rng(29);
            StepReport rep = step(st, ctx, fc, rng);
            CHECK(rep.loss == 0.0);
            CHECK(policies_equal(st, before));
        }
    }
}

TEST_CASE("same seed reproduces a training run bit for bit") {
    FinetuneConfig fc;
    fc.lr = 5e-3;
    fc.batch_size = 2;
    fc.beta = 5.0;
    fc.lambda = 10.0;
    StepReport (*steps[])(TrainState&, const TrainContext&, const FinetuneConfig&, Rng&) = {nabla_step, ddpo_step,
                                                                                            refl_step, draft_step};
    for (auto* step : steps) {
        TRig a = make_trig(31, true);
        TRig b = make_trig(31, true);
        TrainContext ca = a.context();
        TrainContext cb = b.context();
        Rng ra(41);
        Rng rb(41);
        for (int k = 0; k < 2; ++k) {
            StepReport pa = step(a.state, ca, fc, ra);
            StepReport pb = step(b.state, cb, fc, rb);
            CHECK(pa.loss == pb.loss);
            CHECK(pa.loss_main == pb.loss_main);
            CHECK(pa.loss_reg == pb.loss_reg);
            CHECK(pa.mean_log_reward == pb.mean_log_reward);
            CHECK(pa.kl_to_base == pb.kl_to_base);
        }
        CHECK(policies_equal(a.state, b.state));
        CHECK(ra.state() == rb.state());
    }
}

TEST_CASE("snapshot lags the live policy by exactly one update") {
    TRig rig = make_trig(37, true);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    fc.lr = 1e-2;
    fc.lambda = 0.0;
    fc.batch_size = 2;
    fc.beta = 5.0;
    Rng rng(43);

    EpsNet merged0 = adapter_merge(rig.state.base, rig.state.adapter);
    nabla_step(rig.state, ctx, fc, rng);
    CHECK(nets_equal(rig.state.snapshot, merged0));

    EpsNet merged1 = adapter_merge(rig.state.base, rig.state.adapter);
    CHECK_FALSE(nets_equal(merged1, merged0));  // the update actually moved the policy
    nabla_step(rig.state, ctx, fc, rng);
    CHECK(nets_equal(rig.state.snapshot, merged1));
    CHECK_FALSE(nets_equal(rig.state.snapshot, adapter_merge(rig.state.base, rig.state.adapter)));
    CHECK(rig.state.step == 2);
}

TEST_CASE("non-finite loss aborts with the component breakdown") {
    TRig rig = make_trig(47, true);
    TrainContext ctx = rig.context();
    ctx.reward = nullptr;
    ctx.latent_reward = [](Tape& tape, Var x) {
        return smul(sqnorm(x), std::numeric_limits<double>::quiet_NaN());
    };
    FinetuneConfig fc;
    fc.batch_size = 2;
    Rng rng(53);
    // The tape aborts eagerly at the first op that produces a non-finite value; the
    // step-level breakdown is a second line of defense behind it. Either way the step
    // must surface a non-finite abort rather than updating parameters.
    const TrainState before = rig.state;
    try {
        nabla_step(rig.state, ctx, fc, rng);
        FAIL("expected a non-finite abort");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
    CHECK(policies_equal(rig.state, before));
    CHECK(rig.state.step == 0);
}

TEST_CASE("policy gradient rejects degenerate setups") {
    TRig rig = make_trig(59, true);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    Rng rng(61);

    // A single-sample batch has no baseline to center against.
    fc.batch_size = 1;
    CHECK_THROWS_AS(ddpo_step(rig.state, ctx, fc, rng), std::invalid_argument);

    // A zero reverse-step std makes the transition log-density ill-defined.
    fc.batch_size = 2;
    NoiseSchedule broken = rig.sched;
    broken.post_std[2] = 0.0;
    TrainContext ctx2 = rig.context();
    ctx2.sched = &broken;
    try {
        ddpo_step(rig.state, ctx2, fc, rng);
        FAIL("expected a rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("std") != std::string::npos);
    }
}

TEST_CASE("finetune configuration validation") {
    TRig rig = make_trig(67, true);
    TrainContext ctx = rig.context();
    Rng rng(71);
    auto expect_throw = [&](FinetuneConfig fc) {
        CHECK_THROWS_AS(finetune_step(rig.state, ctx, fc, rng), std::invalid_argument);
    };
    FinetuneConfig fc;
    fc.beta = 0.0;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.lambda = -1.0;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.w_b = -0.5;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.fraction = 1.5;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.lr = -1e-4;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.momentum = 1.0;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.batch_size = 0;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.cameras_per_transition = 0;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.method = Method::draft;
    fc.draft_k = 0;
    expect_throw(fc);
    fc.draft_k = rig.sched.T + 1;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.method = Method::refl;
    fc.refl_t_lo = 0;
    fc.refl_t_hi = 3;
    expect_throw(fc);
    fc.refl_t_lo = 4;
    fc.refl_t_hi = 3;
    expect_throw(fc);
    fc.refl_t_lo = 2;
    fc.refl_t_hi = rig.sched.T + 1;
    expect_throw(fc);
    fc = FinetuneConfig{};
    fc.method = Method::sds3d;
    expect_throw(fc);  // per-latent optimization is not a finetune step

    // Mismatched momentum buffers are rejected before any work.
    TrainState broken = rig.state;
    broken.vel_a.pop_back();
    FinetuneConfig ok;
    CHECK_THROWS_AS(nabla_step(broken, ctx, ok, rng), std::invalid_argument);
}

TEST_CASE("policy gradient direction matches the finite-difference gradient of the expected reward") {
    ScalarRig proto = make_scalar_rig(73);
    TrainContext ctx = proto.context();
    FinetuneConfig fc;
    fc.method = Method::ddpo;
    fc.batch_size = 2;
    fc.lr = 1.0;
    fc.momentum = 0.0;

    // Estimator samples: parameter deltas of fresh copies, one step each. With unit
    // learning rate and zero momentum the delta is exactly the surrogate gradient.
    const int K = 8000;
    std::vector<double> g0(K), g1(K);
    Rng stream(79);
    for (int k = 0; k < K; ++k) {
        TrainState st = proto.state;
        const double b0 = st.adapter.B[0][0];
        const double b1 = st.adapter.B[1][0];
        ddpo_step(st, ctx, fc, stream);
        g0[static_cast<std::size_t>(k)] = b0 - st.adapter.B[0][0];
        g1[static_cast<std::size_t>(k)] = b1 - st.adapter.B[1][0];
    }

    // Finite difference of J(theta) = E[sum z_0] via common random numbers.
    auto expected_reward = [&](int slot, double delta) {
        TrainState st = proto.state;
        st.adapter.B[static_cast<std::size_t>(slot)][0] += delta;
        EpsFn fn = make_eps_fn(st.base, st.adapter);
        const int M = 20000;
        double acc = 0.0;
        for (int m = 0; m < M; ++m) {
            Rng r(100000 + static_cast<std::uint64_t>(m));
            Trajectory traj = sample_trajectory(fn, proto.sched, proto.shape, 0, r);
            acc += traj.z[0][0];
        }
        return acc / static_cast<double>(M);
    };
    const double h = 5e-3;
    const double dj0 = (expected_reward(0, h) - expected_reward(0, -h)) / (2.0 * h);
    const double dj1 = (expected_reward(1, h) - expected_reward(1, -h)) / (2.0 * h);

    // The batch-mean baseline scales the estimator by (1 - 1/n): with n samples the
    // self-term survives in n-1 of the n centered weights.
    const double scale = 1.0 - 1.0 / static_cast<double>(fc.batch_size);
    CAPTURE(mean_of(g0));
    CAPTURE(dj0);
    CAPTURE(mean_of(g1));
    CAPTURE(dj1);
    CHECK(std::abs(-mean_of(g0) - scale * dj0) <= 3.0 * stderr_of(g0));
    CHECK(std::abs(-mean_of(g1) - scale * dj1) <= 3.0 * stderr_of(g1));
}

TEST_CASE("single-step prediction finetuning matches a handmade graph") {
    TRig rig = make_trig(83, true);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    fc.method = Method::refl;
    fc.refl_t_lo = 4;
    fc.refl_t_hi = 4;  // width-one range: the drawn step is always 4
    fc.batch_size = 2;
    fc.lr = 5e-3;
    fc.momentum = 0.9;

    TrainState manual = rig.state;
    const EpsNet pre_merge = adapter_merge(manual.base, manual.adapter);
    Rng ra(89);
    Rng rb(89);
    StepReport rep = refl_step(rig.state, ctx, fc, ra);

    // Twin construction on a twin stream: same trajectory draws, same discarded step
    // draw, same cameras, same tape ops.
    EpsFn fn = make_eps_fn(manual.base, manual.adapter);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 2; ++i) trajs.push_back(sample_trajectory(fn, rig.sched, rig.shape, 0, rb));
    Tape tape;
    EpsVars vars = bind_eps(tape, manual.base, &manual.adapter);
    Var acc;
    for (int i = 0; i < 2; ++i) {
        (void)rb.below(1);
        Var zt = constant(tape, trajs[static_cast<std::size_t>(i)].z[4]);
        Var xhat = taped_one_step_prediction(tape, vars, rig.sched, zt, 4, 0);
        std::vector<CameraPose> cams = sample_cameras(rb, 1, rig.image, rig.image);
        TapedRender view = render_taped(tape, xhat, cams[0], ctx.render);
        TapedScalar s = log_reward_taped(tape, rig.reward, view, 0, &rb);
        Var term = smul(s.value, 1.0);
        acc = i == 0 ? term : add(acc, term);
    }
    Var total = smul(acc, -0.5);
    CHECK(rep.loss == total.val().scalar_value());

    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, total, wrt);
    for (std::size_t i = 0; i < manual.adapter.A.size(); ++i) {
        manual.vel_a[i].data() = fc.momentum * manual.vel_a[i].data() + grads.at(vars.a_ids[i]).data();
        manual.adapter.A[i].data() -= fc.lr * manual.vel_a[i].data();
        manual.vel_b[i].data() = fc.momentum * manual.vel_b[i].data() + grads.at(vars.b_ids[i]).data();
        manual.adapter.B[i].data() -= fc.lr * manual.vel_b[i].data();
    }
    CHECK(policies_equal(rig.state, manual));
    CHECK(nets_equal(rig.state.snapshot, pre_merge));
}

TEST_CASE("reward backprop window replays the sampler bit for bit") {
    TRig rig = make_trig(97, true);
    TrainContext ctx = rig.context();
    for (int K : {1, 2}) {
        FinetuneConfig fc;
        fc.method = Method::draft;
        fc.draft_k = K;
        fc.batch_size = 2;
        fc.lr = 5e-3;

        TrainState manual = rig.state;
        Rng ra(101);
        Rng rb(101);
        StepReport rep = draft_step(rig.state, ctx, fc, ra);

        EpsFn fn = make_eps_fn(manual.base, manual.adapter);
        std::vector<Trajectory> trajs;
        for (int i = 0; i < 2; ++i) trajs.push_back(sample_trajectory(fn, rig.sched, rig.shape, 0, rb));
        Tape tape;
        EpsVars vars = bind_eps(tape, manual.base, &manual.adapter);
        Var acc;
        for (int i = 0; i < 2; ++i) {
            const Trajectory& traj = trajs[static_cast<std::size_t>(i)];
            Var z = constant(tape, traj.z[static_cast<std::size_t>(K)]);
            for (int t = K; t >= 1; --t) {
                const PosteriorCoef c = posterior_coef(rig.sched, t);
                EpsFwd fwd = eps_forward(tape, vars, z, t, 0);
                Var mu = smul(sub(z, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
                Array scaled = traj.noise[static_cast<std::size_t>(t)];
                scaled.data() *= traj.std[static_cast<std::size_t>(t)];
                z = add(mu, constant(tape, scaled));
            }
            // The replayed terminal state is the stored one, bit for bit.
            CHECK(bit_equal(z.val(), traj.z[0]));
            std::vector<CameraPose> cams = sample_cameras(rb, 1, rig.image, rig.image);
            TapedRender view = render_taped(tape, z, cams[0], ctx.render);
            TapedScalar s = log_reward_taped(tape, rig.reward, view, 0, &rb);
            Var term = smul(s.value, 1.0);
            acc = i == 0 ? term : add(acc, term);
        }
        Var total = smul(acc, -0.5);
        CHECK(rep.loss == total.val().scalar_value());
        rig = make_trig(97, true);  // fresh state for the next window size
    }
}

TEST_CASE("prediction and replay gradients match finite differences through their graphs") {
    TRig rig = make_trig(103, true);
    TrainContext ctx = rig.context();

    // Freeze one sample's states and camera from a throwaway stream.
    Rng setup(107);
    EpsFn fn = make_eps_fn(rig.state.base, rig.state.adapter);
    Trajectory traj = sample_trajectory(fn, rig.sched, rig.shape, 0, setup);
    std::vector<CameraPose> cams = sample_cameras(setup, 1, rig.image, rig.image);
    const int t_star = 4;

    SUBCASE("one-step prediction loss") {
        auto eval = [&](const Array& b0) {
            LowRankAdapter ad = rig.state.adapter;
            ad.B[0] = b0;
            Tape tape;
            EpsVars vars = bind_eps(tape, rig.state.base, &ad);
            Var zt = constant(tape, traj.z[t_star]);
            Var xhat = taped_one_step_prediction(tape, vars, rig.sched, zt, t_star, 0);
            TapedRender view = render_taped(tape, xhat, cams[0], ctx.render);
            TapedScalar s = log_reward_taped(tape, rig.reward, view, 0, nullptr);
            return -s.value.val().scalar_value();
        };
        Tape tape;
        EpsVars vars = bind_eps(tape, rig.state.base, &rig.state.adapter);
        Var zt = constant(tape, traj.z[t_star]);
        Var xhat = taped_one_step_prediction(tape, vars, rig.sched, zt, t_star, 0);
        TapedRender view = render_taped(tape, xhat, cams[0], ctx.render);
        TapedScalar s = log_reward_taped(tape, rig.reward, view, 0, nullptr);
        Var loss = smul(s.value, -1.0);
        Array analytic = backward(tape, loss, {vars.b_ids[0]}).at(vars.b_ids[0]);
        GradCheckReport rep = grad_check(eval, rig.state.adapter.B[0], analytic, 1e-4);
        CHECK(rep.max_rel_err < 1e-3);
    }

    SUBCASE("two-step replay loss") {
        Array scaled1 = traj.noise[1];
        scaled1.data() *= traj.std[1];
        Array scaled2 = traj.noise[2];
        scaled2.data() *= traj.std[2];
        auto build = [&](Tape& tape, const LowRankAdapter& ad) {
            EpsVars vars = bind_eps(tape, rig.state.base, &ad);
            Var z = constant(tape, traj.z[2]);
            for (int t = 2; t >= 1; --t) {
                const PosteriorCoef c = posterior_coef(rig.sched, t);
                EpsFwd fwd = eps_forward(tape, vars, z, t, 0);
                Var mu = smul(sub(z, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
                z = add(mu, constant(tape, t == 2 ? scaled2 : scaled1));
            }
            TapedRender view = render_taped(tape, z, cams[0], ctx.render);
            TapedScalar s = log_reward_taped(tape, rig.reward, view, 0, nullptr);
            return std::pair<Var, EpsVars>(smul(s.value, -1.0), vars);
        };
        auto eval = [&](const Array& b0) {
            LowRankAdapter ad = rig.state.adapter;
            ad.B[0] = b0;
            Tape tape;
            return build(tape, ad).first.val().scalar_value();
        };
        Tape tape;
        auto [loss, vars] = build(tape, rig.state.adapter);
        Array analytic = backward(tape, loss, {vars.b_ids[0]}).at(vars.b_ids[0]);
        GradCheckReport rep = grad_check(eval, rig.state.adapter.B[0], analytic, 1e-4);
        CHECK(rep.max_rel_err < 1e-3);
    }
}

TEST_CASE("finetune step dispatches on the configured method") {
    TRig rig = make_trig(109, true);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    fc.lr = 1e-3;
    fc.batch_size = 2;
    fc.beta = 5.0;
    for (Method m : {Method::nabla, Method::ddpo, Method::refl, Method::draft}) {
        TrainState st = rig.state;
        fc.method = m;
        Rng rng(113);
        StepReport rep = finetune_step(st, ctx, fc, rng);
        CHECK(rep.method == m);
        CHECK(st.step == 1);
    }
}

TEST_CASE("reward climbs under prediction and replay finetuning on the chroma proxy") {
    for (Method m : {Method::refl, Method::draft}) {
        TRig rig = make_trig(127, false);
        TrainContext ctx = rig.context();
        FinetuneConfig fc;
        fc.method = m;
        fc.lr = 2e-2;
        fc.batch_size = 2;
        Rng rng(131);
        std::vector<double> rewards;
        for (int k = 0; k < 50; ++k) rewards.push_back(finetune_step(rig.state, ctx, fc, rng).mean_log_reward);
        const double first = rewards.front();
        double tail = 0.0;
        for (int k = 45; k < 50; ++k) tail += rewards[static_cast<std::size_t>(k)];
        tail /= 5.0;
        CAPTURE(method_name(m));
        CAPTURE(first);
        CAPTURE(tail);
        CHECK(tail > first);
    }
}

TEST_CASE("score matching pushes the mean reward up on a linear latent toy") {
    ScalarRig rig = make_scalar_rig(137, 6);
    TrainContext ctx = rig.context();
    FinetuneConfig fc;
    fc.method = Method::nabla;
    fc.beta = 8.0;
    fc.lambda = 0.0;
    fc.fraction = 1.0;
    fc.batch_size = 4;
    fc.lr = 5e-4;
    Rng rng(139);
    std::vector<double> rewards;
    for (int k = 0; k < 80; ++k) rewards.push_back(nabla_step(rig.state, ctx, fc, rng).mean_log_reward);
    const double first = rewards.front();
    double tail = 0.0;
    for (int k = 70; k < 80; ++k) tail += rewards[static_cast<std::size_t>(k)];
    tail /= 10.0;
    CAPTURE(first);
    CAPTURE(tail);
    CHECK(tail > first);
}

TEST_CASE("latent optimizer ignores the reward exactly when it is constant") {
    TRig rig = make_trig(149, false, 0.0, 0.0);
    TrainContext ctx = rig.context();
    FinetuneConfig a;
    a.sds_eta = 0.0;
    a.sds_steps = 40;
    FinetuneConfig b = a;
    b.sds_eta = 2.0;
    Rng ra(151);
    Rng rb(151);
    Array za = sds3d_optimize(rig.state.base, ctx, a, ra);
    Array zb = sds3d_optimize(rig.state.base, ctx, b, rb);
    CHECK(bit_equal(za, zb));
    CHECK(ra.state() == rb.state());
}

TEST_CASE("latent optimizer validation and divergence abort") {
    TRig rig = make_trig(157, false);
    TrainContext ctx = rig.context();
    Rng rng(163);
    FinetuneConfig fc;
    fc.sds_lr = 0.0;
    CHECK_THROWS_AS(sds3d_optimize(rig.state.base, ctx, fc, rng), std::invalid_argument);
    fc = FinetuneConfig{};
    fc.sds_steps = 0;
    CHECK_THROWS_AS(sds3d_optimize(rig.state.base, ctx, fc, rng), std::invalid_argument);
    fc = FinetuneConfig{};
    fc.sds_eta = -1.0;
    CHECK_THROWS_AS(sds3d_optimize(rig.state.base, ctx, fc, rng), std::invalid_argument);
    fc = FinetuneConfig{};
    fc.sds_lr = 1e6;
    fc.sds_steps = 5;
    try {
        sds3d_optimize(rig.state.base, ctx, fc, rng);
        FAIL("expected a divergence abort");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("diverged") != std::string::npos);
    }
}

TEST_CASE("latent optimizer without reward lands in the base model's high-density set") {
    Rng rng(167);
    EpsNetConfig nc;
    nc.state_dim = 4;
    nc.width = 6;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 1;
    EpsNet base = make_eps_net(nc, rng);
    jiggle(base.params, rng, 0.1);
    NoiseSchedule sched = make_schedule(ScheduleKind::LinearAlphaBar, 8);

    TrainContext ctx;
    ctx.sched = &sched;
    ctx.latent_reward = [](Tape& tape, Var x) { return smul(sqnorm(x), 0.0); };
    ctx.latent_shape = {4};

    // Denoising-residual proxy for the base log-likelihood: lower residual on a fixed
    // probe set means the latent sits where the base score field points.
    Rng probe_rng(777);
    std::vector<int> probe_t;
    std::vector<Array> probe_eps;
    for (int m = 0; m < 32; ++m) {
        probe_t.push_back(1 + m % sched.T);
        probe_eps.push_back(probe_rng.normal_array({4}));
    }
    auto proxy = [&](const Array& z) {
        double acc = 0.0;
        for (std::size_t m = 0; m < probe_t.size(); ++m) {
            Array zt = q_sample(sched, z, probe_t[m], probe_eps[m]);
            Array pred = eps_predict(base, zt, probe_t[m], 0);
            acc -= (pred.data() - probe_eps[m].data()).square().sum();
        }
        return acc / static_cast<double>(probe_t.size());
    };

    EpsFn fn = make_eps_fn(base);
    std::vector<double> base_scores;
    for (int i = 0; i < 100; ++i) base_scores.push_back(proxy(sample_trajectory(fn, sched, {4}, 0, rng).z[0]));
    std::sort(base_scores.begin(), base_scores.end());
    const double p10 = base_scores[10];

    FinetuneConfig fc;
    fc.sds_eta = 0.0;
    fc.sds_steps = 300;
    fc.sds_lr = 0.02;
    Array z = sds3d_optimize(base, ctx, fc, rng);
    CAPTURE(proxy(z));
    CAPTURE(p10);
    CHECK(proxy(z) >= p10);
}

TEST_CASE("latent optimizer reward strength is monotone on the chroma proxy") {
    TRig rig = make_trig(173, false);
    TrainContext ctx = rig.context();
    std::vector<CameraPose> eval_cams = base_cameras(4, rig.image, rig.image);
    auto mean_reward_at = [&](double eta) {
        double acc = 0.0;
        for (std::uint64_t seed : {179ULL, 181ULL, 191ULL}) {
            FinetuneConfig fc;
            fc.sds_eta = eta;
            fc.sds_steps = 120;
            fc.sds_lr = 0.02;
            Rng rng(seed);
            Array z = sds3d_optimize(rig.state.base, ctx, fc, rng);
            acc += log_reward_3d(rig.reward, z, eval_cams, 0, ctx.render).value;
        }
        return acc / 3.0;
    };
    const double r0 = mean_reward_at(0.0);
    const double r1 = mean_reward_at(1.0);
    const double r3 = mean_reward_at(3.0);
    CAPTURE(r0);
    CAPTURE(r1);
    CAPTURE(r3);
    CHECK(r1 >= r0);
    CHECK(r3 >= r1);
}
