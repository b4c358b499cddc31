#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "nr2d3/gradcheck.hpp"
#include "nr2d3/losses.hpp"

using namespace nr2d3;

namespace {

void jiggle(NamedParams& params, Rng& rng, double scale) {
    for (Array& v : params.values) {
        Array n = rng.normal_array(v.shape());
        v.data() += scale * n.data();
    }
}

// Small end-to-end rig: one-splat latents, a narrow noise net with a rank-1 adapter, the
// chroma reward, and a couple of on-policy trajectories. Pointers in config() refer to
// the rig's own members, so keep the rig alive while the config is in use.
struct Rig {
    EpsNet base;
    LowRankAdapter adapter;
    ResidualNet resnet;
    NoiseSchedule sched;
    RewardModel reward;
    std::vector<Trajectory> trajs;
    TransitionBatch batch;

    LossConfig config(double beta = 5.0) const {
        LossConfig cfg;
        cfg.sched = &sched;
        cfg.reward = &reward;
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg.beta = beta;
        return cfg;
    }
};

Rig make_rig(std::uint64_t seed, bool zero_adapter, double fraction = 0.2) {
    Rng rng(seed);
    Rig rig;
    EpsNetConfig nc;
    nc.state_dim = static_cast<int>(latent_dim(1));
    nc.width = 6;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 1;
    rig.base = make_eps_net(nc, rng);
    jiggle(rig.base.params, rng, 0.08);  // nontrivial noise predictions and Jacobians
    rig.adapter = make_adapter(rig.base, 1, 1.0, rng);
    if (!zero_adapter)
        for (Array& b : rig.adapter.B) {
            Array n = rng.normal_array(b.shape());
            b.data() += 0.05 * n.data();
        }
    ResidualNetConfig rc;
    rc.state_dim = nc.state_dim;
    rc.width = 5;
    rc.depth = 1;
    rc.time_features = 2;
    rig.resnet = make_residual_net(rc, rng);
    rig.sched = make_schedule(ScheduleKind::LinearAlphaBar, 6);
    rig.reward = make_reward_aesthetic(1.0, 0.25);
    EpsFn eps = make_eps_fn(rig.base, rig.adapter);
    for (int i = 0; i < 2; ++i) rig.trajs.push_back(sample_trajectory(eps, rig.sched, {nc.state_dim}, 0, rng));
    rig.batch = subsample_transitions(rig.trajs, fraction, rng);
    return rig;
}

double max_abs(const Array& a) { return a.data().cwiseAbs().maxCoeff(); }

// Central difference of a scalar function of z, matching the checker's step rule.
Array fd_grad(const std::function<double(const Array&)>& f, const Array& z, double step = 1e-5) {
    Array g(z.shape(), Flat::Zero(z.numel()));
    for (std::int64_t i = 0; i < z.numel(); ++i) {
        const double h = step * (1.0 + std::abs(z[i]));
        Array hi = z, lo = z;
        hi[i] += h;
        lo[i] -= h;
        g[i] = (f(hi) - f(lo)) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("gamma schedule kinds and bounds") {
    NoiseSchedule sched = make_schedule(ScheduleKind::LinearAlphaBar, 10);
    for (int t = 0; t <= 10; ++t) CHECK(gamma_schedule(GammaKind::constant, t, sched) == 1.0);
    CHECK(gamma_schedule(GammaKind::signal, 0, sched) == 1.0);
    CHECK(gamma_schedule(GammaKind::signal, 10, sched) == sched.a[10]);
    for (int t = 1; t <= 10; ++t)
        CHECK(gamma_schedule(GammaKind::signal, t, sched) <= gamma_schedule(GammaKind::signal, t - 1, sched));
    CHECK_THROWS_AS(gamma_schedule(GammaKind::signal, -1, sched), std::invalid_argument);
    CHECK_THROWS_AS(gamma_schedule(GammaKind::signal, 11, sched), std::invalid_argument);
    CHECK(gamma_kind_from_string("signal") == GammaKind::signal);
    CHECK(gamma_kind_from_string("constant") == GammaKind::constant);
    CHECK(gamma_kind_name(GammaKind::signal) == "signal");
    CHECK(gamma_kind_name(GammaKind::constant) == "constant");
    CHECK_THROWS_AS(gamma_kind_from_string("quadratic"), std::invalid_argument);
}

TEST_CASE("transition subsampling counts, contents, and determinism") {
    Rng rng(3);
    EpsNetConfig nc;
    nc.state_dim = 2;
    nc.width = 4;
    nc.depth = 1;
    nc.time_features = 2;
    nc.embed_dim = 2;
    nc.num_labels = 1;
    EpsNet net = make_eps_net(nc, rng);
    NoiseSchedule sched = make_schedule(ScheduleKind::LinearAlphaBar, 20);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 3; ++i) trajs.push_back(sample_trajectory(make_eps_fn(net), sched, {2}, 0, rng));

    SUBCASE("fraction one keeps every transition in ascending order") {
        Rng r(7);
        TransitionBatch batch = subsample_transitions(trajs, 1.0, r);
        CHECK(batch.num_trajectories == 3);
        REQUIRE(batch.items.size() == 60);
        for (int j = 0; j < 3; ++j)
            for (int t = 1; t <= 20; ++t) {
                const Transition& item = batch.items[static_cast<std::size_t>(j * 20 + t - 1)];
                CHECK(item.t == t);
                CHECK(item.traj == j);
                CHECK(item.cond == 0);
                CHECK(bit_equal(item.z_t, trajs[static_cast<std::size_t>(j)].z[static_cast<std::size_t>(t)]));
                CHECK(bit_equal(item.z_prev, trajs[static_cast<std::size_t>(j)].z[static_cast<std::size_t>(t - 1)]));
                CHECK(item.std == trajs[static_cast<std::size_t>(j)].std[static_cast<std::size_t>(t)]);
            }
    }

    SUBCASE("forty percent of twenty steps is eight per trajectory") {
        Rng r(7);
        TransitionBatch batch = subsample_transitions(trajs, 0.4, r);
        REQUIRE(batch.items.size() == 24);
        int per_traj[3] = {0, 0, 0};
        int last_t[3] = {0, 0, 0};
        for (const Transition& item : batch.items) {
            ++per_traj[item.traj];
            CHECK(item.t > last_t[item.traj]);  // strictly ascending implies distinct
            last_t[item.traj] = item.t;
        }
        for (int j = 0; j < 3; ++j) CHECK(per_traj[j] == 8);
    }

    SUBCASE("tiny fractions still touch every trajectory") {
        Rng r(7);
        TransitionBatch batch = subsample_transitions(trajs, 0.05, r);
        CHECK(batch.items.size() == 3);
        for (int j = 0; j < 3; ++j) CHECK(batch.items[static_cast<std::size_t>(j)].traj == j);
    }

    SUBCASE("identical seeds reproduce the selection, different seeds move it") {
        Rng r1(7), r2(7), r3(8);
        TransitionBatch b1 = subsample_transitions(trajs, 0.4, r1);
        TransitionBatch b2 = subsample_transitions(trajs, 0.4, r2);
        TransitionBatch b3 = subsample_transitions(trajs, 0.4, r3);
        REQUIRE(b1.items.size() == b2.items.size());
        bool moved = false;
        for (std::size_t i = 0; i < b1.items.size(); ++i) {
            CHECK(b1.items[i].t == b2.items[i].t);
            CHECK(bit_equal(b1.items[i].z_t, b2.items[i].z_t));
            moved = moved || b1.items[i].t != b3.items[i].t;
        }
        CHECK(moved);
    }

    SUBCASE("bad fractions and empty batches are rejected") {
        Rng r(7);
        CHECK_THROWS_AS(subsample_transitions(trajs, 0.0, r), std::invalid_argument);
        CHECK_THROWS_AS(subsample_transitions(trajs, 1.5, r), std::invalid_argument);
        std::vector<Trajectory> none;
        CHECK_THROWS_AS(subsample_transitions(none, 0.5, r), std::invalid_argument);
    }
}

TEST_CASE("zero adapter with a flat reward zeroes the matching losses and their gradients") {
    Rig rig = make_rig(11, true);
    rig.reward = make_reward_aesthetic(0.0, 0.0);  // constant log-reward, zero gradient
    LossConfig cfg = rig.config(50.0);

    Tape tape;
    EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
    ResVars head = bind_residual(tape, rig.resnet);
    Rng rng(5);
    Var la = loss_approx_taped(tape, policy, cfg, rig.batch, rng);
    CHECK(la.val().scalar_value() == 0.0);

    // A zero-initialized correction head leaves forward and reverse at exactly zero too.
    ResidualNetConfig rc = rig.resnet.cfg;
    Rng fresh(1);
    ResidualNet zero_head = make_residual_net(rc, fresh);
    ResVars zv = bind_residual(tape, zero_head);
    Var lf = loss_forward_taped(tape, policy, zv, cfg, rig.batch, rng);
    Var lr = loss_reverse_taped(tape, policy, zv, cfg, rig.batch, rng);
    CHECK(lf.val().scalar_value() == 0.0);
    CHECK(lr.val().scalar_value() == 0.0);

    std::vector<int> wrt = policy.b_ids;
    wrt.insert(wrt.end(), policy.a_ids.begin(), policy.a_ids.end());
    GradientMap g = backward(tape, la, wrt);
    for (int id : wrt) {
        REQUIRE(g.has(id));
        CHECK(max_abs(g.at(id)) == 0.0);
    }
    (void)head;
}

TEST_CASE("beta zero leaves the pure prior-matching term") {
    Rig rig = make_rig(17, false);
    LossConfig cfg = rig.config(0.0);
    Tape tape;
    EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
    Rng rng(5);
    const double loss = loss_approx_taped(tape, policy, cfg, rig.batch, rng).val().scalar_value();

    double want = 0.0;
    for (const Transition& item : rig.batch.items) {
        const PosteriorCoef c = posterior_coef(rig.sched, item.t);
        const double inv_var = 1.0 / (rig.sched.post_std[static_cast<std::size_t>(item.t)] *
                                      rig.sched.post_std[static_cast<std::size_t>(item.t)]);
        Array ef = adapter_forward(rig.base, rig.adapter, item.z_t, item.t, item.cond);
        Array eb = eps_predict(rig.base, item.z_t, item.t, item.cond);
        double term = 0.0;
        for (std::int64_t i = 0; i < item.z_t.numel(); ++i) {
            const double mu_f = c.inv_sqrt_alpha * (item.z_t[i] - c.eps_coef * ef[i]);
            const double mu_b = c.inv_sqrt_alpha * (item.z_t[i] - c.eps_coef * eb[i]);
            const double d = (mu_f - mu_b) * inv_var;
            term += d * d;
        }
        want += term;
    }
    want /= static_cast<double>(rig.batch.items.size());
    CHECK(loss == doctest::Approx(want).epsilon(1e-12));
    CHECK(loss > 0.0);
}

TEST_CASE("score differences match finite differences of the log-density ratio") {
    Rig rig = make_rig(23, false);
    const Transition& item = rig.batch.items.front();
    const PosteriorCoef c = posterior_coef(rig.sched, item.t);
    const double inv_var = 1.0 / (rig.sched.post_std[static_cast<std::size_t>(item.t)] *
                                  rig.sched.post_std[static_cast<std::size_t>(item.t)]);
    EpsFn pol = make_eps_fn(rig.base, rig.adapter);
    EpsFn prior = make_eps_fn(rig.base);

    SUBCASE("with respect to the earlier state") {
        // Build the same taped value the losses use.
        Tape tape;
        EpsVars vars = bind_eps(tape, rig.base, &rig.adapter);
        Var zt = constant(tape, item.z_t);
        EpsFwd fwd = eps_forward(tape, vars, zt, item.t, item.cond);
        Var mu = smul(sub(zt, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
        Array eb = eps_predict(rig.base, item.z_t, item.t, item.cond);
        Array mu_b = item.z_t;
        mu_b.data() = (item.z_t.data() - eb.data() * c.eps_coef) * c.inv_sqrt_alpha;
        Var diff = smul(sub(mu, constant(tape, mu_b)), inv_var);

        auto ratio = [&](const Array& z_prev) {
            GaussianTransition tp = reverse_transition(pol, rig.sched, item.z_t, item.t, item.cond);
            GaussianTransition tb = reverse_transition(prior, rig.sched, item.z_t, item.t, item.cond);
            return log_prob(tp, z_prev) - log_prob(tb, z_prev);
        };
        Array fd = fd_grad(ratio, item.z_prev);
        for (std::int64_t i = 0; i < fd.numel(); ++i)
            CHECK(rel_err(diff.val()[i], fd[i]) < 1e-6);
    }

    SUBCASE("with respect to the later state") {
        Tape tape;
        EpsVars vars = bind_eps(tape, rig.base, &rig.adapter);
        Var zt = constant(tape, item.z_t);
        EpsFwd fwd = eps_forward(tape, vars, zt, item.t, item.cond);
        Var mu = smul(sub(zt, smul(fwd.out, c.eps_coef)), c.inv_sqrt_alpha);
        Var w = smul(sub(constant(tape, item.z_prev), mu), inv_var);
        Var jw = eps_input_vjp(tape, vars, fwd, w);
        Var grad_pol = smul(sub(w, smul(jw, c.eps_coef)), c.inv_sqrt_alpha);
        Array eb = eps_predict(rig.base, item.z_t, item.t, item.cond);
        Array mu_b = item.z_t;
        mu_b.data() = (item.z_t.data() - eb.data() * c.eps_coef) * c.inv_sqrt_alpha;
        Array wb = item.z_prev;
        wb.data() = (item.z_prev.data() - mu_b.data()) * inv_var;
        Array jwb = eps_input_vjp_values(rig.base, nullptr, item.z_t, item.t, item.cond, wb);
        Array grad_base = wb;
        grad_base.data() = (wb.data() - jwb.data() * c.eps_coef) * c.inv_sqrt_alpha;

        auto ratio = [&](const Array& z_t) {
            GaussianTransition tp = reverse_transition(pol, rig.sched, z_t, item.t, item.cond);
            GaussianTransition tb = reverse_transition(prior, rig.sched, z_t, item.t, item.cond);
            return log_prob(tp, item.z_prev) - log_prob(tb, item.z_prev);
        };
        Array fd = fd_grad(ratio, item.z_t);
        for (std::int64_t i = 0; i < fd.numel(); ++i)
            CHECK(rel_err(grad_pol.val()[i] - grad_base[i], fd[i]) < 1e-6);
    }
}

TEST_CASE("reward-gradient targets probe the clean prediction") {
    Rig rig = make_rig(29, false);
    LossConfig cfg = rig.config();
    CameraPose cam = make_camera(25.0, -10.0, 8, 8);
    const Array z0 = rig.trajs[0].z[0];

    SUBCASE("at step zero the sample itself is scored") {
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        Array u = reward_grad_view(policy, cfg, z0, 0, 0, cam, nullptr);
        Array v = grad_log_reward_3d(rig.reward, z0, {cam}, 0, cfg.render);
        CHECK(bit_equal(u, v));
    }

    SUBCASE("at later steps the gradient flows through the one-step prediction") {
        const Array& z = rig.trajs[0].z[3];
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        Array u = reward_grad_view(policy, cfg, z, 3, 0, cam, nullptr);
        EpsFn pol = make_eps_fn(rig.base, rig.adapter);
        auto f = [&](const Array& zz) {
            Array xhat = one_step_prediction(pol, rig.sched, zz, 3, 0);
            return log_reward(rig.reward, render(xhat, cam, cfg.render), 0);
        };
        Array fd = fd_grad(f, z, 1e-5);
        for (std::int64_t i = 0; i < fd.numel(); ++i) CHECK(rel_err(u[i], fd[i]) < 1e-4);
    }

    SUBCASE("degenerate rewards yield a zero target and the pure prior loss") {
        RewardModel dnc = make_reward_dnc();
        LossConfig dcfg = rig.config(50.0);
        dcfg.reward = &dnc;
        // Feeble opacity renders nothing: every view is degenerate.
        TransitionBatch faint = rig.batch;
        for (Transition& item : faint.items) {
            item.z_t[7] = -50.0;
            item.z_prev[7] = -50.0;
        }
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        Array u = reward_grad_view(policy, dcfg, faint.items[0].z_prev, 0, 0, cam, nullptr);
        CHECK(max_abs(u) == 0.0);

        Rng ra(5), rb(5);
        Var with_reward = loss_approx_taped(tape, policy, dcfg, faint, ra);
        LossConfig zero_beta = dcfg;
        zero_beta.beta = 0.0;
        Var prior_only = loss_approx_taped(tape, policy, zero_beta, faint, rb);
        CHECK(with_reward.val().scalar_value() == prior_only.val().scalar_value());
    }
}

TEST_CASE("matching losses agree with finite differences over live parameters") {
    Rig rig = make_rig(37, false, 0.1);  // one transition per trajectory keeps probes cheap
    LossConfig cfg = rig.config();
    // Pin the stop-gradded targets at the unperturbed parameters.
    const LowRankAdapter frozen = rig.adapter;
    cfg.target_net = &rig.base;
    cfg.target_adapter = &frozen;

    enum class Which { approx, forward, reverse, total };
    auto eval = [&](Which which, const LowRankAdapter& ad, const ResidualNet& head) {
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &ad);
        ResVars hv = bind_residual(tape, head);
        Rng rng(11);
        switch (which) {
            case Which::approx: return loss_approx_taped(tape, policy, cfg, rig.batch, rng).val().scalar_value();
            case Which::forward:
                return loss_forward_taped(tape, policy, hv, cfg, rig.batch, rng).val().scalar_value();
            case Which::reverse:
                return loss_reverse_taped(tape, policy, hv, cfg, rig.batch, rng).val().scalar_value();
            case Which::total:
                return total_loss_taped(tape, policy, hv, cfg, rig.trajs, 0.4, 0.7, rng).val().scalar_value();
        }
        return 0.0;
    };

    auto check_all = [&](Which which) {
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        ResVars hv = bind_residual(tape, rig.resnet);
        Rng rng(11);
        Var loss;
        switch (which) {
            case Which::approx: loss = loss_approx_taped(tape, policy, cfg, rig.batch, rng); break;
            case Which::forward: loss = loss_forward_taped(tape, policy, hv, cfg, rig.batch, rng); break;
            case Which::reverse: loss = loss_reverse_taped(tape, policy, hv, cfg, rig.batch, rng); break;
            case Which::total: loss = total_loss_taped(tape, policy, hv, cfg, rig.trajs, 0.4, 0.7, rng); break;
        }
        std::vector<int> wrt = {policy.b_ids[0], policy.a_ids.back()};
        const bool with_head = which != Which::approx;
        const int head_slot = static_cast<int>(rig.resnet.params.values.size()) - 1;  // final bias
        if (with_head) wrt.push_back(hv.param_ids[static_cast<std::size_t>(head_slot)]);
        GradientMap g = backward(tape, loss, wrt);

        auto fd_b = [&](const Array& x) {
            LowRankAdapter ad = rig.adapter;
            ad.B[0] = x;
            return eval(which, ad, rig.resnet);
        };
        GradCheckReport rb = grad_check(fd_b, rig.adapter.B[0], g.at(policy.b_ids[0]));
        CHECK(rb.max_rel_err < 1e-3);

        auto fd_a = [&](const Array& x) {
            LowRankAdapter ad = rig.adapter;
            ad.A.back() = x;
            return eval(which, ad, rig.resnet);
        };
        GradCheckReport ra = grad_check(fd_a, rig.adapter.A.back(), g.at(policy.a_ids.back()));
        CHECK(ra.max_rel_err < 1e-3);

        if (with_head) {
            auto fd_h = [&](const Array& x) {
                ResidualNet head = rig.resnet;
                head.params.values[static_cast<std::size_t>(head_slot)] = x;
                return eval(which, rig.adapter, head);
            };
            GradCheckReport rh = grad_check(fd_h, rig.resnet.params.values[static_cast<std::size_t>(head_slot)],
                                            g.at(hv.param_ids[static_cast<std::size_t>(head_slot)]));
            CHECK(rh.max_rel_err < 1e-3);
        }
    };

    SUBCASE("approximate") { check_all(Which::approx); }
    SUBCASE("forward") { check_all(Which::forward); }
    SUBCASE("reverse") { check_all(Which::reverse); }
    SUBCASE("total") { check_all(Which::total); }
}

TEST_CASE("a zero correction head reduces the forward loss to the approximate one bit for bit") {
    Rig rig = make_rig(41, false);
    LossConfig cfg = rig.config(50.0);
    Rng fresh(1);
    ResidualNet zero_head = make_residual_net(rig.resnet.cfg, fresh);

    Tape ta;
    EpsVars pa = bind_eps(ta, rig.base, &rig.adapter);
    Rng ra(13);
    Var la = loss_approx_taped(ta, pa, cfg, rig.batch, ra);

    Tape tf;
    EpsVars pf = bind_eps(tf, rig.base, &rig.adapter);
    ResVars hv = bind_residual(tf, zero_head);
    Rng rf(13);
    Var lf = loss_forward_taped(tf, pf, hv, cfg, rig.batch, rf);

    CHECK(la.val().scalar_value() == lf.val().scalar_value());
    GradientMap ga = backward(ta, la, pa.b_ids);
    GradientMap gf = backward(tf, lf, pf.b_ids);
    for (std::size_t s = 0; s < pa.b_ids.size(); ++s)
        CHECK(bit_equal(ga.at(pa.b_ids[s]), gf.at(pf.b_ids[s])));
}

TEST_CASE("discrete camera sets: averaged single-view gradients equal the exact-expectation gradient") {
    Rig rig = make_rig(43, false);
    Rng cam_rng(5);
    std::vector<CameraPose> cams = sample_cameras(cam_rng, 8, 8, 8);
    LossConfig cfg = rig.config();

    auto grad_with = [&](const std::vector<CameraPose>& fixed) {
        LossConfig c = cfg;
        c.fixed_cameras = &fixed;
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        Rng rng(0);
        Var loss = loss_approx_taped(tape, policy, c, rig.batch, rng);
        std::vector<int> wrt = policy.b_ids;
        wrt.insert(wrt.end(), policy.a_ids.begin(), policy.a_ids.end());
        GradientMap g = backward(tape, loss, wrt);
        std::vector<Array> out;
        for (int id : wrt) out.push_back(g.at(id));
        return out;
    };

    std::vector<Array> exact = grad_with(cams);
    std::vector<Array> mean;
    for (std::size_t ci = 0; ci < cams.size(); ++ci) {
        std::vector<Array> gc = grad_with({cams[ci]});
        if (ci == 0) {
            mean = gc;
        } else {
            for (std::size_t s = 0; s < mean.size(); ++s) mean[s].data() += gc[s].data();
        }
    }
    for (std::size_t s = 0; s < mean.size(); ++s) {
        mean[s].data() /= static_cast<double>(cams.size());
        for (std::int64_t i = 0; i < mean[s].numel(); ++i) CHECK(rel_err(mean[s][i], exact[s][i]) < 1e-10);
    }
}

TEST_CASE("terminal anchor and trust-region penalty") {
    SUBCASE("zero-initialized head gives exactly zero terminal loss") {
        Rng rng(3);
        ResidualNetConfig rc;
        rc.state_dim = 4;
        rc.width = 5;
        rc.depth = 1;
        rc.time_features = 2;
        ResidualNet head = make_residual_net(rc, rng);
        Tape tape;
        ResVars hv = bind_residual(tape, head);
        std::vector<Array> z0s = {rng.normal_array({4}), rng.normal_array({4})};
        CHECK(loss_terminal_taped(tape, hv, z0s).val().scalar_value() == 0.0);

        jiggle(head.params, rng, 0.2);
        Tape tape2;
        ResVars hv2 = bind_residual(tape2, head);
        const double loss = loss_terminal_taped(tape2, hv2, z0s).val().scalar_value();
        double want = 0.0;
        for (const Array& z : z0s) {
            Array h = residual_predict(head, z, 0);
            for (std::int64_t i = 0; i < h.numel(); ++i) want += h[i] * h[i];
        }
        want /= static_cast<double>(z0s.size());
        CHECK(loss == doctest::Approx(want).epsilon(1e-12));
        CHECK(loss > 0.0);
        CHECK_THROWS_AS(loss_terminal_taped(tape2, hv2, {}), std::invalid_argument);
    }

    SUBCASE("hand-built epsilon gap of two at lambda 3e3 gives 1.2e4") {
        Rng rng(3);
        EpsNetConfig nc;
        nc.state_dim = 1;
        nc.width = 3;
        nc.depth = 1;
        nc.time_features = 2;
        nc.embed_dim = 2;
        nc.num_labels = 1;
        EpsNet base = make_eps_net(nc, rng);  // zero final layer: predictions identically zero
        EpsNet reference = base;
        reference.params.at("bout")[0] = -2.0;

        TransitionBatch batch;
        Transition tr;
        tr.z_t = rng.normal_array({1});
        tr.z_prev = rng.normal_array({1});
        tr.t = 2;
        tr.cond = 0;
        batch.items.push_back(tr);
        batch.num_trajectories = 1;

        Tape tape;
        EpsVars policy = bind_eps(tape, base, nullptr);
        CHECK(loss_reg_taped(tape, policy, reference, batch, 3e3).val().scalar_value() == 12000.0);
        CHECK(loss_reg_taped(tape, policy, reference, batch, 0.0).val().scalar_value() == 0.0);
        CHECK_THROWS_AS(loss_reg_taped(tape, policy, reference, batch, -1.0), std::invalid_argument);
        CHECK_THROWS_AS(loss_reg_taped(tape, policy, reference, TransitionBatch{}, 1.0), std::invalid_argument);
    }

    SUBCASE("a snapshot taken at the current parameters contributes exactly zero") {
        Rig rig = make_rig(47, true);  // zero adapter: merged snapshot equals the base exactly
        EpsNet snapshot = adapter_merge(rig.base, rig.adapter);
        Tape tape;
        EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
        CHECK(loss_reg_taped(tape, policy, snapshot, rig.batch, 3e3).val().scalar_value() == 0.0);
    }
}

TEST_CASE("total loss composes terminal, forward, and reverse pieces") {
    Rig rig = make_rig(53, false);
    Rng jig(9);
    jiggle(rig.resnet.params, jig, 0.1);  // nonzero head so every piece contributes
    std::vector<CameraPose> cam = {make_camera(30.0, 10.0, 8, 8)};
    LossConfig cfg = rig.config();
    cfg.fixed_cameras = &cam;  // the only rng consumer left is the step subsample
    std::vector<Trajectory> one = {rig.trajs[0]};

    Rng rs(21);
    TransitionBatch full = subsample_transitions(one, 1.0, rs);

    Tape tape;
    EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
    ResVars hv = bind_residual(tape, rig.resnet);
    Rng dummy(0);
    const double fwd = loss_forward_taped(tape, policy, hv, cfg, full, dummy).val().scalar_value();
    const double rev = loss_reverse_taped(tape, policy, hv, cfg, full, dummy).val().scalar_value();
    const double terminal = loss_terminal_taped(tape, hv, {one[0].z[0]}).val().scalar_value();
    const double T = static_cast<double>(one[0].T);

    Rng r1(21);
    const double total0 = total_loss_taped(tape, policy, hv, cfg, one, 1.0, 0.0, r1).val().scalar_value();
    CHECK(total0 == doctest::Approx(terminal + T * fwd).epsilon(1e-12));

    Rng r2(21);
    const double total = total_loss_taped(tape, policy, hv, cfg, one, 1.0, 0.7, r2).val().scalar_value();
    CHECK(total == doctest::Approx(terminal + T * (fwd + 0.7 * rev)).epsilon(1e-12));

    Rng r3(21);
    CHECK_THROWS_AS(total_loss_taped(tape, policy, hv, cfg, one, 1.0, -0.1, r3), std::invalid_argument);
}

TEST_CASE("configuration and transition validation") {
    Rig rig = make_rig(59, false);
    Tape tape;
    EpsVars policy = bind_eps(tape, rig.base, &rig.adapter);
    Rng rng(5);

    LossConfig no_sched = rig.config();
    no_sched.sched = nullptr;
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, no_sched, rig.batch, rng), std::invalid_argument);

    LossConfig no_reward = rig.config();
    no_reward.reward = nullptr;
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, no_reward, rig.batch, rng), std::invalid_argument);

    LossConfig neg_beta = rig.config(-1.0);
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, neg_beta, rig.batch, rng), std::invalid_argument);

    LossConfig no_cams = rig.config();
    no_cams.cameras_per_transition = 0;
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, no_cams, rig.batch, rng), std::invalid_argument);

    LossConfig empty_fixed = rig.config();
    std::vector<CameraPose> none;
    empty_fixed.fixed_cameras = &none;
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, empty_fixed, rig.batch, rng), std::invalid_argument);

    LossConfig cfg = rig.config();
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, cfg, TransitionBatch{}, rng), std::invalid_argument);

    TransitionBatch bad_step = rig.batch;
    bad_step.items[0].t = 0;
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, cfg, bad_step, rng), std::invalid_argument);

    TransitionBatch bad_shape = rig.batch;
    bad_shape.items[0].z_prev = Array::zeros({3});
    CHECK_THROWS_AS(loss_approx_taped(tape, policy, cfg, bad_shape, rng), std::invalid_argument);
}
