#include <cmath>

#include "doctest.h"
#include "nr2d3/gradcheck.hpp"
#include "nr2d3/nets.hpp"

using namespace nr2d3;

namespace {

EpsNetConfig tiny_eps_cfg() {
    EpsNetConfig cfg;
    cfg.state_dim = 3;
    cfg.width = 5;
    cfg.depth = 2;
    cfg.time_features = 4;
    cfg.embed_dim = 2;
    cfg.num_labels = 2;
    return cfg;
}

// Random nonzero output layer; fresh nets ship with a zero one.
void randomize_output(EpsNet& net, Rng& rng) {
    net.params.at("wout") = rng.normal_array(net.params.at("wout").shape());
    net.params.at("bout") = rng.normal_array(net.params.at("bout").shape());
}

}  // namespace

TEST_CASE("fresh eps net predicts exactly zero and is deterministic") {
    Rng rng(1);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    Array x = rng.normal_array({3});
    Array a = eps_predict(net, x, 4, 0);
    CHECK(a.data().abs().maxCoeff() == 0.0);
    randomize_output(net, rng);
    Array b = eps_predict(net, x, 4, 0);
    Array c = eps_predict(net, x, 4, 0);
    CHECK(bit_equal(b, c));
    CHECK(b.data().abs().maxCoeff() > 0.0);
}

TEST_CASE("labels select distinct embeddings and bad ids are rejected") {
    Rng rng(2);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    Array x = rng.normal_array({3});
    Array e0 = eps_predict(net, x, 3, 0);
    Array e1 = eps_predict(net, x, 3, 1);
    Array enull_a = eps_predict(net, x, 3, -1);
    Array enull_b = eps_predict(net, x, 3, net.null_label());
    CHECK(!bit_equal(e0, e1));
    CHECK(bit_equal(enull_a, enull_b));
    CHECK_THROWS_AS(eps_predict(net, x, 3, 7), std::invalid_argument);
    CHECK_THROWS_AS(eps_predict(net, Array::zeros({2}), 3, 0), std::invalid_argument);
}

TEST_CASE("taped and plain forwards agree bit for bit") {
    Rng rng(3);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    Array x = rng.normal_array({3});

    Tape tape;
    EpsVars vars = bind_eps(tape, net, nullptr);
    EpsFwd fwd = eps_forward(tape, vars, leaf(tape, x), 6, 1);
    CHECK(bit_equal(fwd.out.val(), eps_predict(net, x, 6, 1)));

    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);
    Rng br(4);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    Tape tape2;
    EpsVars avars = bind_eps(tape2, net, &ad);
    EpsFwd afwd = eps_forward(tape2, avars, leaf(tape2, x), 6, 1);
    CHECK(bit_equal(afwd.out.val(), adapter_forward(net, ad, x, 6, 1)));
}

TEST_CASE("eps net parameter gradients match finite differences") {
    Rng rng(5);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    Array x = rng.normal_array({3});

    auto loss_at = [&](const EpsNet& n) {
        Tape tape;
        EpsVars vars = bind_eps(tape, n, nullptr);
        return sqnorm(eps_forward(tape, vars, leaf(tape, x), 5, 0).out).val().scalar_value();
    };

    Tape tape;
    EpsVars vars = bind_eps(tape, net, nullptr);
    Var loss = sqnorm(eps_forward(tape, vars, leaf(tape, x), 5, 0).out);
    GradientMap grads = backward(tape, loss, vars.base_ids);

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < net.params.values.size(); ++p) {
        const Array& g = grads.at(vars.base_ids[p]);
        for (std::int64_t i = 0; i < net.params.values[p].numel(); ++i) {
            EpsNet hi = net;
            EpsNet lo = net;
            hi.params.values[p][i] += h;
            lo.params.values[p][i] -= h;
            worst = std::max(worst, rel_err(g[i], (loss_at(hi) - loss_at(lo)) / (2.0 * h)));
        }
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("cfg composition endpoints and paper scale") {
    Array ec = Array::constant({1}, 1.0);
    Array en = Array::zeros({1});
    CHECK(bit_equal(cfg_compose(ec, en, 1.0), ec));
    CHECK(bit_equal(cfg_compose(ec, en, 0.0), en));
    CHECK(cfg_compose(ec, en, 7.5)[0] == 7.5);
    Array ec2 = Array::from({2}, {0.3, -0.4});
    Array en2 = Array::from({2}, {0.1, 0.2});
    Array mid = cfg_compose(ec2, en2, 3.5);
    for (int i = 0; i < 2; ++i) CHECK(mid[i] == doctest::Approx(en2[i] + 3.5 * (ec2[i] - en2[i])).epsilon(1e-15));
    CHECK_THROWS_AS(cfg_compose(ec, en2, 2.0), std::invalid_argument);
}

TEST_CASE("zero adapters leave the base forward bit-identical") {
    Rng rng(6);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);  // B starts at zero
    Array x = rng.normal_array({3});
    for (int t : {1, 5, 9}) {
        CHECK(bit_equal(adapter_forward(net, ad, x, t, 0), eps_predict(net, x, t, 0)));
    }
}

TEST_CASE("merged adapters match the factored forward") {
    Rng rng(7);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    LowRankAdapter ad = make_adapter(net, 3, 0.7, rng);
    Rng br(8);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    EpsNet merged = adapter_merge(net, ad);
    for (int trial = 0; trial < 100; ++trial) {
        Array x = br.normal_array({3});
        Array f = adapter_forward(net, ad, x, 1 + trial % 9, trial % 3 - 1);
        Array m = eps_predict(merged, x, 1 + trial % 9, trial % 3 - 1);
        for (std::int64_t i = 0; i < f.numel(); ++i) CHECK(rel_err(f[i], m[i]) <= 1e-12);
    }
}

TEST_CASE("finetuning gradients reach only the adapter factors") {
    Rng rng(9);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);
    Rng br(10);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    Array x = br.normal_array({3});

    Tape tape;
    EpsVars vars = bind_eps(tape, net, &ad);
    Var loss = sqnorm(eps_forward(tape, vars, leaf(tape, x), 4, 0).out);
    std::vector<int> wrt = vars.base_ids;
    wrt.insert(wrt.end(), vars.a_ids.begin(), vars.a_ids.end());
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, loss, wrt);

    for (int id : vars.base_ids) CHECK(grads.at(id).data().abs().maxCoeff() == 0.0);
    double mag = 0.0;
    for (int id : vars.a_ids) mag += grads.at(id).data().abs().sum();
    for (int id : vars.b_ids) mag += grads.at(id).data().abs().sum();
    CHECK(mag > 0.0);
}

TEST_CASE("adapter finite differences through the factored weights") {
    Rng rng(11);
    EpsNetConfig cfg = tiny_eps_cfg();
    EpsNet net = make_eps_net(cfg, rng);
    randomize_output(net, rng);
    LowRankAdapter ad = make_adapter(net, 2, 0.9, rng);
    Rng br(12);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    Array x = br.normal_array({3});

    auto loss_at = [&](const LowRankAdapter& a) {
        Tape tape;
        EpsVars vars = bind_eps(tape, net, &a);
        return sqnorm(eps_forward(tape, vars, leaf(tape, x), 2, 1).out).val().scalar_value();
    };

    Tape tape;
    EpsVars vars = bind_eps(tape, net, &ad);
    Var loss = sqnorm(eps_forward(tape, vars, leaf(tape, x), 2, 1).out);
    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, loss, wrt);

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t s = 0; s < ad.names.size(); ++s) {
        for (std::int64_t i = 0; i < ad.A[s].numel(); ++i) {
            LowRankAdapter hi = ad;
            LowRankAdapter lo = ad;
            hi.A[s][i] += h;
            lo.A[s][i] -= h;
            worst = std::max(worst, rel_err(grads.at(vars.a_ids[s])[i], (loss_at(hi) - loss_at(lo)) / (2.0 * h)));
        }
        for (std::int64_t i = 0; i < ad.B[s].numel(); ++i) {
            LowRankAdapter hi = ad;
            LowRankAdapter lo = ad;
            hi.B[s][i] += h;
            lo.B[s][i] -= h;
            worst = std::max(worst, rel_err(grads.at(vars.b_ids[s])[i], (loss_at(hi) - loss_at(lo)) / (2.0 * h)));
        }
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("adapter shape mismatches are rejected") {
    Rng rng(13);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);
    Array x = Array::zeros({3});
    LowRankAdapter bad = ad;
    bad.A[0] = Array::zeros({bad.A[0].dim(0), 3});
    CHECK_THROWS_AS(adapter_forward(net, bad, x, 1, 0), std::invalid_argument);
    LowRankAdapter renamed = ad;
    renamed.names[0] = "w9";
    CHECK_THROWS_AS(adapter_forward(net, renamed, x, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_adapter(net, 0, 1.0, rng), std::invalid_argument);
}

TEST_CASE("residual net zero init and gradients") {
    ResidualNetConfig cfg;
    cfg.state_dim = 2;
    cfg.width = 4;
    cfg.depth = 2;
    cfg.time_features = 2;
    Rng rng(14);
    ResidualNet net = make_residual_net(cfg, rng);
    Array x = rng.normal_array({2});
    CHECK(residual_predict(net, x, 3).data().abs().maxCoeff() == 0.0);

    // Terminal-style penalty of the zero-initialized network is exactly zero.
    Tape tape0;
    ResVars rv0 = bind_residual(tape0, net);
    CHECK(sqnorm(residual_forward(tape0, rv0, leaf(tape0, x), 0)).val().scalar_value() == 0.0);

    net.params.at("wout") = rng.normal_array({2, 4});
    net.params.at("bout") = rng.normal_array({2});

    Tape tape;
    ResVars rv = bind_residual(tape, net);
    Var out = residual_forward(tape, rv, leaf(tape, x), 3);
    CHECK(bit_equal(out.val(), residual_predict(net, x, 3)));

    auto loss_at = [&](const ResidualNet& n) {
        Tape tp;
        ResVars v = bind_residual(tp, n);
        return sqnorm(residual_forward(tp, v, leaf(tp, x), 3)).val().scalar_value();
    };
    Var loss = sqnorm(out);
    GradientMap grads = backward(tape, loss, rv.param_ids);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < net.params.values.size(); ++p) {
        for (std::int64_t i = 0; i < net.params.values[p].numel(); ++i) {
            ResidualNet hi = net;
            ResidualNet lo = net;
            hi.params.values[p][i] += h;
            lo.params.values[p][i] -= h;
            worst = std::max(worst, rel_err(grads.at(rv.param_ids[p])[i], (loss_at(hi) - loss_at(lo)) / (2.0 * h)));
        }
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("taped input gradient construction matches the adjoint sweep") {
    Rng rng(15);
    EpsNet net = make_eps_net(tiny_eps_cfg(), rng);
    randomize_output(net, rng);
    Array x = rng.normal_array({3});
    Array g = rng.normal_array({3});

    // Oracle: reverse-mode gradient of <eps(x), g> with respect to x.
    Tape tape;
    EpsVars vars = bind_eps(tape, net, nullptr);
    Var xv = leaf(tape, x);
    EpsFwd fwd = eps_forward(tape, vars, xv, 7, 1);
    Var inner = dot(fwd.out, constant(tape, g));
    GradientMap grads = backward(tape, inner, {xv.id});

    Array vjp = eps_input_vjp_values(net, nullptr, x, 7, 1, g);
    REQUIRE(vjp.numel() == 3);
    for (int i = 0; i < 3; ++i) CHECK(rel_err(vjp[i], grads.at(xv.id)[i]) <= 1e-12);

    // Same identity through adapted weights.
    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);
    Rng br(16);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    Tape tape2;
    EpsVars avars = bind_eps(tape2, net, &ad);
    Var xv2 = leaf(tape2, x);
    EpsFwd afwd = eps_forward(tape2, avars, xv2, 7, 1);
    GradientMap agrads = backward(tape2, dot(afwd.out, constant(tape2, g)), {xv2.id});
    Array avjp = eps_input_vjp_values(net, &ad, x, 7, 1, g);
    for (int i = 0; i < 3; ++i) CHECK(rel_err(avjp[i], agrads.at(xv2.id)[i]) <= 1e-12);
}

TEST_CASE("input gradient construction stays differentiable in the adapter") {
    // The whole point of building the input gradient out of forward ops: its own parameter
    // gradient must exist and match finite differences.
    Rng rng(17);
    EpsNetConfig cfg = tiny_eps_cfg();
    cfg.width = 4;
    EpsNet net = make_eps_net(cfg, rng);
    randomize_output(net, rng);
    LowRankAdapter ad = make_adapter(net, 2, 1.0, rng);
    Rng br(18);
    for (auto& b : ad.B) b = br.normal_array(b.shape());
    Array x = br.normal_array({3});
    Array g = br.normal_array({3});

    auto value_at = [&](const LowRankAdapter& a) {
        Tape tape;
        EpsVars vars = bind_eps(tape, net, &a);
        Var xv = leaf(tape, x);
        EpsFwd fwd = eps_forward(tape, vars, xv, 3, 0);
        Var vjp = eps_input_vjp(tape, vars, fwd, constant(tape, g));
        return sqnorm(vjp).val().scalar_value();
    };

    Tape tape;
    EpsVars vars = bind_eps(tape, net, &ad);
    Var xv = leaf(tape, x);
    EpsFwd fwd = eps_forward(tape, vars, xv, 3, 0);
    Var loss = sqnorm(eps_input_vjp(tape, vars, fwd, constant(tape, g)));
    std::vector<int> wrt = vars.a_ids;
    wrt.insert(wrt.end(), vars.b_ids.begin(), vars.b_ids.end());
    GradientMap grads = backward(tape, loss, wrt);

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t s = 0; s < ad.names.size(); ++s) {
        for (std::int64_t i = 0; i < ad.B[s].numel(); ++i) {
            LowRankAdapter hi = ad;
            LowRankAdapter lo = ad;
            hi.B[s][i] += h;
            lo.B[s][i] -= h;
            worst = std::max(worst, rel_err(grads.at(vars.b_ids[s])[i], (value_at(hi) - value_at(lo)) / (2.0 * h)));
        }
    }
    CHECK(worst <= 1e-4);
}
