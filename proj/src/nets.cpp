#include "nr2d3/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace nr2d3 {

int NamedParams::add(std::string name, Array v) {
    if (index_of(name) >= 0) throw std::invalid_argument("NamedParams: duplicate entry '" + name + "'");
    names.push_back(std::move(name));
    values.push_back(std::move(v));
    return static_cast<int>(values.size()) - 1;
}

int NamedParams::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

const Array& NamedParams::at(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw std::invalid_argument("NamedParams: no entry '" + name + "'");
    return values[static_cast<std::size_t>(i)];
}

Array& NamedParams::at(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw std::invalid_argument("NamedParams: no entry '" + name + "'");
    return values[static_cast<std::size_t>(i)];
}

std::int64_t NamedParams::total_numel() const {
    std::int64_t n = 0;
    for (const auto& v : values) n += v.numel();
    return n;
}

Array sin_time_features(int t, int count) {
    if (count <= 0 || count % 2 != 0)
        throw std::invalid_argument("sin_time_features: count must be positive and even, got " + std::to_string(count));
    Flat d(count);
    for (int k = 0; k < count / 2; ++k) {
        const double omega = std::pow(10000.0, -2.0 * k / count);
        d(2 * k) = std::sin(omega * t);
        d(2 * k + 1) = std::cos(omega * t);
    }
    return Array({count}, std::move(d));
}

namespace {

Array gaussian_matrix(std::int64_t rows, std::int64_t cols, double stddev, Rng& rng) {
    Array m = rng.normal_array({rows, cols});
    m.data() *= stddev;
    return m;
}

// Layer input widths of an MLP with the given total input size: in, width, ..., width.
std::vector<std::int64_t> layer_inputs(std::int64_t in_dim, int width, int depth) {
    std::vector<std::int64_t> ins;
    ins.push_back(in_dim);
    for (int l = 1; l < depth; ++l) ins.push_back(width);
    ins.push_back(width);  // input of the output layer
    return ins;
}

void add_mlp_params(NamedParams& p, std::int64_t in_dim, int width, int depth, std::int64_t out_dim, Rng& rng) {
    auto ins = layer_inputs(in_dim, width, depth);
    for (int l = 0; l < depth; ++l) {
        const auto fan_in = ins[static_cast<std::size_t>(l)];
        p.add("w" + std::to_string(l), gaussian_matrix(width, fan_in, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
        p.add("b" + std::to_string(l), Array::zeros({width}));
    }
    p.add("wout", Array::zeros({out_dim, width}));
    p.add("bout", Array::zeros({out_dim}));
}

// One plain MLP forward over already-resolved weight/bias tensors. Uses the shared matmul
// kernel and the same elementwise expressions as the tape, so values are bit-identical to
// the taped forward for identical parameters.
Array mlp_forward_values(const std::vector<const Array*>& w, const std::vector<const Array*>& b, const Array& x_full) {
    Array h = x_full;
    const std::size_t layers = w.size();
    for (std::size_t l = 0; l + 1 < layers; ++l) {
        Array pre = matmul_values(*w[l], h.reshaped({h.numel(), 1}), false, false);
        pre = pre.reshaped({pre.dim(0)});
        pre.data() = pre.data() + b[l]->data();
        h = Array(pre.shape(), pre.data().tanh());
    }
    Array out = matmul_values(*w[layers - 1], h.reshaped({h.numel(), 1}), false, false);
    out = out.reshaped({out.dim(0)});
    out.data() = out.data() + b[layers - 1]->data();
    return out;
}

int resolve_label(const EpsNet& net, int cond) {
    if (cond < 0) return net.null_label();
    if (cond > net.cfg.num_labels)
        throw std::invalid_argument("eps_predict: unknown label id " + std::to_string(cond) + " (have " +
                                    std::to_string(net.cfg.num_labels) + " labels plus null)");
    return cond;
}

Array embed_row(const Array& table, int row) {
    const std::int64_t cols = table.dim(1);
    Flat d(cols);
    for (std::int64_t j = 0; j < cols; ++j) d(j) = table[row * cols + j];
    return Array({cols}, std::move(d));
}

Array concat_values(const std::vector<const Array*>& parts) {
    std::int64_t n = 0;
    for (const auto* p : parts) n += p->numel();
    Flat d(n);
    std::int64_t at = 0;
    for (const auto* p : parts) {
        d.segment(at, p->numel()) = p->data();
        at += p->numel();
    }
    return Array({n}, std::move(d));
}

void check_adapter(const EpsNet& net, const LowRankAdapter& ad) {
    const auto wn = net.weight_names();
    if (ad.names != wn) throw std::invalid_argument("adapter: weight name list does not match the host network");
    for (std::size_t i = 0; i < wn.size(); ++i) {
        const Array& w = net.params.at(wn[i]);
        const Array& a = ad.A[i];
        const Array& b = ad.B[i];
        if (a.dim(0) != w.dim(0) || a.dim(1) != ad.rank || b.dim(0) != ad.rank || b.dim(1) != w.dim(1))
            throw std::invalid_argument("adapter: factor shapes for '" + wn[i] + "' do not match rank " +
                                        std::to_string(ad.rank) + " and weight " + shape_str(w.shape()));
    }
}

// Effective weight W + scale * A B with the same operation order as the taped version.
Array effective_weight_values(const Array& w, const Array& a, const Array& b, double scale) {
    Array ab = matmul_values(a, b, false, false);
    ab.data() = scale * ab.data();
    ab.data() = w.data() + ab.data();
    return ab;
}

}  // namespace

std::vector<std::string> EpsNet::weight_names() const {
    std::vector<std::string> out;
    for (int l = 0; l < cfg.depth; ++l) out.push_back("w" + std::to_string(l));
    out.push_back("wout");
    return out;
}

EpsNet make_eps_net(const EpsNetConfig& cfg, Rng& rng) {
    if (cfg.state_dim < 1 || cfg.width < 1 || cfg.depth < 1 || cfg.num_labels < 1)
        throw std::invalid_argument("make_eps_net: nonpositive dimension in config");
    EpsNet net;
    net.cfg = cfg;
    net.params.add("embed", gaussian_matrix(cfg.num_labels + 1, cfg.embed_dim, 0.5, rng));
    add_mlp_params(net.params, net.in_dim(), cfg.width, cfg.depth, cfg.state_dim, rng);
    return net;
}

LowRankAdapter make_adapter(const EpsNet& net, int rank, double scale, Rng& rng) {
    if (rank < 1) throw std::invalid_argument("make_adapter: rank must be at least 1, got " + std::to_string(rank));
    LowRankAdapter ad;
    ad.rank = rank;
    ad.scale = scale;
    ad.names = net.weight_names();
    for (const auto& name : ad.names) {
        const Array& w = net.params.at(name);
        ad.A.push_back(gaussian_matrix(w.dim(0), rank, 0.1, rng));
        ad.B.push_back(Array::zeros({rank, w.dim(1)}));
    }
    return ad;
}

ResidualNet make_residual_net(const ResidualNetConfig& cfg, Rng& rng) {
    if (cfg.state_dim < 1 || cfg.width < 1 || cfg.depth < 1)
        throw std::invalid_argument("make_residual_net: nonpositive dimension in config");
    ResidualNet net;
    net.cfg = cfg;
    add_mlp_params(net.params, cfg.state_dim + cfg.time_features, cfg.width, cfg.depth, cfg.state_dim, rng);
    return net;
}

Array eps_predict(const EpsNet& net, const Array& x, int t, int cond) {
    if (x.numel() != net.cfg.state_dim)
        throw std::invalid_argument("eps_predict: input has " + std::to_string(x.numel()) + " elements, expected " +
                                    std::to_string(net.cfg.state_dim));
    const int row = resolve_label(net, cond);
    Array tf = sin_time_features(t, net.cfg.time_features);
    Array emb = embed_row(net.params.at("embed"), row);
    Array x_full = concat_values({&x, &tf, &emb});
    std::vector<const Array*> w;
    std::vector<const Array*> b;
    for (int l = 0; l < net.cfg.depth; ++l) {
        w.push_back(&net.params.at("w" + std::to_string(l)));
        b.push_back(&net.params.at("b" + std::to_string(l)));
    }
    w.push_back(&net.params.at("wout"));
    b.push_back(&net.params.at("bout"));
    Array out = mlp_forward_values(w, b, x_full);
    if (!out.all_finite()) throw std::runtime_error("eps_predict: non-finite output");
    return out;
}

Array adapter_forward(const EpsNet& net, const LowRankAdapter& ad, const Array& x, int t, int cond) {
    check_adapter(net, ad);
    if (x.numel() != net.cfg.state_dim)
        throw std::invalid_argument("adapter_forward: input has " + std::to_string(x.numel()) +
                                    " elements, expected " + std::to_string(net.cfg.state_dim));
    const int row = resolve_label(net, cond);
    Array tf = sin_time_features(t, net.cfg.time_features);
    Array emb = embed_row(net.params.at("embed"), row);
    Array x_full = concat_values({&x, &tf, &emb});
    std::vector<Array> eff;
    const auto wn = net.weight_names();
    for (std::size_t i = 0; i < wn.size(); ++i)
        eff.push_back(effective_weight_values(net.params.at(wn[i]), ad.A[i], ad.B[i], ad.scale));
    std::vector<const Array*> w;
    std::vector<const Array*> b;
    for (int l = 0; l < net.cfg.depth; ++l) {
        w.push_back(&eff[static_cast<std::size_t>(l)]);
        b.push_back(&net.params.at("b" + std::to_string(l)));
    }
    w.push_back(&eff.back());
    b.push_back(&net.params.at("bout"));
    Array out = mlp_forward_values(w, b, x_full);
    if (!out.all_finite()) throw std::runtime_error("adapter_forward: non-finite output");
    return out;
}

EpsNet adapter_merge(const EpsNet& net, const LowRankAdapter& ad) {
    check_adapter(net, ad);
    EpsNet merged = net;
    const auto wn = net.weight_names();
    for (std::size_t i = 0; i < wn.size(); ++i)
        merged.params.at(wn[i]) = effective_weight_values(net.params.at(wn[i]), ad.A[i], ad.B[i], ad.scale);
    return merged;
}

Array residual_predict(const ResidualNet& net, const Array& x, int t) {
    if (x.numel() != net.cfg.state_dim)
        throw std::invalid_argument("residual_predict: input has " + std::to_string(x.numel()) +
                                    " elements, expected " + std::to_string(net.cfg.state_dim));
    Array tf = sin_time_features(t, net.cfg.time_features);
    Array x_full = concat_values({&x, &tf});
    std::vector<const Array*> w;
    std::vector<const Array*> b;
    for (int l = 0; l < net.cfg.depth; ++l) {
        w.push_back(&net.params.at("w" + std::to_string(l)));
        b.push_back(&net.params.at("b" + std::to_string(l)));
    }
    w.push_back(&net.params.at("wout"));
    b.push_back(&net.params.at("bout"));
    Array out = mlp_forward_values(w, b, x_full);
    if (!out.all_finite()) throw std::runtime_error("residual_predict: non-finite output");
    return out;
}

Array cfg_compose(const Array& eps_cond, const Array& eps_null, double scale) {
    if (!same_shape(eps_cond, eps_null))
        throw std::invalid_argument("cfg_compose: shapes " + shape_str(eps_cond.shape()) + " and " +
                                    shape_str(eps_null.shape()) + " differ");
    if (scale == 1.0) return eps_cond;
    if (scale == 0.0) return eps_null;
    Array out = eps_null;
    out.data() = eps_null.data() + scale * (eps_cond.data() - eps_null.data());
    return out;
}

EpsFn make_eps_fn(const EpsNet& net) {
    return [net](const Array& x, int t, int cond) { return eps_predict(net, x, t, cond); };
}

EpsFn make_eps_fn(const EpsNet& net, const LowRankAdapter& ad) {
    return [net, ad](const Array& x, int t, int cond) { return adapter_forward(net, ad, x, t, cond); };
}

EpsVars bind_eps(Tape& tape, const EpsNet& net, const LowRankAdapter* adapter) {
    if (adapter) check_adapter(net, *adapter);
    EpsVars vars;
    vars.net = &net;
    vars.adapter = adapter;
    std::vector<Var> raw;
    for (const auto& v : net.params.values) {
        Var lf = leaf(tape, v);
        vars.base_ids.push_back(lf.id);
        raw.push_back(adapter ? stopgrad(lf) : lf);
    }
    auto var_of = [&](const std::string& name) { return raw[static_cast<std::size_t>(net.params.index_of(name))]; };
    vars.embed = var_of("embed");
    const auto wn = net.weight_names();
    for (std::size_t i = 0; i < wn.size(); ++i) {
        Var w = var_of(wn[i]);
        if (adapter) {
            Var a = leaf(tape, adapter->A[i]);
            Var b = leaf(tape, adapter->B[i]);
            vars.a_ids.push_back(a.id);
            vars.b_ids.push_back(b.id);
            w = add(w, smul(matmul(a, b), adapter->scale));
        }
        vars.eff_w.push_back(w);
    }
    for (int l = 0; l < net.cfg.depth; ++l) vars.bias.push_back(var_of("b" + std::to_string(l)));
    vars.bias.push_back(var_of("bout"));
    return vars;
}

EpsFwd eps_forward(Tape& tape, const EpsVars& vars, Var x, int t, int cond) {
    const EpsNet& net = *vars.net;
    if (x.val().numel() != net.cfg.state_dim)
        throw std::invalid_argument("eps_forward: input has " + std::to_string(x.val().numel()) +
                                    " elements, expected " + std::to_string(net.cfg.state_dim));
    const int row = resolve_label(net, cond);
    Var tf = constant(tape, sin_time_features(t, net.cfg.time_features));
    Var emb = reshape(slice(vars.embed, {row, 0}, {1, net.cfg.embed_dim}), {net.cfg.embed_dim});
    Var h = concat({x, tf, emb}, 0);
    EpsFwd fwd;
    for (int l = 0; l < net.cfg.depth; ++l) {
        h = tanh(add(matvec(vars.eff_w[static_cast<std::size_t>(l)], h), vars.bias[static_cast<std::size_t>(l)]));
        fwd.acts.push_back(h);
    }
    fwd.out = add(matvec(vars.eff_w.back(), h), vars.bias.back());
    return fwd;
}

Var eps_input_vjp(Tape& tape, const EpsVars& vars, const EpsFwd& fwd, Var g) {
    const EpsNet& net = *vars.net;
    if (g.val().numel() != net.cfg.state_dim)
        throw std::invalid_argument("eps_input_vjp: cotangent has " + std::to_string(g.val().numel()) +
                                    " elements, expected " + std::to_string(net.cfg.state_dim));
    Var u = matvec(vars.eff_w.back(), g, /*tm=*/true);
    for (int l = net.cfg.depth - 1; l >= 0; --l) {
        Var z = fwd.acts[static_cast<std::size_t>(l)];
        Var ones = constant(tape, Array::constant(z.shape(), 1.0));
        u = mul(u, sub(ones, mul(z, z)));
        u = matvec(vars.eff_w[static_cast<std::size_t>(l)], u, /*tm=*/true);
    }
    return slice(u, {0}, {net.cfg.state_dim});
}

Array eps_input_vjp_values(const EpsNet& net, const LowRankAdapter* adapter, const Array& x, int t, int cond,
                           const Array& g) {
    Tape tape;
    EpsVars vars = bind_eps(tape, net, adapter);
    Var xv = leaf(tape, x);
    EpsFwd fwd = eps_forward(tape, vars, xv, t, cond);
    Var out = eps_input_vjp(tape, vars, fwd, leaf(tape, g));
    return out.val();
}

ResVars bind_residual(Tape& tape, const ResidualNet& net) {
    ResVars vars;
    vars.net = &net;
    std::vector<Var> raw;
    for (const auto& v : net.params.values) {
        Var lf = leaf(tape, v);
        vars.param_ids.push_back(lf.id);
        raw.push_back(lf);
    }
    auto var_of = [&](const std::string& name) { return raw[static_cast<std::size_t>(net.params.index_of(name))]; };
    for (int l = 0; l < net.cfg.depth; ++l) {
        vars.w.push_back(var_of("w" + std::to_string(l)));
        vars.b.push_back(var_of("b" + std::to_string(l)));
    }
    vars.w.push_back(var_of("wout"));
    vars.b.push_back(var_of("bout"));
    return vars;
}

Var residual_forward(Tape& tape, const ResVars& vars, Var x, int t) {
    const ResidualNet& net = *vars.net;
    if (x.val().numel() != net.cfg.state_dim)
        throw std::invalid_argument("residual_forward: input has " + std::to_string(x.val().numel()) +
                                    " elements, expected " + std::to_string(net.cfg.state_dim));
    Var tf = constant(tape, sin_time_features(t, net.cfg.time_features));
    Var h = concat({x, tf}, 0);
    for (int l = 0; l < net.cfg.depth; ++l)
        h = tanh(add(matvec(vars.w[static_cast<std::size_t>(l)], h), vars.b[static_cast<std::size_t>(l)]));
    return add(matvec(vars.w.back(), h), vars.b.back());
}

}  // namespace nr2d3
