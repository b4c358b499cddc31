#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nr2d3/array.hpp"
#include "nr2d3/rng.hpp"
#include "nr2d3/tape.hpp"

namespace nr2d3 {

// Ordered collection of named parameter tensors. Order is fixed at construction and is the
// serialization / gradient-update order used throughout.
struct NamedParams {
    std::vector<std::string> names;
    std::vector<Array> values;

    int add(std::string name, Array v);
    int index_of(const std::string& name) const;  // -1 when absent
    const Array& at(const std::string& name) const;
    Array& at(const std::string& name);
    std::int64_t total_numel() const;
    std::size_t count() const { return values.size(); }
};

// Sinusoidal features of an integer step index: pairs (sin(w_k t), cos(w_k t)) with
// geometrically spaced frequencies. `count` must be even.
Array sin_time_features(int t, int count);

struct EpsNetConfig {
    int state_dim = 1;
    int width = 128;
    int depth = 2;  // tanh hidden layers
    int time_features = 8;
    int embed_dim = 8;
    int num_labels = 2;  // excluding the reserved null label
};

// Noise-prediction MLP over (state, sinusoidal time features, label embedding). The label
// embedding table has num_labels + 1 rows; the last row is the reserved null label used
// for classifier-free guidance. Parameter names: "embed", "w0"/"b0" .. "wout"/"bout".
struct EpsNet {
    EpsNetConfig cfg;
    NamedParams params;

    int null_label() const { return cfg.num_labels; }
    int in_dim() const { return cfg.state_dim + cfg.time_features + cfg.embed_dim; }
    // Weight matrices in forward order ("w0".."w{depth-1}", "wout"); adapters attach to all.
    std::vector<std::string> weight_names() const;
};

// Hidden weights ~ N(0, 1/fan_in), output weight and all biases zero, embedding rows
// ~ N(0, 0.25). Zero output weight makes the initial prediction identically zero.
EpsNet make_eps_net(const EpsNetConfig& cfg, Rng& rng);

// Low-rank update per weight matrix of a host EpsNet: effective weight W + scale * A B.
// B starts at zero so finetuning begins exactly at the base model; the base weights are
// never mutated.
struct LowRankAdapter {
    std::vector<std::string> names;  // host weight entry per slot
    std::vector<Array> A;            // out x rank
    std::vector<Array> B;            // rank x in
    double scale = 1.0;
    int rank = 16;
};

LowRankAdapter make_adapter(const EpsNet& net, int rank, double scale, Rng& rng);

struct ResidualNetConfig {
    int state_dim = 1;
    int width = 64;
    int depth = 2;
    int time_features = 8;
};

// Small correction network over (state, time features) with a zero-initialized final
// layer, so a fresh instance predicts exactly zero everywhere.
struct ResidualNet {
    ResidualNetConfig cfg;
    NamedParams params;
};

ResidualNet make_residual_net(const ResidualNetConfig& cfg, Rng& rng);

// Plain (untaped) forwards. These share the matmul kernel and elementwise expressions with
// the taped forwards, so both paths produce bit-identical values for identical parameters.
Array eps_predict(const EpsNet& net, const Array& x, int t, int cond);
Array adapter_forward(const EpsNet& net, const LowRankAdapter& ad, const Array& x, int t, int cond);
EpsNet adapter_merge(const EpsNet& net, const LowRankAdapter& ad);
Array residual_predict(const ResidualNet& net, const Array& x, int t);

// eps_null + scale * (eps_cond - eps_null). scale 0 and 1 return the inputs unchanged.
Array cfg_compose(const Array& eps_cond, const Array& eps_null, double scale);

// Noise-prediction callback used by the samplers; cond < 0 requests the null label.
using EpsFn = std::function<Array(const Array&, int, int)>;

// Snapshot closures: the network (and adapter) are copied, so later parameter updates do
// not affect an already-created callback.
EpsFn make_eps_fn(const EpsNet& net);
EpsFn make_eps_fn(const EpsNet& net, const LowRankAdapter& ad);

// Parameters of one network bound to a tape, pushed once and reused across any number of
// forwards on that tape so gradients accumulate per parameter. With an adapter, the base
// parameters are wrapped in stop-gradient (frozen) and the effective weights carry the
// low-rank update; without one, the base parameters are the differentiable leaves.
struct EpsVars {
    const EpsNet* net = nullptr;
    const LowRankAdapter* adapter = nullptr;  // source adapter, null in full mode
    std::vector<int> base_ids;                // leaf id per params entry, in params order
    std::vector<int> a_ids;     // adapter leaf ids, per weight slot (empty without adapter)
    std::vector<int> b_ids;
    std::vector<Var> eff_w;  // effective weight per layer: w0..w{depth-1}, wout
    std::vector<Var> bias;   // b0..b{depth-1}, bout
    Var embed;               // embedding table (stop-gradded in adapter mode)
};

EpsVars bind_eps(Tape& tape, const EpsNet& net, const LowRankAdapter* adapter);

// One taped forward pass; activations are kept for input-gradient construction.
struct EpsFwd {
    Var out;
    std::vector<Var> acts;  // tanh outputs per hidden layer
};

EpsFwd eps_forward(Tape& tape, const EpsVars& vars, Var x, int t, int cond);

// Builds (d eps / d x)^T g on the tape as first-order ops (transposed matmuls and tanh
// derivatives from the saved activations), restricted to the state slice of the input.
// The result stays differentiable with respect to the bound parameters.
Var eps_input_vjp(Tape& tape, const EpsVars& vars, const EpsFwd& fwd, Var g);

// Value-level input gradient, evaluated through the identical op sequence on a scratch
// tape, so it matches the taped construction bit for bit.
Array eps_input_vjp_values(const EpsNet& net, const LowRankAdapter* adapter, const Array& x, int t, int cond,
                           const Array& g);

struct ResVars {
    const ResidualNet* net = nullptr;
    std::vector<int> param_ids;  // leaf id per params entry
    std::vector<Var> w;          // w0..w{depth-1}, wout
    std::vector<Var> b;
};

ResVars bind_residual(Tape& tape, const ResidualNet& net);
Var residual_forward(Tape& tape, const ResVars& vars, Var x, int t);

}  // namespace nr2d3
