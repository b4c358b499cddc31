#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nr2d3/array.hpp"

namespace nr2d3 {

// Fixed op vocabulary. No user-defined adjoints: every loss and renderer expression in the
// artifact is built from these records, which keeps tapes auditable and replayable.
enum class Op {
    leaf,
    add,
    sub,
    smul,      // scalar-mul by a recorded constant
    mul,       // elementwise-mul
    matmul,    // rank-2 x rank-2 with transpose flags
    tanh_fn,
    softplus,  // the smooth relu-like nonlinearity
    exp_fn,
    log_fn,
    sum,
    mean,
    sqnorm,    // squared-norm -> scalar
    dot,       // inner-product -> scalar
    concat,
    slice,
    broadcast,
    stopgrad,
    reshape,   // bookkeeping view change; identity forward, reshaped adjoint
};

const char* op_name(Op op);

struct Node {
    Op op = Op::leaf;
    std::vector<int> in;       // input node ids (inputs always precede this node)
    Array val;                 // forward value (saved-value policy: outputs retained)
    double c = 0.0;            // scalar-mul constant
    bool ta = false;           // matmul: transpose first operand
    bool tb = false;           // matmul: transpose second operand
    Shape aux;                 // slice: offsets then sizes; concat: axis; broadcast/reshape: none
};

// Append-only record of one forward computation. Construction and backward are
// single-threaded per tape; distinct tapes are independent.
class Tape {
public:
    int push_leaf(Array v);
    int push(Node n);  // evaluates the node from its inputs and stores the result

    const Array& val(int id) const { return nodes_.at(static_cast<std::size_t>(id)).val; }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(nodes_.size()); }

    // Overwrite a leaf's value (used by replay tests and finite-difference drivers).
    void set_leaf(int id, Array v);

    // Recompute every non-leaf value from the current leaf values, in record order.
    void replay();
    // True iff replay reproduces every stored value bit-for-bit.
    bool replay_check() const;

    // Line-oriented debug dump: `node-id op-kind input-ids shape`.
    std::string dump() const;

private:
    friend Array eval_node(const Tape& t, const Node& n);
    std::vector<Node> nodes_;
};

// Handle to one tape position. Cheap to copy; all math below records new nodes.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Array& val() const { return tape->val(id); }
    const Shape& shape() const { return val().shape(); }
};

Var leaf(Tape& t, Array v);
inline Var constant(Tape& t, Array v) { return leaf(t, std::move(v)); }
inline Var constant(Tape& t, double v) { return leaf(t, Array::scalar(v)); }

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var smul(Var a, double c);
Var mul(Var a, Var b);
Var matmul(Var a, Var b, bool ta = false, bool tb = false);
Var tanh(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);  // rejects nonpositive inputs
Var sum(Var a);
Var mean(Var a);
Var sqnorm(Var a);
Var dot(Var a, Var b);
Var concat(const std::vector<Var>& parts, std::int64_t axis);
Var slice(Var a, Shape offsets, Shape sizes);
Var broadcast(Var a, Shape target);
Var stopgrad(Var a);
Var reshape(Var a, Shape s);

// Composed conveniences (pure combinations of the primitives above).
Var addc(Var a, double c);               // a + constant, elementwise
Var sigmoid(Var a);                      // 0.5*(1 + tanh(x/2))
Var neg(Var a);                          // smul by -1
Var rsqrt(Var a, double eps);            // (a + eps)^(-1/2) via exp/log; a + eps must be > 0
Var matvec(Var m, Var v, bool tm = false);  // rank-2 times rank-1 -> rank-1

// Gradients of a scalar output with respect to requested tape ids.
class GradientMap {
public:
    const Array& at(int id) const;
    bool has(int id) const { return grads_.count(id) != 0; }
    void insert(int id, Array g) { grads_.emplace(id, std::move(g)); }

private:
    std::unordered_map<int, Array> grads_;
};

// Reverse sweep. `out` must be scalar; every id in `wrt` must be on the tape. Adjoints do
// not flow through stopgrad records; requested ids unreachable from `out` get exact zeros.
// Accumulation order is fixed by node id, so results are bit-identical across runs.
GradientMap backward(const Tape& tape, Var out, const std::vector<int>& wrt);

// Value-level kernels shared by taped and untaped code paths, so that e.g. a plain network
// forward is bit-identical to the taped forward of the same parameters.
Array matmul_values(const Array& a, const Array& b, bool ta, bool tb);
Array softplus_values(const Array& a);

}  // namespace nr2d3
