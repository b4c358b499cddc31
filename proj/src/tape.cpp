#include "nr2d3/tape.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace nr2d3 {

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::smul: return "scalar-mul";
        case Op::mul: return "elementwise-mul";
        case Op::matmul: return "matmul";
        case Op::tanh_fn: return "tanh";
        case Op::softplus: return "softplus";
        case Op::exp_fn: return "exp";
        case Op::log_fn: return "log";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::sqnorm: return "squared-norm";
        case Op::dot: return "inner-product";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::broadcast: return "broadcast";
        case Op::stopgrad: return "stop-gradient";
        case Op::reshape: return "reshape";
    }
    return "?";
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

[[noreturn]] void shape_error(const char* what, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(what) + ": shapes " + shape_str(a) + " and " + shape_str(b));
}

Array transpose_values(const Array& a) {
    RowMat t = a.mat().transpose();
    return Array({t.rows(), t.cols()}, Eigen::Map<const Flat>(t.data(), t.size()));
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double logistic(double x) { return x > 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Effective shape for broadcasting: scalars promote to all-ones of the target rank.
Shape broadcast_src_shape(const Array& src, const Shape& target) {
    if (src.numel() == 1) return Shape(target.size(), 1);
    if (src.rank() != static_cast<std::int64_t>(target.size()))
        shape_error("broadcast rank mismatch", src.shape(), target);
    for (std::size_t i = 0; i < target.size(); ++i)
        if (src.shape()[i] != target[i] && src.shape()[i] != 1)
            shape_error("broadcast", src.shape(), target);
    return src.shape();
}

}  // namespace

Array matmul_values(const Array& a, const Array& b, bool ta, bool tb) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    RowMat A = a.mat();
    if (ta) A = RowMat(A.transpose());
    RowMat B = b.mat();
    if (tb) B = RowMat(B.transpose());
    if (A.cols() != B.rows()) shape_error("matmul inner-dimension mismatch", a.shape(), b.shape());
    RowMat C = A * B;
    return Array({C.rows(), C.cols()}, Eigen::Map<const Flat>(C.data(), C.size()));
}

Array softplus_values(const Array& a) {
    Flat out(a.numel());
    for (std::int64_t i = 0; i < a.numel(); ++i) out(i) = stable_softplus(a[i]);
    return Array(a.shape(), std::move(out));
}

Array eval_node(const Tape& t, const Node& n) {
    auto in = [&](int k) -> const Array& { return t.val(n.in[static_cast<std::size_t>(k)]); };
    switch (n.op) {
        case Op::leaf:
            return n.val;
        case Op::add:
            return Array(in(0).shape(), in(0).data() + in(1).data());
        case Op::sub:
            return Array(in(0).shape(), in(0).data() - in(1).data());
        case Op::smul:
            return Array(in(0).shape(), n.c * in(0).data());
        case Op::mul:
            return Array(in(0).shape(), in(0).data() * in(1).data());
        case Op::matmul:
            return matmul_values(in(0), in(1), n.ta, n.tb);
        case Op::tanh_fn:
            return Array(in(0).shape(), in(0).data().tanh());
        case Op::softplus:
            return softplus_values(in(0));
        case Op::exp_fn:
            return Array(in(0).shape(), in(0).data().exp());
        case Op::log_fn: {
            if ((in(0).data() <= 0.0).any())
                throw std::domain_error("log: nonpositive input element");
            return Array(in(0).shape(), in(0).data().log());
        }
        case Op::sum:
            return Array::scalar(in(0).data().sum());
        case Op::mean:
            return Array::scalar(in(0).data().sum() / static_cast<double>(in(0).numel()));
        case Op::sqnorm:
            return Array::scalar(in(0).data().square().sum());
        case Op::dot:
            return Array::scalar((in(0).data() * in(1).data()).sum());
        case Op::concat: {
            std::int64_t axis = n.aux[0];
            const Shape& s0 = in(0).shape();
            Shape out_shape = s0;
            for (std::size_t p = 1; p < n.in.size(); ++p) out_shape[static_cast<std::size_t>(axis)] += in(static_cast<int>(p)).shape()[static_cast<std::size_t>(axis)];
            std::int64_t outer = 1;
            for (std::int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
            std::int64_t inner = 1;
            for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
            Flat out(shape_numel(out_shape));
            std::int64_t out_block = out_shape[static_cast<std::size_t>(axis)] * inner;
            std::int64_t prefix = 0;
            for (std::size_t p = 0; p < n.in.size(); ++p) {
                const Array& part = in(static_cast<int>(p));
                std::int64_t block = part.shape()[static_cast<std::size_t>(axis)] * inner;
                for (std::int64_t o = 0; o < outer; ++o)
                    std::memcpy(out.data() + o * out_block + prefix, part.data().data() + o * block,
                                sizeof(double) * static_cast<std::size_t>(block));
                prefix += block;
            }
            return Array(std::move(out_shape), std::move(out));
        }
        case Op::slice: {
            const Array& src = in(0);
            std::size_t r = static_cast<std::size_t>(src.rank());
            Shape off(n.aux.begin(), n.aux.begin() + static_cast<std::ptrdiff_t>(r));
            Shape sz(n.aux.begin() + static_cast<std::ptrdiff_t>(r), n.aux.end());
            auto st = row_major_strides(src.shape());
            Flat out(shape_numel(sz));
            std::int64_t run = sz[r - 1];
            std::int64_t rows = out.size() / run;
            Shape idx(r - 1, 0);
            for (std::int64_t row = 0; row < rows; ++row) {
                std::int64_t base = off[r - 1];
                for (std::size_t i = 0; i + 1 < r; ++i) base += (off[i] + idx[i]) * st[i];
                std::memcpy(out.data() + row * run, src.data().data() + base,
                            sizeof(double) * static_cast<std::size_t>(run));
                for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
                    if (++idx[static_cast<std::size_t>(i)] < sz[static_cast<std::size_t>(i)]) break;
                    idx[static_cast<std::size_t>(i)] = 0;
                }
            }
            return Array(std::move(sz), std::move(out));
        }
        case Op::broadcast: {
            const Array& src = in(0);
            const Shape& target = n.aux;
            Shape ss = broadcast_src_shape(src, target);
            auto st = row_major_strides(ss);
            std::size_t r = target.size();
            Flat out(shape_numel(target));
            std::int64_t run = target[r - 1];
            std::int64_t rows = out.size() / run;
            Shape idx(r - 1, 0);
            for (std::int64_t row = 0; row < rows; ++row) {
                std::int64_t base = 0;
                for (std::size_t i = 0; i + 1 < r; ++i) base += (ss[i] == 1 ? 0 : idx[i]) * st[i];
                if (ss[r - 1] == run) {
                    std::memcpy(out.data() + row * run, src.data().data() + base,
                                sizeof(double) * static_cast<std::size_t>(run));
                } else {
                    double v = src.data()(base);
                    for (std::int64_t j = 0; j < run; ++j) out(row * run + j) = v;
                }
                for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
                    if (++idx[static_cast<std::size_t>(i)] < target[static_cast<std::size_t>(i)]) break;
                    idx[static_cast<std::size_t>(i)] = 0;
                }
            }
            return Array(target, std::move(out));
        }
        case Op::stopgrad:
            return in(0);
        case Op::reshape:
            return in(0).reshaped(n.aux);
    }
    throw std::logic_error("eval_node: unhandled op");
}

int Tape::push_leaf(Array v) {
    Node n;
    n.op = Op::leaf;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::push(Node n) {
    for (int id : n.in)
        if (id < 0 || id >= size()) throw std::invalid_argument("tape: input id " + std::to_string(id) + " not on tape");
    n.val = eval_node(*this, n);
    if (!n.val.all_finite() && n.op != Op::leaf) {
        // Non-finite values are allowed to propagate only where callers explicitly test for
        // them; recording them would poison every downstream adjoint silently.
        throw std::runtime_error(std::string("tape: non-finite result from ") + op_name(n.op));
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::set_leaf(int id, Array v) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.op != Op::leaf) throw std::invalid_argument("tape: set_leaf on non-leaf node");
    if (v.shape() != n.val.shape()) shape_error("set_leaf", v.shape(), n.val.shape());
    n.val = std::move(v);
}

void Tape::replay() {
    for (auto& n : nodes_)
        if (n.op != Op::leaf) n.val = eval_node(*this, n);
}

bool Tape::replay_check() const {
    for (const auto& n : nodes_) {
        if (n.op == Op::leaf) continue;
        Array redo = eval_node(*this, n);
        if (!bit_equal(redo, n.val)) return false;
    }
    return true;
}

std::string Tape::dump() const {
    std::ostringstream os;
    for (int id = 0; id < size(); ++id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        os << id << " " << op_name(n.op) << " ";
        if (n.in.empty()) os << "-";
        for (std::size_t i = 0; i < n.in.size(); ++i) os << (i ? "," : "") << n.in[i];
        os << " " << shape_str(n.val.shape()) << "\n";
    }
    return os.str();
}

namespace {

Var push_op(Tape& t, Node n) {
    int id = t.push(std::move(n));
    return Var{&t, id};
}

void check_same_tape(Var a, Var b, const char* what) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(what) + ": operands from different tapes");
}

Var elementwise2(Op op, Var a, Var b, const char* what) {
    check_same_tape(a, b, what);
    if (!same_shape(a.val(), b.val())) shape_error(what, a.shape(), b.shape());
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    return push_op(*a.tape, std::move(n));
}

Var unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.in = {a.id};
    return push_op(*a.tape, std::move(n));
}

}  // namespace

Var leaf(Tape& t, Array v) { return Var{&t, t.push_leaf(std::move(v))}; }

Var add(Var a, Var b) { return elementwise2(Op::add, a, b, "add"); }
Var sub(Var a, Var b) { return elementwise2(Op::sub, a, b, "sub"); }
Var mul(Var a, Var b) { return elementwise2(Op::mul, a, b, "elementwise-mul"); }

Var smul(Var a, double c) {
    Node n;
    n.op = Op::smul;
    n.in = {a.id};
    n.c = c;
    return push_op(*a.tape, std::move(n));
}

Var matmul(Var a, Var b, bool ta, bool tb) {
    check_same_tape(a, b, "matmul");
    Node n;
    n.op = Op::matmul;
    n.in = {a.id, b.id};
    n.ta = ta;
    n.tb = tb;
    return push_op(*a.tape, std::move(n));
}

Var tanh(Var a) { return unary(Op::tanh_fn, a); }
Var softplus(Var a) { return unary(Op::softplus, a); }
Var exp(Var a) { return unary(Op::exp_fn, a); }
Var log(Var a) { return unary(Op::log_fn, a); }
Var sum(Var a) { return unary(Op::sum, a); }
Var mean(Var a) { return unary(Op::mean, a); }
Var sqnorm(Var a) { return unary(Op::sqnorm, a); }
Var stopgrad(Var a) { return unary(Op::stopgrad, a); }

Var dot(Var a, Var b) { return elementwise2(Op::dot, a, b, "inner-product"); }

Var concat(const std::vector<Var>& parts, std::int64_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no parts");
    Tape& t = *parts[0].tape;
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<std::int64_t>(s0.size()))
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    Node n;
    n.op = Op::concat;
    n.aux = {axis};
    for (const Var& p : parts) {
        check_same_tape(parts[0], p, "concat");
        if (p.shape().size() != s0.size()) shape_error("concat rank", s0, p.shape());
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (static_cast<std::int64_t>(i) != axis && p.shape()[i] != s0[i]) shape_error("concat", s0, p.shape());
        n.in.push_back(p.id);
    }
    return push_op(t, std::move(n));
}

Var slice(Var a, Shape offsets, Shape sizes) {
    const Shape& s = a.shape();
    if (offsets.size() != s.size() || sizes.size() != s.size())
        throw std::invalid_argument("slice: offsets/sizes rank mismatch for " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
        if (offsets[i] < 0 || sizes[i] <= 0 || offsets[i] + sizes[i] > s[i])
            throw std::invalid_argument("slice: window " + shape_str(offsets) + "+" + shape_str(sizes) +
                                        " out of bounds for " + shape_str(s));
    Node n;
    n.op = Op::slice;
    n.in = {a.id};
    n.aux = offsets;
    n.aux.insert(n.aux.end(), sizes.begin(), sizes.end());
    return push_op(*a.tape, std::move(n));
}

Var broadcast(Var a, Shape target) {
    broadcast_src_shape(a.val(), target);  // validate now, not at eval
    Node n;
    n.op = Op::broadcast;
    n.in = {a.id};
    n.aux = std::move(target);
    return push_op(*a.tape, std::move(n));
}

Var reshape(Var a, Shape s) {
    if (shape_numel(s) != a.val().numel()) shape_error("reshape", a.shape(), s);
    Node n;
    n.op = Op::reshape;
    n.in = {a.id};
    n.aux = std::move(s);
    return push_op(*a.tape, std::move(n));
}

Var addc(Var a, double c) { return add(a, constant(*a.tape, Array::constant(a.shape(), c))); }
Var sigmoid(Var a) { return smul(addc(tanh(smul(a, 0.5)), 1.0), 0.5); }
Var neg(Var a) { return smul(a, -1.0); }
Var rsqrt(Var a, double eps) { return exp(smul(log(addc(a, eps)), -0.5)); }

Var matvec(Var m, Var v, bool tm) {
    std::int64_t k = v.val().numel();
    Var col = reshape(v, {k, 1});
    Var prod = matmul(m, col, tm, false);
    return reshape(prod, {prod.val().dim(0)});
}

const Array& GradientMap::at(int id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw std::invalid_argument("GradientMap: no entry for id " + std::to_string(id));
    return it->second;
}

GradientMap backward(const Tape& tape, Var out, const std::vector<int>& wrt) {
    if (out.tape != &tape) throw std::invalid_argument("backward: output from a different tape");
    if (out.id < 0 || out.id >= tape.size()) throw std::invalid_argument("backward: output id not on tape");
    if (tape.val(out.id).numel() != 1)
        throw std::invalid_argument("backward: output must be scalar, got " + shape_str(tape.val(out.id).shape()));
    for (int id : wrt)
        if (id < 0 || id >= tape.size())
            throw std::invalid_argument("backward: requested id " + std::to_string(id) + " not on tape");

    std::vector<Array> adj(static_cast<std::size_t>(tape.size()));
    std::vector<char> present(static_cast<std::size_t>(tape.size()), 0);
    auto acc = [&](int id, Array delta) {
        auto u = static_cast<std::size_t>(id);
        if (!present[u]) {
            adj[u] = std::move(delta);
            present[u] = 1;
        } else {
            adj[u].data() += delta.data();
        }
    };
    acc(out.id, Array::constant({1}, 1.0));

    for (int id = out.id; id >= 0; --id) {
        auto u = static_cast<std::size_t>(id);
        if (!present[u]) continue;
        const Node& n = tape.node(id);
        const Array& g = adj[u];
        auto inval = [&](int k) -> const Array& { return tape.val(n.in[static_cast<std::size_t>(k)]); };
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::add:
                acc(n.in[0], g);
                acc(n.in[1], g);
                break;
            case Op::sub:
                acc(n.in[0], g);
                acc(n.in[1], Array(g.shape(), -g.data()));
                break;
            case Op::smul:
                acc(n.in[0], Array(g.shape(), n.c * g.data()));
                break;
            case Op::mul:
                acc(n.in[0], Array(g.shape(), g.data() * inval(1).data()));
                acc(n.in[1], Array(g.shape(), g.data() * inval(0).data()));
                break;
            case Op::matmul: {
                Array d_opA = matmul_values(g, inval(1), false, !n.tb);
                acc(n.in[0], n.ta ? transpose_values(d_opA) : std::move(d_opA));
                Array d_opB = matmul_values(inval(0), g, !n.ta, false);
                acc(n.in[1], n.tb ? transpose_values(d_opB) : std::move(d_opB));
                break;
            }
            case Op::tanh_fn:
                acc(n.in[0], Array(g.shape(), g.data() * (1.0 - n.val.data().square())));
                break;
            case Op::softplus: {
                Flat d(g.numel());
                for (std::int64_t i = 0; i < g.numel(); ++i) d(i) = g[i] * logistic(inval(0)[i]);
                acc(n.in[0], Array(g.shape(), std::move(d)));
                break;
            }
            case Op::exp_fn:
                acc(n.in[0], Array(g.shape(), g.data() * n.val.data()));
                break;
            case Op::log_fn:
                acc(n.in[0], Array(g.shape(), g.data() / inval(0).data()));
                break;
            case Op::sum:
                acc(n.in[0], Array::constant(inval(0).shape(), g.scalar_value()));
                break;
            case Op::mean:
                acc(n.in[0],
                    Array::constant(inval(0).shape(), g.scalar_value() / static_cast<double>(inval(0).numel())));
                break;
            case Op::sqnorm:
                acc(n.in[0], Array(inval(0).shape(), 2.0 * g.scalar_value() * inval(0).data()));
                break;
            case Op::dot:
                acc(n.in[0], Array(inval(0).shape(), g.scalar_value() * inval(1).data()));
                acc(n.in[1], Array(inval(1).shape(), g.scalar_value() * inval(0).data()));
                break;
            case Op::concat: {
                std::int64_t axis = n.aux[0];
                const Shape& gs = g.shape();
                std::int64_t outer = 1;
                for (std::int64_t i = 0; i < axis; ++i) outer *= gs[static_cast<std::size_t>(i)];
                std::int64_t inner = 1;
                for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < gs.size(); ++i) inner *= gs[i];
                std::int64_t out_block = gs[static_cast<std::size_t>(axis)] * inner;
                std::int64_t prefix = 0;
                for (std::size_t p = 0; p < n.in.size(); ++p) {
                    const Array& part = inval(static_cast<int>(p));
                    std::int64_t block = part.shape()[static_cast<std::size_t>(axis)] * inner;
                    Flat d(part.numel());
                    for (std::int64_t o = 0; o < outer; ++o)
                        std::memcpy(d.data() + o * block, g.data().data() + o * out_block + prefix,
                                    sizeof(double) * static_cast<std::size_t>(block));
                    acc(n.in[p], Array(part.shape(), std::move(d)));
                    prefix += block;
                }
                break;
            }
            case Op::slice: {
                const Array& src = inval(0);
                std::size_t r = static_cast<std::size_t>(src.rank());
                Shape off(n.aux.begin(), n.aux.begin() + static_cast<std::ptrdiff_t>(r));
                Shape sz(n.aux.begin() + static_cast<std::ptrdiff_t>(r), n.aux.end());
                auto st = row_major_strides(src.shape());
                Flat d = Flat::Zero(src.numel());
                std::int64_t run = sz[r - 1];
                std::int64_t rows = g.numel() / run;
                Shape idx(r - 1, 0);
                for (std::int64_t row = 0; row < rows; ++row) {
                    std::int64_t base = off[r - 1];
                    for (std::size_t i = 0; i + 1 < r; ++i) base += (off[i] + idx[i]) * st[i];
                    for (std::int64_t j = 0; j < run; ++j) d(base + j) += g[row * run + j];
                    for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
                        if (++idx[static_cast<std::size_t>(i)] < sz[static_cast<std::size_t>(i)]) break;
                        idx[static_cast<std::size_t>(i)] = 0;
                    }
                }
                acc(n.in[0], Array(src.shape(), std::move(d)));
                break;
            }
            case Op::broadcast: {
                const Array& src = inval(0);
                const Shape& target = n.aux;
                Shape ss = broadcast_src_shape(src, target);
                auto st = row_major_strides(ss);
                std::size_t r = target.size();
                Flat d = Flat::Zero(src.numel());
                std::int64_t run = target[r - 1];
                std::int64_t rows = g.numel() / run;
                Shape idx(r - 1, 0);
                for (std::int64_t row = 0; row < rows; ++row) {
                    std::int64_t base = 0;
                    for (std::size_t i = 0; i + 1 < r; ++i) base += (ss[i] == 1 ? 0 : idx[i]) * st[i];
                    if (ss[r - 1] == run) {
                        for (std::int64_t j = 0; j < run; ++j) d(base + j) += g[row * run + j];
                    } else {
                        double s = 0.0;
                        for (std::int64_t j = 0; j < run; ++j) s += g[row * run + j];
                        d(base) += s;
                    }
                    for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
                        if (++idx[static_cast<std::size_t>(i)] < target[static_cast<std::size_t>(i)]) break;
                        idx[static_cast<std::size_t>(i)] = 0;
                    }
                }
                acc(n.in[0], Array(src.shape(), std::move(d)));
                break;
            }
            case Op::stopgrad:
                break;  // adjoint is exactly zero behind the barrier
            case Op::reshape:
                acc(n.in[0], g.reshaped(inval(0).shape()));
                break;
        }
    }

    GradientMap gm;
    for (int id : wrt) {
        auto u = static_cast<std::size_t>(id);
        if (gm.has(id)) continue;
        gm.insert(id, present[u] ? adj[u] : Array::zeros(tape.val(id).shape()));
    }
    return gm;
}

}  // namespace nr2d3
