#include "ssmc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ssmc {

const Tensor& Value::val() const { return tape->val(id); }

Value Tape::leaf(Tensor value, const std::string& name) {
    Value v = emit(std::move(value), {}, nullptr);
    if (!name.empty()) name_node(v, name);
    return v;
}

Value Tape::emit(Tensor value, std::vector<int> inputs, BackFn back) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        n.inputs = std::move(inputs);
        n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::grad(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Tape::grad: bad node id");
    if (id < static_cast<int>(grads_.size()) && grads_[static_cast<size_t>(id)].defined()) {
        return grads_[static_cast<size_t>(id)];
    }
    return Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
}

const Tensor& Tape::grad_ref(int id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[static_cast<size_t>(id)];
    if (!g.defined()) g = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
    return g;
}

void Tape::accum_grad(int id, const Tensor& g) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& slot = grads_[static_cast<size_t>(id)];
    if (!slot.defined()) slot = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
    check_same_shape("accum_grad", slot, g);
    t_add_inplace(slot, g);
}

void Tape::backward(Value loss) {
    if (!grad_enabled_) throw std::logic_error("backward: tape was recorded with gradients disabled");
    if (loss.tape != this) throw std::logic_error("backward: loss node belongs to a different tape");
    const Tensor& lv = val(loss);
    if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    grads_.assign(nodes_.size(), Tensor{});
    accum_grad(loss.id, Tensor::full(lv.shape(), 1.0));
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.back) continue;
        if (!grads_[static_cast<size_t>(i)].defined()) continue;
        n.back(*this, i);
    }
    backward_done_ = true;
}

void Tape::name_node(Value v, const std::string& name) {
    if (v.tape != this) throw std::logic_error("name_node: value from another tape");
    auto [it, inserted] = names_.emplace(name, v.id);
    if (!inserted) throw std::logic_error("name_node: duplicate node name '" + name + "'");
}

Value Tape::named(const std::string& name) {
    auto it = names_.find(name);
    if (it == names_.end()) throw std::invalid_argument("Tape: unknown node name '" + name + "'");
    return Value{this, it->second};
}

Tensor Tape::BackwardHook::grad() const {
    if (!tape->backward_done()) throw std::logic_error("BackwardHook::grad: backward() has not run");
    return tape->grad(node);
}

Tape::BackwardHook Tape::register_backward_hook(const std::string& node_name) {
    Value v = named(node_name);  // throws on unknown name
    return BackwardHook{this, v.id};
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

void check_same_tape(const char* op, Value a, Value b) {
    if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands from different tapes");
}

double sigmoid_s(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_s(double x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// outer/inner extents around one axis, for strided kernels
struct AxisSplit {
    int64_t outer, mid, inner;
};

AxisSplit split_at(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) sp.inner *= s[static_cast<size_t>(i)];
    return sp;
}

using MapFn = double (*)(double);
using GradFn = double (*)(double x, double y);  // dy/dx from input x and output y

Value unary_op(Value a, MapFn f, GradFn df) {
    const Tensor& av = a.val();
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    // node values are immutable once recorded, so backward reads them in place
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, df](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        const Tensor& in = t.val(aid);
        const Tensor& outv = t.val(nid);
        Tensor ga = Tensor::zeros(in.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * df(in[i], outv[i]);
        t.accum_grad(aid, ga);
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Value add(Value a, Value b) {
    check_same_tape("add", a, b);
    check_same_shape("add", a.val(), b.val());
    Tensor out = t_add(a.val(), b.val());
    return a.tape->emit(std::move(out), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        t.accum_grad(aid, g);
        t.accum_grad(bid, g);
    });
}

Value sub(Value a, Value b) {
    check_same_tape("sub", a, b);
    check_same_shape("sub", a.val(), b.val());
    Tensor out = t_sub(a.val(), b.val());
    return a.tape->emit(std::move(out), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        t.accum_grad(aid, g);
        t.accum_grad(bid, t_scale(g, -1.0));
    });
}

Value mul(Value a, Value b) {
    check_same_tape("mul", a, b);
    check_same_shape("mul", a.val(), b.val());
    Tensor out = t_mul(a.val(), b.val());
    return a.tape->emit(std::move(out), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        t.accum_grad(aid, t_mul(g, t.val(bid)));
        t.accum_grad(bid, t_mul(g, t.val(aid)));
    });
}

Value div(Value a, Value b) {
    check_same_tape("div", a, b);
    check_same_shape("div", a.val(), b.val());
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
    return a.tape->emit(std::move(out), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        const Tensor& sa = t.val(aid);
        const Tensor& sb = t.val(bid);
        Tensor ga = Tensor::zeros(sa.shape());
        Tensor gb = Tensor::zeros(sb.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
            ga[i] = g[i] / sb[i];
            gb[i] = -g[i] * sa[i] / (sb[i] * sb[i]);
        }
        t.accum_grad(aid, ga);
        t.accum_grad(bid, gb);
    });
}

Value add_scalar(Value a, double c) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return a.tape->emit(std::move(out), {a.id},
                        [aid = a.id](Tape& t, int nid) { t.accum_grad(aid, t.grad_ref(nid)); });
}

Value mul_scalar(Value a, double c) {
    Tensor out = t_scale(a.val(), c);
    return a.tape->emit(std::move(out), {a.id},
                        [aid = a.id, c](Tape& t, int nid) { t.accum_grad(aid, t_scale(t.grad_ref(nid), c)); });
}

Value neg(Value a) { return mul_scalar(a, -1.0); }

Value exp(Value a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value log(Value a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value sqrt(Value a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

Value sigmoid(Value a) {
    return unary_op(a, &sigmoid_s, [](double, double y) { return y * (1.0 - y); });
}

Value silu(Value a) {
    return unary_op(a, [](double x) { return x * sigmoid_s(x); },
                    [](double x, double) {
                        double s = sigmoid_s(x);
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Value softplus(Value a) {
    return unary_op(a, &softplus_s, [](double x, double) { return sigmoid_s(x); });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Value matmul(Value a, Value b) {
    check_same_tape("matmul", a, b);
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
        throw ShapeError("matmul: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    }
    const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A.data() + i * k;
        double* orow = out.data() + i * n;
        for (int64_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = B.data() + l * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return a.tape->emit(std::move(out), {a.id, b.id}, [aid = a.id, bid = b.id, m, k, n](Tape& t, int nid) {
        const Tensor& sa = t.val(aid);
        const Tensor& sb = t.val(bid);
        const Tensor& g = t.grad_ref(nid);
        Tensor ga({m, k});
        Tensor gb({k, n});
        // ga = g * sb^T
        for (int64_t i = 0; i < m; ++i) {
            const double* grow = g.data() + i * n;
            double* garow = ga.data() + i * k;
            for (int64_t l = 0; l < k; ++l) {
                const double* brow = sb.data() + l * n;
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                garow[l] = acc;
            }
        }
        // gb = sa^T * g
        for (int64_t i = 0; i < m; ++i) {
            const double* arow = sa.data() + i * k;
            const double* grow = g.data() + i * n;
            for (int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                double* gbrow = gb.data() + l * n;
                for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
        t.accum_grad(aid, ga);
        t.accum_grad(bid, gb);
    });
}

Value transpose2d(Value a) {
    if (a.val().rank() != 2) throw ShapeError("transpose2d: expected rank-2, got " + shape_str(a.val().shape()));
    return permute(a, {1, 0});
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Value reshape(Value a, Shape shape) {
    Tensor out = a.val().reshaped(shape);
    Shape orig = a.val().shape();
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, orig](Tape& t, int nid) {
        t.accum_grad(aid, t.grad_ref(nid).reshaped(orig));
    });
}

namespace {

Tensor permute_tensor(const Tensor& a, const std::vector<int>& dims) {
    const int r = a.rank();
    if (static_cast<int>(dims.size()) != r) {
        throw ShapeError("permute: " + std::to_string(dims.size()) + " dims for " + shape_str(a.shape()));
    }
    Shape out_shape(static_cast<size_t>(r));
    std::vector<int64_t> in_strides(static_cast<size_t>(r)), out_of_in(static_cast<size_t>(r));
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int i = 0; i < r; ++i) {
        int d = dims[static_cast<size_t>(i)];
        if (d < 0 || d >= r || seen[static_cast<size_t>(d)]) throw ShapeError("permute: bad axis list");
        seen[static_cast<size_t>(d)] = true;
        out_shape[static_cast<size_t>(i)] = a.dim(d);
    }
    for (int i = 0; i < r; ++i) in_strides[static_cast<size_t>(i)] = a.stride(i);
    Tensor out(out_shape);
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    for (int64_t o = 0; o < out.numel(); ++o) {
        int64_t in_off = 0;
        for (int i = 0; i < r; ++i) in_off += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];
        out[o] = a[in_off];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return out;
}

}  // namespace

Value permute(Value a, const std::vector<int>& dims) {
    Tensor out = permute_tensor(a.val(), dims);
    std::vector<int> inv(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) inv[static_cast<size_t>(dims[i])] = static_cast<int>(i);
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, inv](Tape& t, int nid) {
        t.accum_grad(aid, permute_tensor(t.grad_ref(nid), inv));
    });
}

Value expand(Value a, int axis, int64_t n) {
    const Tensor& av = a.val();
    AxisSplit sp = split_at(av.shape(), axis);
    if (sp.mid != 1) {
        throw ShapeError("expand: axis " + std::to_string(axis) + " of " + shape_str(av.shape()) + " must have extent 1");
    }
    Shape out_shape = av.shape();
    out_shape[static_cast<size_t>(axis)] = n;
    Tensor out(out_shape);
    for (int64_t o = 0; o < sp.outer; ++o) {
        const double* src = av.data() + o * sp.inner;
        for (int64_t r = 0; r < n; ++r) {
            std::memcpy(out.data() + (o * n + r) * sp.inner, src, static_cast<size_t>(sp.inner) * sizeof(double));
        }
    }
    Shape in_shape = av.shape();
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, in_shape, sp, n](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        Tensor ga(in_shape);
        for (int64_t o = 0; o < sp.outer; ++o) {
            double* dst = ga.data() + o * sp.inner;
            for (int64_t r = 0; r < n; ++r) {
                const double* src = g.data() + (o * n + r) * sp.inner;
                for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
        }
        t.accum_grad(aid, ga);
    });
}

Value slice(Value a, int axis, int64_t start, int64_t end) {
    const Tensor& av = a.val();
    AxisSplit sp = split_at(av.shape(), axis);
    if (start < 0 || end > sp.mid || start >= end) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(av.shape()));
    }
    const int64_t len = end - start;
    Shape out_shape = av.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    for (int64_t o = 0; o < sp.outer; ++o) {
        std::memcpy(out.data() + o * len * sp.inner, av.data() + (o * sp.mid + start) * sp.inner,
                    static_cast<size_t>(len * sp.inner) * sizeof(double));
    }
    Shape in_shape = av.shape();
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, in_shape, sp, start, len](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        Tensor ga(in_shape);
        for (int64_t o = 0; o < sp.outer; ++o) {
            std::memcpy(ga.data() + (o * sp.mid + start) * sp.inner, g.data() + o * len * sp.inner,
                        static_cast<size_t>(len * sp.inner) * sizeof(double));
        }
        t.accum_grad(aid, ga);
    });
}

Value concat(const std::vector<Value>& vs, int axis) {
    if (vs.empty()) throw ShapeError("concat: empty input list");
    Tape* tape = vs[0].tape;
    const int r = vs[0].val().rank();
    int64_t total = 0;
    for (const Value& v : vs) {
        if (v.tape != tape) throw std::logic_error("concat: operands from different tapes");
        if (v.val().rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != axis && v.val().dim(i) != vs[0].val().dim(i)) {
                throw ShapeError("concat: shape mismatch " + shape_str(vs[0].val().shape()) + " vs " +
                                 shape_str(v.val().shape()));
            }
        }
        total += v.val().dim(axis);
    }
    Shape out_shape = vs[0].val().shape();
    out_shape[static_cast<size_t>(axis)] = total;
    AxisSplit osp = split_at(out_shape, axis);
    Tensor out(out_shape);
    std::vector<int> ids;
    std::vector<int64_t> mids;
    int64_t off = 0;
    for (const Value& v : vs) {
        AxisSplit sp = split_at(v.val().shape(), axis);
        for (int64_t o = 0; o < sp.outer; ++o) {
            std::memcpy(out.data() + (o * osp.mid + off) * sp.inner, v.val().data() + o * sp.mid * sp.inner,
                        static_cast<size_t>(sp.mid * sp.inner) * sizeof(double));
        }
        ids.push_back(v.id);
        mids.push_back(sp.mid);
        off += sp.mid;
    }
    std::vector<Shape> in_shapes;
    for (const Value& v : vs) in_shapes.push_back(v.val().shape());
    return tape->emit(std::move(out), ids, [ids, mids, in_shapes, osp](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        int64_t off = 0;
        for (size_t v = 0; v < ids.size(); ++v) {
            Tensor gi(in_shapes[v]);
            AxisSplit sp{osp.outer, mids[v], osp.inner};
            for (int64_t o = 0; o < sp.outer; ++o) {
                std::memcpy(gi.data() + o * sp.mid * sp.inner, g.data() + (o * osp.mid + off) * sp.inner,
                            static_cast<size_t>(sp.mid * sp.inner) * sizeof(double));
            }
            t.accum_grad(ids[v], gi);
            off += sp.mid;
        }
    });
}

Value clone(Value a) {
    Tensor out = a.val();
    return a.tape->emit(std::move(out), {a.id},
                        [aid = a.id](Tape& t, int nid) { t.accum_grad(aid, t.grad_ref(nid)); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Value sum_axis(Value a, int axis, bool keepdim) {
    const Tensor& av = a.val();
    AxisSplit sp = split_at(av.shape(), axis);
    Shape out_shape;
    for (int i = 0; i < av.rank(); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(av.dim(i));
        }
    }
    Tensor out(out_shape);
    for (int64_t o = 0; o < sp.outer; ++o) {
        double* dst = out.data() + o * sp.inner;
        for (int64_t j = 0; j < sp.mid; ++j) {
            const double* src = av.data() + (o * sp.mid + j) * sp.inner;
            for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    }
    Shape in_shape = av.shape();
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, in_shape, sp](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        Tensor ga(in_shape);
        for (int64_t o = 0; o < sp.outer; ++o) {
            const double* src = g.data() + o * sp.inner;
            for (int64_t j = 0; j < sp.mid; ++j) {
                double* dst = ga.data() + (o * sp.mid + j) * sp.inner;
                std::memcpy(dst, src, static_cast<size_t>(sp.inner) * sizeof(double));
            }
        }
        t.accum_grad(aid, ga);
    });
}

Value mean_axis(Value a, int axis, bool keepdim) {
    int64_t n = a.val().dim(axis);
    return mul_scalar(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Value sum_all(Value a) {
    const Tensor& av = a.val();
    double s = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
    Shape in_shape = av.shape();
    return a.tape->emit(Tensor::scalar(s), {a.id}, [aid = a.id, in_shape](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        t.accum_grad(aid, Tensor::full(in_shape, g[0]));
    });
}

// ---------------------------------------------------------------------------
// softmax family (last axis)
// ---------------------------------------------------------------------------

Value softmax_lastdim(Value a) {
    const Tensor& av = a.val();
    if (av.rank() < 1) throw ShapeError("softmax: scalar input");
    const int64_t d = av.dim(av.rank() - 1);
    const int64_t rows = av.numel() / d;
    Tensor out = av;
    for (int64_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * d;
        double mx = row[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            row[i] = std::exp(row[i] - mx);
            sum += row[i];
        }
        for (int64_t i = 0; i < d; ++i) row[i] /= sum;
    }
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, rows, d](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        const Tensor& sy = t.val(nid);
        Tensor ga(sy.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = sy.data() + r * d;
            const double* gr = g.data() + r * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += gr[i] * y[i];
            double* dst = ga.data() + r * d;
            for (int64_t i = 0; i < d; ++i) dst[i] = y[i] * (gr[i] - dot);
        }
        t.accum_grad(aid, ga);
    });
}

Value log_softmax_lastdim(Value a) {
    const Tensor& av = a.val();
    if (av.rank() < 1) throw ShapeError("log_softmax: scalar input");
    const int64_t d = av.dim(av.rank() - 1);
    const int64_t rows = av.numel() / d;
    Tensor out = av;
    for (int64_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * d;
        double mx = row[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < d; ++i) sum += std::exp(row[i] - mx);
        const double lse = mx + std::log(sum);
        for (int64_t i = 0; i < d; ++i) row[i] -= lse;
    }
    return a.tape->emit(std::move(out), {a.id}, [aid = a.id, rows, d](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        const Tensor& sy = t.val(nid);
        Tensor ga(sy.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = sy.data() + r * d;
            const double* gr = g.data() + r * d;
            double gsum = 0.0;
            for (int64_t i = 0; i < d; ++i) gsum += gr[i];
            double* dst = ga.data() + r * d;
            for (int64_t i = 0; i < d; ++i) dst[i] = gr[i] - std::exp(y[i]) * gsum;
        }
        t.accum_grad(aid, ga);
    });
}

// ---------------------------------------------------------------------------
// gather / conv
// ---------------------------------------------------------------------------

Value gather_rows(Value table, const std::vector<int64_t>& ids, int64_t batch, int64_t len) {
    const Tensor& tb = table.val();
    if (tb.rank() != 2) throw ShapeError("gather_rows: table must be rank-2, got " + shape_str(tb.shape()));
    if (static_cast<int64_t>(ids.size()) != batch * len) {
        throw ShapeError("gather_rows: got " + std::to_string(ids.size()) + " ids for shape [" + std::to_string(batch) +
                         "," + std::to_string(len) + "]");
    }
    const int64_t v = tb.dim(0), d = tb.dim(1);
    for (int64_t id : ids) {
        if (id < 0 || id >= v) {
            throw std::out_of_range("gather_rows: token id " + std::to_string(id) + " out of range [0," +
                                    std::to_string(v) + ")");
        }
    }
    Tensor out({batch, len, d});
    for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.data() + static_cast<int64_t>(i) * d, tb.data() + ids[i] * d,
                    static_cast<size_t>(d) * sizeof(double));
    }
    Shape tshape = tb.shape();
    return table.tape->emit(std::move(out), {table.id}, [tid = table.id, ids, tshape, d](Tape& t, int nid) {
        const Tensor& g = t.grad_ref(nid);
        Tensor gt(tshape);
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = gt.data() + ids[i] * d;
            const double* src = g.data() + static_cast<int64_t>(i) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        t.accum_grad(tid, gt);
    });
}

Value conv1d_causal(Value x, Value w, Value bias) {
    check_same_tape("conv1d_causal", x, w);
    check_same_tape("conv1d_causal", x, bias);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const Tensor& bv = bias.val();
    if (xv.rank() != 3) throw ShapeError("conv1d_causal: input must be [batch,channels,time], got " + shape_str(xv.shape()));
    if (wv.rank() != 2 || wv.dim(0) != xv.dim(1)) {
        throw ShapeError("conv1d_causal: filters " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    }
    if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
        throw ShapeError("conv1d_causal: bias " + shape_str(bv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    }
    const int64_t B = xv.dim(0), C = xv.dim(1), T = xv.dim(2), K = wv.dim(1);
    Tensor out({B, C, T});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const double* xi = xv.data() + (b * C + c) * T;
            const double* wc = wv.data() + c * K;
            double* oo = out.data() + (b * C + c) * T;
            for (int64_t t = 0; t < T; ++t) {
                double acc = bv[c];
                for (int64_t k = 0; k < K; ++k) {
                    const int64_t s = t - (K - 1) + k;
                    if (s >= 0) acc += wc[k] * xi[s];
                }
                oo[t] = acc;
            }
        }
    }
    return x.tape->emit(std::move(out), {x.id, w.id, bias.id},
                        [xid = x.id, wid = w.id, bid = bias.id, B, C, T, K](Tape& t, int nid) {
                            const Tensor& sx = t.val(xid);
                            const Tensor& sw = t.val(wid);
                            const Tensor& g = t.grad_ref(nid);
                            Tensor gx({B, C, T});
                            Tensor gw({C, K});
                            Tensor gb({C});
                            for (int64_t b = 0; b < B; ++b) {
                                for (int64_t c = 0; c < C; ++c) {
                                    const double* xi = sx.data() + (b * C + c) * T;
                                    const double* wc = sw.data() + c * K;
                                    const double* gr = g.data() + (b * C + c) * T;
                                    double* gxr = gx.data() + (b * C + c) * T;
                                    double* gwr = gw.data() + c * K;
                                    for (int64_t tt = 0; tt < T; ++tt) {
                                        const double gv = gr[tt];
                                        gb[c] += gv;
                                        for (int64_t k = 0; k < K; ++k) {
                                            const int64_t s = tt - (K - 1) + k;
                                            if (s >= 0) {
                                                gxr[s] += gv * wc[k];
                                                gwr[k] += gv * xi[s];
                                            }
                                        }
                                    }
                                }
                            }
                            t.accum_grad(xid, gx);
                            t.accum_grad(wid, gw);
                            t.accum_grad(bid, gb);
                        });
}

}  // namespace ssmc
