#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssmc/tensor.hpp"

namespace ssmc {

class Tape;

// Lightweight handle to a node on a Tape. Nodes are immutable once recorded.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
};

// Reverse-mode differentiation record. Nodes are appended in forward order and
// backward traverses in exact reverse, so append order doubles as the
// topological order. A Tape is single-owner: never share one across threads.
class Tape {
public:
    using BackFn = std::function<void(Tape&, int node_id)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    Value leaf(Tensor value, const std::string& name = {});
    Value constant(Tensor value) { return leaf(std::move(value)); }

    // Records a node. `back` accumulates into the grads of `inputs` and is
    // dropped when gradients are disabled.
    Value emit(Tensor value, std::vector<int> inputs, BackFn back);

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& val(Value v) const { return val(v.id); }

    // Gradient of the last backward() w.r.t. node `id`; zeros if untouched.
    Tensor grad(int id) const;
    Tensor grad(Value v) const { return grad(v.id); }
    const Tensor& grad_ref(int id);  // grows storage to node shape on demand

    void accum_grad(int id, const Tensor& g);

    // Runs reverse accumulation from a scalar loss node.
    void backward(Value loss);
    bool backward_done() const { return backward_done_; }

    // Node naming (used for hook sites and parameter leaves).
    void name_node(Value v, const std::string& name);
    bool has_name(const std::string& name) const { return names_.count(name) > 0; }
    Value named(const std::string& name);
    const std::map<std::string, int>& names() const { return names_; }

    // Captured-gradient handle per the backward-hook protocol: register after
    // the forward pass (the node must exist), read after backward().
    struct BackwardHook {
        Tape* tape = nullptr;
        int node = -1;
        Tensor grad() const;
    };
    BackwardHook register_backward_hook(const std::string& node_name);

private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackFn back;
    };

    bool grad_enabled_;
    bool backward_done_ = false;
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::map<std::string, int> names_;
};

// ---------------------------------------------------------------------------
// Primitive ops. All validate shapes before executing and record on the tape.
// No implicit broadcasting: use reshape/expand to line shapes up explicitly.
// ---------------------------------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value add_scalar(Value a, double c);
Value mul_scalar(Value a, double c);
Value neg(Value a);

Value exp(Value a);
Value log(Value a);
Value sqrt(Value a);
Value sigmoid(Value a);
Value silu(Value a);
Value softplus(Value a);

Value matmul(Value a, Value b);  // [m,k] x [k,n] -> [m,n]
Value transpose2d(Value a);

Value reshape(Value a, Shape shape);
Value permute(Value a, const std::vector<int>& dims);
Value expand(Value a, int axis, int64_t n);  // axis must have extent 1
Value slice(Value a, int axis, int64_t start, int64_t end);
Value concat(const std::vector<Value>& vs, int axis);
Value clone(Value a);  // identity node; gives a hook site its own gradient slot

Value sum_axis(Value a, int axis, bool keepdim = false);
Value mean_axis(Value a, int axis, bool keepdim = false);
Value sum_all(Value a);

Value softmax_lastdim(Value a);
Value log_softmax_lastdim(Value a);

// Embedding lookup: rows of `table` ([V,D]) selected by token ids ([B,L]).
Value gather_rows(Value table, const std::vector<int64_t>& ids, int64_t batch, int64_t len);

// Depthwise causal conv over the last axis of x ([B,C,T]) with per-channel
// filters w ([C,K]) and bias ([C]); input is zero-padded on the left by K-1 so
// output position t sees inputs t-K+1..t only.
Value conv1d_causal(Value x, Value w, Value bias);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator-(Value a) { return neg(a); }

}  // namespace ssmc
