#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "natimm/common.hpp"

namespace natimm {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

class Tape;

// Dense row-major float32 tensor with reverse-mode autodiff.
//
// Determinism contract: every reduction (matmul inner products, softmax sums,
// loss sums, norm statistics) accumulates in double, sequentially in ascending
// index order. Two runs of the same binary with identical inputs produce
// bit-identical values and gradients.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    // Normal init, mean 0 / given std, drawn in row-major element order.
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return st_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int64_t dim(int i) const;
    int64_t numel() const;

    std::span<float> data();
    std::span<const float> data() const;

    bool requires_grad() const;
    // Gradient buffer, lazily allocated (zero-filled) on first access.
    std::span<float> grad();
    // Empty span when no gradient has been allocated yet.
    std::span<const float> grad_if_any() const;
    bool has_grad() const;
    void zero_grad();

    // Scalar tensors only.
    float item() const;

    // Identity of the underlying storage (used for leaf bookkeeping).
    const void* id() const { return st_.get(); }

    friend class Tape;

private:
    struct Storage {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;  // empty until first use
        bool requires_grad = false;
        bool is_leaf = true;  // false once produced by a recorded op
    };
    std::shared_ptr<Storage> st_;
    explicit Tensor(std::shared_ptr<Storage> st) : st_(std::move(st)) {}
};

// Ordered record of executed operations for reverse-mode differentiation.
//
// Ops execute eagerly; recording order is therefore a topological order, and
// backward() walks it strictly in reverse. Gradients of recorded (non-leaf)
// outputs are reset at the start of each backward pass, so calling backward
// repeatedly without zero_grad accumulates one full gradient per call into the
// leaves (documented behavior; callers must zero leaf grads between optimizer
// steps).
class Tape {
public:
    struct Node {
        std::function<void()> backward;
        std::vector<Tensor> outputs;
    };

    void record(std::function<void()> backward, std::vector<Tensor> outputs);
    void backward(const Tensor& loss);
    void clear();
    size_t num_nodes() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

// ---- differentiable ops -----------------------------------------------------
// All ops take the tape first; pass nullptr for inference (no recording, output
// does not require grad). Inputs are never mutated.

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tape, const Tensor& a);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
// y = a * c
Tensor scale(Tape* tape, const Tensor& a, double c);
// y = a + c
Tensor add_scalar(Tape* tape, const Tensor& a, double c);
// Broadcast-add a length-n row vector to every row of a [m x n] matrix.
Tensor add_rowvec(Tape* tape, const Tensor& a, const Tensor& bias);
Tensor gelu(Tape* tape, const Tensor& a);
Tensor softplus(Tape* tape, const Tensor& a);
// Per-row RMS normalization followed by elementwise gain: y = x / rms(x) * g.
Tensor rmsnorm(Tape* tape, const Tensor& a, const Tensor& gain, double eps = 1e-5);
// Row-wise softmax of (a + mask); mask entries of -inf knock positions out
// exactly (their probability underflows to 0). The mask is a constant and is
// never differentiated.
Tensor softmax_rows(Tape* tape, const Tensor& a, const Tensor* additive_mask = nullptr);
Tensor sum(Tape* tape, const Tensor& a);
// rows of table selected by ids; gradient scatters back by ascending row order.
Tensor embedding_gather(Tape* tape, const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(Tape* tape, const Tensor& a, int64_t r0, int64_t r1);
Tensor slice_cols(Tape* tape, const Tensor& a, int64_t c0, int64_t c1);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);
Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts);
// base with rows [at, at+rows(ins)) replaced by ins; the replaced rows of base
// receive zero gradient.
Tensor splice_rows(Tape* tape, const Tensor& base, int64_t at, const Tensor& ins);

// Space-to-channel rearrangement on a [H*W x C] grid (row-major over H then W):
// each 2x2 spatial block is concatenated into channels in row-major block order
// (top-left, top-right, bottom-left, bottom-right), yielding [(H/2)*(W/2) x 4C].
Tensor pixel_unshuffle(Tape* tape, const Tensor& grid, int64_t h, int64_t w);
// Exact inverse of pixel_unshuffle.
Tensor pixel_unshuffle_inverse(Tape* tape, const Tensor& grid, int64_t h_half, int64_t w_half);

// Rotate adjacent feature pairs of every head by per-position angles.
// x is [T x d] with d = n_heads * head_dim; angles is [T x head_dim/2],
// flattened row-major, shared across heads. Differentiable in x only.
Tensor rotary_apply(Tape* tape, const Tensor& x, const std::vector<float>& angles, int64_t head_dim);

// Weighted token-level cross entropy: sum_t weights[t] * (-log softmax(logits[t])[targets[t]]).
// Numerically stable via per-row max subtraction; rows with weight 0 contribute
// nothing and receive exactly zero gradient. Normalization (if any) is the
// caller's responsibility.
Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<float>& weights);

// ---- optimizer ----------------------------------------------------------------

enum class OptKind { adam, sgd };

struct OptimizerConfig {
    OptKind kind = OptKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

// Per-parameter moment buffers plus step counter. Moment tensors shape-match
// their parameters and are checkpointable alongside them.
struct OptimizerState {
    OptimizerConfig cfg;
    int64_t step = 0;
    std::vector<Tensor> m;  // first moments (adam only)
    std::vector<Tensor> v;  // second moments (adam only)
};

OptimizerState make_optimizer(const OptimizerConfig& cfg, const std::vector<Tensor>& params);

// Applies one update in place. Returns false (and changes nothing, not even the
// step counter) when any gradient contains NaN/Inf; callers log and move on.
bool optimizer_step(OptimizerState& state, const std::vector<Tensor>& params);

void zero_grads(const std::vector<Tensor>& params);

}  // namespace natimm
