#include "natimm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

namespace natimm {

namespace {

// Sequential row hook. A two-thread split was tried and measured slower on the
// target box (SMT siblings contending for the FPU), so kernels stay
// single-threaded; bit-reproducibility comes for free.
template <typename Body>
inline void parallel_rows(int64_t rows, int64_t, Body&& body) {
    body(0, rows);
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw ContractError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto st = std::make_shared<Storage>();
    st->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    st->shape = std::move(shape);
    st->requires_grad = requires_grad;
    return Tensor(std::move(st));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.st_->data.begin(), t.st_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ContractError("from_data: " + std::to_string(data.size()) + " elements do not fill shape " +
                            shape_str(shape));
    auto st = std::make_shared<Storage>();
    st->shape = std::move(shape);
    st->data = std::move(data);
    st->requires_grad = requires_grad;
    return Tensor(std::move(st));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.st_->data) x = static_cast<float>(rng.normal() * stddev);
    return t;
}

const Shape& Tensor::shape() const {
    if (!st_) throw ContractError("shape() on undefined tensor");
    return st_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) throw ContractError("dim index out of range");
    return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(st_->data.size()); }

std::span<float> Tensor::data() { return {st_->data.data(), st_->data.size()}; }
std::span<const float> Tensor::data() const { return {st_->data.data(), st_->data.size()}; }

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

std::span<float> Tensor::grad() {
    if (!st_) throw ContractError("grad() on undefined tensor");
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0f);
    return {st_->grad.data(), st_->grad.size()};
}

std::span<const float> Tensor::grad_if_any() const {
    if (!st_ || st_->grad.empty()) return {};
    return {st_->grad.data(), st_->grad.size()};
}

bool Tensor::has_grad() const { return st_ && !st_->grad.empty(); }

void Tensor::zero_grad() {
    if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (!st_ || st_->data.size() != 1) throw ContractError("item() requires a scalar tensor");
    return st_->data[0];
}

// ---- Tape ---------------------------------------------------------------------

void Tape::record(std::function<void()> backward, std::vector<Tensor> outputs) {
    for (auto& out : outputs)
        if (out.st_) out.st_->is_leaf = false;
    nodes_.push_back(Node{std::move(backward), std::move(outputs)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward: loss must be a defined scalar tensor");
    // Intermediate gradients are scratch space for this pass; only leaf
    // gradients persist (and accumulate across repeated backward calls).
    for (auto& node : nodes_)
        for (auto& out : node.outputs) out.zero_grad();
    const_cast<Tensor&>(loss).grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

void Tape::clear() { nodes_.clear(); }

// ---- op helpers ---------------------------------------------------------------

namespace {

bool want_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_output(Shape shape, bool requires_grad) { return Tensor::zeros(std::move(shape), requires_grad); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

// Output gradient span, or empty when nothing downstream touched this output.
std::span<const float> out_grad(const Tensor& t) { return t.grad_if_any(); }

}  // namespace

// ---- matmul -------------------------------------------------------------------

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ContractError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ContractError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    bool rg = want_grad(tape, {&a, &b});
    Tensor out = make_output({m, n}, rg);
    {
        const float* pa = a.data().data();
        const float* pb = b.data().data();
        float* po = out.data().data();
        parallel_rows(m, 24, [&](int64_t i0, int64_t i1) {
            std::vector<double> acc(static_cast<size_t>(n));
            for (int64_t i = i0; i < i1; ++i) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (int64_t kk = 0; kk < k; ++kk) {  // ascending k per output element
                    const double av = pa[i * k + kk];
                    const float* brow = pb + kk * n;
                    for (int64_t j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
                }
                for (int64_t j = 0; j < n; ++j) po[i * n + j] = static_cast<float>(acc[static_cast<size_t>(j)]);
            }
        });
    }
    if (rg) {
        Tensor ac = a, bc = b, oc = out;
        tape->record(
            [ac, bc, oc, m, n, k]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                if (ac.requires_grad()) {
                    // dA[i,kk] = sum_j gO[i,j] * B[kk,j], ascending j
                    auto ga = ac.grad();
                    const float* pb = bc.data().data();
                    parallel_rows(m, 24, [&](int64_t i0, int64_t i1) {
                        for (int64_t i = i0; i < i1; ++i)
                            for (int64_t kk = 0; kk < k; ++kk) {
                                double s = 0.0;
                                const float* grow = go.data() + i * n;
                                const float* brow = pb + kk * n;
                                for (int64_t j = 0; j < n; ++j)
                                    s += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
                                ga[static_cast<size_t>(i * k + kk)] += static_cast<float>(s);
                            }
                    });
                }
                if (bc.requires_grad()) {
                    // dB[kk,j] = sum_i A[i,kk] * gO[i,j], ascending i
                    auto gb = bc.grad();
                    const float* pa = ac.data().data();
                    parallel_rows(k, 24, [&](int64_t k0, int64_t k1) {
                        std::vector<double> acc(static_cast<size_t>(n));
                        for (int64_t kk = k0; kk < k1; ++kk) {
                            std::fill(acc.begin(), acc.end(), 0.0);
                            for (int64_t i = 0; i < m; ++i) {
                                const double av = pa[i * k + kk];
                                const float* grow = go.data() + i * n;
                                for (int64_t j = 0; j < n; ++j)
                                    acc[static_cast<size_t>(j)] += av * static_cast<double>(grow[j]);
                            }
                            for (int64_t j = 0; j < n; ++j)
                                gb[static_cast<size_t>(kk * n + j)] += static_cast<float>(acc[static_cast<size_t>(j)]);
                        }
                    });
                }
            },
            {out});
    }
    return out;
}

Tensor transpose(Tape* tape, const Tensor& a) {
    if (a.rank() != 2) throw ContractError("transpose: expected rank-2 tensor");
    const int64_t m = a.dim(0), n = a.dim(1);
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output({n, m}, rg);
    const float* pa = a.data().data();
    float* po = out.data().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc, m, n]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto ga = ac.grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) ga[static_cast<size_t>(i * n + j)] += go[static_cast<size_t>(j * m + i)];
            },
            {out});
    }
    return out;
}

// ---- elementwise --------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(Tape* tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    check_same_shape(a, b, name);
    bool rg = want_grad(tape, {&a, &b});
    Tensor out = make_output(a.shape(), rg);
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = fwd(pa[i], pb[i]);
    if (rg) {
        Tensor ac = a, bc = b, oc = out;
        tape->record(
            [ac, bc, oc, bwd]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto pa = ac.data();
                auto pb = bc.data();
                std::span<float> ga = ac.requires_grad() ? ac.grad() : std::span<float>{};
                std::span<float> gb = bc.requires_grad() ? bc.grad() : std::span<float>{};
                for (size_t i = 0; i < go.size(); ++i) {
                    auto [da, db] = bwd(pa[i], pb[i]);
                    if (!ga.empty()) ga[i] += static_cast<float>(static_cast<double>(go[i]) * da);
                    if (!gb.empty()) gb[i] += static_cast<float>(static_cast<double>(go[i]) * db);
                }
            },
            {out});
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape* tape, const Tensor& a, Fwd fwd, Bwd bwd) {
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output(a.shape(), rg);
    auto pa = a.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = static_cast<float>(fwd(static_cast<double>(pa[i])));
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc, bwd]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto pa = ac.data();
                auto ga = ac.grad();
                for (size_t i = 0; i < go.size(); ++i)
                    ga[i] += static_cast<float>(static_cast<double>(go[i]) * bwd(static_cast<double>(pa[i])));
            },
            {out});
    }
    return out;
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        tape, a, b, "add", [](float x, float y) { return x + y; },
        [](float, float) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        tape, a, b, "sub", [](float x, float y) { return x - y; },
        [](float, float) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        tape, a, b, "mul", [](float x, float y) { return x * y; },
        [](float x, float y) { return std::pair<double, double>{static_cast<double>(y), static_cast<double>(x)}; });
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
    return unary_elementwise(
        tape, a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor add_scalar(Tape* tape, const Tensor& a, double c) {
    return unary_elementwise(
        tape, a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_fwd(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_bwd(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double softplus_fwd(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
}  // namespace

Tensor gelu(Tape* tape, const Tensor& a) { return unary_elementwise(tape, a, gelu_fwd, gelu_bwd); }

Tensor softplus(Tape* tape, const Tensor& a) { return unary_elementwise(tape, a, softplus_fwd, sigmoid); }

Tensor add_rowvec(Tape* tape, const Tensor& a, const Tensor& bias) {
    if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1))
        throw ContractError("add_rowvec: need [m x n] and [n], got " + shape_str(a.shape()) + " and " +
                            shape_str(bias.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    bool rg = want_grad(tape, {&a, &bias});
    Tensor out = make_output(a.shape(), rg);
    auto pa = a.data();
    auto pb = bias.data();
    auto po = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) po[static_cast<size_t>(i * n + j)] = pa[static_cast<size_t>(i * n + j)] + pb[static_cast<size_t>(j)];
    if (rg) {
        Tensor ac = a, bc = bias, oc = out;
        tape->record(
            [ac, bc, oc, m, n]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                if (ac.requires_grad()) {
                    auto ga = ac.grad();
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                }
                if (bc.requires_grad()) {
                    auto gb = bc.grad();
                    for (int64_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int64_t i = 0; i < m; ++i) s += static_cast<double>(go[static_cast<size_t>(i * n + j)]);
                        gb[static_cast<size_t>(j)] += static_cast<float>(s);
                    }
                }
            },
            {out});
    }
    return out;
}

Tensor rmsnorm(Tape* tape, const Tensor& a, const Tensor& gain, double eps) {
    if (a.rank() != 2 || gain.rank() != 1 || gain.dim(0) != a.dim(1))
        throw ContractError("rmsnorm: need [m x n] and gain [n]");
    const int64_t m = a.dim(0), n = a.dim(1);
    bool rg = want_grad(tape, {&a, &gain});
    Tensor out = make_output(a.shape(), rg);
    std::vector<double> inv_rms(static_cast<size_t>(m));
    auto pa = a.data();
    auto pg = gain.data();
    auto po = out.data();
    for (int64_t i = 0; i < m; ++i) {
        double ms = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double x = pa[static_cast<size_t>(i * n + j)];
            ms += x * x;
        }
        ms /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(ms + eps);
        inv_rms[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < n; ++j)
            po[static_cast<size_t>(i * n + j)] =
                static_cast<float>(static_cast<double>(pa[static_cast<size_t>(i * n + j)]) * inv *
                                   static_cast<double>(pg[static_cast<size_t>(j)]));
    }
    if (rg) {
        Tensor ac = a, gc = gain, oc = out;
        tape->record(
            [ac, gc, oc, m, n, inv_rms = std::move(inv_rms)]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto pa = ac.data();
                auto pg = gc.data();
                for (int64_t i = 0; i < m; ++i) {
                    const double inv = inv_rms[static_cast<size_t>(i)];
                    // s = sum_j gO_j * g_j * x_j
                    double s = 0.0;
                    for (int64_t j = 0; j < n; ++j)
                        s += static_cast<double>(go[static_cast<size_t>(i * n + j)]) *
                             static_cast<double>(pg[static_cast<size_t>(j)]) *
                             static_cast<double>(pa[static_cast<size_t>(i * n + j)]);
                    if (ac.requires_grad()) {
                        auto ga = ac.grad();
                        const double inv3 = inv * inv * inv / static_cast<double>(n);
                        for (int64_t j = 0; j < n; ++j) {
                            double g = static_cast<double>(go[static_cast<size_t>(i * n + j)]) *
                                           static_cast<double>(pg[static_cast<size_t>(j)]) * inv -
                                       static_cast<double>(pa[static_cast<size_t>(i * n + j)]) * inv3 * s;
                            ga[static_cast<size_t>(i * n + j)] += static_cast<float>(g);
                        }
                    }
                    if (gc.requires_grad()) {
                        auto gg = gc.grad();
                        for (int64_t j = 0; j < n; ++j)
                            gg[static_cast<size_t>(j)] +=
                                static_cast<float>(static_cast<double>(go[static_cast<size_t>(i * n + j)]) *
                                                   static_cast<double>(pa[static_cast<size_t>(i * n + j)]) * inv);
                    }
                }
            },
            {out});
    }
    return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& a, const Tensor* additive_mask) {
    if (a.rank() != 2) throw ContractError("softmax_rows: expected rank-2 tensor");
    if (additive_mask && additive_mask->shape() != a.shape())
        throw ContractError("softmax_rows: mask shape " + shape_str(additive_mask->shape()) + " != input " +
                            shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output(a.shape(), rg);
    auto pa = a.data();
    auto po = out.data();
    std::span<const float> pm = additive_mask ? additive_mask->data() : std::span<const float>{};
    const float neg_inf = -std::numeric_limits<float>::infinity();
    parallel_rows(m, 48, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < n; ++j) {
                if (!pm.empty() && pm[static_cast<size_t>(i * n + j)] == neg_inf) continue;
                double z = pa[static_cast<size_t>(i * n + j)];
                if (!pm.empty()) z += pm[static_cast<size_t>(i * n + j)];
                if (z > mx) mx = z;
            }
            double denom = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                // fully masked positions contribute exactly zero probability
                if (!pm.empty() && pm[static_cast<size_t>(i * n + j)] == neg_inf) {
                    po[static_cast<size_t>(i * n + j)] = 0.0f;
                    continue;
                }
                double z = pa[static_cast<size_t>(i * n + j)];
                if (!pm.empty()) z += pm[static_cast<size_t>(i * n + j)];
                double e = std::exp(z - mx);
                po[static_cast<size_t>(i * n + j)] = static_cast<float>(e);
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int64_t j = 0; j < n; ++j)
                po[static_cast<size_t>(i * n + j)] =
                    static_cast<float>(static_cast<double>(po[static_cast<size_t>(i * n + j)]) * inv);
        }
    });
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc, m, n]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto ga = ac.grad();
                auto po = oc.data();
                parallel_rows(m, 48, [&](int64_t i0, int64_t i1) {
                    for (int64_t i = i0; i < i1; ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < n; ++j)
                            dot += static_cast<double>(go[static_cast<size_t>(i * n + j)]) *
                                   static_cast<double>(po[static_cast<size_t>(i * n + j)]);
                        for (int64_t j = 0; j < n; ++j) {
                            double p = po[static_cast<size_t>(i * n + j)];
                            ga[static_cast<size_t>(i * n + j)] += static_cast<float>(
                                p * (static_cast<double>(go[static_cast<size_t>(i * n + j)]) - dot));
                        }
                    }
                });
            },
            {out});
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& a) {
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output({1}, rg);
    double s = 0.0;
    for (float x : a.data()) s += static_cast<double>(x);  // ascending element order
    out.data()[0] = static_cast<float>(s);
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto ga = ac.grad();
                for (auto& g : ga) g += go[0];
            },
            {out});
    }
    return out;
}

Tensor embedding_gather(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ContractError("embedding_gather: table must be rank-2");
    const int64_t rows = table.dim(0), d = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= rows)
            throw ContractError("embedding_gather: id " + std::to_string(ids[i]) + " at position " +
                                std::to_string(i) + " outside table of " + std::to_string(rows) + " rows");
    bool rg = want_grad(tape, {&table});
    Tensor out = make_output({static_cast<int64_t>(ids.size()), d}, rg);
    auto pt = table.data();
    auto po = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(pt.data() + static_cast<size_t>(ids[i]) * d, d, po.data() + i * static_cast<size_t>(d));
    if (rg) {
        Tensor tc = table, oc = out;
        auto idc = ids;
        tape->record(
            [tc, oc, idc, d]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto gt = tc.grad();
                for (size_t i = 0; i < idc.size(); ++i) {  // ascending row order
                    float* dst = gt.data() + static_cast<size_t>(idc[i]) * d;
                    const float* src = go.data() + i * static_cast<size_t>(d);
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            },
            {out});
    }
    return out;
}

Tensor slice_rows(Tape* tape, const Tensor& a, int64_t r0, int64_t r1) {
    if (a.rank() != 2) throw ContractError("slice_rows: expected rank-2 tensor");
    const int64_t m = a.dim(0), n = a.dim(1);
    if (r0 < 0 || r1 > m || r0 > r1) throw ContractError("slice_rows: bad range");
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output({r1 - r0, n}, rg);
    std::copy_n(a.data().data() + static_cast<size_t>(r0 * n), static_cast<size_t>((r1 - r0) * n), out.data().data());
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc, r0, n]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto ga = ac.grad();
                for (size_t i = 0; i < go.size(); ++i) ga[static_cast<size_t>(r0 * n) + i] += go[i];
            },
            {out});
    }
    return out;
}

Tensor slice_cols(Tape* tape, const Tensor& a, int64_t c0, int64_t c1) {
    if (a.rank() != 2) throw ContractError("slice_cols: expected rank-2 tensor");
    const int64_t m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 > n || c0 > c1) throw ContractError("slice_cols: bad range");
    const int64_t w = c1 - c0;
    bool rg = want_grad(tape, {&a});
    Tensor out = make_output({m, w}, rg);
    auto pa = a.data();
    auto po = out.data();
    for (int64_t i = 0; i < m; ++i)
        std::copy_n(pa.data() + static_cast<size_t>(i * n + c0), static_cast<size_t>(w),
                    po.data() + static_cast<size_t>(i * w));
    if (rg) {
        Tensor ac = a, oc = out;
        tape->record(
            [ac, oc, m, n, c0, w]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto ga = ac.grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        ga[static_cast<size_t>(i * n + c0 + j)] += go[static_cast<size_t>(i * w + j)];
            },
            {out});
    }
    return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const int64_t m = parts[0].dim(0);
    int64_t n = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) throw ContractError("concat_cols: row counts disagree");
        n += p.dim(1);
        rg = rg || (tape && p.requires_grad());
    }
    Tensor out = make_output({m, n}, rg);
    auto po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.dim(1);
        auto pp = p.data();
        for (int64_t i = 0; i < m; ++i)
            std::copy_n(pp.data() + static_cast<size_t>(i * w), static_cast<size_t>(w),
                        po.data() + static_cast<size_t>(i * n + off));
        off += w;
    }
    if (rg) {
        auto pc = parts;
        Tensor oc = out;
        tape->record(
            [pc, oc, m, n]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                int64_t off = 0;
                for (auto& p : pc) {
                    const int64_t w = p.dim(1);
                    if (p.requires_grad()) {
                        auto gp = p.grad();
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t j = 0; j < w; ++j)
                                gp[static_cast<size_t>(i * w + j)] += go[static_cast<size_t>(i * n + off + j)];
                    }
                    off += w;
                }
            },
            {out});
    }
    return out;
}

Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    const int64_t n = parts[0].dim(1);
    int64_t m = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != n) throw ContractError("concat_rows: column counts disagree");
        m += p.dim(0);
        rg = rg || (tape && p.requires_grad());
    }
    Tensor out = make_output({m, n}, rg);
    auto po = out.data();
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data().data(), p.data().size(), po.data() + off);
        off += p.data().size();
    }
    if (rg) {
        auto pc = parts;
        Tensor oc = out;
        tape->record(
            [pc, oc]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                size_t off = 0;
                for (auto& p : pc) {
                    const size_t sz = p.data().size();
                    if (p.requires_grad()) {
                        auto gp = p.grad();
                        for (size_t i = 0; i < sz; ++i) gp[i] += go[off + i];
                    }
                    off += sz;
                }
            },
            {out});
    }
    return out;
}

Tensor splice_rows(Tape* tape, const Tensor& base, int64_t at, const Tensor& ins) {
    if (base.rank() != 2 || ins.rank() != 2 || base.dim(1) != ins.dim(1))
        throw ContractError("splice_rows: column widths disagree");
    const int64_t m = base.dim(0), n = base.dim(1), r = ins.dim(0);
    if (at < 0 || at + r > m) throw ContractError("splice_rows: insert range out of bounds");
    bool rg = want_grad(tape, {&base, &ins});
    Tensor out = make_output({m, n}, rg);
    std::copy_n(base.data().data(), base.data().size(), out.data().data());
    std::copy_n(ins.data().data(), ins.data().size(), out.data().data() + static_cast<size_t>(at * n));
    if (rg) {
        Tensor bc = base, ic = ins, oc = out;
        tape->record(
            [bc, ic, oc, at, n, r]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                if (bc.requires_grad()) {
                    auto gb = bc.grad();
                    const size_t lo = static_cast<size_t>(at * n), hi = static_cast<size_t>((at + r) * n);
                    for (size_t i = 0; i < go.size(); ++i)
                        if (i < lo || i >= hi) gb[i] += go[i];  // replaced rows get zero
                }
                if (ic.requires_grad()) {
                    auto gi = ic.grad();
                    for (size_t i = 0; i < gi.size(); ++i) gi[i] += go[static_cast<size_t>(at * n) + i];
                }
            },
            {out});
    }
    return out;
}

// ---- pixel unshuffle ------------------------------------------------------------

namespace {

// Row index maps for the 2x2 space-to-channel rearrangement.
struct UnshuffleMap {
    int64_t h2, w2, c, c4;
    // output row (i,j) channel block k (0..3) comes from input row src(i,j,k)
    int64_t src(int64_t i, int64_t j, int64_t k, int64_t w) const {
        const int64_t di = k / 2, dj = k % 2;  // row-major block order
        return (2 * i + di) * w + (2 * j + dj);
    }
};

}  // namespace

Tensor pixel_unshuffle(Tape* tape, const Tensor& grid, int64_t h, int64_t w) {
    if (grid.rank() != 2 || grid.dim(0) != h * w)
        throw ContractError("pixel_unshuffle: grid rows " + std::to_string(grid.dim(0)) + " != h*w = " +
                            std::to_string(h * w));
    if (h % 2 != 0 || w % 2 != 0)
        throw ContractError("pixel_unshuffle: spatial dims must be even, got " + std::to_string(h) + "x" +
                            std::to_string(w));
    const int64_t c = grid.dim(1);
    UnshuffleMap map{h / 2, w / 2, c, 4 * c};
    bool rg = want_grad(tape, {&grid});
    Tensor out = make_output({map.h2 * map.w2, map.c4}, rg);
    auto pg = grid.data();
    auto po = out.data();
    for (int64_t i = 0; i < map.h2; ++i)
        for (int64_t j = 0; j < map.w2; ++j) {
            float* dst = po.data() + static_cast<size_t>((i * map.w2 + j) * map.c4);
            for (int64_t k = 0; k < 4; ++k)
                std::copy_n(pg.data() + static_cast<size_t>(map.src(i, j, k, w) * c), static_cast<size_t>(c),
                            dst + static_cast<size_t>(k * c));
        }
    if (rg) {
        Tensor gc = grid, oc = out;
        tape->record(
            [gc, oc, map, w]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto gg = gc.grad();
                for (int64_t i = 0; i < map.h2; ++i)
                    for (int64_t j = 0; j < map.w2; ++j) {
                        const float* src = go.data() + static_cast<size_t>((i * map.w2 + j) * map.c4);
                        for (int64_t k = 0; k < 4; ++k) {
                            float* dst = gg.data() + static_cast<size_t>(map.src(i, j, k, w) * map.c);
                            for (int64_t t = 0; t < map.c; ++t) dst[t] += src[k * map.c + t];
                        }
                    }
            },
            {out});
    }
    return out;
}

Tensor pixel_unshuffle_inverse(Tape* tape, const Tensor& grid, int64_t h_half, int64_t w_half) {
    if (grid.rank() != 2 || grid.dim(0) != h_half * w_half || grid.dim(1) % 4 != 0)
        throw ContractError("pixel_unshuffle_inverse: bad input shape " + shape_str(grid.shape()));
    const int64_t c = grid.dim(1) / 4;
    const int64_t h = 2 * h_half, w = 2 * w_half;
    UnshuffleMap map{h_half, w_half, c, 4 * c};
    bool rg = want_grad(tape, {&grid});
    Tensor out = make_output({h * w, c}, rg);
    auto pg = grid.data();
    auto po = out.data();
    for (int64_t i = 0; i < h_half; ++i)
        for (int64_t j = 0; j < w_half; ++j) {
            const float* src = pg.data() + static_cast<size_t>((i * w_half + j) * map.c4);
            for (int64_t k = 0; k < 4; ++k)
                std::copy_n(src + static_cast<size_t>(k * c), static_cast<size_t>(c),
                            po.data() + static_cast<size_t>(map.src(i, j, k, w) * c));
        }
    if (rg) {
        Tensor gc = grid, oc = out;
        tape->record(
            [gc, oc, map, w]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto gg = gc.grad();
                for (int64_t i = 0; i < map.h2; ++i)
                    for (int64_t j = 0; j < map.w2; ++j) {
                        float* dst = gg.data() + static_cast<size_t>((i * map.w2 + j) * map.c4);
                        for (int64_t k = 0; k < 4; ++k) {
                            const float* src = go.data() + static_cast<size_t>(map.src(i, j, k, w) * map.c);
                            for (int64_t t = 0; t < map.c; ++t) dst[k * map.c + t] += src[t];
                        }
                    }
            },
            {out});
    }
    return out;
}

// ---- rotary ----------------------------------------------------------------------

Tensor rotary_apply(Tape* tape, const Tensor& x, const std::vector<float>& angles, int64_t head_dim) {
    if (x.rank() != 2) throw ContractError("rotary_apply: expected rank-2 tensor");
    const int64_t t_len = x.dim(0), d = x.dim(1);
    if (head_dim <= 0 || head_dim % 2 != 0) throw ConfigError("rotary_apply: head_dim must be even and positive");
    if (d % head_dim != 0) throw ContractError("rotary_apply: feature dim not a multiple of head_dim");
    const int64_t half = head_dim / 2;
    if (static_cast<int64_t>(angles.size()) != t_len * half)
        throw ContractError("rotary_apply: expected " + std::to_string(t_len * half) + " angles, got " +
                            std::to_string(angles.size()));
    const int64_t n_heads = d / head_dim;
    std::vector<float> cs(angles.size()), sn(angles.size());
    for (size_t i = 0; i < angles.size(); ++i) {
        cs[i] = static_cast<float>(std::cos(static_cast<double>(angles[i])));
        sn[i] = static_cast<float>(std::sin(static_cast<double>(angles[i])));
    }
    bool rg = want_grad(tape, {&x});
    Tensor out = make_output(x.shape(), rg);
    auto px = x.data();
    auto po = out.data();
    for (int64_t t = 0; t < t_len; ++t)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t j = 0; j < half; ++j) {
                const size_t base = static_cast<size_t>(t * d + h * head_dim + 2 * j);
                const double c = cs[static_cast<size_t>(t * half + j)];
                const double s = sn[static_cast<size_t>(t * half + j)];
                const double a = px[base], b = px[base + 1];
                po[base] = static_cast<float>(a * c - b * s);
                po[base + 1] = static_cast<float>(a * s + b * c);
            }
    if (rg) {
        Tensor xc = x, oc = out;
        tape->record(
            [xc, oc, cs = std::move(cs), sn = std::move(sn), t_len, d, n_heads, head_dim, half]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                auto gx = xc.grad();
                for (int64_t t = 0; t < t_len; ++t)
                    for (int64_t h = 0; h < n_heads; ++h)
                        for (int64_t j = 0; j < half; ++j) {
                            const size_t base = static_cast<size_t>(t * d + h * head_dim + 2 * j);
                            const double c = cs[static_cast<size_t>(t * half + j)];
                            const double s = sn[static_cast<size_t>(t * half + j)];
                            const double g0 = go[base], g1 = go[base + 1];
                            gx[base] += static_cast<float>(g0 * c + g1 * s);
                            gx[base + 1] += static_cast<float>(-g0 * s + g1 * c);
                        }
            },
            {out});
    }
    return out;
}

// ---- cross entropy -----------------------------------------------------------------

Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<float>& weights) {
    if (logits.rank() != 2) throw ContractError("softmax_cross_entropy: logits must be rank-2");
    const int64_t t_len = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t_len || targets.size() != weights.size())
        throw ContractError("softmax_cross_entropy: row count mismatch between logits, targets, weights");
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= v)
            throw ContractError("softmax_cross_entropy: target " + std::to_string(targets[i]) + " at row " +
                                std::to_string(i) + " outside vocabulary of size " + std::to_string(v));
        if (!(weights[i] >= 0.0f))
            throw ContractError("softmax_cross_entropy: negative or NaN weight at row " + std::to_string(i));
    }
    bool rg = want_grad(tape, {&logits});
    Tensor out = make_output({1}, rg);
    auto pl = logits.data();
    // For gradient reuse, cache per-row logZ.
    std::vector<double> log_z(static_cast<size_t>(t_len));
    double loss = 0.0;  // accumulated in row order
    for (int64_t i = 0; i < t_len; ++i) {
        if (weights[static_cast<size_t>(i)] == 0.0f) continue;
        const float* row = pl.data() + static_cast<size_t>(i * v);
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double lz = mx + std::log(denom);
        log_z[static_cast<size_t>(i)] = lz;
        loss += static_cast<double>(weights[static_cast<size_t>(i)]) *
                (lz - static_cast<double>(row[targets[static_cast<size_t>(i)]]));
    }
    out.data()[0] = static_cast<float>(loss);
    if (rg) {
        Tensor lc = logits, oc = out;
        auto tg = targets;
        auto wt = weights;
        tape->record(
            [lc, oc, tg, wt, log_z = std::move(log_z), t_len, v]() mutable {
                auto go = out_grad(oc);
                if (go.empty()) return;
                const double g = go[0];
                auto gl = lc.grad();
                auto pl = lc.data();
                for (int64_t i = 0; i < t_len; ++i) {
                    const double w = wt[static_cast<size_t>(i)];
                    if (w == 0.0) continue;  // weight-0 rows: exactly zero gradient
                    const float* row = pl.data() + static_cast<size_t>(i * v);
                    float* grow = gl.data() + static_cast<size_t>(i * v);
                    const double lz = log_z[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < v; ++j) {
                        double p = std::exp(static_cast<double>(row[j]) - lz);
                        double d = g * w * (p - (j == tg[static_cast<size_t>(i)] ? 1.0 : 0.0));
                        grow[j] += static_cast<float>(d);
                    }
                }
            },
            {out});
    }
    return out;
}

// ---- optimizer -----------------------------------------------------------------------

OptimizerState make_optimizer(const OptimizerConfig& cfg, const std::vector<Tensor>& params) {
    OptimizerState st;
    st.cfg = cfg;
    if (cfg.kind == OptKind::adam) {
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.push_back(Tensor::zeros(p.shape()));
            st.v.push_back(Tensor::zeros(p.shape()));
        }
    }
    return st;
}

bool optimizer_step(OptimizerState& state, const std::vector<Tensor>& params) {
    if (state.cfg.kind == OptKind::adam &&
        (state.m.size() != params.size() || state.v.size() != params.size()))
        throw ContractError("optimizer_step: moment buffers do not match parameter list");
    // NaN/Inf guard: inspect every gradient before mutating anything.
    for (const auto& p : params) {
        for (float g : p.grad_if_any())
            if (!std::isfinite(g)) return false;
    }
    const auto& cfg = state.cfg;
    const int64_t t = state.step + 1;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto pd = p.data();
        auto gd = p.grad_if_any();
        if (gd.empty()) continue;  // parameter untouched by this loss
        if (p.shape() != (cfg.kind == OptKind::adam ? state.m[pi].shape() : p.shape()))
            throw ContractError("optimizer_step: moment shape mismatch for parameter " + std::to_string(pi));
        if (cfg.kind == OptKind::sgd) {
            for (size_t i = 0; i < pd.size(); ++i) {
                double x = pd[i];
                if (cfg.weight_decay != 0.0) x -= cfg.lr * cfg.weight_decay * x;
                pd[i] = static_cast<float>(x - cfg.lr * static_cast<double>(gd[i]));
            }
        } else {
            auto md = state.m[pi].data();
            auto vd = state.v[pi].data();
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
            for (size_t i = 0; i < pd.size(); ++i) {
                const double g = gd[i];
                const double m = cfg.beta1 * static_cast<double>(md[i]) + (1.0 - cfg.beta1) * g;
                const double v = cfg.beta2 * static_cast<double>(vd[i]) + (1.0 - cfg.beta2) * g * g;
                md[i] = static_cast<float>(m);
                vd[i] = static_cast<float>(v);
                double x = pd[i];
                if (cfg.weight_decay != 0.0) x -= cfg.lr * cfg.weight_decay * x;
                x -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
                pd[i] = static_cast<float>(x);
            }
        }
    }
    state.step = t;
    return true;
}

void zero_grads(const std::vector<Tensor>& params) {
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

}  // namespace natimm
