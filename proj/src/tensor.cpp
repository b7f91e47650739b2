#include "unet3p/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace unet3p {

namespace {

#ifdef __GLIBC__
// Activation tensors run tens of MB; left at the default threshold glibc
// serves them with mmap and every graph teardown becomes an munmap storm.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    return true;
}();
#endif

#ifdef NDEBUG
bool g_finite_check = false;
#else
bool g_finite_check = true;
#endif

bool g_grad_enabled = true;

constexpr double kTwoPi = 6.283185307179586476925286766559;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

}  // namespace

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = kTwoPi * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void set_finite_check(bool enabled) { g_finite_check = enabled; }
bool finite_check_enabled() { return g_finite_check; }

void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }
bool grad_enabled() { return g_grad_enabled; }

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

static void validate_shape(const std::vector<std::int64_t>& shape) {
    for (std::int64_t d : shape) {
        if (d < 1) throw ShapeError("invalid shape " + shape_str(shape) + ": dimensions must be >= 1");
    }
}

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

TensorPtr Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    validate_shape(shape);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return std::make_shared<Tensor>(std::move(shape), std::move(d), requires_grad);
}

TensorPtr Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    validate_shape(shape);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), value);
    return std::make_shared<Tensor>(std::move(shape), std::move(d), requires_grad);
}

TensorPtr Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                            bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

TensorPtr Tensor::uniform(std::vector<std::int64_t> shape, std::uint64_t seed,
                          double lo, double hi, bool requires_grad) {
    Rng rng(seed);
    return uniform_rng(std::move(shape), rng, lo, hi, requires_grad);
}

TensorPtr Tensor::uniform_rng(std::vector<std::int64_t> shape, Rng& rng,
                              double lo, double hi, bool requires_grad) {
    validate_shape(shape);
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : d) v = rng.uniform(lo, hi);
    return std::make_shared<Tensor>(std::move(shape), std::move(d), requires_grad);
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value() requires a scalar tensor, got " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

void Tensor::accumulate_grad(const double* g, std::int64_t n) {
    if (n != numel()) throw ShapeError("gradient length mismatch");
    ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
}

TensorPtr make_op_output(std::vector<std::int64_t> shape, std::vector<TensorPtr> inputs) {
    bool rg = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) rg = rg || t->requires_grad;
    }
    auto out = Tensor::zeros(std::move(shape), rg);
    if (rg) out->parents = std::move(inputs);
    return out;
}

void guard_finite(const Tensor& t, const char* op) {
    if (!g_finite_check) return;
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                               shape_str(t.shape));
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

// b must match a's shape or be a size-1 tensor
void check_binary_shapes(const char* op, const Tensor& a, const Tensor& b) {
    if (b.numel() == 1) return;
    if (a.shape != b.shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
    }
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_binary_shapes("add", *a, *b);
    auto out = make_op_output(a->shape, {a, b});
    const std::int64_t n = a->numel();
    const bool bcast = b->numel() == 1;
    for (std::int64_t i = 0; i < n; ++i)
        out->data[i] = a->data[i] + (bcast ? b->data[0] : b->data[i]);
    guard_finite(*out, "add");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a, pb = b;
        out->backprop = [self, pa, pb, bcast, n]() {
            if (pa->requires_grad) pa->accumulate_grad(self->grad.data(), n);
            if (pb->requires_grad) {
                if (bcast) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) s += self->grad[i];
                    pb->accumulate_grad(&s, 1);
                } else {
                    pb->accumulate_grad(self->grad.data(), n);
                }
            }
        };
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_binary_shapes("sub", *a, *b);
    auto out = make_op_output(a->shape, {a, b});
    const std::int64_t n = a->numel();
    const bool bcast = b->numel() == 1;
    for (std::int64_t i = 0; i < n; ++i)
        out->data[i] = a->data[i] - (bcast ? b->data[0] : b->data[i]);
    guard_finite(*out, "sub");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a, pb = b;
        out->backprop = [self, pa, pb, bcast, n]() {
            if (pa->requires_grad) pa->accumulate_grad(self->grad.data(), n);
            if (pb->requires_grad) {
                if (bcast) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) s += self->grad[i];
                    s = -s;
                    pb->accumulate_grad(&s, 1);
                } else {
                    pb->ensure_grad();
                    for (std::int64_t i = 0; i < n; ++i) pb->grad[i] -= self->grad[i];
                }
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_binary_shapes("mul", *a, *b);
    auto out = make_op_output(a->shape, {a, b});
    const std::int64_t n = a->numel();
    const bool bcast = b->numel() == 1;
    for (std::int64_t i = 0; i < n; ++i)
        out->data[i] = a->data[i] * (bcast ? b->data[0] : b->data[i]);
    guard_finite(*out, "mul");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a, pb = b;
        out->backprop = [self, pa, pb, bcast, n]() {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    pa->grad[i] += self->grad[i] * (bcast ? pb->data[0] : pb->data[i]);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (bcast) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) s += self->grad[i] * pa->data[i];
                    pb->grad[0] += s;
                } else {
                    for (std::int64_t i = 0; i < n; ++i) pb->grad[i] += self->grad[i] * pa->data[i];
                }
            }
        };
    }
    return out;
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    check_binary_shapes("div", *a, *b);
    auto out = make_op_output(a->shape, {a, b});
    const std::int64_t n = a->numel();
    const bool bcast = b->numel() == 1;
    for (std::int64_t i = 0; i < n; ++i)
        out->data[i] = a->data[i] / (bcast ? b->data[0] : b->data[i]);
    guard_finite(*out, "div");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a, pb = b;
        out->backprop = [self, pa, pb, bcast, n]() {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    pa->grad[i] += self->grad[i] / (bcast ? pb->data[0] : pb->data[i]);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (bcast) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < n; ++i)
                        s -= self->grad[i] * pa->data[i] / (pb->data[0] * pb->data[0]);
                    pb->grad[0] += s;
                } else {
                    for (std::int64_t i = 0; i < n; ++i)
                        pb->grad[i] -= self->grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
                }
            }
        };
    }
    return out;
}

TensorPtr add_scalar(const TensorPtr& a, double c) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c;
    guard_finite(*out, "add_scalar");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, n]() { pa->accumulate_grad(self->grad.data(), n); };
    }
    return out;
}

TensorPtr mul_scalar(const TensorPtr& a, double c) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
    guard_finite(*out, "mul_scalar");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, c, n]() {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += self->grad[i] * c;
        };
    }
    return out;
}

TensorPtr rsub_scalar(double c, const TensorPtr& a) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = c - a->data[i];
    guard_finite(*out, "rsub_scalar");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, n]() {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) pa->grad[i] -= self->grad[i];
        };
    }
    return out;
}

TensorPtr log_op(const TensorPtr& a) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = std::log(a->data[i]);
    guard_finite(*out, "log");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, n]() {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += self->grad[i] / pa->data[i];
        };
    }
    return out;
}

TensorPtr pow_scalar(const TensorPtr& a, double c) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = std::pow(a->data[i], c);
    guard_finite(*out, "pow_scalar");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, c, n]() {
            if (c == 0.0) return;  // derivative identically zero
            pa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                pa->grad[i] += self->grad[i] * c * std::pow(pa->data[i], c - 1.0);
        };
    }
    return out;
}

TensorPtr clamp(const TensorPtr& a, double lo, double hi) {
    auto out = make_op_output(a->shape, {a});
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = a->data[i];
        // NaN must pass through, not get laundered into a bound
        out->data[i] = std::isnan(v) ? v : std::min(hi, std::max(lo, v));
    }
    guard_finite(*out, "clamp");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, lo, hi, n]() {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                if (pa->data[i] > lo && pa->data[i] < hi) pa->grad[i] += self->grad[i];
            }
        };
    }
    return out;
}

TensorPtr sum(const TensorPtr& a) {
    auto out = make_op_output({1}, {a});
    double s = 0.0;
    for (double v : a->data) s += v;
    out->data[0] = s;
    guard_finite(*out, "sum");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        const std::int64_t n = a->numel();
        out->backprop = [self, pa, n]() {
            pa->ensure_grad();
            const double g = self->grad[0];
            for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += g;
        };
    }
    return out;
}

TensorPtr mean(const TensorPtr& a) {
    const std::int64_t n = a->numel();
    auto out = make_op_output({1}, {a});
    double s = 0.0;
    for (double v : a->data) s += v;
    out->data[0] = s / static_cast<double>(n);
    guard_finite(*out, "mean");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a;
        out->backprop = [self, pa, n]() {
            pa->ensure_grad();
            const double g = self->grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2) {
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    }
    const std::int64_t m = a->dim(0), k = a->dim(1), k2 = b->dim(0), n = b->dim(1);
    if (k != k2) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
    }
    auto out = make_op_output({m, n}, {a, b});
    MapConstMat A(a->data.data(), m, k);
    MapConstMat B(b->data.data(), k, n);
    MapMat C(out->data.data(), m, n);
    C.noalias() = A * B;
    guard_finite(*out, "matmul");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr pa = a, pb = b;
        out->backprop = [self, pa, pb, m, k, n]() {
            MapConstMat dC(self->grad.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MapMat dA(pa->grad.data(), m, k);
                MapConstMat B(pb->data.data(), k, n);
                dA.noalias() += dC * B.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MapMat dB(pb->grad.data(), k, n);
                MapConstMat A(pa->data.data(), m, k);
                dB.noalias() += A.transpose() * dC;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    }
    if (!loss->requires_grad) {
        throw ContractError("backward: loss does not require grad (no recorded graph)");
    }
    // iterative post-order DFS; parents precede children in `order`
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    struct Frame {
        Tensor* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.get(), 0});
    visited.insert(loss.get());
    while (!stack.empty()) {
        Frame& fr = stack.back();
        if (fr.next < fr.node->parents.size()) {
            Tensor* p = fr.node->parents[fr.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(fr.node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop();
    }
    // release the recorded graph; parameter grads survive on their tensors
    for (Tensor* node : order) {
        node->parents.clear();
        node->backprop = nullptr;
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

double gradcheck(const std::function<TensorPtr(const TensorPtr&)>& f,
                 const TensorPtr& x, double step) {
    if (step <= 0.0) throw ContractError("gradcheck: step must be positive");
    auto xg = Tensor::from_data(x->shape, x->data, true);
    TensorPtr loss = f(xg);
    if (loss->numel() != 1) throw ContractError("gradcheck: f must be scalar-valued");
    if (!std::isfinite(loss->data[0])) throw NumericError("gradcheck: non-finite f(x)");
    backward(loss);
    std::vector<double> analytic(x->data.size(), 0.0);
    if (xg->grad_populated()) analytic = xg->grad;

    double worst = 0.0;
    const std::int64_t n = x->numel();
    NoGradGuard no_grad;  // probe evaluations need no recorded graph
    for (std::int64_t i = 0; i < n; ++i) {
        auto xp = Tensor::from_data(x->shape, x->data, false);
        xp->data[static_cast<std::size_t>(i)] += step;
        const double fp = f(xp)->value();
        auto xm = Tensor::from_data(x->shape, x->data, false);
        xm->data[static_cast<std::size_t>(i)] -= step;
        const double fm = f(xm)->value();
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("gradcheck: non-finite f at perturbation");
        }
        const double fd = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, rel);
    }
    return worst;
}

double gradcheck_wrt(const std::function<TensorPtr()>& loss_fn, const TensorPtr& param,
                     double step) {
    if (step <= 0.0) throw ContractError("gradcheck_wrt: step must be positive");
    if (!param->requires_grad) throw ContractError("gradcheck_wrt: param does not require grad");
    param->zero_grad();
    TensorPtr loss = loss_fn();
    if (loss->numel() != 1) throw ContractError("gradcheck_wrt: loss must be scalar");
    if (!std::isfinite(loss->data[0])) throw NumericError("gradcheck_wrt: non-finite loss");
    backward(loss);
    std::vector<double> analytic(param->data.size(), 0.0);
    if (param->grad_populated()) analytic = param->grad;
    param->zero_grad();

    double worst = 0.0;
    const std::int64_t n = param->numel();
    NoGradGuard no_grad;
    for (std::int64_t i = 0; i < n; ++i) {
        const double saved = param->data[static_cast<std::size_t>(i)];
        param->data[static_cast<std::size_t>(i)] = saved + step;
        const double fp = loss_fn()->value();
        param->data[static_cast<std::size_t>(i)] = saved - step;
        const double fm = loss_fn()->value();
        param->data[static_cast<std::size_t>(i)] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("gradcheck_wrt: non-finite loss at perturbation");
        }
        const double fd = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace unet3p
