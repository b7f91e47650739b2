#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "unet3p/errors.hpp"

namespace unet3p {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Deterministic RNG. All randomness in the project flows through this so
// runs are reproducible from explicit seeds. uniform() and normal() are
// derived from the raw mt19937_64 stream by hand instead of through
// std::*_distribution, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n));
    }

    // Box-Muller, one cached value
    double normal();

private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// Mixes a stream id into a base seed (splitmix64 finalizer). Used to derive
// per-sample and per-step seeds that stay reproducible.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Toggle for per-op finiteness assertions. On by default in debug builds;
// tests and the gradcheck harness switch it on explicitly.
void set_finite_check(bool enabled);
bool finite_check_enabled();

// While disabled, ops record no graph even when inputs require gradients.
// Used for evaluation and finite-difference probes.
void set_grad_enabled(bool enabled);
bool grad_enabled();

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major 64-bit tensor with an optional reverse-mode record.
// A tensor produced by an op is immutable afterwards; the recorded graph is
// released by backward().
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<std::int64_t> shape;
    std::vector<double> data;   // row-major, size == product(shape)
    bool requires_grad = false;
    std::vector<double> grad;   // empty until the first accumulation

    // autodiff record; only populated when requires_grad
    std::vector<TensorPtr> parents;
    std::function<void()> backprop;  // accumulates this->grad into parents

    Tensor(std::vector<std::int64_t> s, std::vector<double> d, bool rg);
    Tensor(const Tensor&) = delete;
    Tensor& operator=(const Tensor&) = delete;

    static TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
    static TensorPtr from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                               bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);
    // seeded fill: identical (seed, shape) gives identical bytes
    static TensorPtr uniform(std::vector<std::int64_t> shape, std::uint64_t seed,
                             double lo = 0.0, double hi = 1.0, bool requires_grad = false);
    // fill from a shared generator (network init consumes one stream in order)
    static TensorPtr uniform_rng(std::vector<std::int64_t> shape, Rng& rng,
                                 double lo, double hi, bool requires_grad = false);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    double value() const;  // scalar tensors only

    bool grad_populated() const { return !grad.empty(); }
    void ensure_grad();
    void zero_grad() { grad.clear(); }
    void accumulate_grad(const double* g, std::int64_t n);
};

std::string shape_str(const std::vector<std::int64_t>& shape);
std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

// Builds an op output. requires_grad and the parent record are set from the
// inputs; callers fill data and then attach backprop.
TensorPtr make_op_output(std::vector<std::int64_t> shape, std::vector<TensorPtr> inputs);

// Throws NumericError when the check is enabled and t holds a non-finite value.
void guard_finite(const Tensor& t, const char* op);

// ---- elementwise ops (b may be a size-1 tensor, broadcast over a) ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);

TensorPtr add_scalar(const TensorPtr& a, double c);
TensorPtr mul_scalar(const TensorPtr& a, double c);
// c - a, composed often enough to deserve a name
TensorPtr rsub_scalar(double c, const TensorPtr& a);

TensorPtr log_op(const TensorPtr& a);
// a^c for constant c; a must stay positive when c is fractional
TensorPtr pow_scalar(const TensorPtr& a, double c);
// clamp to [lo, hi]; gradient passes through interior points only
TensorPtr clamp(const TensorPtr& a, double lo, double hi);

TensorPtr sum(const TensorPtr& a);   // scalar output
TensorPtr mean(const TensorPtr& a);  // scalar output

// [m,k] x [k,n] -> [m,n]
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

// Reverse-mode sweep from a scalar loss. Populates grad on every
// requires_grad tensor reachable from it, then frees the recorded graph.
void backward(const TensorPtr& loss);

// Central-difference check: max over coordinates of
// |analytic - fd| / max(1, |analytic|). f must be pure and scalar-valued.
double gradcheck(const std::function<TensorPtr(const TensorPtr&)>& f,
                 const TensorPtr& x, double step);

// Same check against an in-place parameter: loss_fn is re-evaluated with
// param coordinates perturbed in place. Lets the check run against tensors
// embedded in layers or networks.
double gradcheck_wrt(const std::function<TensorPtr()>& loss_fn, const TensorPtr& param,
                     double step);

}  // namespace unet3p
