#include "unet3p/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "unet3p/tensor_io.hpp"

namespace unet3p {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void require_4d(const Tensor& x, const char* op) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(op) + " expects a [B,C,H,W] tensor, got " + shape_str(x.shape));
    }
}

// Reused conv workspaces; the big col buffers would otherwise churn through
// mmap on every call.
double* conv_scratch(int which, std::size_t n) {
    static thread_local std::vector<double> buf[2];
    auto& b = buf[which];
    if (b.size() < n) b.resize(n);
    return b.data();
}

// Gathers conv patches: rows = C*K*K, cols = B*Ho*Wo, row-major. Writes every
// element (zeros for padding), so the destination needs no pre-clearing.
void im2col(const Tensor& x, std::int64_t K, std::int64_t stride, std::int64_t pad,
            std::int64_t Ho, std::int64_t Wo, double* col) {
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Q = B * Ho * Wo;
    const double* xd = x.data.data();
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ky = 0; ky < K; ++ky) {
            for (std::int64_t kx = 0; kx < K; ++kx) {
                double* crow = col + ((c * K + ky) * K + kx) * Q;
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* xb = xd + (b * C + c) * H * W;
                    for (std::int64_t oh = 0; oh < Ho; ++oh) {
                        const std::int64_t ih = oh * stride + ky - pad;
                        double* dst = crow + (b * Ho + oh) * Wo;
                        if (ih < 0 || ih >= H) {
                            std::fill(dst, dst + Wo, 0.0);
                            continue;
                        }
                        const double* xrow = xb + ih * W;
                        for (std::int64_t ow = 0; ow < Wo; ++ow) {
                            const std::int64_t iw = ow * stride + kx - pad;
                            dst[ow] = (iw >= 0 && iw < W) ? xrow[iw] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds dcol back into dx.
void col2im_accumulate(const double* dcol, std::int64_t K, std::int64_t stride,
                       std::int64_t pad, std::int64_t Ho, std::int64_t Wo, Tensor& dx_holder,
                       std::vector<double>& dx) {
    const std::int64_t B = dx_holder.dim(0), C = dx_holder.dim(1), H = dx_holder.dim(2),
                       W = dx_holder.dim(3);
    const std::int64_t Q = B * Ho * Wo;
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ky = 0; ky < K; ++ky) {
            for (std::int64_t kx = 0; kx < K; ++kx) {
                const double* crow = dcol + ((c * K + ky) * K + kx) * Q;
                for (std::int64_t b = 0; b < B; ++b) {
                    double* xb = dx.data() + (b * C + c) * H * W;
                    for (std::int64_t oh = 0; oh < Ho; ++oh) {
                        const std::int64_t ih = oh * stride + ky - pad;
                        if (ih < 0 || ih >= H) continue;
                        const double* src = crow + (b * Ho + oh) * Wo;
                        double* xrow = xb + ih * W;
                        for (std::int64_t ow = 0; ow < Wo; ++ow) {
                            const std::int64_t iw = ow * stride + kx - pad;
                            if (iw >= 0 && iw < W) xrow[iw] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TensorPtr conv2d_op(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                    std::int64_t stride, std::int64_t padding) {
    require_4d(*x, "conv2d");
    if (w->rank() != 4) throw ShapeError("conv2d weight must be [O,C,K,K], got " + shape_str(w->shape));
    const std::int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    const std::int64_t O = w->dim(0), K = w->dim(2);
    if (w->dim(1) != C) {
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(C) +
                         ", weight expects " + std::to_string(w->dim(1)));
    }
    if (w->dim(2) != w->dim(3)) throw ShapeError("conv2d kernel must be square");
    if (b && (b->rank() != 1 || b->dim(0) != O)) {
        throw ShapeError("conv2d bias must be [O], got " + shape_str(b->shape));
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: bad stride/padding");
    const std::int64_t Ho = (H + 2 * padding - K) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - K) / stride + 1;
    if (H + 2 * padding < K || W + 2 * padding < K || Ho < 1 || Wo < 1) {
        throw GeometryError("conv2d output would be empty for input " + shape_str(x->shape) +
                            " kernel " + std::to_string(K));
    }

    std::vector<TensorPtr> inputs{x, w};
    if (b) inputs.push_back(b);
    auto out = make_op_output({B, O, Ho, Wo}, std::move(inputs));

    const std::int64_t Q = B * Ho * Wo;
    {
        double* col = conv_scratch(0, static_cast<std::size_t>(C * K * K * Q));
        im2col(*x, K, stride, padding, Ho, Wo, col);
        double* prod = conv_scratch(1, static_cast<std::size_t>(O * Q));
        MapMat Pm(prod, O, Q);
        MapConstMat Wm(w->data.data(), O, C * K * K);
        MapConstMat Cm(col, C * K * K, Q);
        Pm.noalias() = Wm * Cm;
        double* od = out->data.data();
        for (std::int64_t bb = 0; bb < B; ++bb) {
            for (std::int64_t o = 0; o < O; ++o) {
                const double bias_v = b ? b->data[static_cast<std::size_t>(o)] : 0.0;
                const double* prow = prod + o * Q + bb * Ho * Wo;
                double* orow = od + (bb * O + o) * Ho * Wo;
                for (std::int64_t q = 0; q < Ho * Wo; ++q) orow[q] = prow[q] + bias_v;
            }
        }
    }
    guard_finite(*out, "conv2d");

    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x, pw = w, pb = b;
        out->backprop = [self, px, pw, pb, stride, padding, B, C, H, W, O, K, Ho, Wo]() {
            const std::int64_t Q = B * Ho * Wo;
            // reorder dOut [B,O,Ho,Wo] -> [O, Q]
            RowMat dOut(O, Q);
            {
                const double* gd = self->grad.data();
                for (std::int64_t bb = 0; bb < B; ++bb) {
                    for (std::int64_t o = 0; o < O; ++o) {
                        const double* grow = gd + (bb * O + o) * Ho * Wo;
                        double* drow = dOut.data() + o * Q + bb * Ho * Wo;
                        for (std::int64_t q = 0; q < Ho * Wo; ++q) drow[q] = grow[q];
                    }
                }
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t o = 0; o < O; ++o) {
                    double s = 0.0;
                    const double* drow = dOut.data() + o * Q;
                    for (std::int64_t q = 0; q < Q; ++q) s += drow[q];
                    pb->grad[static_cast<std::size_t>(o)] += s;
                }
            }
            // scratch 0 holds col for dW, then is overwritten with dcol for dx
            double* col = conv_scratch(0, static_cast<std::size_t>(C * K * K * Q));
            if (pw->requires_grad) {
                // dW = dOut * col^T; col is recomputed rather than cached
                // across the step (it dwarfs the activations)
                im2col(*px, K, stride, padding, Ho, Wo, col);
                pw->ensure_grad();
                MapMat dW(pw->grad.data(), O, C * K * K);
                MapConstMat Cm(col, C * K * K, Q);
                dW.noalias() += dOut * Cm.transpose();
            }
            if (px->requires_grad) {
                MapMat dColM(col, C * K * K, Q);
                MapConstMat Wm(pw->data.data(), O, C * K * K);
                dColM.noalias() = Wm.transpose() * dOut;
                px->ensure_grad();
                col2im_accumulate(col, K, stride, padding, Ho, Wo, *px, px->grad);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

TensorPtr maxpool(const TensorPtr& x, std::int64_t factor) {
    require_4d(*x, "maxpool");
    if (factor < 1) throw GeometryError("maxpool factor must be >= 1");
    const std::int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (H % factor != 0 || W % factor != 0) {
        throw GeometryError("maxpool: dims " + std::to_string(H) + "x" + std::to_string(W) +
                            " not divisible by factor " + std::to_string(factor));
    }
    const std::int64_t Ho = H / factor, Wo = W / factor;
    auto out = make_op_output({B, C, Ho, Wo}, {x});
    // argmax (flat index into x) per output cell, for the backward routing
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(B * C * Ho * Wo));
    const double* xd = x->data.data();
    double* od = out->data.data();
    std::int64_t oi = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xd + bc * H * W;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
            for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t best_idx = -1;
                for (std::int64_t dy = 0; dy < factor; ++dy) {
                    const std::int64_t iy = oh * factor + dy;
                    for (std::int64_t dx = 0; dx < factor; ++dx) {
                        const std::int64_t ix = ow * factor + dx;
                        const double v = plane[iy * W + ix];
                        if (v > best) {  // strict: first max in row-major scan wins
                            best = v;
                            best_idx = bc * H * W + iy * W + ix;
                        }
                    }
                }
                od[oi] = best;
                (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
            }
        }
    }
    guard_finite(*out, "maxpool");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, argmax]() {
            px->ensure_grad();
            const std::size_t n = argmax->size();
            for (std::size_t i = 0; i < n; ++i) {
                px->grad[static_cast<std::size_t>((*argmax)[i])] += self->grad[i];
            }
        };
    }
    return out;
}

TensorPtr avgpool(const TensorPtr& x, std::int64_t factor) {
    require_4d(*x, "avgpool");
    if (factor < 1) throw GeometryError("avgpool factor must be >= 1");
    const std::int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (H % factor != 0 || W % factor != 0) {
        throw GeometryError("avgpool: dims not divisible by factor " + std::to_string(factor));
    }
    const std::int64_t Ho = H / factor, Wo = W / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    auto out = make_op_output({B, C, Ho, Wo}, {x});
    const double* xd = x->data.data();
    double* od = out->data.data();
    std::int64_t oi = 0;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xd + bc * H * W;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
            for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                double s = 0.0;
                for (std::int64_t dy = 0; dy < factor; ++dy) {
                    const double* row = plane + (oh * factor + dy) * W + ow * factor;
                    for (std::int64_t dx = 0; dx < factor; ++dx) s += row[dx];
                }
                od[oi] = s * inv;
            }
        }
    }
    guard_finite(*out, "avgpool");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, factor, B, C, H, W, Ho, Wo, inv]() {
            px->ensure_grad();
            std::int64_t oi = 0;
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                double* gplane = px->grad.data() + bc * H * W;
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
                        const double g = self->grad[static_cast<std::size_t>(oi)] * inv;
                        for (std::int64_t dy = 0; dy < factor; ++dy) {
                            double* row = gplane + (oh * factor + dy) * W + ow * factor;
                            for (std::int64_t dx = 0; dx < factor; ++dx) row[dx] += g;
                        }
                    }
                }
            }
        };
    }
    return out;
}

namespace {

struct AxisTable {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> w1;  // weight of i1; i0 gets 1-w1
};

AxisTable bilinear_axis(std::int64_t src_dim, std::int64_t dst_dim, std::int64_t factor) {
    AxisTable t;
    t.i0.resize(static_cast<std::size_t>(dst_dim));
    t.i1.resize(static_cast<std::size_t>(dst_dim));
    t.w1.resize(static_cast<std::size_t>(dst_dim));
    for (std::int64_t d = 0; d < dst_dim; ++d) {
        double s = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
        s = std::min(static_cast<double>(src_dim - 1), std::max(0.0, s));
        const std::int64_t s0 = static_cast<std::int64_t>(std::floor(s));
        const std::int64_t s1 = std::min(s0 + 1, src_dim - 1);
        t.i0[static_cast<std::size_t>(d)] = s0;
        t.i1[static_cast<std::size_t>(d)] = s1;
        t.w1[static_cast<std::size_t>(d)] = s - static_cast<double>(s0);
    }
    return t;
}

}  // namespace

TensorPtr bilinear_upsample(const TensorPtr& x, std::int64_t factor) {
    require_4d(*x, "bilinear_upsample");
    if (factor < 1) throw GeometryError("bilinear_upsample factor must be >= 1");
    const std::int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    const std::int64_t Ho = H * factor, Wo = W * factor;
    auto out = make_op_output({B, C, Ho, Wo}, {x});
    const AxisTable ty = bilinear_axis(H, Ho, factor);
    const AxisTable tx = bilinear_axis(W, Wo, factor);
    const double* xd = x->data.data();
    double* od = out->data.data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xd + bc * H * W;
        double* oplane = od + bc * Ho * Wo;
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const double wy1 = ty.w1[static_cast<std::size_t>(oy)];
            const double* r0 = plane + ty.i0[static_cast<std::size_t>(oy)] * W;
            const double* r1 = plane + ty.i1[static_cast<std::size_t>(oy)] * W;
            double* orow = oplane + oy * Wo;
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
                const double wx1 = tx.w1[static_cast<std::size_t>(ox)];
                const std::int64_t x0 = tx.i0[static_cast<std::size_t>(ox)];
                const std::int64_t x1 = tx.i1[static_cast<std::size_t>(ox)];
                orow[ox] = (1.0 - wy1) * ((1.0 - wx1) * r0[x0] + wx1 * r0[x1]) +
                           wy1 * ((1.0 - wx1) * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    guard_finite(*out, "bilinear_upsample");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, ty, tx, B, C, H, W, Ho, Wo]() {
            px->ensure_grad();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                double* gplane = px->grad.data() + bc * H * W;
                const double* goplane = self->grad.data() + bc * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const double wy1 = ty.w1[static_cast<std::size_t>(oy)];
                    double* g0 = gplane + ty.i0[static_cast<std::size_t>(oy)] * W;
                    double* g1 = gplane + ty.i1[static_cast<std::size_t>(oy)] * W;
                    const double* grow = goplane + oy * Wo;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const double g = grow[ox];
                        const double wx1 = tx.w1[static_cast<std::size_t>(ox)];
                        const std::int64_t x0 = tx.i0[static_cast<std::size_t>(ox)];
                        const std::int64_t x1 = tx.i1[static_cast<std::size_t>(ox)];
                        g0[x0] += (1.0 - wy1) * (1.0 - wx1) * g;
                        g0[x1] += (1.0 - wy1) * wx1 * g;
                        g1[x0] += wy1 * (1.0 - wx1) * g;
                        g1[x1] += wy1 * wx1 * g;
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr concat_channels(const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input list");
    require_4d(*xs[0], "concat_channels");
    const std::int64_t B = xs[0]->dim(0), H = xs[0]->dim(2), W = xs[0]->dim(3);
    std::int64_t Ctot = 0;
    for (const auto& t : xs) {
        require_4d(*t, "concat_channels");
        if (t->dim(0) != B || t->dim(2) != H || t->dim(3) != W) {
            throw ShapeError("concat_channels: mismatched dims " + shape_str(t->shape) +
                             " vs " + shape_str(xs[0]->shape));
        }
        Ctot += t->dim(1);
    }
    std::vector<TensorPtr> inputs(xs.begin(), xs.end());
    auto out = make_op_output({B, Ctot, H, W}, std::move(inputs));
    const std::int64_t HW = H * W;
    std::int64_t coff = 0;
    for (const auto& t : xs) {
        const std::int64_t Ci = t->dim(1);
        for (std::int64_t b = 0; b < B; ++b) {
            const double* src = t->data.data() + b * Ci * HW;
            double* dst = out->data.data() + (b * Ctot + coff) * HW;
            std::copy(src, src + Ci * HW, dst);
        }
        coff += Ci;
    }
    if (out->requires_grad) {
        Tensor* self = out.get();
        std::vector<TensorPtr> ps(xs.begin(), xs.end());
        out->backprop = [self, ps, B, Ctot, HW]() {
            std::int64_t coff = 0;
            for (const auto& p : ps) {
                const std::int64_t Ci = p->dim(1);
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::int64_t b = 0; b < B; ++b) {
                        const double* src = self->grad.data() + (b * Ctot + coff) * HW;
                        double* dst = p->grad.data() + b * Ci * HW;
                        for (std::int64_t i = 0; i < Ci * HW; ++i) dst[i] += src[i];
                    }
                }
                coff += Ci;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations / dropout
// ---------------------------------------------------------------------------

TensorPtr relu(const TensorPtr& x) {
    auto out = make_op_output(x->shape, {x});
    const std::int64_t n = x->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    guard_finite(*out, "relu");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, n]() {
            px->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                if (px->data[i] > 0.0) px->grad[i] += self->grad[i];
            }
        };
    }
    return out;
}

double sigmoid_value(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

TensorPtr sigmoid(const TensorPtr& x) {
    auto out = make_op_output(x->shape, {x});
    const std::int64_t n = x->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = sigmoid_value(x->data[i]);
    guard_finite(*out, "sigmoid");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, n]() {
            px->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const double s = self->data[i];
                px->grad[i] += self->grad[i] * s * (1.0 - s);
            }
        };
    }
    return out;
}

TensorPtr activation(const TensorPtr& x, const std::string& kind) {
    if (kind == "relu") return relu(x);
    if (kind == "sigmoid") return sigmoid(x);
    throw ConfigError("unknown activation kind: " + kind);
}

TensorPtr dropout(const TensorPtr& x, double rate, Mode mode, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
    }
    if (mode == Mode::eval || rate == 0.0) {
        // identity pass-through, still recorded so gradients flow
        auto out = make_op_output(x->shape, {x});
        out->data = x->data;
        if (out->requires_grad) {
            Tensor* self = out.get();
            TensorPtr px = x;
            const std::int64_t n = x->numel();
            out->backprop = [self, px, n]() { px->accumulate_grad(self->grad.data(), n); };
        }
        return out;
    }
    const std::int64_t n = x->numel();
    auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    Rng rng(seed);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::int64_t i = 0; i < n; ++i) {
        (*mask)[static_cast<std::size_t>(i)] = rng.uniform() >= rate ? keep_scale : 0.0;
    }
    auto out = make_op_output(x->shape, {x});
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] * (*mask)[static_cast<std::size_t>(i)];
    guard_finite(*out, "dropout");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, mask, n]() {
            px->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                px->grad[i] += self->grad[i] * (*mask)[static_cast<std::size_t>(i)];
        };
    }
    return out;
}

TensorPtr global_maxpool(const TensorPtr& x) {
    require_4d(*x, "global_maxpool");
    const std::int64_t B = x->dim(0), C = x->dim(1), HW = x->dim(2) * x->dim(3);
    auto out = make_op_output({B, C}, {x});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * C));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = x->data.data() + bc * HW;
        double best = plane[0];
        std::int64_t best_i = 0;
        for (std::int64_t i = 1; i < HW; ++i) {
            if (plane[i] > best) {
                best = plane[i];
                best_i = i;
            }
        }
        out->data[static_cast<std::size_t>(bc)] = best;
        (*argmax)[static_cast<std::size_t>(bc)] = bc * HW + best_i;
    }
    guard_finite(*out, "global_maxpool");
    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x;
        out->backprop = [self, px, argmax]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < argmax->size(); ++i) {
                px->grad[static_cast<std::size_t>((*argmax)[i])] += self->grad[i];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameterized layers
// ---------------------------------------------------------------------------

Conv2d Conv2d::make(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel,
                    std::int64_t stride, std::int64_t padding, bool with_bias, Rng* rng) {
    if (in_ch < 1 || out_ch < 1 || kernel < 1) throw ConfigError("conv2d layer: bad channel/kernel spec");
    Conv2d c;
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.kernel = kernel;
    c.stride = stride;
    c.padding = padding;
    const double fan_in = static_cast<double>(in_ch * kernel * kernel);
    const double bound = std::sqrt(6.0 / fan_in);
    if (rng) {
        c.weight = Tensor::uniform_rng({out_ch, in_ch, kernel, kernel}, *rng, -bound, bound, true);
    } else {
        c.weight = Tensor::zeros({out_ch, in_ch, kernel, kernel}, true);
    }
    if (with_bias) c.bias = Tensor::zeros({out_ch}, true);
    return c;
}

BatchNorm2d BatchNorm2d::make(std::int64_t channels) {
    BatchNorm2d bn;
    bn.channels = channels;
    bn.scale = Tensor::full({channels}, 1.0, true);
    bn.shift = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0);
    return bn;
}

TensorPtr BatchNorm2d::forward(const TensorPtr& x, Mode mode) {
    require_4d(*x, "batchnorm");
    const std::int64_t B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (C != channels) {
        throw ShapeError("batchnorm channel mismatch: input " + std::to_string(C) + ", layer " +
                         std::to_string(channels));
    }
    const std::int64_t n = B * H * W;  // per-channel sample count
    const std::int64_t HW = H * W;
    auto out = make_op_output({B, C, H, W}, {x, scale, shift});

    auto mu = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    auto istd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    if (mode == Mode::train) {
        if (n < 2) throw GeometryError("batchnorm: degenerate batch (B*H*W < 2) in train mode");
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = x->data.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(n);
            double v = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = x->data.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const double d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(n);  // biased batch variance
            (*mu)[static_cast<std::size_t>(c)] = m;
            (*istd)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(v + epsilon);
            running_mean->data[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean->data[static_cast<std::size_t>(c)] + momentum * m;
            running_var->data[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var->data[static_cast<std::size_t>(c)] + momentum * v;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            (*mu)[static_cast<std::size_t>(c)] = running_mean->data[static_cast<std::size_t>(c)];
            (*istd)[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(running_var->data[static_cast<std::size_t>(c)] + epsilon);
        }
    }

    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double m = (*mu)[static_cast<std::size_t>(c)];
            const double is = (*istd)[static_cast<std::size_t>(c)];
            const double g = scale->data[static_cast<std::size_t>(c)];
            const double sh = shift->data[static_cast<std::size_t>(c)];
            const double* p = x->data.data() + (b * C + c) * HW;
            double* o = out->data.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) o[i] = g * (p[i] - m) * is + sh;
        }
    }
    guard_finite(*out, "batchnorm");

    if (out->requires_grad) {
        Tensor* self = out.get();
        TensorPtr px = x, pscale = scale, pshift = shift;
        const bool train_mode = (mode == Mode::train);
        out->backprop = [self, px, pscale, pshift, mu, istd, train_mode, B, C, HW, n]() {
            // per channel: dbeta = sum dy; dgamma = sum dy*xhat;
            // train: dx = gamma*istd/n * (n*dy - dbeta - xhat*dgamma)
            // eval:  dx = gamma*istd*dy
            for (std::int64_t c = 0; c < C; ++c) {
                const double m = (*mu)[static_cast<std::size_t>(c)];
                const double is = (*istd)[static_cast<std::size_t>(c)];
                double dbeta = 0.0, dgamma = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* dy = self->grad.data() + (b * C + c) * HW;
                    const double* xv = px->data.data() + (b * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        dbeta += dy[i];
                        dgamma += dy[i] * (xv[i] - m) * is;
                    }
                }
                if (pshift->requires_grad) {
                    pshift->ensure_grad();
                    pshift->grad[static_cast<std::size_t>(c)] += dbeta;
                }
                if (pscale->requires_grad) {
                    pscale->ensure_grad();
                    pscale->grad[static_cast<std::size_t>(c)] += dgamma;
                }
                if (px->requires_grad) {
                    px->ensure_grad();
                    const double g = pscale->data[static_cast<std::size_t>(c)];
                    if (train_mode) {
                        const double k = g * is / static_cast<double>(n);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* dy = self->grad.data() + (b * C + c) * HW;
                            const double* xv = px->data.data() + (b * C + c) * HW;
                            double* dx = px->grad.data() + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const double xhat = (xv[i] - m) * is;
                                dx[i] += k * (static_cast<double>(n) * dy[i] - dbeta - xhat * dgamma);
                            }
                        }
                    } else {
                        const double k = g * is;
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* dy = self->grad.data() + (b * C + c) * HW;
                            double* dx = px->grad.data() + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) dx[i] += k * dy[i];
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace {

std::string dims_token(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    return os.str();
}

}  // namespace

void save_checkpoint(const std::string& dir, const std::vector<NamedTensor>& tensors) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw ContractError("cannot write checkpoint manifest in " + dir);
    int idx = 0;
    for (const auto& nt : tensors) {
        char fname[32];
        std::snprintf(fname, sizeof(fname), "p%04d.tns", idx++);
        manifest << nt.name << " " << dims_token(nt.tensor->shape) << " " << fname << "\n";
        write_tns(dir + "/" + fname, *nt.tensor);
    }
    if (!manifest) throw ContractError("write failed: " + dir + "/manifest.txt");
}

void load_checkpoint(const std::string& dir, const std::vector<NamedTensor>& tensors) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw ContractError("cannot read checkpoint manifest in " + dir);
    std::size_t i = 0;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dims, fname;
        if (!(ls >> name >> dims >> fname)) {
            throw ContractError("malformed manifest line: " + line);
        }
        if (i >= tensors.size()) {
            throw ContractError("checkpoint has extra tensor '" + name + "' not in the network");
        }
        const auto& nt = tensors[i];
        if (name != nt.name) {
            throw ContractError("checkpoint/spec mismatch at entry " + std::to_string(i) +
                                ": checkpoint has '" + name + "', network expects '" + nt.name + "'");
        }
        auto loaded = read_tns(dir + "/" + fname);
        if (loaded->shape != nt.tensor->shape) {
            throw ContractError("checkpoint/spec mismatch for '" + name + "': checkpoint shape " +
                                shape_str(loaded->shape) + ", network shape " +
                                shape_str(nt.tensor->shape));
        }
        nt.tensor->data = loaded->data;
        ++i;
    }
    if (i != tensors.size()) {
        throw ContractError("checkpoint missing tensor '" + tensors[i].name + "'");
    }
}

}  // namespace unet3p
