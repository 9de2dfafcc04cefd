#include "difct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

#ifdef DIFCT_WITH_OPENBLAS
#include <cblas.h>
#endif

namespace difct {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_mode_enabled() { return g_grad_enabled; }

std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---- construction ----------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(std::vector<int64_t> shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(std::vector<int64_t> shape, T value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(size_t(shape_numel(n->shape)), value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::from_data(std::vector<int64_t> shape, std::vector<T> data,
                               bool requires_grad) {
    if (shape_numel(shape) != int64_t(data.size()))
        throw InvalidArgumentError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                   std::to_string(data.size()) + " elements");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1)
        throw InvalidArgumentError("item(): tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
}

// Shared op constructor: records the graph edge only when grad mode is on
// and some input requires grad.
template <class T>
Tensor<T> make_op_result(std::vector<int64_t> shape, std::vector<T> value,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(detail::TensorNode<T>&)> bw) {
    auto n = std::make_shared<detail::TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& t : inputs)
            if (t.requires_grad()) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (const auto& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(bw);
    }
    return Tensor<T>(std::move(n));
}

// ---- GEMM ------------------------------------------------------------------
// Row-major C[MxN] = alpha*op(A)*op(B) + beta*C. conv2d is the only caller
// that routes through BLAS; per-point paths (linear) use the builtin kernel
// so results are independent of how inference is chunked.

namespace {

template <class T>
void gemm_builtin(bool ta, bool tb, int64_t M, int64_t N, int64_t K, T alpha, const T* A,
                  int64_t lda, const T* B, int64_t ldb, T beta, T* C, int64_t ldc) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M; ++i) {
        for (int64_t j = 0; j < N; ++j) {
            T acc = 0;
            for (int64_t k = 0; k < K; ++k) {
                T a = ta ? A[k * lda + i] : A[i * lda + k];
                T b = tb ? B[j * ldb + k] : B[k * ldb + j];
                acc += a * b;
            }
            C[i * ldc + j] = alpha * acc + (beta == T(0) ? T(0) : beta * C[i * ldc + j]);
        }
    }
}

#ifdef DIFCT_WITH_OPENBLAS
void gemm_blas(bool ta, bool tb, int64_t M, int64_t N, int64_t K, float alpha, const float* A,
               int64_t lda, const float* B, int64_t ldb, float beta, float* C, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(M), int(N), int(K), alpha, A, int(lda), B, int(ldb), beta, C, int(ldc));
}
void gemm_blas(bool ta, bool tb, int64_t M, int64_t N, int64_t K, double alpha, const double* A,
               int64_t lda, const double* B, int64_t ldb, double beta, double* C, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(M), int(N), int(K), alpha, A, int(lda), B, int(ldb), beta, C, int(ldc));
}
#endif

template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, T alpha, const T* A, int64_t lda,
          const T* B, int64_t ldb, T beta, T* C, int64_t ldc) {
    (void)max_threads();  // resolve thread cap before the first kernel
#ifdef DIFCT_WITH_OPENBLAS
    gemm_blas(ta, tb, M, N, K, alpha, A, lda, B, ldb, beta, C, ldc);
#else
    gemm_builtin(ta, tb, M, N, K, alpha, A, lda, B, ldb, beta, C, ldc);
#endif
}

}  // namespace

// ---- conv2d ----------------------------------------------------------------

namespace {

// Batched im2col: col is [Cin*k*k, B*Ho*Wo] so the whole batch runs through
// one GEMM per layer (per-image GEMMs are too narrow for BLAS to win).
template <class T>
void im2col(const T* input, int64_t B, int64_t Cin, int64_t H, int64_t W, int64_t k,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
    const int64_t plane = Ho * Wo;
    const int64_t ncol = B * plane;
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t c = 0; c < Cin; ++c) {
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                T* drow = col + ((c * k + ki) * k + kj) * ncol;
                for (int64_t b = 0; b < B; ++b) {
                    const T* img = input + (b * Cin + c) * H * W;
                    T* dst = drow + b * plane;
                    for (int64_t oy = 0; oy < Ho; ++oy) {
                        const int64_t iy = oy * stride + ki - pad;
                        if (iy < 0 || iy >= H) {
                            std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
                            continue;
                        }
                        const T* src = img + iy * W;
                        const int64_t ix0 = kj - pad;
                        if (stride == 1 && ix0 >= 0 && ix0 + Wo <= W) {
                            std::memcpy(dst + oy * Wo, src + ix0, size_t(Wo) * sizeof(T));
                        } else {
                            for (int64_t ox = 0; ox < Wo; ++ox) {
                                const int64_t ix = ox * stride + ix0;
                                dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int64_t B, int64_t Cin, int64_t H, int64_t W, int64_t k,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* grad_in) {
    const int64_t plane = Ho * Wo;
    const int64_t ncol = B * plane;
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < Cin; ++c) {
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                const T* srow = col + ((c * k + ki) * k + kj) * ncol;
                for (int64_t b = 0; b < B; ++b) {
                    T* img = grad_in + (b * Cin + c) * H * W;
                    const T* src = srow + b * plane;
                    for (int64_t oy = 0; oy < Ho; ++oy) {
                        const int64_t iy = oy * stride + ki - pad;
                        if (iy < 0 || iy >= H) continue;
                        T* dst = img + iy * W;
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                            const int64_t ix = ox * stride + kj - pad;
                            if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// scratch reused across conv calls; the largest layers need ~70 MB
template <class T>
std::vector<T>& conv_scratch(int which, size_t n) {
    thread_local std::vector<T> bufs[3];
    auto& b = bufs[which];
    if (b.size() < n) b.resize(n);
    return b;
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
    if (input.dim() != 4)
        throw InvalidArgumentError("conv2d: input must be [B,Cin,H,W], got " + shape_str(input.shape()));
    if (weight.dim() != 4)
        throw InvalidArgumentError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
    const int64_t B = input.size(0), Cin = input.size(1), H = input.size(2), W = input.size(3);
    const int64_t Cout = weight.size(0), k = weight.size(2);
    if (weight.size(1) != Cin)
        throw InvalidArgumentError("conv2d: input channel axis 1 has " + std::to_string(Cin) +
                                   ", weight expects " + std::to_string(weight.size(1)));
    if (weight.size(3) != k || k % 2 == 0)
        throw InvalidArgumentError("conv2d: kernel must be square with odd size, got " +
                                   shape_str(weight.shape()));
    if (bias.numel() != Cout)
        throw InvalidArgumentError("conv2d: bias has " + std::to_string(bias.numel()) +
                                   " elements, expected " + std::to_string(Cout));
    if (stride < 1 || padding < 0)
        throw InvalidArgumentError("conv2d: stride must be >=1 and padding >=0");
    const int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const int64_t Wo = (W + 2 * padding - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        throw InvalidArgumentError("conv2d: empty output for input " + shape_str(input.shape()));

    const int64_t ck2 = Cin * k * k, plane = Ho * Wo, ncol = B * plane;
    std::vector<T> out(size_t(B * Cout * plane));
    {
        auto& col = conv_scratch<T>(0, size_t(ck2 * ncol));
        auto& prod = conv_scratch<T>(1, size_t(Cout * ncol));
        im2col(input.data(), B, Cin, H, W, k, stride, padding, Ho, Wo, col.data());
        gemm<T>(false, false, Cout, ncol, ck2, T(1), weight.data(), ck2, col.data(), ncol, T(0),
                prod.data(), ncol);
        // prod is [Cout][B][plane]; reorder to [B][Cout][plane] and add bias
        const T* bv = bias.data();
#pragma omp parallel for schedule(static) collapse(2)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < Cout; ++c) {
                const T* src = prod.data() + (c * B + b) * plane;
                T* dst = out.data() + (b * Cout + c) * plane;
                const T bias_c = bv[c];
                for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bias_c;
            }
    }

    const int s = stride, p = padding;
    return make_op_result<T>(
        {B, Cout, Ho, Wo}, std::move(out), {input, weight, bias},
        [B, Cin, H, W, Cout, k, s, p, Ho, Wo, ck2, plane, ncol](detail::TensorNode<T>& self) {
            auto& in = *self.parents[0];
            auto& wt = *self.parents[1];
            auto& bs = *self.parents[2];
            const T* go = self.grad.data();
            if (bs.requires_grad) {
                bs.ensure_grad();
                for (int64_t c = 0; c < Cout; ++c) {
                    T acc = 0;
                    for (int64_t b = 0; b < B; ++b) {
                        const T* row = go + (b * Cout + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) acc += row[i];
                    }
                    bs.grad[size_t(c)] += acc;
                }
            }
            if (!wt.requires_grad && !in.requires_grad) return;
            // grad reordered to [Cout][B][plane] for the GEMMs
            auto& gout = conv_scratch<T>(2, size_t(Cout * ncol));
#pragma omp parallel for schedule(static) collapse(2)
            for (int64_t c = 0; c < Cout; ++c)
                for (int64_t b = 0; b < B; ++b)
                    std::memcpy(gout.data() + (c * B + b) * plane, go + (b * Cout + c) * plane,
                                size_t(plane) * sizeof(T));
            if (wt.requires_grad) {
                wt.ensure_grad();
                auto& col = conv_scratch<T>(0, size_t(ck2 * ncol));
                im2col(in.value.data(), B, Cin, H, W, k, s, p, Ho, Wo, col.data());
                gemm<T>(false, true, Cout, ck2, ncol, T(1), gout.data(), ncol, col.data(), ncol,
                        T(1), wt.grad.data(), ck2);
            }
            if (in.requires_grad) {
                in.ensure_grad();
                auto& dcol = conv_scratch<T>(1, size_t(ck2 * ncol));
                gemm<T>(true, false, ck2, ncol, Cout, T(1), wt.value.data(), ck2, gout.data(),
                        ncol, T(0), dcol.data(), ncol);
                col2im_add(dcol.data(), B, Cin, H, W, k, s, p, Ho, Wo, in.grad.data());
            }
        });
}

// ---- linear ----------------------------------------------------------------
// Builtin kernel on purpose: each output row depends only on its input row,
// so chunked inference is bit-identical to whole-batch inference.

template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (input.dim() < 1 || weight.dim() != 2)
        throw InvalidArgumentError("linear: need input [...,Din] and weight [Dout,Din]");
    const int64_t Din = input.size(int(input.dim() - 1));
    const int64_t Dout = weight.size(0);
    if (weight.size(1) != Din)
        throw InvalidArgumentError("linear: last input axis has " + std::to_string(Din) +
                                   ", weight expects " + std::to_string(weight.size(1)));
    if (bias.numel() != Dout)
        throw InvalidArgumentError("linear: bias has " + std::to_string(bias.numel()) +
                                   " elements, expected " + std::to_string(Dout));
    const int64_t M = input.numel() / Din;
    std::vector<T> out(size_t(M * Dout));
    const T* x = input.data();
    const T* w = weight.data();
    const T* bv = bias.data();
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        const T* xr = x + m * Din;
        T* orow = out.data() + m * Dout;
        for (int64_t d = 0; d < Dout; ++d) {
            const T* wr = w + d * Din;
            T acc = bv[d];
            for (int64_t i = 0; i < Din; ++i) acc += xr[i] * wr[i];
            orow[d] = acc;
        }
    }
    std::vector<int64_t> oshape = input.shape();
    oshape.back() = Dout;
    return make_op_result<T>(
        std::move(oshape), std::move(out), {input, weight, bias},
        [M, Din, Dout](detail::TensorNode<T>& self) {
            auto& in = *self.parents[0];
            auto& wt = *self.parents[1];
            auto& bs = *self.parents[2];
            const T* go = self.grad.data();
            if (in.requires_grad) {
                in.ensure_grad();
                T* gx = in.grad.data();
                const T* w = wt.value.data();
#pragma omp parallel for schedule(static)
                for (int64_t m = 0; m < M; ++m) {
                    const T* gr = go + m * Dout;
                    T* gxr = gx + m * Din;
                    for (int64_t d = 0; d < Dout; ++d) {
                        const T g = gr[d];
                        const T* wr = w + d * Din;
                        for (int64_t i = 0; i < Din; ++i) gxr[i] += g * wr[i];
                    }
                }
            }
            if (wt.requires_grad) {
                wt.ensure_grad();
                T* gw = wt.grad.data();
                const T* x = in.value.data();
#pragma omp parallel for schedule(static)
                for (int64_t d = 0; d < Dout; ++d) {
                    T* gwr = gw + d * Din;
                    for (int64_t m = 0; m < M; ++m) {
                        const T g = go[m * Dout + d];
                        const T* xr = x + m * Din;
                        for (int64_t i = 0; i < Din; ++i) gwr[i] += g * xr[i];
                    }
                }
            }
            if (bs.requires_grad) {
                bs.ensure_grad();
                for (int64_t d = 0; d < Dout; ++d) {
                    T acc = 0;
                    for (int64_t m = 0; m < M; ++m) acc += go[m * Dout + d];
                    bs.grad[size_t(d)] += acc;
                }
            }
        });
}

// ---- grid_sample_bilinear ---------------------------------------------------

template <class T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& features, const Tensor<T>& coords) {
    if (features.dim() != 4)
        throw InvalidArgumentError("grid_sample: features must be [B,C,H,W], got " +
                                   shape_str(features.shape()));
    if (coords.dim() != 3 || coords.size(2) != 2)
        throw InvalidArgumentError("grid_sample: coords must be [B,N,2], got " +
                                   shape_str(coords.shape()));
    if (coords.size(0) != features.size(0))
        throw InvalidArgumentError("grid_sample: batch axes differ, features " +
                                   shape_str(features.shape()) + " vs coords " +
                                   shape_str(coords.shape()));
    if (coords.requires_grad())
        throw InvalidArgumentError("grid_sample: gradients w.r.t. coordinates are not supported");
    const int64_t B = features.size(0), C = features.size(1), H = features.size(2),
                  W = features.size(3);
    const int64_t N = coords.size(1);
    const T* cd = coords.data();
    for (int64_t i = 0; i < B * N * 2; ++i)
        if (!std::isfinite(double(cd[i])))
            throw InvalidArgumentError("grid_sample: non-finite coordinate at flat index " +
                                       std::to_string(i));

    const int64_t HW = H * W;
    std::vector<T> out(size_t(B * N * C), T(0));
    const T* f = features.data();
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t n = 0; n < N; ++n) {
            const T x = cd[(b * N + n) * 2 + 0];
            const T y = cd[(b * N + n) * 2 + 1];
            const int64_t x0 = int64_t(std::floor(double(x))), y0 = int64_t(std::floor(double(y)));
            const T wx = x - T(x0), wy = y - T(y0);
            const int64_t xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
            const T wxs[2] = {T(1) - wx, wx}, wys[2] = {T(1) - wy, wy};
            T* orow = out.data() + (b * N + n) * C;
            for (int iy = 0; iy < 2; ++iy) {
                if (ys[iy] < 0 || ys[iy] >= H) continue;
                for (int ix = 0; ix < 2; ++ix) {
                    if (xs[ix] < 0 || xs[ix] >= W) continue;
                    const T wgt = wys[iy] * wxs[ix];
                    if (wgt == T(0)) continue;
                    const T* base = f + b * C * HW + ys[iy] * W + xs[ix];
                    for (int64_t c = 0; c < C; ++c) orow[c] += wgt * base[c * HW];
                }
            }
        }
    }
    return make_op_result<T>(
        {B, N, C}, std::move(out), {features, coords},
        [B, C, H, W, N, HW](detail::TensorNode<T>& self) {
            auto& feat = *self.parents[0];
            auto& crd = *self.parents[1];
            if (!feat.requires_grad) return;
            feat.ensure_grad();
            const T* cd = crd.value.data();
            const T* go = self.grad.data();
            T* gf = feat.grad.data();
#pragma omp parallel for schedule(static)
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t n = 0; n < N; ++n) {
                    const T x = cd[(b * N + n) * 2 + 0];
                    const T y = cd[(b * N + n) * 2 + 1];
                    const int64_t x0 = int64_t(std::floor(double(x))),
                                  y0 = int64_t(std::floor(double(y)));
                    const T wx = x - T(x0), wy = y - T(y0);
                    const int64_t xs[2] = {x0, x0 + 1}, ys[2] = {y0, y0 + 1};
                    const T wxs[2] = {T(1) - wx, wx}, wys[2] = {T(1) - wy, wy};
                    const T* grow = go + (b * N + n) * C;
                    for (int iy = 0; iy < 2; ++iy) {
                        if (ys[iy] < 0 || ys[iy] >= H) continue;
                        for (int ix = 0; ix < 2; ++ix) {
                            if (xs[ix] < 0 || xs[ix] >= W) continue;
                            const T wgt = wys[iy] * wxs[ix];
                            if (wgt == T(0)) continue;
                            T* base = gf + b * C * HW + ys[iy] * W + xs[ix];
                            for (int64_t c = 0; c < C; ++c) base[c * HW] += wgt * grow[c];
                        }
                    }
                }
            }
        });
}

// ---- pointwise & pooling ----------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.values());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return make_op_result<T>(x.shape(), std::move(out), {x}, [](detail::TensorNode<T>& self) {
        auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const int64_t n = self.numel();
        for (int64_t i = 0; i < n; ++i)
            if (in.value[size_t(i)] > T(0)) in.grad[size_t(i)] += self.grad[size_t(i)];
    });
}

namespace {
template <class T>
void check_pool_input(const Tensor<T>& x, const char* op) {
    if (x.dim() != 4)
        throw InvalidArgumentError(std::string(op) + ": input must be [B,C,H,W], got " +
                                   shape_str(x.shape()));
    if (x.size(2) < 2 || x.size(3) < 2)
        throw InvalidArgumentError(std::string(op) + ": spatial axes must be >=2, got " +
                                   shape_str(x.shape()));
}
}  // namespace

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
    check_pool_input(x, "max_pool2d");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(size_t(B * C * Ho * Wo));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const T* in = x.data();
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* plane = in + bc * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                int64_t best = (2 * oy) * W + 2 * ox;
                T bv = plane[best];
                const int64_t cands[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                          (2 * oy + 1) * W + 2 * ox + 1};
                for (int64_t c : cands)
                    if (plane[c] > bv) {
                        bv = plane[c];
                        best = c;
                    }
                const int64_t o = bc * Ho * Wo + oy * Wo + ox;
                out[size_t(o)] = bv;
                (*argmax)[size_t(o)] = bc * H * W + best;
            }
        }
    }
    return make_op_result<T>({B, C, Ho, Wo}, std::move(out), {x},
                             [argmax](detail::TensorNode<T>& self) {
                                 auto& in = *self.parents[0];
                                 if (!in.requires_grad) return;
                                 in.ensure_grad();
                                 const int64_t n = self.numel();
                                 for (int64_t i = 0; i < n; ++i)
                                     in.grad[size_t((*argmax)[size_t(i)])] += self.grad[size_t(i)];
                             });
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
    check_pool_input(x, "avg_pool2d");
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const int64_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(size_t(B * C * Ho * Wo));
    const T* in = x.data();
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* plane = in + bc * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                const T s = plane[(2 * oy) * W + 2 * ox] + plane[(2 * oy) * W + 2 * ox + 1] +
                            plane[(2 * oy + 1) * W + 2 * ox] + plane[(2 * oy + 1) * W + 2 * ox + 1];
                out[size_t(bc * Ho * Wo + oy * Wo + ox)] = s * T(0.25);
            }
    }
    return make_op_result<T>(
        {B, C, Ho, Wo}, std::move(out), {x}, [B, C, H, W, Ho, Wo](detail::TensorNode<T>& self) {
            auto& in = *self.parents[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t oy = 0; oy < Ho; ++oy)
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        const T g = self.grad[size_t(bc * Ho * Wo + oy * Wo + ox)] * T(0.25);
                        T* plane = in.grad.data() + bc * H * W;
                        plane[(2 * oy) * W + 2 * ox] += g;
                        plane[(2 * oy) * W + 2 * ox + 1] += g;
                        plane[(2 * oy + 1) * W + 2 * ox] += g;
                        plane[(2 * oy + 1) * W + 2 * ox + 1] += g;
                    }
        });
}

template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
    if (x.dim() != 4)
        throw InvalidArgumentError("upsample2x: input must be [B,C,H,W], got " +
                                   shape_str(x.shape()));
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    std::vector<T> out(size_t(B * C * 4 * H * W));
    const T* in = x.data();
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* sp = in + bc * H * W;
        T* dp = out.data() + bc * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; ++y) {
            const T* srow = sp + (y / 2) * W;
            T* drow = dp + y * 2 * W;
            for (int64_t xx = 0; xx < 2 * W; ++xx) drow[xx] = srow[xx / 2];
        }
    }
    return make_op_result<T>(
        {B, C, 2 * H, 2 * W}, std::move(out), {x}, [B, C, H, W](detail::TensorNode<T>& self) {
            auto& in = *self.parents[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T* gp = self.grad.data() + bc * 4 * H * W;
                T* dst = in.grad.data() + bc * H * W;
                for (int64_t y = 0; y < 2 * H; ++y)
                    for (int64_t xx = 0; xx < 2 * W; ++xx)
                        dst[(y / 2) * W + xx / 2] += gp[y * 2 * W + xx];
            }
        });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.dim() != 4 || b.dim() != 4)
        throw InvalidArgumentError("concat: inputs must be [B,C,H,W]");
    if (a.size(0) != b.size(0) || a.size(2) != b.size(2) || a.size(3) != b.size(3))
        throw InvalidArgumentError("concat: non-channel axes differ, " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
    const int64_t B = a.size(0), Ca = a.size(1), Cb = b.size(1), H = a.size(2), W = a.size(3);
    const int64_t plane = H * W;
    std::vector<T> out(size_t(B * (Ca + Cb) * plane));
    for (int64_t bb = 0; bb < B; ++bb) {
        std::memcpy(out.data() + bb * (Ca + Cb) * plane, a.data() + bb * Ca * plane,
                    size_t(Ca * plane) * sizeof(T));
        std::memcpy(out.data() + (bb * (Ca + Cb) + Ca) * plane, b.data() + bb * Cb * plane,
                    size_t(Cb * plane) * sizeof(T));
    }
    return make_op_result<T>(
        {B, Ca + Cb, H, W}, std::move(out), {a, b}, [B, Ca, Cb, plane](detail::TensorNode<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (int64_t bb = 0; bb < B; ++bb) {
                const T* g = self.grad.data() + bb * (Ca + Cb) * plane;
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    T* d = pa.grad.data() + bb * Ca * plane;
                    for (int64_t i = 0; i < Ca * plane; ++i) d[i] += g[i];
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    T* d = pb.grad.data() + bb * Cb * plane;
                    for (int64_t i = 0; i < Cb * plane; ++i) d[i] += g[Ca * plane + i];
                }
            }
        });
}

// ---- reductions -------------------------------------------------------------

namespace {
template <class T>
void reduce_extents(const Tensor<T>& x, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
    if (axis < 0 || axis >= x.dim())
        throw InvalidArgumentError("reduce: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(x.shape()));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.size(i);
    n = x.size(axis);
    for (int i = axis + 1; i < x.dim(); ++i) inner *= x.size(i);
}

std::vector<int64_t> drop_axis(const std::vector<int64_t>& s, int axis) {
    std::vector<int64_t> r;
    for (int i = 0; i < int(s.size()); ++i)
        if (i != axis) r.push_back(s[size_t(i)]);
    if (r.empty()) r.push_back(1);
    return r;
}
}  // namespace

template <class T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis) {
    int64_t outer, n, inner;
    reduce_extents(x, axis, outer, n, inner);
    std::vector<T> out(size_t(outer * inner));
    auto arg = std::make_shared<std::vector<int64_t>>(out.size());
    const T* in = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            int64_t best = o * n * inner + i;
            T bv = in[best];
            for (int64_t j = 1; j < n; ++j) {
                const int64_t idx = (o * n + j) * inner + i;
                if (in[idx] > bv) {
                    bv = in[idx];
                    best = idx;
                }
            }
            out[size_t(o * inner + i)] = bv;
            (*arg)[size_t(o * inner + i)] = best;
        }
    return make_op_result<T>(drop_axis(x.shape(), axis), std::move(out), {x},
                             [arg](detail::TensorNode<T>& self) {
                                 auto& in = *self.parents[0];
                                 if (!in.requires_grad) return;
                                 in.ensure_grad();
                                 for (size_t i = 0; i < self.grad.size(); ++i)
                                     in.grad[size_t((*arg)[i])] += self.grad[i];
                             });
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis) {
    int64_t outer, n, inner;
    reduce_extents(x, axis, outer, n, inner);
    std::vector<T> out(size_t(outer * inner), T(0));
    const T* in = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t i = 0; i < inner; ++i)
                out[size_t(o * inner + i)] += in[(o * n + j) * inner + i];
    const T invn = T(1) / T(n);
    for (auto& v : out) v *= invn;
    return make_op_result<T>(drop_axis(x.shape(), axis), std::move(out), {x},
                             [outer, n, inner, invn](detail::TensorNode<T>& self) {
                                 auto& in = *self.parents[0];
                                 if (!in.requires_grad) return;
                                 in.ensure_grad();
                                 for (int64_t o = 0; o < outer; ++o)
                                     for (int64_t j = 0; j < n; ++j)
                                         for (int64_t i = 0; i < inner; ++i)
                                             in.grad[size_t((o * n + j) * inner + i)] +=
                                                 self.grad[size_t(o * inner + i)] * invn;
                             });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (const T v : x.values()) acc += v;
    return make_op_result<T>({1}, {acc}, {x}, [](detail::TensorNode<T>& self) {
        auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        const T g = self.grad[0];
        for (auto& v : in.grad) v += g;
    });
}

// ---- elementwise ------------------------------------------------------------

namespace {
template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw InvalidArgumentError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
}
}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    return make_op_result<T>(a.shape(), std::move(out), {a, b}, [](detail::TensorNode<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    return make_op_result<T>(a.shape(), std::move(out), {a, b}, [](detail::TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    std::vector<T> out(x.values());
    for (auto& v : out) v *= s;
    return make_op_result<T>(x.shape(), std::move(out), {x}, [s](detail::TensorNode<T>& self) {
        auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += s * self.grad[i];
    });
}

// ---- shape ops ---------------------------------------------------------------

namespace {

// strided gather: out[o] = in[sum_d idx_d * stride_d]; rank-3 outputs get a
// parallel blocked path (the fusion MLP permutes [K,N,C] tensors of a few
// tens of MB per step)
template <class T>
void permute_copy(const T* in, T* out, const std::vector<int64_t>& oshape,
                  const std::vector<int64_t>& ostrides_in) {
    const int nd = int(oshape.size());
    if (nd == 3) {
        const int64_t n0 = oshape[0], n1 = oshape[1], n2 = oshape[2];
        const int64_t s0 = ostrides_in[0], s1 = ostrides_in[1], s2 = ostrides_in[2];
        if (s2 > s1 && s2 > s0) {
            // innermost output axis is the most strided input axis: hoist it
            // so reads stay local
#pragma omp parallel for schedule(static)
            for (int64_t a = 0; a < n0; ++a) {
                for (int64_t c = 0; c < n2; ++c) {
                    const T* src = in + a * s0 + c * s2;
                    T* dst = out + a * n1 * n2 + c;
                    for (int64_t b = 0; b < n1; ++b) dst[b * n2] = src[b * s1];
                }
            }
            return;
        }
#pragma omp parallel for schedule(static)
        for (int64_t a = 0; a < n0; ++a) {
            T* dst = out + a * n1 * n2;
            const T* base = in + a * s0;
            for (int64_t b = 0; b < n1; ++b) {
                const T* src = base + b * s1;
                for (int64_t c = 0; c < n2; ++c) dst[c] = src[c * s2];
                dst += n2;
            }
        }
        return;
    }
    std::vector<int64_t> idx(size_t(nd), 0);
    int64_t src = 0;
    int64_t total = 1;
    for (int64_t d : oshape) total *= d;
    for (int64_t o = 0; o < total; ++o) {
        out[size_t(o)] = in[src];
        for (int d = nd - 1; d >= 0; --d) {
            idx[size_t(d)]++;
            src += ostrides_in[size_t(d)];
            if (idx[size_t(d)] < oshape[size_t(d)]) break;
            src -= ostrides_in[size_t(d)] * oshape[size_t(d)];
            idx[size_t(d)] = 0;
        }
    }
}

}  // namespace

template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
    const int nd = int(x.dim());
    if (int(axes.size()) != nd)
        throw InvalidArgumentError("permute: axes size " + std::to_string(axes.size()) +
                                   " != rank " + std::to_string(nd));
    std::vector<bool> seen(size_t(nd), false);
    for (int a : axes) {
        if (a < 0 || a >= nd || seen[size_t(a)])
            throw InvalidArgumentError("permute: invalid axis list");
        seen[size_t(a)] = true;
    }
    std::vector<int64_t> in_strides(size_t(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        in_strides[size_t(i)] = in_strides[size_t(i + 1)] * x.size(i + 1);
    std::vector<int64_t> oshape(static_cast<size_t>(nd));
    std::vector<int64_t> ostrides_in(static_cast<size_t>(nd));  // input stride per output axis
    for (int i = 0; i < nd; ++i) {
        oshape[size_t(i)] = x.size(axes[size_t(i)]);
        ostrides_in[size_t(i)] = in_strides[size_t(axes[size_t(i)])];
    }
    std::vector<T> out(static_cast<size_t>(x.numel()));
    permute_copy(x.data(), out.data(), oshape, ostrides_in);

    // backward gathers the output grad back by the inverse permutation
    std::vector<int64_t> out_strides(size_t(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        out_strides[size_t(i)] = out_strides[size_t(i + 1)] * oshape[size_t(i + 1)];
    std::vector<int64_t> ishape = x.shape();
    std::vector<int64_t> istrides_out(static_cast<size_t>(nd));
    for (int d = 0; d < nd; ++d) istrides_out[size_t(axes[size_t(d)])] = out_strides[size_t(d)];

    return make_op_result<T>(
        oshape, std::move(out), {x}, [ishape, istrides_out](detail::TensorNode<T>& self) {
            auto& in = *self.parents[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            std::vector<T> tmp(self.grad.size());
            permute_copy(self.grad.data(), tmp.data(), ishape, istrides_out);
            for (size_t i = 0; i < tmp.size(); ++i) in.grad[i] += tmp[i];
        });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> new_shape) {
    int64_t n = 1;
    for (int64_t d : new_shape) n *= d;
    if (n != x.numel())
        throw InvalidArgumentError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                   shape_str(new_shape));
    std::vector<T> out(x.values());
    return make_op_result<T>(std::move(new_shape), std::move(out), {x},
                             [](detail::TensorNode<T>& self) {
                                 auto& in = *self.parents[0];
                                 if (!in.requires_grad) return;
                                 in.ensure_grad();
                                 for (size_t i = 0; i < self.grad.size(); ++i)
                                     in.grad[i] += self.grad[i];
                             });
}

// ---- loss --------------------------------------------------------------------

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check_same_shape(pred, target, "mse_loss");
    const int64_t n = pred.numel();
    T acc = 0;
    const T* p = pred.data();
    const T* t = target.data();
    for (int64_t i = 0; i < n; ++i) {
        const T d = p[i] - t[i];
        acc += d * d;
    }
    acc /= T(n);
    return make_op_result<T>({1}, {acc}, {pred, target}, [n](detail::TensorNode<T>& self) {
        auto& p = *self.parents[0];
        auto& t = *self.parents[1];
        const T g = self.grad[0] * T(2) / T(n);
        if (p.requires_grad) {
            p.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                p.grad[size_t(i)] += g * (p.value[size_t(i)] - t.value[size_t(i)]);
        }
        if (t.requires_grad) {
            t.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                t.grad[size_t(i)] -= g * (p.value[size_t(i)] - t.value[size_t(i)]);
        }
    });
}

// ---- backward ----------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw InvalidArgumentError("backward: loss must be a defined scalar");
    auto root = loss.node();
    // iterative post-order DFS
    std::vector<detail::TensorNode<T>*> order;
    std::unordered_set<detail::TensorNode<T>*> visited;
    struct Frame {
        detail::TensorNode<T>* node;
        size_t next_child;
    };
    std::vector<Frame> stack;
    if (visited.insert(root.get()).second) stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            auto* child = f.node->parents[f.next_child++].get();
            if (visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backward_fn) {
            node->backward_fn(*node);
            node->backward_fn = nullptr;  // release the graph as we go
        }
    }
    for (auto* node : order) node->parents.clear();
}

// ---- optimizer ----------------------------------------------------------------

template <class T>
void SgdMomentum<T>::step(std::span<Tensor<T>> params, T lr) {
    for (auto& p : params) {
        if (!p.defined() || !p.has_grad()) continue;
        auto* key = p.node().get();
        auto& v = velocity_[key];
        if (v.empty()) v.assign(size_t(p.numel()), T(0));
        const auto& g = p.grad();
        T* val = p.data();
        for (size_t i = 0; i < v.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i];
            val[i] -= lr * v[i];
        }
    }
}

// ---- explicit instantiations ---------------------------------------------------

#define DIFCT_INSTANTIATE(T)                                                                  \
    template class Tensor<T>;                                                                 \
    template class SgdMomentum<T>;                                                            \
    template Tensor<T> make_op_result<T>(std::vector<int64_t>, std::vector<T>,                \
                                         std::vector<Tensor<T>>,                              \
                                         std::function<void(detail::TensorNode<T>&)>);        \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                 int);                                                        \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
    template Tensor<T> grid_sample_bilinear<T>(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> relu<T>(const Tensor<T>&);                                            \
    template Tensor<T> max_pool2d<T>(const Tensor<T>&);                                      \
    template Tensor<T> avg_pool2d<T>(const Tensor<T>&);                                      \
    template Tensor<T> upsample2x_nearest<T>(const Tensor<T>&);                              \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);               \
    template Tensor<T> reduce_max<T>(const Tensor<T>&, int);                                 \
    template Tensor<T> reduce_mean<T>(const Tensor<T>&, int);                                \
    template Tensor<T> sum<T>(const Tensor<T>&);                                             \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                        \
    template Tensor<T> permute<T>(const Tensor<T>&, std::vector<int>);                       \
    template Tensor<T> reshape<T>(const Tensor<T>&, std::vector<int64_t>);                   \
    template Tensor<T> mse_loss<T>(const Tensor<T>&, const Tensor<T>&);                      \
    template void backward<T>(const Tensor<T>&);

DIFCT_INSTANTIATE(float)
DIFCT_INSTANTIATE(double)

#undef DIFCT_INSTANTIATE

}  // namespace difct
