#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "reflecta/nnet/tensor.hpp"
#include "reflecta/rng.hpp"

namespace reflecta::nnet {

template <class Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<RowMatrix<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const RowMatrix<Real>>;

/// Upper bound on im2col buffer elements; larger convolutions are done in row bands.
inline constexpr std::size_t kIm2colBudget = std::size_t(1) << 22;

namespace detail {

// Rows y0..y0+rows-1 of the output, for one batch item. cols is (C*kh*kw) x (rows*wo).
template <class Real>
void im2col(const Real* in, int c, int h, int w, int kh, int kw, int y0, int rows, Real* cols)
{
    const int wo = w - kw + 1;
    const std::size_t span = std::size_t(rows) * wo;
    std::size_t r = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx, ++r) {
                Real* dst = cols + r * span;
                for (int y = 0; y < rows; ++y) {
                    const Real* src = in + (std::size_t(ch) * h + (y0 + y + ky)) * w + kx;
                    std::copy_n(src, wo, dst + std::size_t(y) * wo);
                }
            }
}

template <class Real>
void col2im(const Real* cols, int c, int h, int w, int kh, int kw, int y0, int rows, Real* in)
{
    const int wo = w - kw + 1;
    const std::size_t span = std::size_t(rows) * wo;
    std::size_t r = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx, ++r) {
                const Real* src = cols + r * span;
                for (int y = 0; y < rows; ++y) {
                    Real* dst = in + (std::size_t(ch) * h + (y0 + y + ky)) * w + kx;
                    const Real* s = src + std::size_t(y) * wo;
                    for (int x = 0; x < wo; ++x)
                        dst[x] += s[x];
                }
            }
}

inline int band_rows(std::size_t patch, int wo, int ho)
{
    const std::size_t per_row = std::max<std::size_t>(1, patch * std::size_t(wo));
    return int(std::clamp<std::size_t>(kIm2colBudget / per_row, 1, std::size_t(ho)));
}

} // namespace detail

/// Valid cross-correlation. weights is (out, in, kh, kw); bias has `out` entries.
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& in, const Tensor<Real>& weights, const std::vector<Real>& bias)
{
    if (in.c != weights.c)
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                         std::to_string(weights.c));
    if (weights.h > in.h || weights.w > in.w)
        throw ShapeError("conv2d: kernel " + std::to_string(weights.h) + "x" + std::to_string(weights.w) +
                         " larger than input " + in.shape_string());
    const int m = weights.n, kh = weights.h, kw = weights.w;
    const int ho = in.h - kh + 1, wo = in.w - kw + 1;
    const std::size_t patch = std::size_t(in.c) * kh * kw;
    Tensor<Real> out(in.n, m, ho, wo);
    const ConstMatMap<Real> wmat(weights.data.data(), m, Eigen::Index(patch));
    const Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> b(bias.data(), m);
    const int band = detail::band_rows(patch, wo, ho);
    std::vector<Real> cols(patch * std::size_t(band) * wo);
    RowMatrix<Real> res;
    for (int item = 0; item < in.n; ++item) {
        for (int y0 = 0; y0 < ho; y0 += band) {
            const int rows = std::min(band, ho - y0);
            const Eigen::Index span = Eigen::Index(rows) * wo;
            detail::im2col(in.item_ptr(item), in.c, in.h, in.w, kh, kw, y0, rows, cols.data());
            const ConstMatMap<Real> cm(cols.data(), Eigen::Index(patch), span);
            res.noalias() = wmat * cm;
            res.colwise() += b;
            for (int o = 0; o < m; ++o)
                std::copy_n(res.row(o).data(), span, &out(item, o, y0, 0));
        }
    }
    return out;
}

/// Accumulates dW and db; returns dL/dinput when `want_input` is set (else an empty tensor).
template <class Real>
Tensor<Real> conv2d_backward(const Tensor<Real>& in, const Tensor<Real>& weights, const Tensor<Real>& grad_out,
                             Tensor<Real>& grad_w, std::vector<Real>& grad_b, bool want_input)
{
    const int m = weights.n, kh = weights.h, kw = weights.w;
    const int ho = grad_out.h, wo = grad_out.w;
    const std::size_t patch = std::size_t(in.c) * kh * kw;
    const ConstMatMap<Real> wmat(weights.data.data(), m, Eigen::Index(patch));
    MatMap<Real> gw(grad_w.data.data(), m, Eigen::Index(patch));
    Tensor<Real> grad_in;
    if (want_input)
        grad_in = Tensor<Real>(in.n, in.c, in.h, in.w);
    const int band = detail::band_rows(patch, wo, ho);
    std::vector<Real> cols(patch * std::size_t(band) * wo);
    RowMatrix<Real> g, dcols;
    for (int item = 0; item < in.n; ++item) {
        for (int y0 = 0; y0 < ho; y0 += band) {
            const int rows = std::min(band, ho - y0);
            const Eigen::Index span = Eigen::Index(rows) * wo;
            g.resize(m, span);
            for (int o = 0; o < m; ++o)
                std::copy_n(grad_out.data.data() + grad_out.index(item, o, y0, 0), span, g.row(o).data());
            detail::im2col(in.item_ptr(item), in.c, in.h, in.w, kh, kw, y0, rows, cols.data());
            const ConstMatMap<Real> cm(cols.data(), Eigen::Index(patch), span);
            gw.noalias() += g * cm.transpose();
            for (int o = 0; o < m; ++o)
                grad_b[std::size_t(o)] += g.row(o).sum();
            if (want_input) {
                dcols.noalias() = wmat.transpose() * g;
                detail::col2im(dcols.data(), in.c, in.h, in.w, kh, kw, y0, rows, grad_in.item_ptr(item));
            }
        }
    }
    return grad_in;
}

/// Elementwise max over consecutive groups of `group` maps. `argmax` receives
/// the winning input index for each output element.
template <class Real>
Tensor<Real> maxout(const Tensor<Real>& in, int group, std::vector<std::uint32_t>* argmax = nullptr)
{
    if (group < 1 || in.c % group)
        throw ShapeError("maxout: " + std::to_string(in.c) + " maps not divisible by group " + std::to_string(group));
    Tensor<Real> out(in.n, in.c / group, in.h, in.w);
    if (argmax)
        argmax->resize(out.size());
    const std::size_t pl = in.plane();
    std::size_t o = 0;
    for (int b = 0; b < in.n; ++b)
        for (int oc = 0; oc < out.c; ++oc) {
            const std::size_t base = in.index(b, oc * group, 0, 0);
            for (std::size_t p = 0; p < pl; ++p, ++o) {
                std::size_t best = base + p;
                for (int k = 1; k < group; ++k) {
                    const std::size_t i = base + std::size_t(k) * pl + p;
                    if (in.data[i] > in.data[best])
                        best = i;
                }
                out.data[o] = in.data[best];
                if (argmax)
                    (*argmax)[o] = std::uint32_t(best);
            }
        }
    return out;
}

/// Scatter output gradients back to the recorded winners.
template <class Real>
Tensor<Real> route_backward(const Tensor<Real>& grad_out, const std::vector<std::uint32_t>& argmax, int n, int c, int h,
                            int w)
{
    Tensor<Real> g(n, c, h, w);
    for (std::size_t i = 0; i < grad_out.size(); ++i)
        g.data[argmax[i]] += grad_out.data[i];
    return g;
}

/// Sliding-window max; output dims floor((H - window) / stride) + 1.
template <class Real>
Tensor<Real> maxpool(const Tensor<Real>& in, int window, int stride, std::vector<std::uint32_t>* argmax = nullptr)
{
    if (window < 1 || stride < 1)
        throw ShapeError("maxpool: window and stride must be >= 1");
    if (window > in.h || window > in.w)
        throw ShapeError("maxpool: window " + std::to_string(window) + " larger than input " + in.shape_string());
    const int ho = (in.h - window) / stride + 1, wo = (in.w - window) / stride + 1;
    Tensor<Real> out(in.n, in.c, ho, wo);
    if (argmax)
        argmax->resize(out.size());
    std::size_t o = 0;
    for (int b = 0; b < in.n; ++b)
        for (int ch = 0; ch < in.c; ++ch)
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x, ++o) {
                    std::size_t best = in.index(b, ch, y * stride, x * stride);
                    for (int dy = 0; dy < window; ++dy)
                        for (int dx = 0; dx < window; ++dx) {
                            const std::size_t i = in.index(b, ch, y * stride + dy, x * stride + dx);
                            if (in.data[i] > in.data[best])
                                best = i;
                        }
                    out.data[o] = in.data[best];
                    if (argmax)
                        (*argmax)[o] = std::uint32_t(best);
                }
    return out;
}

/// Inverted dropout: kept units are scaled by 1 / (1 - rate). `mask` receives the multipliers.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& in, double rate, Rng& rng, std::vector<Real>& mask)
{
    if (!(rate >= 0.0 && rate < 1.0))
        throw Error("dropout: rate must be in [0, 1)");
    const Real keep = Real(1.0 / (1.0 - rate));
    mask.resize(in.size());
    Tensor<Real> out = in;
    for (std::size_t i = 0; i < in.size(); ++i) {
        mask[i] = uniform01(rng) < rate ? Real(0) : keep;
        out.data[i] *= mask[i];
    }
    return out;
}

/// Average over non-overlapping f x f blocks; trailing rows/cols that do not fill a block are dropped.
template <class Real>
Tensor<Real> downsample(const Tensor<Real>& in, int f)
{
    if (f < 1 || in.h < f || in.w < f)
        throw ShapeError("downsample: factor " + std::to_string(f) + " too large for " + in.shape_string());
    Tensor<Real> out(in.n, in.c, in.h / f, in.w / f);
    const Real inv = Real(1) / Real(f * f);
    for (int b = 0; b < in.n; ++b)
        for (int ch = 0; ch < in.c; ++ch)
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x) {
                    Real s = 0;
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx)
                            s += in(b, ch, y * f + dy, x * f + dx);
                    out(b, ch, y, x) = s * inv;
                }
    return out;
}

template <class Real>
Tensor<Real> downsample_backward(const Tensor<Real>& g, int f, int h, int w)
{
    Tensor<Real> out(g.n, g.c, h, w);
    const Real inv = Real(1) / Real(f * f);
    for (int b = 0; b < g.n; ++b)
        for (int ch = 0; ch < g.c; ++ch)
            for (int y = 0; y < g.h; ++y)
                for (int x = 0; x < g.w; ++x)
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx)
                            out(b, ch, y * f + dy, x * f + dx) = g(b, ch, y, x) * inv;
    return out;
}

/// Nearest-neighbour upsampling by an integer factor.
template <class Real>
Tensor<Real> upsample(const Tensor<Real>& in, int f)
{
    if (f < 1)
        throw ShapeError("upsample: factor must be >= 1");
    Tensor<Real> out(in.n, in.c, in.h * f, in.w * f);
    for (int b = 0; b < in.n; ++b)
        for (int ch = 0; ch < in.c; ++ch)
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x)
                    out(b, ch, y, x) = in(b, ch, y / f, x / f);
    return out;
}

template <class Real>
Tensor<Real> upsample_backward(const Tensor<Real>& g, int f)
{
    Tensor<Real> out(g.n, g.c, g.h / f, g.w / f);
    for (int b = 0; b < g.n; ++b)
        for (int ch = 0; ch < g.c; ++ch)
            for (int y = 0; y < g.h; ++y)
                for (int x = 0; x < g.w; ++x)
                    out(b, ch, y / f, x / f) += g(b, ch, y, x);
    return out;
}

/// Channel concatenation after cropping every input to the smallest spatial extent.
template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts)
{
    if (parts.empty())
        throw ShapeError("concat: no inputs");
    int h = parts[0].h, w = parts[0].w, c = 0;
    for (const auto& p : parts) {
        if (p.n != parts[0].n)
            throw ShapeError("concat: batch sizes differ");
        h = std::min(h, p.h);
        w = std::min(w, p.w);
        c += p.c;
    }
    Tensor<Real> out(parts[0].n, c, h, w);
    int off = 0;
    for (const auto& p : parts) {
        const Tensor<Real> cp = (p.h == h && p.w == w) ? p : center_crop(p, h, w);
        for (int b = 0; b < p.n; ++b)
            std::copy_n(cp.item_ptr(b), cp.item(), &out(b, off, 0, 0));
        off += p.c;
    }
    return out;
}

/// Softmax over channels at every position.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& logits)
{
    Tensor<Real> out(logits.n, logits.c, logits.h, logits.w);
    for (int b = 0; b < logits.n; ++b)
        for (int y = 0; y < logits.h; ++y)
            for (int x = 0; x < logits.w; ++x) {
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int ch = 0; ch < logits.c; ++ch)
                    mx = std::max(mx, logits(b, ch, y, x));
                Real s = 0;
                for (int ch = 0; ch < logits.c; ++ch)
                    s += (out(b, ch, y, x) = std::exp(logits(b, ch, y, x) - mx));
                for (int ch = 0; ch < logits.c; ++ch)
                    out(b, ch, y, x) /= s;
            }
    return out;
}

/// Mean negative log likelihood over all positions; fills dL/dlogits.
/// labels holds one class index per (batch, y, x), in that order.
template <class Real>
double nll_loss(const Tensor<Real>& logits, const std::vector<int>& labels, Tensor<Real>& grad_logits)
{
    const std::size_t positions = std::size_t(logits.n) * logits.h * logits.w;
    if (labels.size() != positions)
        throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(positions) +
                         " output positions");
    const Tensor<Real> p = softmax(logits);
    grad_logits = p;
    double loss = 0;
    const Real inv = Real(1) / Real(positions);
    std::size_t k = 0;
    for (int b = 0; b < logits.n; ++b)
        for (int y = 0; y < logits.h; ++y)
            for (int x = 0; x < logits.w; ++x, ++k) {
                const int l = labels[k];
                if (l < 0 || l >= logits.c)
                    throw Error("nll_loss: label out of range");
                // log p computed from logits for accuracy.
                Real mx = -std::numeric_limits<Real>::infinity();
                for (int ch = 0; ch < logits.c; ++ch)
                    mx = std::max(mx, logits(b, ch, y, x));
                double s = 0;
                for (int ch = 0; ch < logits.c; ++ch)
                    s += std::exp(double(logits(b, ch, y, x) - mx));
                loss -= double(logits(b, l, y, x) - mx) - std::log(s);
                grad_logits(b, l, y, x) -= Real(1);
                for (int ch = 0; ch < logits.c; ++ch)
                    grad_logits(b, ch, y, x) *= inv;
            }
    return loss / double(positions);
}

} // namespace reflecta::nnet
