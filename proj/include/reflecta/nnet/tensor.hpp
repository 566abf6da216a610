#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "reflecta/error.hpp"

namespace reflecta::nnet {

/// Dense (batch, channels, height, width) array, row-major with width fastest.
template <class Real>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<Real> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, Real fill = Real(0)) : n(n_), c(c_), h(h_), w(w_)
    {
        if (n < 0 || c < 0 || h < 0 || w < 0)
            throw ShapeError("tensor: negative dimension");
        data.assign(std::size_t(n) * c * h * w, fill);
    }

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return std::size_t(h) * w; }
    std::size_t item() const { return std::size_t(c) * h * w; }

    std::size_t index(int b, int ch, int y, int x) const
    {
        return ((std::size_t(b) * c + ch) * h + y) * w + x;
    }
    Real& operator()(int b, int ch, int y, int x) { return data[index(b, ch, y, x)]; }
    Real operator()(int b, int ch, int y, int x) const { return data[index(b, ch, y, x)]; }

    Real* item_ptr(int b) { return data.data() + std::size_t(b) * item(); }
    const Real* item_ptr(int b) const { return data.data() + std::size_t(b) * item(); }

    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    bool all_finite() const
    {
        return std::all_of(data.begin(), data.end(), [](Real v) { return std::isfinite(v); });
    }

    std::string shape_string() const
    {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }

    template <class Other>
    Tensor<Other> cast() const
    {
        Tensor<Other> t(n, c, h, w);
        std::copy(data.begin(), data.end(), t.data.begin());
        return t;
    }
};

/// Central h x w window of every map. The size difference must be even.
template <class Real>
Tensor<Real> center_crop(const Tensor<Real>& in, int h, int w)
{
    if (h > in.h || w > in.w || (in.h - h) % 2 || (in.w - w) % 2)
        throw ShapeError("center_crop: cannot crop " + in.shape_string() + " to " + std::to_string(h) + "x" +
                         std::to_string(w));
    const int oy = (in.h - h) / 2, ox = (in.w - w) / 2;
    Tensor<Real> out(in.n, in.c, h, w);
    for (int b = 0; b < in.n; ++b)
        for (int ch = 0; ch < in.c; ++ch)
            for (int y = 0; y < h; ++y)
                std::copy_n(&in.data[in.index(b, ch, y + oy, ox)], w, &out.data[out.index(b, ch, y, 0)]);
    return out;
}

/// Adjoint of center_crop: embed the gradient of the crop into a zero tensor.
template <class Real>
Tensor<Real> uncrop(const Tensor<Real>& g, int h, int w)
{
    const int oy = (h - g.h) / 2, ox = (w - g.w) / 2;
    Tensor<Real> out(g.n, g.c, h, w);
    for (int b = 0; b < g.n; ++b)
        for (int ch = 0; ch < g.c; ++ch)
            for (int y = 0; y < g.h; ++y)
                std::copy_n(&g.data[g.index(b, ch, y, 0)], g.w, &out.data[out.index(b, ch, y + oy, ox)]);
    return out;
}

} // namespace reflecta::nnet
