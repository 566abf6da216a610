#pragma once

#include <cmath>
#include <vector>

#include "reflecta/volume.hpp"

namespace reflecta {

inline std::vector<double> gaussian_kernel(double sigma)
{
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k)
        v /= sum;
    return k;
}

/// Separable Gaussian blur. Near the border the truncated kernel is
/// renormalized, so constants stay constant.
inline Volume3D gaussian_smooth(const Volume3D& vol, double sigma)
{
    if (sigma <= 0.0)
        return vol;
    const auto k = gaussian_kernel(sigma);
    const int r = int(k.size() / 2);
    const auto& d = vol.dims();
    std::vector<double> a(vol.data().begin(), vol.data().end());
    std::vector<double> b(a.size());
    const std::size_t stride[3] = {1, std::size_t(d[0]), std::size_t(d[0]) * std::size_t(d[1])};

    for (int axis = 0; axis < 3; ++axis) {
        const int n = d[axis];
        if (n == 1) {
            continue;
        }
        const std::size_t s = stride[axis];
        for (int z = 0; z < d[2]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[0]; ++x) {
                    const int c[3] = {x, y, z};
                    const int pos = c[axis];
                    const std::size_t i = vol.index(x, y, z);
                    double acc = 0.0, wsum = 0.0;
                    const int lo = std::max(-r, -pos), hi = std::min(r, n - 1 - pos);
                    for (int t = lo; t <= hi; ++t) {
                        const double w = k[t + r];
                        acc += w * a[std::size_t(std::ptrdiff_t(i) + std::ptrdiff_t(t) * std::ptrdiff_t(s))];
                        wsum += w;
                    }
                    b[i] = acc / wsum;
                }
        std::swap(a, b);
    }
    Volume3D out(vol.dims(), vol.spacing());
    out.set_lr_axis(vol.lr_axis());
    for (std::size_t i = 0; i < a.size(); ++i)
        out[i] = float(a[i]);
    return out;
}

inline Index3 downsampled_dims(const Index3& dims, int factor)
{
    return {(dims[0] - 1) / factor + 1, (dims[1] - 1) / factor + 1, (dims[2] - 1) / factor + 1};
}

/// Pre-smooth then keep every `factor`-th voxel. Coarse voxel i sits at
/// fine coordinate factor * i.
inline Volume3D downsample(const Volume3D& vol, int factor)
{
    if (factor <= 1)
        return vol;
    const Volume3D smooth = gaussian_smooth(vol, 0.5 * factor);
    const Index3 nd = downsampled_dims(vol.dims(), factor);
    const auto& sp = vol.spacing();
    Volume3D out(nd, {sp[0] * factor, sp[1] * factor, sp[2] * factor});
    out.set_lr_axis(vol.lr_axis());
    for (int z = 0; z < nd[2]; ++z)
        for (int y = 0; y < nd[1]; ++y)
            for (int x = 0; x < nd[0]; ++x)
                out(x, y, z) = smooth(x * factor, y * factor, z * factor);
    return out;
}

} // namespace reflecta
