#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "reflecta/error.hpp"

namespace reflecta {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

inline Vec3 to_vec(const Index3& p) { return {double(p[0]), double(p[1]), double(p[2])}; }

/// One scalar channel on a regular grid.
///
/// Voxels are stored with x fastest: index = x + X * (y + Y * z), the same
/// order as NIfTI. Axis 0 is always the left-right axis after loading; the
/// `lr_axis` tag exists for volumes built by hand with another layout.
class Volume3D {
public:
    Volume3D() = default;

    explicit Volume3D(Index3 dims, Vec3 spacing = {1.0, 1.0, 1.0}, float fill = 0.0f)
        : dims_(dims), spacing_(spacing)
    {
        validate_geometry();
        data_.assign(voxel_count(), fill);
    }

    Volume3D(Index3 dims, Vec3 spacing, std::vector<float> data)
        : dims_(dims), spacing_(spacing), data_(std::move(data))
    {
        validate_geometry();
        if (data_.size() != voxel_count())
            throw ShapeError("volume data length " + std::to_string(data_.size()) +
                             " does not match dims product " + std::to_string(voxel_count()));
    }

    const Index3& dims() const noexcept { return dims_; }
    int dim(int axis) const noexcept { return dims_[axis]; }
    const Vec3& spacing() const noexcept { return spacing_; }
    int lr_axis() const noexcept { return lr_axis_; }
    void set_lr_axis(int axis)
    {
        if (axis < 0 || axis > 2)
            throw ShapeError("left-right axis must be 0, 1 or 2");
        lr_axis_ = axis;
    }

    std::size_t voxel_count() const noexcept
    {
        return std::size_t(dims_[0]) * std::size_t(dims_[1]) * std::size_t(dims_[2]);
    }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t index(int x, int y, int z) const noexcept
    {
        return std::size_t(x) + std::size_t(dims_[0]) * (std::size_t(y) + std::size_t(dims_[1]) * std::size_t(z));
    }
    Index3 coords(std::size_t i) const noexcept
    {
        const auto X = std::size_t(dims_[0]), Y = std::size_t(dims_[1]);
        return {int(i % X), int((i / X) % Y), int(i / (X * Y))};
    }
    bool contains(int x, int y, int z) const noexcept
    {
        return x >= 0 && y >= 0 && z >= 0 && x < dims_[0] && y < dims_[1] && z < dims_[2];
    }

    float& operator()(int x, int y, int z) noexcept { return data_[index(x, y, z)]; }
    float operator()(int x, int y, int z) const noexcept { return data_[index(x, y, z)]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    // Zero outside the grid.
    float at_or_zero(int x, int y, int z) const noexcept
    {
        return contains(x, y, z) ? data_[index(x, y, z)] : 0.0f;
    }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }

    bool same_grid(const Volume3D& other) const noexcept
    {
        return dims_ == other.dims_ && spacing_ == other.spacing_;
    }

    bool operator==(const Volume3D& other) const
    {
        return dims_ == other.dims_ && spacing_ == other.spacing_ && data_ == other.data_;
    }

    bool all_finite() const noexcept
    {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

private:
    void validate_geometry() const
    {
        for (int a = 0; a < 3; ++a) {
            if (dims_[a] <= 0)
                throw ShapeError("volume dims must be positive");
            if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a]))
                throw ShapeError("volume spacing must be positive");
        }
    }

    Index3 dims_{0, 0, 0};
    Vec3 spacing_{1.0, 1.0, 1.0};
    int lr_axis_ = 0;
    std::vector<float> data_;
};

inline void require_same_grid(const Volume3D& a, const Volume3D& b, const char* what)
{
    if (a.dims() != b.dims())
        throw ShapeError(std::string(what) + ": grid mismatch (" + std::to_string(a.dim(0)) + "x" +
                         std::to_string(a.dim(1)) + "x" + std::to_string(a.dim(2)) + " vs " +
                         std::to_string(b.dim(0)) + "x" + std::to_string(b.dim(1)) + "x" +
                         std::to_string(b.dim(2)) + ")");
}

/// R co-registered channels plus optional labels and brain mask.
struct MultiModalImage {
    std::vector<Volume3D> channels;
    std::vector<std::string> channel_names;
    std::optional<Volume3D> labels;
    std::optional<Volume3D> brain_mask;

    std::size_t channel_count() const noexcept { return channels.size(); }
    const Index3& dims() const { return channels.at(0).dims(); }

    const Volume3D& channel(const std::string& name) const
    {
        for (std::size_t i = 0; i < channels.size(); ++i)
            if (channel_names[i] == name)
                return channels[i];
        throw Error("no channel named '" + name + "'");
    }

    std::size_t channel_index(const std::string& name) const
    {
        for (std::size_t i = 0; i < channels.size(); ++i)
            if (channel_names[i] == name)
                return i;
        throw Error("no channel named '" + name + "'");
    }

    void validate() const
    {
        if (channels.empty())
            throw ShapeError("image needs at least one channel");
        if (channel_names.size() != channels.size())
            throw ShapeError("channel name count does not match channel count");
        for (const auto& c : channels)
            if (!c.same_grid(channels.front()))
                throw ShapeError("channels must share dims and spacing");
        if (labels && labels->dims() != dims())
            throw ShapeError("label volume dims differ from channels");
        if (brain_mask && brain_mask->dims() != dims())
            throw ShapeError("brain mask dims differ from channels");
    }
};

/// Mirror along the left-right axis: out(x) = in(X-1-x).
inline Volume3D reflect_x(const Volume3D& vol)
{
    Volume3D out = vol;
    const int ax = vol.lr_axis();
    const auto& d = vol.dims();
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                Index3 src{x, y, z};
                src[ax] = d[ax] - 1 - src[ax];
                out(x, y, z) = vol(src[0], src[1], src[2]);
            }
    return out;
}

// Region used for standardization: mask > 0.5 if given, otherwise nonzero voxels.
inline std::vector<char> standardization_region(const Volume3D& vol, const Volume3D* mask)
{
    std::vector<char> region(vol.voxel_count());
    if (mask) {
        require_same_grid(vol, *mask, "standardize");
        for (std::size_t i = 0; i < region.size(); ++i)
            region[i] = (*mask)[i] > 0.5f;
    } else {
        for (std::size_t i = 0; i < region.size(); ++i)
            region[i] = vol[i] != 0.0f;
    }
    return region;
}

struct RegionStats {
    double mean = 0.0, sd = 0.0;
};

/// Mean and population sd over the standardization region.
inline RegionStats region_stats(const Volume3D& vol, const std::vector<char>& region)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < region.size(); ++i)
        if (region[i]) {
            sum += vol[i];
            ++n;
        }
    if (n == 0)
        throw NumericError("standardize: empty region");
    const double mean = sum / double(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < region.size(); ++i)
        if (region[i]) {
            const double d = vol[i] - mean;
            ss += d * d;
        }
    const double sd = std::sqrt(ss / double(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
        throw NumericError("standardize: zero variance in region");
    return {mean, sd};
}

/// Zero-mean, unit-variance over the region; zero outside it.
inline Volume3D standardize(const Volume3D& vol, const Volume3D* mask = nullptr)
{
    const auto region = standardization_region(vol, mask);
    const auto [mean, sd] = region_stats(vol, region);

    Volume3D out(vol.dims(), vol.spacing());
    out.set_lr_axis(vol.lr_axis());
    for (std::size_t i = 0; i < region.size(); ++i)
        out[i] = region[i] ? float((vol[i] - mean) / sd) : 0.0f;
    return out;
}

inline Volume3D standardize(const Volume3D& vol, const std::optional<Volume3D>& mask)
{
    return standardize(vol, mask ? &*mask : nullptr);
}

/// Trilinear interpolation at a continuous voxel coordinate; zero outside.
inline double sample_trilinear(const Volume3D& vol, const Vec3& p)
{
    const double fx = std::floor(p[0]), fy = std::floor(p[1]), fz = std::floor(p[2]);
    const int x0 = int(fx), y0 = int(fy), z0 = int(fz);
    const double tx = p[0] - fx, ty = p[1] - fy, tz = p[2] - fz;
    const auto& d = vol.dims();

    // Fast path when all eight neighbours are inside.
    if (x0 >= 0 && y0 >= 0 && z0 >= 0 && x0 + 1 < d[0] && y0 + 1 < d[1] && z0 + 1 < d[2]) {
        const std::size_t sx = 1, sy = std::size_t(d[0]), sz = std::size_t(d[0]) * std::size_t(d[1]);
        const std::size_t i = vol.index(x0, y0, z0);
        const double c00 = vol[i] + tx * (double(vol[i + sx]) - vol[i]);
        const double c10 = vol[i + sy] + tx * (double(vol[i + sy + sx]) - vol[i + sy]);
        const double c01 = vol[i + sz] + tx * (double(vol[i + sz + sx]) - vol[i + sz]);
        const double c11 = vol[i + sz + sy] + tx * (double(vol[i + sz + sy + sx]) - vol[i + sz + sy]);
        const double c0 = c00 + ty * (c10 - c00);
        const double c1 = c01 + ty * (c11 - c01);
        return c0 + tz * (c1 - c0);
    }
    if (!(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2])))
        return 0.0;
    if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= d[0] || y0 >= d[1] || z0 >= d[2])
        return 0.0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
                acc += w * vol.at_or_zero(x0 + dx, y0 + dy, z0 + dz);
            }
    return acc;
}

/// Value and spatial gradient of the trilinear interpolant.
inline double sample_trilinear_grad(const Volume3D& vol, const Vec3& p, Vec3& grad)
{
    const double fx = std::floor(p[0]), fy = std::floor(p[1]), fz = std::floor(p[2]);
    const int x0 = int(fx), y0 = int(fy), z0 = int(fz);
    const double tx = p[0] - fx, ty = p[1] - fy, tz = p[2] - fz;
    grad = {0.0, 0.0, 0.0};
    const auto& d = vol.dims();
    if (!(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2])) || x0 < -1 || y0 < -1 ||
        z0 < -1 || x0 >= d[0] || y0 >= d[1] || z0 >= d[2])
        return 0.0;
    double c[2][2][2];
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                c[dz][dy][dx] = vol.at_or_zero(x0 + dx, y0 + dy, z0 + dz);
    double value = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? tx : 1 - tx, wy = dy ? ty : 1 - ty, wz = dz ? tz : 1 - tz;
                const double v = c[dz][dy][dx];
                value += wx * wy * wz * v;
                grad[0] += (dx ? 1.0 : -1.0) * wy * wz * v;
                grad[1] += wx * (dy ? 1.0 : -1.0) * wz * v;
                grad[2] += wx * wy * (dz ? 1.0 : -1.0) * v;
            }
    return value;
}

// Count of voxels > 0.5.
inline std::size_t count_foreground(const Volume3D& mask)
{
    return std::size_t(std::count_if(mask.data().begin(), mask.data().end(), [](float v) { return v > 0.5f; }));
}

} // namespace reflecta
