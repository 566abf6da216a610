#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <optional>
#include <string>

#include "reflecta/error.hpp"
#include "reflecta/filter.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 identity3()
{
    return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
}

inline Vec3 operator*(const Mat3& m, const Vec3& v)
{
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

inline Mat3 operator*(const Mat3& a, const Mat3& b)
{
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                c[i][j] += a[i][k] * b[k][j];
    return c;
}

inline double determinant(const Mat3& m)
{
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

/// x -> linear * x + translation, in continuous voxel coordinates.
struct AffineTransform {
    Mat3 linear = identity3();
    Vec3 translation{0.0, 0.0, 0.0};

    static AffineTransform identity() { return {}; }
    static AffineTransform translate(const Vec3& t) { return {identity3(), t}; }

    Vec3 operator()(const Vec3& p) const { return linear * p + translation; }

    bool is_finite() const
    {
        for (const auto& row : linear)
            for (double v : row)
                if (!std::isfinite(v))
                    return false;
        return std::isfinite(translation[0]) && std::isfinite(translation[1]) && std::isfinite(translation[2]);
    }
};

inline Vec3 apply_affine(const AffineTransform& a, const Vec3& p) { return a(p); }

/// compose(a, b)(p) == a(b(p)).
inline AffineTransform compose_affine(const AffineTransform& a, const AffineTransform& b)
{
    return {a.linear * b.linear, a.linear * b.translation + a.translation};
}

inline AffineTransform invert_affine(const AffineTransform& a)
{
    const Mat3& m = a.linear;
    const double det = determinant(m);
    if (!(std::abs(det) > 1e-12) || !std::isfinite(det))
        throw NumericError("affine transform is singular (det=" + std::to_string(det) + ")");
    Mat3 inv;
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    const Vec3 t = inv * a.translation;
    return {inv, {-t[0], -t[1], -t[2]}};
}

/// Rotation by Euler angles (radians) applied as Rz * Ry * Rx.
inline Mat3 euler_rotation(double ax, double ay, double az)
{
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
    const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
    return rz * (ry * rx);
}

/// Linear map about a centre: p -> m (p - c) + c + t.
inline AffineTransform about_center(const Mat3& m, const Vec3& center, const Vec3& t)
{
    const Vec3 mc = m * center;
    return {m, {center[0] - mc[0] + t[0], center[1] - mc[1] + t[1], center[2] - mc[2] + t[2]}};
}

/// Express a transform estimated on a grid downsampled by `factor` in the
/// coordinates of the fine grid (fine = factor * coarse).
inline AffineTransform rescale_affine(const AffineTransform& a, double factor)
{
    return {a.linear, factor * a.translation};
}

/// Dense per-voxel displacement field; p maps to p + d(p).
class DeformationField {
public:
    DeformationField() = default;
    explicit DeformationField(Index3 dims)
        : comp_{Volume3D(dims), Volume3D(dims), Volume3D(dims)}
    {
    }
    DeformationField(Volume3D dx, Volume3D dy, Volume3D dz)
        : comp_{std::move(dx), std::move(dy), std::move(dz)}
    {
        require_same_grid(comp_[0], comp_[1], "deformation field");
        require_same_grid(comp_[0], comp_[2], "deformation field");
    }

    const Index3& dims() const { return comp_[0].dims(); }
    Volume3D& component(int axis) { return comp_[axis]; }
    const Volume3D& component(int axis) const { return comp_[axis]; }

    Vec3 at(int x, int y, int z) const
    {
        return {comp_[0](x, y, z), comp_[1](x, y, z), comp_[2](x, y, z)};
    }
    void set(int x, int y, int z, const Vec3& v)
    {
        for (int a = 0; a < 3; ++a)
            comp_[a](x, y, z) = float(v[a]);
    }

    /// Trilinear displacement with coordinates clamped to the grid, so the
    /// field extends as a constant beyond the border.
    Vec3 sample(const Vec3& p) const
    {
        const auto& d = dims();
        Vec3 q;
        for (int a = 0; a < 3; ++a)
            q[a] = std::isfinite(p[a]) ? std::clamp(p[a], 0.0, double(d[a] - 1)) : 0.0;
        return {sample_trilinear(comp_[0], q), sample_trilinear(comp_[1], q), sample_trilinear(comp_[2], q)};
    }

    Vec3 operator()(const Vec3& p) const { return p + sample(p); }

    double max_norm() const
    {
        double m = 0.0;
        for (std::size_t i = 0; i < comp_[0].voxel_count(); ++i)
            m = std::max(m, std::sqrt(double(comp_[0][i]) * comp_[0][i] + double(comp_[1][i]) * comp_[1][i] +
                                      double(comp_[2][i]) * comp_[2][i]));
        return m;
    }

    bool is_finite() const { return comp_[0].all_finite() && comp_[1].all_finite() && comp_[2].all_finite(); }

    DeformationField& operator*=(double s)
    {
        for (auto& c : comp_)
            for (auto& v : c.data())
                v = float(v * s);
        return *this;
    }

private:
    std::array<Volume3D, 3> comp_;
};

/// (outer o inner)(p) = outer(inner(p)), both on the same grid.
inline DeformationField compose_fields(const DeformationField& outer, const DeformationField& inner)
{
    if (outer.dims() != inner.dims())
        throw ShapeError("compose_fields: grid mismatch");
    const auto& d = inner.dims();
    DeformationField out(d);
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const Vec3 u = inner.at(x, y, z);
                const Vec3 p{x + u[0], y + u[1], z + u[2]};
                out.set(x, y, z, u + outer.sample(p));
            }
    return out;
}

/// Flow of a stationary velocity field for unit time via scaling and squaring.
inline DeformationField exponentiate_velocity(const DeformationField& velocity, int steps = 6)
{
    if (steps < 1)
        throw Error("exponentiate_velocity: steps must be >= 1");
    DeformationField e = velocity;
    e *= std::ldexp(1.0, -steps);
    for (int s = 0; s < steps; ++s)
        e = compose_fields(e, e);
    return e;
}

/// Smallest determinant of the Jacobian of p -> p + d(p), by central
/// differences over interior voxels.
inline double min_jacobian_determinant(const DeformationField& f)
{
    const auto& d = f.dims();
    double best = std::numeric_limits<double>::infinity();
    for (int z = 1; z + 1 < d[2]; ++z)
        for (int y = 1; y + 1 < d[1]; ++y)
            for (int x = 1; x + 1 < d[0]; ++x) {
                Mat3 j{};
                for (int a = 0; a < 3; ++a) {
                    const Volume3D& c = f.component(a);
                    j[a][0] = 0.5 * (c(x + 1, y, z) - c(x - 1, y, z));
                    j[a][1] = 0.5 * (c(x, y + 1, z) - c(x, y - 1, z));
                    j[a][2] = 0.5 * (c(x, y, z + 1) - c(x, y, z - 1));
                    j[a][a] += 1.0;
                }
                best = std::min(best, determinant(j));
            }
    return best;
}

inline DeformationField smooth_field(const DeformationField& f, double sigma)
{
    if (sigma <= 0.0)
        return f;
    return {gaussian_smooth(f.component(0), sigma), gaussian_smooth(f.component(1), sigma),
            gaussian_smooth(f.component(2), sigma)};
}

/// Resample a field to a finer grid, scaling displacements by `factor`.
inline DeformationField upsample_field(const DeformationField& coarse, const Index3& fine_dims, double factor)
{
    DeformationField out(fine_dims);
    for (int z = 0; z < fine_dims[2]; ++z)
        for (int y = 0; y < fine_dims[1]; ++y)
            for (int x = 0; x < fine_dims[0]; ++x)
                out.set(x, y, z, factor * coarse.sample({x / factor, y / factor, z / factor}));
    return out;
}

/// Reflection across the mid-plane of one axis followed by a correction:
/// T(p) = affine(q + field(q)) where q = reflect(p).
///
/// T maps a voxel to the location of its mirror in the same image, so the
/// mirror intensity of voxel p is I(T(p)).
struct SymmetryTransform {
    int axis = 0;
    int extent = 1; // voxel count along the reflected axis
    AffineTransform correction;
    std::optional<DeformationField> field;

    static SymmetryTransform pure_reflection(int extent, int axis = 0)
    {
        SymmetryTransform t;
        t.axis = axis;
        t.extent = extent;
        return t;
    }

    Vec3 reflect(const Vec3& p) const
    {
        Vec3 q = p;
        q[axis] = double(extent - 1) - q[axis];
        return q;
    }

    Vec3 operator()(const Vec3& p) const
    {
        Vec3 q = reflect(p);
        if (field)
            q = q + field->sample(q);
        return correction(q);
    }
};

inline Vec3 apply_symmetry(const SymmetryTransform& t, const Vec3& p) { return t(p); }

/// Backward warp: out(p) = vol(map(p)) with trilinear sampling.
template <typename Map>
Volume3D warp_with(const Volume3D& vol, const Map& map)
{
    Volume3D out(vol.dims(), vol.spacing());
    out.set_lr_axis(vol.lr_axis());
    const auto& d = vol.dims();
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x)
                out(x, y, z) = float(sample_trilinear(vol, map(Vec3{double(x), double(y), double(z)})));
    return out;
}

inline Volume3D warp(const Volume3D& vol, const AffineTransform& a) { return warp_with(vol, a); }

inline Volume3D warp(const Volume3D& vol, const DeformationField& f)
{
    if (f.dims() != vol.dims())
        throw ShapeError("warp: deformation field grid does not match volume");
    const auto& d = vol.dims();
    Volume3D out(d, vol.spacing());
    out.set_lr_axis(vol.lr_axis());
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const Vec3 u = f.at(x, y, z);
                out(x, y, z) = float(sample_trilinear(vol, {x + u[0], y + u[1], z + u[2]}));
            }
    return out;
}

inline Volume3D warp(const Volume3D& vol, const SymmetryTransform& t)
{
    if (t.field && t.field->dims() != vol.dims())
        throw ShapeError("warp: symmetry transform field grid does not match volume");
    if (t.extent != vol.dim(t.axis))
        throw ShapeError("warp: symmetry transform extent does not match volume");
    return warp_with(vol, t);
}

} // namespace reflecta
