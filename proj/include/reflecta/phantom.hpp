#pragma once

// Synthetic quasi-symmetric brain phantoms with known lesions and a known
// mirror map, so every stage of the pipeline can be checked against ground
// truth.
//
// Construction order: symmetric textured ellipsoid -> optional smooth
// asymmetry warp -> lesions. Lesions live in the observed (warped) space.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reflecta/error.hpp"
#include "reflecta/filter.hpp"
#include "reflecta/rng.hpp"
#include "reflecta/transform.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

struct LesionSpec {
    int count = 2;
    double radius_min = 4.5;
    double radius_max = 6.5;
    // Added to each modality inside the lesion; one entry per modality
    // (the last entry repeats when there are more modalities).
    std::vector<double> offsets{0.8, 0.6};
    double falloff = 1.5;  // half-width of the cosine edge, voxels
    int hemisphere = -1;   // -1 random per subject, 0 low-x half, 1 high-x half
    // Explicit centres (voxels); empty means random placement.
    std::vector<Vec3> centers;
};

struct PhantomSpec {
    Index3 dims{64, 64, 48};
    int modalities = 2;
    std::vector<std::string> names{"FLAIR", "DWI", "T1", "T2"};
    Vec3 brain_fraction{0.88, 0.92, 0.86};  // ellipsoid diameter per axis, share of the grid
    std::vector<double> base_intensity{1.0, 0.8};
    std::vector<double> texture_sigmas{1.5, 3.0, 6.0};
    double texture_amplitude = 0.25;
    double edge_width = 3.0;        // intensity ramps from 0 at the brain surface to full over this depth
    // Bilateral bright structures, mirrored exactly across the mid-plane.
    int structure_pairs = 6;
    double structure_radius_min = 4.0;
    double structure_radius_max = 6.5;
    double structure_edge = 0.75;   // half-width of the cosine edge of each structure
    LesionSpec lesion;
    double asymmetry = 2.0;         // max displacement of the asymmetry warp, voxels
    double asymmetry_sigma = 8.0;   // smoothness of the asymmetry velocity field
    double asymmetry_drift = 1.0;   // weight of the hemisphere-wide drift against the local noise
    std::uint64_t seed = 1;

    void validate() const
    {
        for (int a = 0; a < 3; ++a)
            if (dims[a] < 32)
                throw Error("phantom dims must be >= 32 per axis");
        if (modalities < 1 || std::size_t(modalities) > names.size())
            throw Error("phantom modalities must be between 1 and the number of names");
        if (asymmetry < 0.0)
            throw Error("phantom asymmetry magnitude must be >= 0");
        if (edge_width < 0.0)
            throw Error("phantom edge_width must be >= 0");
        if (lesion.radius_min <= 0.0 || lesion.radius_max < lesion.radius_min)
            throw Error("phantom lesion radius range is invalid");
        if (lesion.offsets.empty() || base_intensity.empty())
            throw Error("phantom needs at least one lesion offset and base intensity");
        const double half = 0.5 * brain_fraction[0] * 0.5 * dims[0];
        if (lesion.radius_max + lesion.falloff >= half)
            throw Error("phantom lesion radii do not fit inside one hemisphere");
    }
};

inline nlohmann::json to_json(const PhantomSpec& s)
{
    nlohmann::json centers = nlohmann::json::array();
    for (const auto& c : s.lesion.centers)
        centers.push_back({c[0], c[1], c[2]});
    return {
        {"dims", s.dims},
        {"modalities", s.modalities},
        {"names", s.names},
        {"brain_fraction", s.brain_fraction},
        {"base_intensity", s.base_intensity},
        {"texture_sigmas", s.texture_sigmas},
        {"texture_amplitude", s.texture_amplitude},
        {"edge_width", s.edge_width},
        {"structure_pairs", s.structure_pairs},
        {"structure_radius_min", s.structure_radius_min},
        {"structure_radius_max", s.structure_radius_max},
        {"structure_edge", s.structure_edge},
        {"lesion",
         {{"count", s.lesion.count},
          {"radius_min", s.lesion.radius_min},
          {"radius_max", s.lesion.radius_max},
          {"offsets", s.lesion.offsets},
          {"falloff", s.lesion.falloff},
          {"hemisphere", s.lesion.hemisphere},
          {"centers", centers}}},
        {"asymmetry", s.asymmetry},
        {"asymmetry_sigma", s.asymmetry_sigma},
        {"asymmetry_drift", s.asymmetry_drift},
        {"seed", s.seed},
    };
}

/// Missing keys keep their defaults.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j)
{
    PhantomSpec s;
    s.dims = j.value("dims", s.dims);
    s.modalities = j.value("modalities", s.modalities);
    s.names = j.value("names", s.names);
    s.brain_fraction = j.value("brain_fraction", s.brain_fraction);
    s.base_intensity = j.value("base_intensity", s.base_intensity);
    s.texture_sigmas = j.value("texture_sigmas", s.texture_sigmas);
    s.texture_amplitude = j.value("texture_amplitude", s.texture_amplitude);
    s.edge_width = j.value("edge_width", s.edge_width);
    s.structure_pairs = j.value("structure_pairs", s.structure_pairs);
    s.structure_radius_min = j.value("structure_radius_min", s.structure_radius_min);
    s.structure_radius_max = j.value("structure_radius_max", s.structure_radius_max);
    s.structure_edge = j.value("structure_edge", s.structure_edge);
    if (j.contains("lesion")) {
        const auto& l = j.at("lesion");
        s.lesion.count = l.value("count", s.lesion.count);
        s.lesion.radius_min = l.value("radius_min", s.lesion.radius_min);
        s.lesion.radius_max = l.value("radius_max", s.lesion.radius_max);
        s.lesion.offsets = l.value("offsets", s.lesion.offsets);
        s.lesion.falloff = l.value("falloff", s.lesion.falloff);
        s.lesion.hemisphere = l.value("hemisphere", s.lesion.hemisphere);
        if (l.contains("centers"))
            for (const auto& c : l.at("centers"))
                s.lesion.centers.push_back({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()});
    }
    s.asymmetry = j.value("asymmetry", s.asymmetry);
    s.asymmetry_sigma = j.value("asymmetry_sigma", s.asymmetry_sigma);
    s.asymmetry_drift = j.value("asymmetry_drift", s.asymmetry_drift);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

/// Ground-truth mirror correspondence M(p) = w^-1(R(w(p))) where
/// w(p) = p + u(p) is the asymmetry warp (identity when absent) and R the
/// reflection. The image satisfies I(p) = S(w(p)) for a symmetric S.
class MirrorMap {
public:
    MirrorMap() = default;
    MirrorMap(int extent, int axis = 0) : extent_(extent), axis_(axis) {}

    void set_warp(DeformationField u) { warp_ = std::move(u); }
    const std::optional<DeformationField>& warp() const { return warp_; }
    int extent() const { return extent_; }

    Vec3 forward(const Vec3& p) const { return warp_ ? p + warp_->sample(p) : p; }

    /// Solves q + u(q) = y by fixed-point iteration (u is a contraction for
    /// the small smooth warps generated here).
    Vec3 inverse(const Vec3& y) const
    {
        if (!warp_)
            return y;
        Vec3 q = y - warp_->sample(y);
        for (int it = 0; it < 200; ++it) {
            const Vec3 next = y - warp_->sample(q);
            const double delta = norm(next - q);
            q = next;
            if (delta < 1e-12)
                break;
        }
        return q;
    }

    Vec3 reflect(const Vec3& p) const
    {
        Vec3 q = p;
        q[axis_] = double(extent_ - 1) - q[axis_];
        return q;
    }

    Vec3 operator()(const Vec3& p) const { return inverse(reflect(forward(p))); }

    /// Sampled on a grid as a displacement field: M(p) - p.
    DeformationField to_field(const Index3& dims) const
    {
        DeformationField f(dims);
        for (int z = 0; z < dims[2]; ++z)
            for (int y = 0; y < dims[1]; ++y)
                for (int x = 0; x < dims[0]; ++x) {
                    const Vec3 p{double(x), double(y), double(z)};
                    f.set(x, y, z, (*this)(p) - p);
                }
        return f;
    }

private:
    int extent_ = 1;
    int axis_ = 0;
    std::optional<DeformationField> warp_;
};

struct PhantomSubject {
    std::string id;
    MultiModalImage image;  // raw intensities, labels and brain mask
    MirrorMap mirror;
    double lesion_fraction = 0.0;  // lesion voxels / brain voxels
};

namespace detail {

inline Volume3D noise_volume(const Index3& dims, Rng& rng)
{
    Volume3D v(dims);
    for (auto& x : v.data())
        x = float(standard_normal(rng));
    return v;
}

// Smooth noise of roughly unit standard deviation at scale sigma.
inline Volume3D smooth_noise(const Index3& dims, double sigma, Rng& rng)
{
    Volume3D v = gaussian_smooth(noise_volume(dims, rng), sigma);
    double ss = 0.0;
    for (float x : v.data())
        ss += double(x) * x;
    const double sd = std::sqrt(ss / double(v.voxel_count()));
    if (sd > 0)
        for (auto& x : v.data())
            x = float(x / sd);
    return v;
}

// Cosine-edged ball profile: 1 inside r - w, 0 outside r + w.
inline double ball_profile(double dist, double radius, double falloff)
{
    if (falloff <= 0.0)
        return dist <= radius ? 1.0 : 0.0;
    if (dist <= radius - falloff)
        return 1.0;
    if (dist >= radius + falloff)
        return 0.0;
    const double t = (dist - (radius - falloff)) / (2.0 * falloff);
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

inline double spec_value(const std::vector<double>& v, std::size_t i) { return v[std::min(i, v.size() - 1)]; }

} // namespace detail

/// Ellipsoidal textured brain, exactly symmetric about the mid-x plane.
inline PhantomSubject gen_symmetric_brain(const PhantomSpec& spec)
{
    spec.validate();
    const Index3& d = spec.dims;
    const Vec3 c{0.5 * (d[0] - 1), 0.5 * (d[1] - 1), 0.5 * (d[2] - 1)};
    const Vec3 semi{0.5 * spec.brain_fraction[0] * d[0], 0.5 * spec.brain_fraction[1] * d[1],
                    0.5 * spec.brain_fraction[2] * d[2]};

    Volume3D mask(d), edge(d);
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const double ex = (x - c[0]) / semi[0], ey = (y - c[1]) / semi[1], ez = (z - c[2]) / semi[2];
                const double q = ex * ex + ey * ey + ez * ez;
                mask(x, y, z) = q <= 1.0 ? 1.0f : 0.0f;
                if (q > 1.0)
                    continue;
                // First-order depth below the surface; the ramp keeps the
                // intensity continuous where the mask cuts off.
                const double g = 2.0 * norm(Vec3{ex / semi[0], ey / semi[1], ez / semi[2]});
                const double depth = g > 0.0 ? (1.0 - q) / g : 1e9;
                const double t = spec.edge_width > 0.0 ? std::min(depth / spec.edge_width, 1.0) : 1.0;
                edge(x, y, z) = float(0.5 * (1.0 - std::cos(std::numbers::pi * t)));
            }

    // Bilateral structures: blobs placed in the low-x half, mirrored below.
    Rng srng = make_rng(spec.seed, "phantom.structures");
    Volume3D structures(d);
    for (int k = 0; k < spec.structure_pairs; ++k) {
        const double r = uniform(srng, spec.structure_radius_min, spec.structure_radius_max);
        Vec3 p{};
        for (int attempt = 0; attempt < 1000; ++attempt) {
            p = {uniform(srng, c[0] - semi[0] + r, c[0] - r - 2.0), uniform(srng, c[1] - semi[1] + r, c[1] + semi[1] - r),
                 uniform(srng, c[2] - semi[2] + r, c[2] + semi[2] - r)};
            const double ex = (p[0] - c[0]) / (semi[0] - r), ey = (p[1] - c[1]) / (semi[1] - r),
                         ez = (p[2] - c[2]) / (semi[2] - r);
            if (ex * ex + ey * ey + ez * ez <= 1.0)
                break;
        }
        for (int z = 0; z < d[2]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[0]; ++x) {
                    const double dist = norm(Vec3{x - p[0], y - p[1], z - p[2]});
                    structures(x, y, z) += float(detail::ball_profile(dist, r, spec.structure_edge));
                }
    }
    const Volume3D structures_mirror = reflect_x(structures);

    PhantomSubject out;
    out.mirror = MirrorMap(d[0], 0);
    Rng trng = make_rng(spec.seed, "phantom.texture");
    for (int m = 0; m < spec.modalities; ++m) {
        Volume3D tex(d);
        for (double s : spec.texture_sigmas) {
            const Volume3D n = detail::smooth_noise(d, s, trng);
            for (std::size_t i = 0; i < tex.voxel_count(); ++i)
                tex[i] += n[i];
        }
        const double amp = spec.texture_amplitude / std::sqrt(double(spec.texture_sigmas.size()));
        const Volume3D tex_mirror = reflect_x(tex);
        const double base = detail::spec_value(spec.base_intensity, std::size_t(m));
        const double blob = detail::spec_value(spec.lesion.offsets, std::size_t(m));
        Volume3D ch(d);
        for (std::size_t i = 0; i < ch.voxel_count(); ++i) {
            if (mask[i] == 0.0f)
                continue;
            // a + b == b + a exactly, so the mirrored voxel gets the identical value.
            const float t = tex[i] + tex_mirror[i];
            const float s = structures[i] + structures_mirror[i];
            ch[i] = float(double(edge[i]) * (base + amp * 0.5 * double(t) + blob * double(s)));
        }
        out.image.channels.push_back(std::move(ch));
        out.image.channel_names.push_back(spec.names[std::size_t(m)]);
    }
    out.image.labels = Volume3D(d);
    out.image.brain_mask = std::move(mask);
    return out;
}

/// Warp the phantom by a smooth random diffeomorphism whose largest
/// displacement is `magnitude` voxels, concentrated on one hemisphere.
inline PhantomSubject apply_asymmetry(const PhantomSubject& in, double magnitude, std::uint64_t seed,
                                      double sigma = 8.0, double drift_weight = 1.0)
{
    if (magnitude < 0.0)
        throw Error("asymmetry magnitude must be >= 0");
    if (magnitude == 0.0)
        return in;
    const Index3 d = in.image.dims();
    Rng rng = make_rng(seed, "phantom.asymmetry");
    const int side = int(uniform_index(rng, 2));
    // Velocity = a random hemisphere-wide drift plus smooth local noise.
    DeformationField v(d);
    Vec3 drift{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
    drift = (1.0 / std::max(norm(drift), 1e-12)) * drift;
    for (int a = 0; a < 3; ++a) {
        v.component(a) = detail::smooth_noise(d, sigma, rng);
        for (auto& x : v.component(a).data())
            x = float(drift_weight * drift[a] + 0.5 * x);
    }
    // Smooth window: 1 on the chosen half, fading across the mid-plane.
    const double mid = 0.5 * (d[0] - 1);
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const double s = (side == 0 ? mid - x : x - mid) / 4.0;
                const double w = 0.5 * (1.0 + std::tanh(s));
                for (int a = 0; a < 3; ++a)
                    v.component(a)(x, y, z) = float(w * v.component(a)(x, y, z));
            }
    DeformationField u;
    double scale = magnitude / std::max(v.max_norm(), 1e-12);
    for (int it = 0; it < 4; ++it) {
        DeformationField scaled = v;
        scaled *= scale;
        u = exponentiate_velocity(scaled, 6);
        const double got = u.max_norm();
        if (std::abs(got - magnitude) < 1e-4 * magnitude)
            break;
        scale *= magnitude / got;
    }

    PhantomSubject out = in;
    for (auto& ch : out.image.channels)
        ch = warp(ch, u);
    if (out.image.brain_mask) {
        Volume3D m = warp(*out.image.brain_mask, u);
        for (auto& x : m.data())
            x = x >= 0.5f ? 1.0f : 0.0f;
        // Keep channels zero outside the (warped) brain.
        for (auto& ch : out.image.channels)
            for (std::size_t i = 0; i < ch.voxel_count(); ++i)
                if (m[i] == 0.0f)
                    ch[i] = 0.0f;
        out.image.brain_mask = std::move(m);
    }
    if (out.image.labels) {
        Volume3D l = warp(*out.image.labels, u);
        for (auto& x : l.data())
            x = x >= 0.5f ? 1.0f : 0.0f;
        out.image.labels = std::move(l);
    }
    out.mirror = MirrorMap(d[0], 0);
    out.mirror.set_warp(std::move(u));
    return out;
}

/// Add blob-shaped lesions confined to one hemisphere and mark them in the
/// label volume.
inline PhantomSubject insert_lesion(const PhantomSubject& in, const LesionSpec& spec, std::uint64_t seed)
{
    const Index3 d = in.image.dims();
    const double mid = 0.5 * (d[0] - 1);
    Rng rng = make_rng(seed, "phantom.lesion");
    const int side = spec.hemisphere >= 0 ? spec.hemisphere : int(uniform_index(rng, 2));
    const Volume3D* mask = in.image.brain_mask ? &*in.image.brain_mask : nullptr;

    struct Ball {
        Vec3 c;
        double r;
    };
    std::vector<Ball> balls;
    auto fits = [&](const Ball& b) {
        // Entirely on one side of the mid-plane, including the soft edge,
        // and inside the brain.
        const double reach = b.r + spec.falloff;
        if (!(b.c[0] + reach < mid || b.c[0] - reach > mid))
            return false;
        if (!mask)
            return true;
        for (int z = int(std::floor(b.c[2] - b.r)); z <= int(std::ceil(b.c[2] + b.r)); ++z)
            for (int y = int(std::floor(b.c[1] - b.r)); y <= int(std::ceil(b.c[1] + b.r)); ++y)
                for (int x = int(std::floor(b.c[0] - b.r)); x <= int(std::ceil(b.c[0] + b.r)); ++x) {
                    if (norm(Vec3{x - b.c[0], y - b.c[1], z - b.c[2]}) > b.r)
                        continue;
                    if (!mask->contains(x, y, z) || (*mask)(x, y, z) < 0.5f)
                        return false;
                }
        return true;
    };

    if (!spec.centers.empty()) {
        for (const auto& c : spec.centers) {
            const Ball b{c, uniform(rng, spec.radius_min, spec.radius_max)};
            const double reach = b.r + spec.falloff;
            if (!(b.c[0] + reach < mid || b.c[0] - reach > mid))
                throw Error("lesion at x=" + std::to_string(c[0]) + " crosses the mid-plane");
            balls.push_back(b);
        }
    } else {
        for (int k = 0; k < spec.count; ++k) {
            const double r = uniform(rng, spec.radius_min, spec.radius_max);
            bool placed = false;
            for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
                const double lo = side == 0 ? r : mid + r + spec.falloff;
                const double hi = side == 0 ? mid - r - spec.falloff : d[0] - 1 - r;
                if (hi <= lo)
                    throw Error("lesion radius does not fit inside one hemisphere");
                const Ball b{{uniform(rng, lo, hi), uniform(rng, r, d[1] - 1 - r), uniform(rng, r, d[2] - 1 - r)}, r};
                bool overlaps = false;
                for (const auto& o : balls)
                    overlaps = overlaps || norm(o.c - b.c) < o.r + b.r;
                if (!overlaps && fits(b)) {
                    balls.push_back(b);
                    placed = true;
                }
            }
            if (!placed)
                throw Error("could not place lesion inside one hemisphere of the brain");
        }
    }

    PhantomSubject out = in;
    Volume3D weight(d);
    Volume3D labels = in.image.labels ? *in.image.labels : Volume3D(d);
    for (const auto& b : balls) {
        const double reach = b.r + spec.falloff;
        for (int z = std::max(0, int(std::floor(b.c[2] - reach))); z <= std::min(d[2] - 1, int(std::ceil(b.c[2] + reach))); ++z)
            for (int y = std::max(0, int(std::floor(b.c[1] - reach))); y <= std::min(d[1] - 1, int(std::ceil(b.c[1] + reach))); ++y)
                for (int x = std::max(0, int(std::floor(b.c[0] - reach))); x <= std::min(d[0] - 1, int(std::ceil(b.c[0] + reach))); ++x) {
                    if (mask && (*mask)(x, y, z) < 0.5f)
                        continue;
                    const double dist = norm(Vec3{x - b.c[0], y - b.c[1], z - b.c[2]});
                    weight(x, y, z) = std::max(weight(x, y, z), float(detail::ball_profile(dist, b.r, spec.falloff)));
                    if (dist <= b.r)
                        labels(x, y, z) = 1.0f;
                }
    }
    for (std::size_t m = 0; m < out.image.channels.size(); ++m) {
        const double off = detail::spec_value(spec.offsets, m);
        if (off == 0.0)
            continue;
        auto& ch = out.image.channels[m];
        for (std::size_t i = 0; i < ch.voxel_count(); ++i)
            if (weight[i] > 0.0f)
                ch[i] = float(ch[i] + off * weight[i]);
    }
    out.image.labels = std::move(labels);
    const double brain = mask ? double(count_foreground(*mask)) : double(out.image.labels->voxel_count());
    out.lesion_fraction = double(count_foreground(*out.image.labels)) / brain;
    return out;
}

/// Full subject: symmetric brain, asymmetry warp, lesions.
inline PhantomSubject generate_subject(const PhantomSpec& spec, const std::string& id = "subject")
{
    PhantomSubject s = gen_symmetric_brain(spec);
    s = apply_asymmetry(s, spec.asymmetry, substream(spec.seed, "asymmetry"), spec.asymmetry_sigma,
                        spec.asymmetry_drift);
    if (spec.lesion.count > 0 || !spec.lesion.centers.empty())
        s = insert_lesion(s, spec.lesion, substream(spec.seed, "lesion"));
    s.id = id;
    return s;
}

/// Per-subject spec for subject `index` of a cohort generated from `spec`.
inline PhantomSpec cohort_member(const PhantomSpec& spec, std::size_t index)
{
    PhantomSpec s = spec;
    s.seed = substream(spec.seed, "cohort", index);
    return s;
}

} // namespace reflecta
