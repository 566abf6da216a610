#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "reflecta/error.hpp"
#include "reflecta/registration.hpp"
#include "reflecta/rng.hpp"
#include "reflecta/transform.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

/// Symmetry Difference Images, one per source channel.
struct SymmetryFeatures {
    MultiModalImage sdis;
    SymmetryMode mode = SymmetryMode::Linear;
};

/// S(p) = I(p) - I(T(p)) for one channel.
inline Volume3D symmetry_difference(const Volume3D& channel, const SymmetryTransform& t)
{
    const Volume3D mirror = warp(channel, t);
    Volume3D out(channel.dims(), channel.spacing());
    out.set_lr_axis(channel.lr_axis());
    for (std::size_t i = 0; i < out.voxel_count(); ++i)
        out[i] = float(double(channel[i]) - double(mirror[i]));
    return out;
}

/// One SDI per channel. The channels are expected to be standardized already.
inline SymmetryFeatures build_sdi(const MultiModalImage& image, const SymmetryTransform& t,
                                  SymmetryMode mode = SymmetryMode::Linear)
{
    image.validate();
    if (t.extent != image.dims()[t.axis] || (t.field && t.field->dims() != image.dims()))
        throw ShapeError("build_sdi: symmetry transform grid does not match image");
    SymmetryFeatures feats;
    feats.mode = mode;
    for (std::size_t r = 0; r < image.channel_count(); ++r) {
        feats.sdis.channels.push_back(symmetry_difference(image.channels[r], t));
        feats.sdis.channel_names.push_back("SDI_" + image.channel_names[r]);
    }
    feats.sdis.labels = image.labels;
    feats.sdis.brain_mask = image.brain_mask;
    return feats;
}

/// Originals first, then SDIs in channel order. Labels and mask carried over.
inline MultiModalImage augment_channels(const MultiModalImage& image, const SymmetryFeatures& feats)
{
    image.validate();
    if (feats.sdis.channels.size() != image.channels.size())
        throw ShapeError("augment_channels: SDI count differs from channel count");
    for (const auto& s : feats.sdis.channels)
        if (s.dims() != image.dims())
            throw ShapeError("augment_channels: SDI dims differ from image dims");
    MultiModalImage out = image;
    for (std::size_t r = 0; r < feats.sdis.channels.size(); ++r) {
        out.channels.push_back(feats.sdis.channels[r]);
        out.channel_names.push_back(feats.sdis.channel_names[r]);
    }
    return out;
}

/// Region used for mirror analyses: brain mask if present, else nonzero voxels of `reference`.
inline std::vector<char> brain_region(const MultiModalImage& image, const Volume3D& reference)
{
    std::vector<char> region(reference.voxel_count());
    for (std::size_t i = 0; i < region.size(); ++i)
        region[i] = image.brain_mask ? (*image.brain_mask)[i] > 0.5f : reference[i] != 0.0f;
    return region;
}

struct ClassSamples {
    std::vector<std::size_t> lesion;
    std::vector<std::size_t> healthy;
};

namespace detail {

inline std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t n, Rng& rng)
{
    std::vector<std::size_t> out;
    out.reserve(n);
    if (pool.size() >= n) {
        // Partial Fisher-Yates: without replacement.
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = i + std::size_t(uniform_index(rng, pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            out.push_back(pool[uniform_index(rng, pool.size())]);
    }
    return out;
}

} // namespace detail

/// Draw n voxels split evenly between lesion and non-lesion brain voxels
/// (lesion gets n/2 rounded down). Voxels whose mirror lands outside the
/// brain are excluded from both pools.
inline ClassSamples sample_by_class(const MultiModalImage& image, const Volume3D& reference,
                                    const SymmetryTransform& t, std::size_t n, std::uint64_t seed)
{
    if (!image.labels)
        throw SamplingError("mirror sampling needs a label volume");
    const auto region = brain_region(image, reference);
    const Volume3D& labels = *image.labels;
    std::vector<std::size_t> lesion, healthy;
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region[i])
            continue;
        const Vec3 m = t(to_vec(labels.coords(i)));
        const int mx = int(std::lround(m[0])), my = int(std::lround(m[1])), mz = int(std::lround(m[2]));
        if (!labels.contains(mx, my, mz) || !region[labels.index(mx, my, mz)])
            continue;
        (labels[i] > 0.5f ? lesion : healthy).push_back(i);
    }
    if (lesion.empty())
        throw SamplingError("no lesion voxels with an in-brain mirror");
    if (healthy.empty())
        throw SamplingError("no non-lesion brain voxels with an in-brain mirror");
    Rng rng{seed};
    ClassSamples s;
    s.lesion = detail::draw(std::move(lesion), n / 2, rng);
    s.healthy = detail::draw(std::move(healthy), n - n / 2, rng);
    return s;
}

struct MirrorSample {
    double intensity = 0.0;
    double mirror = 0.0;
    int label = 0;
};

/// Voxel intensity paired with the intensity at its mirror location.
inline std::vector<MirrorSample> mirror_scatter(const MultiModalImage& image, const SymmetryTransform& t,
                                                std::size_t channel, std::size_t n, std::uint64_t seed)
{
    image.validate();
    const Volume3D& vol = image.channels.at(channel);
    const ClassSamples s = sample_by_class(image, vol, t, n, seed);
    std::vector<MirrorSample> out;
    out.reserve(n);
    for (int label : {1, 0})
        for (std::size_t i : label ? s.lesion : s.healthy)
            out.push_back({vol[i], sample_trilinear(vol, t(to_vec(vol.coords(i)))), label});
    return out;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    const double n = double(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace reflecta
