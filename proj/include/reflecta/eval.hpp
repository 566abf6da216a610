#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "reflecta/error.hpp"
#include "reflecta/nnet/network.hpp"
#include "reflecta/symmetry.hpp"
#include "reflecta/transform.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

struct SegmentationResult {
    std::string id;
    Volume3D probability;  // lesion class
    Volume3D labels;       // 1 where probability >= threshold
};

/// Dense inference slice by slice. Each axial slice is zero-padded by
/// (RF - 1) / 2 so the output covers every voxel. With a brain mask,
/// voxels outside it get probability 0.
template <class Real>
SegmentationResult segment(const nnet::Network<Real>& net, const MultiModalImage& image, double threshold = 0.5,
                           const std::string& id = {})
{
    image.validate();
    if (int(image.channel_count()) != net.config().in_channels)
        throw ShapeError("segment: network expects " + std::to_string(net.config().in_channels) +
                         " channels, image has " + std::to_string(image.channel_count()));
    const Index3 d = image.dims();
    const int r = (net.receptive_field() - 1) / 2;
    SegmentationResult out{id, Volume3D(d, image.channels[0].spacing()), Volume3D(d, image.channels[0].spacing())};
    nnet::Tensor<Real> slice(1, int(image.channel_count()), d[1] + 2 * r, d[0] + 2 * r);
    for (int z = 0; z < d[2]; ++z) {
        bool any = !image.brain_mask;
        for (int y = 0; y < d[1] && !any; ++y)
            for (int x = 0; x < d[0] && !any; ++x)
                any = (*image.brain_mask)(x, y, z) > 0.5f;
        if (!any)
            continue;
        for (int ch = 0; ch < slice.c; ++ch)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[0]; ++x)
                    slice(0, ch, y + r, x + r) = Real(image.channels[std::size_t(ch)](x, y, z));
        const nnet::Tensor<Real> p = net.dense_forward(slice);
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                if (image.brain_mask && (*image.brain_mask)(x, y, z) <= 0.5f)
                    continue;
                const double v = double(p(0, 1, y, x));
                out.probability(x, y, z) = float(v);
                out.labels(x, y, z) = v >= threshold ? 1.0f : 0.0f;
            }
    }
    return out;
}

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const Volume3D& pred, const Volume3D& gt)
{
    if (pred.dims() != gt.dims())
        throw ShapeError("metrics: prediction and ground truth dims differ");
    Confusion c;
    for (std::size_t i = 0; i < pred.voxel_count(); ++i) {
        const bool p = pred[i] >= 0.5f, g = gt[i] >= 0.5f;
        (p ? (g ? c.tp : c.fp) : (g ? c.fn : c.tn))++;
    }
    return c;
}

// Empty denominators count as perfect: nothing to find, or nothing claimed.
inline double dice(const Confusion& c)
{
    const std::size_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : double(2 * c.tp) / double(den);
}
inline double recall(const Confusion& c) { return c.tp + c.fn == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fn); }
inline double precision(const Confusion& c) { return c.tp + c.fp == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fp); }

inline double dice(const Volume3D& pred, const Volume3D& gt) { return dice(confusion(pred, gt)); }

inline std::pair<double, double> recall_precision(const Volume3D& pred, const Volume3D& gt)
{
    const Confusion c = confusion(pred, gt);
    return {recall(c), precision(c)};
}

struct SubjectMetrics {
    std::string id;
    double dice = 0.0, recall = 0.0, precision = 0.0;
};

inline SubjectMetrics evaluate_subject(const std::string& id, const Volume3D& pred, const Volume3D& gt)
{
    const Confusion c = confusion(pred, gt);
    return {id, dice(c), recall(c), precision(c)};
}

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

struct MetricsReport {
    std::string method;
    std::vector<SubjectMetrics> subjects;
    MeanStd dice, recall, precision;
};

inline MeanStd mean_std(const std::vector<double>& v, bool sample = false)
{
    if (v.empty())
        throw Error("mean_std: no values");
    double m = 0.0;
    for (double x : v)
        m += x;
    m /= double(v.size());
    double ss = 0.0;
    for (double x : v)
        ss += (x - m) * (x - m);
    const double n = sample ? double(v.size()) - 1.0 : double(v.size());
    return {m, n > 0.0 ? std::sqrt(ss / n) : 0.0};
}

/// Per-metric mean and standard deviation (population by default).
inline MetricsReport aggregate(const std::vector<SubjectMetrics>& subjects, const std::string& method = {},
                               bool sample_std = false)
{
    if (subjects.empty())
        throw Error("aggregate: no subjects");
    MetricsReport r{method, subjects, {}, {}, {}};
    std::vector<double> d, re, p;
    for (const auto& s : subjects) {
        d.push_back(s.dice);
        re.push_back(s.recall);
        p.push_back(s.precision);
    }
    r.dice = mean_std(d, sample_std);
    r.recall = mean_std(re, sample_std);
    r.precision = mean_std(p, sample_std);
    return r;
}

/// "0.45(0.25)"
inline std::string format_mean_std(const MeanStd& m, int digits = 2)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f(%.*f)", digits, m.mean, digits, m.std);
    return buf;
}

inline void write_metrics_csv(const std::vector<SubjectMetrics>& rows, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os)
        throw IoError("cannot write " + path.string());
    os << "subject,dice,recall,precision\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", r.dice, r.recall, r.precision);
        os << r.id << ',' << buf << '\n';
    }
}

// ------------------------------------------------------ difference density

struct DensitySample {
    int label = 0;  // 1 lesion, 0 non-lesion
    double difference = 0.0;
};

/// I(p) - I(T(p)) at n brain voxels split evenly between the classes.
/// `channel` should already be standardized.
inline std::vector<DensitySample> density_profile(const Volume3D& channel, const SymmetryTransform& t,
                                                  const Volume3D& labels, const Volume3D* brain_mask, std::size_t n,
                                                  std::uint64_t seed)
{
    MultiModalImage im;
    im.channels = {channel};
    im.channel_names = {"channel"};
    im.labels = labels;
    if (brain_mask)
        im.brain_mask = *brain_mask;
    im.validate();
    const ClassSamples s = sample_by_class(im, channel, t, n, seed);
    std::vector<DensitySample> out;
    out.reserve(n);
    for (int label : {1, 0})
        for (std::size_t i : label ? s.lesion : s.healthy)
            out.push_back({label, double(channel[i]) - sample_trilinear(channel, t(to_vec(channel.coords(i))))});
    return out;
}

inline void write_density_csv(const std::vector<DensitySample>& rows, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os)
        throw IoError("cannot write " + path.string());
    os << "class,difference\n";
    char buf[48];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.9g", r.difference);
        os << (r.label ? "lesion" : "non-lesion") << ',' << buf << '\n';
    }
}

} // namespace reflecta
