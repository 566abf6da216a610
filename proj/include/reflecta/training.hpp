#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reflecta/error.hpp"
#include "reflecta/nnet/network.hpp"
#include "reflecta/nnet/optim.hpp"
#include "reflecta/nnet/serialize.hpp"
#include "reflecta/rng.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

/// Patch centre: subject index plus voxel. Patches are cut from the axial
/// slice z, tensor rows along y and columns along x.
struct Center {
    std::uint32_t subject = 0;
    int x = 0, y = 0, z = 0;

    friend bool operator==(const Center&, const Center&) = default;
};

struct SamplingSpec {
    int segment = 33;  // input extent; every pathway crops or downsamples from it
    // Share of lesion-centred patches. Empty means uniform over brain voxels,
    // so the lesion share follows prevalence.
    std::optional<double> positive_fraction = 0.5;
    std::string phase = "phase1";
    std::uint64_t seed = 0;

    void validate() const
    {
        if (segment < 1 || segment % 2 == 0)
            throw SamplingError("sampling: segment size must be odd and positive, got " + std::to_string(segment));
        if (positive_fraction && !(*positive_fraction >= 0.0 && *positive_fraction <= 1.0))
            throw SamplingError("sampling: positive fraction must lie in [0, 1]");
    }
};

struct PatchBatch {
    nnet::Tensor<float> x;   // (N, C, segment, segment)
    std::vector<int> labels; // N * out * out, row-major per item
    std::vector<Center> centers;
    int out = 1;
};

/// Copy the segment around `c` into item `slot` of `x` and append the
/// out x out label neighbourhood. Outside the volume channels read as 0 and
/// labels as background.
inline void extract_segment(const MultiModalImage& image, const Center& c, int segment, int out,
                            nnet::Tensor<float>& x, int slot, std::vector<int>& labels)
{
    const Index3 d = image.dims();
    if (x.c != int(image.channel_count()) || x.h != segment || x.w != segment)
        throw ShapeError("extract_segment: batch tensor " + x.shape_string() + " does not fit the segment");
    const int r = segment / 2;
    for (int ch = 0; ch < x.c; ++ch) {
        const Volume3D& v = image.channels[std::size_t(ch)];
        for (int i = 0; i < segment; ++i) {
            const int y = c.y - r + i;
            float* row = &x(slot, ch, i, 0);
            for (int j = 0; j < segment; ++j) {
                const int xx = c.x - r + j;
                row[j] = (y >= 0 && y < d[1] && xx >= 0 && xx < d[0] && c.z >= 0 && c.z < d[2]) ? v(xx, y, c.z) : 0.0f;
            }
        }
    }
    const int q = out / 2;
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < out; ++j) {
            const int y = c.y - q + i, xx = c.x - q + j;
            labels.push_back(image.labels && image.labels->contains(xx, y, c.z) && (*image.labels)(xx, y, c.z) > 0.5f);
        }
}

/// Single-item convenience form.
inline std::pair<nnet::Tensor<float>, std::vector<int>> extract_segment(const MultiModalImage& image, const Center& c,
                                                                        int segment, int out)
{
    nnet::Tensor<float> x(1, int(image.channel_count()), segment, segment);
    std::vector<int> labels;
    extract_segment(image, c, segment, out, x, 0, labels);
    return {std::move(x), std::move(labels)};
}

/// Lesion and non-lesion brain voxels of a set of images, for drawing patch centres.
class PatchSampler {
public:
    explicit PatchSampler(std::vector<const MultiModalImage*> images) : images_(std::move(images))
    {
        if (images_.empty())
            throw SamplingError("sampler: no training images");
        for (std::uint32_t s = 0; s < images_.size(); ++s) {
            const MultiModalImage& im = *images_[s];
            im.validate();
            if (im.channel_count() != images_[0]->channel_count())
                throw ShapeError("sampler: images differ in channel count");
            if (!im.labels)
                throw SamplingError("sampler: image " + std::to_string(s) + " has no label volume");
            const Volume3D& l = *im.labels;
            for (std::size_t i = 0; i < l.voxel_count(); ++i) {
                if (im.brain_mask && (*im.brain_mask)[i] <= 0.5f)
                    continue;
                (l[i] > 0.5f ? lesion_ : healthy_).push_back(pack(s, i));
            }
        }
    }

    std::size_t lesion_count() const { return lesion_.size(); }
    std::size_t healthy_count() const { return healthy_.size(); }
    double prevalence() const { return double(lesion_.size()) / double(lesion_.size() + healthy_.size()); }
    const MultiModalImage& image(std::uint32_t s) const { return *images_.at(s); }
    int channels() const { return int(images_[0]->channel_count()); }

    std::vector<Center> draw(std::size_t n, std::optional<double> positive_fraction, Rng& rng) const
    {
        std::vector<Center> out;
        out.reserve(n);
        if (!positive_fraction) {
            const std::size_t total = lesion_.size() + healthy_.size();
            if (total == 0)
                throw SamplingError("sampler: no brain voxels");
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = uniform_index(rng, total);
                out.push_back(unpack(k < lesion_.size() ? lesion_[k] : healthy_[k - lesion_.size()]));
            }
            return out;
        }
        const auto pos = std::size_t(std::lround(*positive_fraction * double(n)));
        if (pos > 0 && lesion_.empty())
            throw SamplingError("sampler: lesion patches requested but no lesion voxels in the training set");
        if (pos < n && healthy_.empty())
            throw SamplingError("sampler: background patches requested but no non-lesion brain voxels");
        for (std::size_t i = 0; i < pos; ++i)
            out.push_back(unpack(lesion_[uniform_index(rng, lesion_.size())]));
        for (std::size_t i = pos; i < n; ++i)
            out.push_back(unpack(healthy_[uniform_index(rng, healthy_.size())]));
        return out;
    }

    PatchBatch assemble(const std::vector<Center>& centers, int segment, int out) const
    {
        PatchBatch b;
        b.out = out;
        b.centers = centers;
        b.x = nnet::Tensor<float>(int(centers.size()), channels(), segment, segment);
        b.labels.reserve(centers.size() * std::size_t(out) * std::size_t(out));
        for (std::size_t i = 0; i < centers.size(); ++i)
            extract_segment(image(centers[i].subject), centers[i], segment, out, b.x, int(i), b.labels);
        return b;
    }

private:
    std::vector<const MultiModalImage*> images_;
    std::vector<std::uint64_t> lesion_, healthy_;

    static std::uint64_t pack(std::uint32_t s, std::size_t i) { return std::uint64_t(s) << 40 | std::uint64_t(i); }

    Center unpack(std::uint64_t v) const
    {
        const auto s = std::uint32_t(v >> 40);
        const Index3 p = images_[s]->channels[0].coords(std::size_t(v & ((std::uint64_t(1) << 40) - 1)));
        return {s, p[0], p[1], p[2]};
    }
};

/// Draw and cut one batch. `out` is the label neighbourhood extent (1 for patch training).
inline PatchBatch sample_batch(const PatchSampler& sampler, const SamplingSpec& spec, std::size_t batch, int out, Rng& rng)
{
    spec.validate();
    if (out < 1 || out > spec.segment)
        throw ShapeError("sample_batch: label neighbourhood must be between 1 and the segment size");
    return sampler.assemble(sampler.draw(batch, spec.positive_fraction, rng), spec.segment, out);
}

/// FNV-1a over every sampled centre, in order.
class BatchDigest {
public:
    void update(const std::vector<Center>& centers)
    {
        for (const auto& c : centers)
            for (std::uint64_t v : {std::uint64_t(c.subject), std::uint64_t(std::uint32_t(c.x)),
                                    std::uint64_t(std::uint32_t(c.y)), std::uint64_t(std::uint32_t(c.z))})
                for (int b = 0; b < 4; ++b) {
                    h_ ^= (v >> (8 * b)) & 0xff;
                    h_ *= 0x100000001b3ULL;
                }
    }
    std::uint64_t value() const { return h_; }
    std::string hex() const
    {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------- schedules

struct TrainPhase {
    std::string name;
    int iterations = 0;
    int batch = 10;
    double lr = 0.001;
    std::vector<std::pair<int, double>> decay;  // from iteration k on, lr *= factor
    nnet::Scope scope = nnet::Scope::All;
    std::optional<double> positive_fraction = 0.5;  // empty: uniform over brain
    int segment = 0;                                // 0: the network's receptive field
    double l1 = 0.0, l2 = 0.0;

    /// Learning rate used by update `it` (0-based) of this phase.
    double lr_at(int it) const
    {
        double r = lr;
        for (const auto& [k, f] : decay)
            if (it >= k)
                r *= f;
        return r;
    }

    std::vector<double> lr_trace() const
    {
        std::vector<double> t(std::size_t(std::max(iterations, 0)));
        for (int i = 0; i < iterations; ++i)
            t[std::size_t(i)] = lr_at(i);
        return t;
    }
};

struct TrainingSchedule {
    std::string name;
    nnet::OptimizerKind optimizer = nnet::OptimizerKind::SgdMomentum;
    double momentum = 0.6;
    double rms_decay = 0.9;
    double rms_eps = 1e-6;
    std::vector<TrainPhase> phases;

    std::size_t sample_count() const
    {
        std::size_t n = 0;
        for (const auto& p : phases)
            n += std::size_t(p.iterations) * std::size_t(p.batch);
        return n;
    }

    void validate() const
    {
        if (phases.empty())
            throw Error("schedule '" + name + "': no phases");
        for (const auto& p : phases) {
            const std::string where = "schedule '" + name + "' phase '" + p.name + "'";
            if (p.iterations <= 0 || p.batch <= 0)
                throw Error(where + ": iterations and batch must be positive");
            if (!(p.lr > 0.0))
                throw Error(where + ": learning rate must be positive");
            for (const auto& [k, f] : p.decay)
                if (k < 0 || !(f > 0.0 && f <= 1.0))
                    throw Error(where + ": decay events need iteration >= 0 and factor in (0, 1]");
            if (p.positive_fraction && !(*p.positive_fraction >= 0.0 && *p.positive_fraction <= 1.0))
                throw Error(where + ": positive fraction must lie in [0, 1]");
            if (p.segment < 0 || (p.segment > 0 && p.segment % 2 == 0))
                throw Error(where + ": segment must be 0 or odd");
            if (p.l1 < 0.0 || p.l2 < 0.0)
                throw Error(where + ": regularization weights must be >= 0");
        }
    }
};

namespace detail {

inline std::vector<std::pair<int, double>> events(std::initializer_list<int> at, double factor)
{
    std::vector<std::pair<int, double>> e;
    for (int k : at)
        e.emplace_back(k, factor);
    return e;
}

inline TrainingSchedule two_phase(const std::string& name, int epoch, int phase1_epochs, int phase2_epochs, double lr,
                                  double l1, double l2)
{
    TrainingSchedule s;
    s.name = name;
    s.optimizer = nnet::OptimizerKind::SgdMomentum;
    TrainPhase p1{"phase1", phase1_epochs * epoch, 10, lr, {}, nnet::Scope::All, 0.5, 0, l1, l2};
    for (int e = 2; e < phase1_epochs; ++e)
        p1.decay.emplace_back(e * epoch, 0.1);
    TrainPhase p2{"phase2", phase2_epochs * epoch, 10, lr, {}, nnet::Scope::FinalLayer, std::nullopt, 0, l1, l2};
    for (int e = 1; e < phase2_epochs; ++e)
        p2.decay.emplace_back(e * epoch, 0.1);
    s.phases = {p1, p2};
    return s;
}

} // namespace detail

/// Two-phase patch training: 5 + 4 epochs of 10,000 SGD-momentum updates.
inline TrainingSchedule twopathcnn_schedule() { return detail::two_phase("twopathcnn", 10000, 5, 4, 0.001, 1e-8, 1e-6); }

/// Dense segment training with RMSProp and halving steps.
inline TrainingSchedule wide2d_schedule()
{
    TrainingSchedule s;
    s.name = "wide2d";
    s.optimizer = nnet::OptimizerKind::RmsProp;
    s.phases = {{"dense", 80000, 12, 0.001, detail::events({25000, 39000, 49000, 59000, 71000, 75000}, 0.5),
                 nnet::Scope::All, 0.5, 75, 1e-8, 1e-6}};
    return s;
}

/// 2,000 + 800 updates; decay events at the same epoch boundaries.
inline TrainingSchedule twopathcnn_desk_schedule()
{
    TrainingSchedule s = detail::two_phase("twopathcnn-desk", 400, 5, 2, 0.005, 1e-8, 1e-6);
    s.phases[1].lr = 0.01;
    return s;
}

/// Dense training scaled down: decay events at the same fractions of the run.
inline TrainingSchedule wide2d_desk_schedule()
{
    TrainingSchedule s = wide2d_schedule();
    s.name = "wide2d-desk";
    TrainPhase& p = s.phases[0];
    const int full = p.iterations;
    p.iterations = 400;
    p.batch = 4;
    p.segment = 75;
    for (auto& [k, f] : p.decay)
        k = int(std::lround(double(k) * p.iterations / full));
    return s;
}

inline TrainingSchedule schedule_for(const std::string& preset)
{
    if (preset == "twopathcnn")
        return twopathcnn_schedule();
    if (preset == "twopathcnn-desk")
        return twopathcnn_desk_schedule();
    if (preset == "wide2d")
        return wide2d_schedule();
    if (preset == "wide2d-desk")
        return wide2d_desk_schedule();
    throw Error("no training schedule for preset '" + preset + "'");
}

inline nlohmann::json to_json(const TrainingSchedule& s)
{
    nlohmann::json j{{"name", s.name},         {"optimizer", nnet::to_string(s.optimizer)},
                     {"momentum", s.momentum}, {"rms_decay", s.rms_decay},
                     {"rms_eps", s.rms_eps},   {"phases", nlohmann::json::array()}};
    for (const auto& p : s.phases) {
        nlohmann::json d = nlohmann::json::array();
        for (const auto& [k, f] : p.decay)
            d.push_back({k, f});
        j["phases"].push_back({{"name", p.name},
                               {"iterations", p.iterations},
                               {"batch", p.batch},
                               {"lr", p.lr},
                               {"decay", d},
                               {"scope", p.scope == nnet::Scope::All ? "all" : "final_layer"},
                               {"positive_fraction", p.positive_fraction ? nlohmann::json(*p.positive_fraction)
                                                                         : nlohmann::json("uniform")},
                               {"segment", p.segment},
                               {"l1", p.l1},
                               {"l2", p.l2}});
    }
    return j;
}

inline TrainingSchedule schedule_from_json(const nlohmann::json& j)
{
    TrainingSchedule s;
    try {
        s.name = j.value("name", std::string("custom"));
        s.optimizer = nnet::parse_optimizer(j.value("optimizer", std::string("sgd_momentum")));
        s.momentum = j.value("momentum", s.momentum);
        s.rms_decay = j.value("rms_decay", s.rms_decay);
        s.rms_eps = j.value("rms_eps", s.rms_eps);
        for (const auto& pj : j.at("phases")) {
            TrainPhase p;
            p.name = pj.value("name", std::string("phase"));
            p.iterations = pj.at("iterations").get<int>();
            p.batch = pj.value("batch", p.batch);
            p.lr = pj.value("lr", p.lr);
            for (const auto& e : pj.value("decay", nlohmann::json::array()))
                p.decay.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
            const std::string scope = pj.value("scope", std::string("all"));
            if (scope != "all" && scope != "final_layer")
                throw FormatError("scope must be all or final_layer");
            p.scope = scope == "all" ? nnet::Scope::All : nnet::Scope::FinalLayer;
            const auto pf = pj.value("positive_fraction", nlohmann::json(0.5));
            if (pf.is_string()) {
                if (pf.get<std::string>() != "uniform")
                    throw FormatError("positive_fraction must be a number or \"uniform\"");
                p.positive_fraction.reset();
            } else {
                p.positive_fraction = pf.get<double>();
            }
            p.segment = pj.value("segment", 0);
            p.l1 = pj.value("l1", 0.0);
            p.l2 = pj.value("l2", 0.0);
            s.phases.push_back(p);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("training schedule: ") + e.what());
    }
    s.validate();
    return s;
}

// ----------------------------------------------------------------- training

struct LossRecord {
    std::string phase;
    int iteration = 0;  // updates completed within the phase
    double lr = 0.0;    // rate of the last update in the window
    double loss = 0.0;  // mean over the window
};

struct TrainResult {
    std::vector<LossRecord> trace;
    std::vector<std::vector<double>> lr_used;  // per phase, per update
    BatchDigest digest;
    std::size_t samples = 0;
};

struct TrainOptions {
    int log_every = 100;
    std::optional<std::filesystem::path> dump_dir;  // written when the loss turns non-finite
    std::function<void(const LossRecord&)> progress;
};

namespace detail {

inline void dump_state(const nnet::Network<float>& net, const PatchBatch& batch, const std::string& phase, int it,
                       double lr, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    nnet::save_network(net, dir / "network.bin");
    std::ofstream os(dir / "state.json");
    nlohmann::json centers = nlohmann::json::array();
    for (const auto& c : batch.centers)
        centers.push_back({c.subject, c.x, c.y, c.z});
    os << nlohmann::json{{"phase", phase}, {"iteration", it}, {"lr", lr}, {"centers", centers}}.dump(2) << '\n';
}

} // namespace detail

/// Runs every phase of the schedule in order. A fresh optimizer state is
/// used per phase. Sampling and dropout draw from separate sub-streams of
/// `seed`, so the centre sequence depends only on labels, masks and seed.
inline TrainResult train(nnet::Network<float>& net, const PatchSampler& sampler, const TrainingSchedule& schedule,
                         std::uint64_t seed, const TrainOptions& opts = {})
{
    schedule.validate();
    if (net.config().in_channels != sampler.channels())
        throw ShapeError("train: network expects " + std::to_string(net.config().in_channels) +
                         " channels, data has " + std::to_string(sampler.channels()));
    Rng sample_rng = make_rng(seed, "sampling");
    Rng drop_rng = make_rng(seed, "dropout");
    TrainResult res;
    nnet::ParamSet<float> grads;
    for (const auto& phase : schedule.phases) {
        SamplingSpec spec;
        spec.segment = phase.segment ? phase.segment : net.receptive_field();
        spec.positive_fraction = phase.positive_fraction;
        spec.phase = phase.name;
        spec.seed = seed;
        const int out = net.config().output_extent(spec.segment);
        if (out < 1)
            throw ShapeError("train: segment " + std::to_string(spec.segment) + " smaller than the receptive field");
        nnet::Optimizer<float> opt(schedule.optimizer, net.params(), schedule.momentum, schedule.rms_decay,
                                   schedule.rms_eps);
        auto& lrs = res.lr_used.emplace_back();
        lrs.reserve(std::size_t(phase.iterations));
        double window = 0.0;
        int in_window = 0;
        for (int it = 0; it < phase.iterations; ++it) {
            const double lr = phase.lr_at(it);
            const PatchBatch batch = sample_batch(sampler, spec, std::size_t(phase.batch), out, sample_rng);
            res.digest.update(batch.centers);
            double loss;
            try {
                loss = net.loss_and_gradients(batch.x, batch.labels, phase.l1, phase.l2, grads, nnet::Mode::Train,
                                              &drop_rng, phase.scope);
            } catch (const NumericError& e) {
                if (opts.dump_dir)
                    detail::dump_state(net, batch, phase.name, it, lr, *opts.dump_dir);
                throw NumericError(std::string(e.what()) + " at " + schedule.name + "/" + phase.name + " iteration " +
                                   std::to_string(it) + " (lr " + std::to_string(lr) + ")" +
                                   (opts.dump_dir ? ", state dumped to " + opts.dump_dir->string() : ""));
            }
            opt.step(net.params(), grads, lr, phase.scope);
            lrs.push_back(lr);
            res.samples += std::size_t(phase.batch);
            window += loss;
            ++in_window;
            if (in_window == opts.log_every || it + 1 == phase.iterations) {
                LossRecord rec{phase.name, it + 1, lr, window / in_window};
                if (opts.progress)
                    opts.progress(rec);
                res.trace.push_back(std::move(rec));
                window = 0.0;
                in_window = 0;
            }
        }
    }
    return res;
}

/// Phase 1 on all parameters, then phase 2 on the output layer only.
inline TrainResult train_two_phase(nnet::Network<float>& net, const PatchSampler& sampler,
                                   const TrainingSchedule& schedule, std::uint64_t seed, const TrainOptions& opts = {})
{
    if (schedule.phases.size() != 2 || schedule.phases[0].scope != nnet::Scope::All ||
        schedule.phases[1].scope != nnet::Scope::FinalLayer)
        throw Error("train_two_phase: schedule needs an all-parameter phase followed by a final-layer phase");
    return train(net, sampler, schedule, seed, opts);
}

/// Training on segments larger than the receptive field, one label per output position.
inline TrainResult train_dense(nnet::Network<float>& net, const PatchSampler& sampler, const TrainingSchedule& schedule,
                               std::uint64_t seed, const TrainOptions& opts = {})
{
    for (const auto& p : schedule.phases)
        if (p.segment <= net.receptive_field())
            throw Error("train_dense: phase '" + p.name + "' segment must exceed the receptive field " +
                        std::to_string(net.receptive_field()));
    return train(net, sampler, schedule, seed, opts);
}

inline void write_loss_csv(const TrainResult& r, const std::filesystem::path& path)
{
    std::ofstream os(path);
    if (!os)
        throw IoError("cannot write " + path.string());
    os << "phase,iteration,lr,loss\n";
    char buf[128];
    for (const auto& rec : r.trace) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g", rec.iteration, rec.lr, rec.loss);
        os << rec.phase << ',' << buf << '\n';
    }
}

// ------------------------------------------------------- cross-validation

struct Fold {
    std::vector<std::string> train;
    std::vector<std::string> validation;
};

/// Shuffled k-way partition; the first n % k folds get one extra subject.
inline std::vector<Fold> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed)
{
    if (k <= 0)
        throw Error("kfold_split: k must be positive");
    if (std::size_t(k) > ids.size())
        throw Error("kfold_split: k=" + std::to_string(k) + " exceeds subject count " + std::to_string(ids.size()));
    std::vector<std::string> order = ids;
    Rng rng{seed};
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[uniform_index(rng, i)]);
    std::vector<Fold> folds(static_cast<std::size_t>(k));
    const std::size_t base = order.size() / std::size_t(k), extra = order.size() % std::size_t(k);
    std::size_t pos = 0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        for (std::size_t i = 0; i < order.size(); ++i)
            (i >= pos && i < pos + len ? folds[f].validation : folds[f].train).push_back(order[i]);
        pos += len;
    }
    return folds;
}

} // namespace reflecta
