#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "reflecta/error.hpp"
#include "reflecta/eval.hpp"
#include "reflecta/nnet/network.hpp"
#include "reflecta/phantom.hpp"
#include "reflecta/registration.hpp"
#include "reflecta/rng.hpp"
#include "reflecta/symmetry.hpp"
#include "reflecta/training.hpp"

namespace reflecta {

/// Runs fn(0..n-1) on up to `threads` workers. The first exception is rethrown.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn)
{
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex m;
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(threads, int(n)); ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(m);
                    if (!error)
                        error = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
}

enum class Arm { Baseline, LSymm, NLSymm };

inline const std::vector<Arm>& all_arms()
{
    static const std::vector<Arm> arms{Arm::Baseline, Arm::LSymm, Arm::NLSymm};
    return arms;
}

inline std::string to_string(Arm a) { return a == Arm::Baseline ? "baseline" : a == Arm::LSymm ? "LSymm" : "NLSymm"; }

/// Accepts the CLI spellings none|lsymm|nlsymm as well as the display names.
inline Arm parse_arm(const std::string& s)
{
    if (s == "none" || s == "baseline")
        return Arm::Baseline;
    if (s == "lsymm" || s == "LSymm")
        return Arm::LSymm;
    if (s == "nlsymm" || s == "NLSymm")
        return Arm::NLSymm;
    throw Error("unknown augmentation '" + s + "' (expected none, lsymm or nlsymm)");
}

/// One subject with standardized channels, ready for all three arms.
struct PreparedSubject {
    std::string id;
    MultiModalImage base;    // standardized channels, labels, mask
    MultiModalImage lsymm;   // base + SDIs from the affine symmetry transform
    MultiModalImage nlsymm;  // base + SDIs from the nonlinear one
    SymmetryTransform linear, nonlinear;

    const MultiModalImage& image(Arm a) const { return a == Arm::Baseline ? base : a == Arm::LSymm ? lsymm : nlsymm; }
};

inline MultiModalImage standardize_channels(const MultiModalImage& raw)
{
    raw.validate();
    MultiModalImage out = raw;
    for (auto& ch : out.channels)
        ch = standardize(ch, raw.brain_mask);
    return out;
}

/// Standardize, register once (the nonlinear stage starts from the affine
/// result), and build both SDI sets.
inline PreparedSubject prepare_subject(const std::string& id, const MultiModalImage& raw, const std::string& channel,
                                       const RegistrationParams& params)
{
    PreparedSubject s;
    s.id = id;
    s.base = standardize_channels(raw);
    const ReflectiveResult r = reflective_register_detailed(raw, channel, SymmetryMode::Nonlinear, params);
    s.linear = symmetry_from_registration(r.affine, raw.dims(), raw.channels[0].lr_axis());
    s.nonlinear = r.transform;
    s.lsymm = augment_channels(s.base, build_sdi(s.base, s.linear, SymmetryMode::Linear));
    s.nlsymm = augment_channels(s.base, build_sdi(s.base, s.nonlinear, SymmetryMode::Nonlinear));
    return s;
}

struct PipelineConfig {
    std::string scale = "desk";
    std::uint64_t seed = 7;
    int subjects = 20;
    int folds = 4;
    int threads = 1;
    std::vector<std::string> presets{"twopathcnn-desk", "wide2d-desk"};
    PhantomSpec phantom;
    RegistrationParams registration = reflective_params();
    std::string registration_channel = "FLAIR";
    double threshold = 0.5;
    std::function<void(const std::string&)> log;
};

/// Desk: 20 phantoms of 64x64x48, 4 folds, reduced presets and schedules.
/// Full: 28 phantoms of 230x230x154, 7 folds, full presets and schedules.
inline PipelineConfig pipeline_config(const std::string& scale, std::uint64_t seed)
{
    PipelineConfig c;
    c.scale = scale;
    c.seed = seed;
    if (scale == "desk")
        return c;
    if (scale != "full")
        throw Error("unknown scale '" + scale + "' (expected desk or full)");
    c.subjects = 28;
    c.folds = 7;
    c.presets = {"twopathcnn", "wide2d"};
    c.phantom.dims = {230, 230, 154};
    c.phantom.lesion.radius_min = 12.0;
    c.phantom.lesion.radius_max = 20.0;
    return c;
}

struct ArmRun {
    std::string preset;
    Arm arm = Arm::Baseline;
    int fold = 0;
    std::string digest;
    double final_loss = 0.0;
    std::vector<SubjectMetrics> metrics;
};

struct SummaryRow {
    std::string preset;
    Arm arm = Arm::Baseline;
    MetricsReport report;
};

struct PipelineResult {
    std::vector<ArmRun> runs;
    std::vector<SummaryRow> summary;

    /// True when every fold of every preset sampled the same centres in all arms.
    bool digests_match() const
    {
        std::map<std::pair<std::string, int>, std::string> first;
        for (const auto& r : runs) {
            auto [it, fresh] = first.emplace(std::make_pair(r.preset, r.fold), r.digest);
            if (!fresh && it->second != r.digest)
                return false;
        }
        return true;
    }

    const SummaryRow& row(const std::string& preset, Arm arm) const
    {
        for (const auto& r : summary)
            if (r.preset == preset && r.arm == arm)
                return r;
        throw Error("no summary row for " + preset + "/" + to_string(arm));
    }
};

inline std::vector<PreparedSubject> prepare_cohort(const PipelineConfig& cfg)
{
    PhantomSpec spec = cfg.phantom;
    spec.seed = substream(cfg.seed, "phantom");
    RegistrationParams reg = cfg.registration;
    reg.seed = substream(cfg.seed, "registration");
    std::vector<PreparedSubject> cohort(std::size_t(cfg.subjects));
    parallel_for(cohort.size(), cfg.threads, [&](std::size_t i) {
        char id[16];
        std::snprintf(id, sizeof id, "sub%02zu", i + 1);
        const PhantomSubject p = generate_subject(cohort_member(spec, i), id);
        cohort[i] = prepare_subject(id, p.image, cfg.registration_channel, reg);
        if (cfg.log)
            cfg.log("prepared " + std::string(id));
    });
    return cohort;
}

/// Train one (preset, arm, fold) job and evaluate it on the held-out subjects.
inline ArmRun run_arm(const PipelineConfig& cfg, const std::vector<PreparedSubject>& cohort, const Fold& fold,
                      int fold_index, const std::string& preset, Arm arm)
{
    std::map<std::string, const PreparedSubject*> by_id;
    for (const auto& s : cohort)
        by_id[s.id] = &s;
    std::vector<const MultiModalImage*> train_set;
    for (const auto& id : fold.train)
        train_set.push_back(&by_id.at(id)->image(arm));
    const PatchSampler sampler(train_set);

    const int channels = int(train_set.front()->channel_count());
    const nnet::NetworkConfig net_cfg = nnet::preset(preset, channels);
    nnet::Network<float> net =
        nnet::init_network<float>(net_cfg, substream(cfg.seed, "init." + preset, std::uint64_t(fold_index)));
    const TrainingSchedule schedule = schedule_for(preset);
    const std::uint64_t train_seed = substream(cfg.seed, "train." + preset, std::uint64_t(fold_index));
    const TrainResult tr = schedule.phases.front().segment > net.receptive_field()
                               ? train_dense(net, sampler, schedule, train_seed)
                               : train_two_phase(net, sampler, schedule, train_seed);

    ArmRun run{preset, arm, fold_index, tr.digest.hex(), tr.trace.empty() ? 0.0 : tr.trace.back().loss, {}};
    for (const auto& id : fold.validation) {
        const PreparedSubject& s = *by_id.at(id);
        const SegmentationResult seg = segment(net, s.image(arm), cfg.threshold, id);
        run.metrics.push_back(evaluate_subject(id, seg.labels, *s.base.labels));
    }
    if (cfg.log)
        cfg.log(preset + " " + to_string(arm) + " fold " + std::to_string(fold_index) + " digest " + run.digest);
    return run;
}

inline PipelineResult run_pipeline(const PipelineConfig& cfg, const std::vector<PreparedSubject>& cohort)
{
    std::vector<std::string> ids;
    for (const auto& s : cohort)
        ids.push_back(s.id);
    const std::vector<Fold> folds = kfold_split(ids, cfg.folds, substream(cfg.seed, "folds"));

    struct Job {
        std::string preset;
        Arm arm;
        int fold;
    };
    std::vector<Job> jobs;
    for (const auto& p : cfg.presets)
        for (Arm a : all_arms())
            for (int f = 0; f < cfg.folds; ++f)
                jobs.push_back({p, a, f});
    PipelineResult res;
    res.runs.resize(jobs.size());
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
        const Job& j = jobs[i];
        res.runs[i] = run_arm(cfg, cohort, folds[std::size_t(j.fold)], j.fold, j.preset, j.arm);
    });

    for (const auto& p : cfg.presets)
        for (Arm a : all_arms()) {
            std::vector<SubjectMetrics> all;
            for (const auto& r : res.runs)
                if (r.preset == p && r.arm == a)
                    all.insert(all.end(), r.metrics.begin(), r.metrics.end());
            res.summary.push_back({p, a, aggregate(all, to_string(a))});
        }
    return res;
}

inline PipelineResult run_pipeline(const PipelineConfig& cfg) { return run_pipeline(cfg, prepare_cohort(cfg)); }

/// metrics.csv (per subject), summary.csv, summary.md and digests.csv.
inline void write_pipeline_outputs(const PipelineResult& res, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream os(dir / name);
        if (!os)
            throw IoError("cannot write " + (dir / name).string());
        return os;
    };
    char buf[128];
    {
        auto os = open("metrics.csv");
        os << "preset,method,fold,subject,dice,recall,precision\n";
        for (const auto& r : res.runs)
            for (const auto& m : r.metrics) {
                std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f", r.fold, m.id.c_str(), m.dice, m.recall,
                              m.precision);
                os << r.preset << ',' << to_string(r.arm) << ',' << buf << '\n';
            }
    }
    {
        auto os = open("summary.csv");
        os << "preset,method,dice_mean,dice_std,recall_mean,recall_std,precision_mean,precision_std\n";
        for (const auto& s : res.summary) {
            const auto& r = s.report;
            std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.dice.mean, r.dice.std, r.recall.mean,
                          r.recall.std, r.precision.mean, r.precision.std);
            os << s.preset << ',' << to_string(s.arm) << ',' << buf << '\n';
        }
    }
    {
        auto os = open("summary.md");
        os << "| Model | Method | Dice | Recall | Precision |\n|---|---|---|---|---|\n";
        for (const auto& s : res.summary)
            os << "| " << s.preset << " | " << to_string(s.arm) << " | " << format_mean_std(s.report.dice) << " | "
               << format_mean_std(s.report.recall) << " | " << format_mean_std(s.report.precision) << " |\n";
    }
    {
        auto os = open("digests.csv");
        os << "preset,method,fold,digest\n";
        for (const auto& r : res.runs)
            os << r.preset << ',' << to_string(r.arm) << ',' << r.fold << ',' << r.digest << '\n';
    }
}

} // namespace reflecta
