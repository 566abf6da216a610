// reflecta: phantom generation, reflective registration, SDI features,
// training, segmentation, evaluation and the cross-validated experiment.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "reflecta/dataset.hpp"
#include "reflecta/eval.hpp"
#include "reflecta/nifti.hpp"
#include "reflecta/nnet/serialize.hpp"
#include "reflecta/phantom.hpp"
#include "reflecta/pipeline.hpp"
#include "reflecta/registration.hpp"
#include "reflecta/symmetry.hpp"
#include "reflecta/training.hpp"
#include "reflecta/transform_io.hpp"

namespace fs = std::filesystem;
using namespace reflecta;

namespace {

constexpr std::uint64_t kDefaultSeed = 7;

// Bad invocation discovered after parsing (missing input, inconsistent flags): exit 2.
struct UsageError : Error {
    using Error::Error;
};

struct Globals {
    std::uint64_t seed = kDefaultSeed;
    int threads = 1;
    bool verbose = false;
};

Globals g;

void note(const std::string& msg)
{
    if (g.verbose)
        std::cerr << "reflecta: " << msg << '\n';
}

nlohmann::json read_json(const fs::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw UsageError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json(const nlohmann::json& j, const fs::path& path)
{
    std::ofstream os(path);
    if (!os)
        throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

void require_file(const fs::path& p)
{
    if (!fs::exists(p))
        throw UsageError("file not found: " + p.string());
}

RegistrationParams load_params(const std::string& path)
{
    RegistrationParams p = path.empty() ? reflective_params() : registration_params_from_json(read_json(path), reflective_params());
    p.seed = substream(g.seed, "registration");
    return p;
}

std::vector<ManifestEntry> load_manifest_checked(const fs::path& path)
{
    auto entries = read_manifest(path);
    for (const auto& e : entries) {
        for (const auto& c : e.channels)
            require_file(c);
        if (!e.labels.empty())
            require_file(e.labels);
        if (!e.mask.empty())
            require_file(e.mask);
    }
    return entries;
}

/// Channels standardized, plus SDIs when an augmentation is requested.
std::vector<MultiModalImage> prepare_images(const std::vector<ManifestEntry>& entries, Arm arm,
                                            const std::string& channel, const RegistrationParams& params)
{
    std::vector<MultiModalImage> out(entries.size());
    parallel_for(entries.size(), g.threads, [&](std::size_t i) {
        const MultiModalImage raw = load_subject(entries[i]);
        if (arm == Arm::Baseline) {
            out[i] = standardize_channels(raw);
        } else {
            const std::string ch = channel.empty() ? raw.channel_names.front() : channel;
            const PreparedSubject s = prepare_subject(entries[i].id, raw, ch, params);
            out[i] = s.image(arm);
        }
        note("prepared " + entries[i].id);
    });
    return out;
}

// ------------------------------------------------------------------ phantom

struct PhantomArgs {
    std::string spec;
    int n = 20;
    std::string out;
};

int run_phantom(const PhantomArgs& a)
{
    PhantomSpec spec = a.spec.empty() ? PhantomSpec{} : phantom_spec_from_json(read_json(a.spec));
    spec.seed = substream(g.seed, "phantom");
    fs::create_directories(a.out);
    std::vector<ManifestEntry> rows(std::size_t(a.n));
    std::vector<double> fractions(rows.size());
    parallel_for(rows.size(), g.threads, [&](std::size_t i) {
        char id[16];
        std::snprintf(id, sizeof id, "sub%02zu", i + 1);
        const PhantomSubject s = generate_subject(cohort_member(spec, i), id);
        rows[i] = save_phantom_subject(s, a.out);
        fractions[i] = s.lesion_fraction;
        note("wrote " + std::string(id));
    });
    write_manifest(rows, fs::path(a.out) / "manifest.tsv");
    write_json(to_json(spec), fs::path(a.out) / "spec.json");
    double mean = 0.0;
    for (double f : fractions)
        mean += f / double(fractions.size());
    std::printf("%d subjects in %s, mean lesion fraction %.4f\n", a.n, a.out.c_str(), mean);
    return 0;
}

// ----------------------------------------------------------------- register

struct RegisterArgs {
    std::string in, mask, mode = "nonlinear", out, params;
};

int run_register(const RegisterArgs& a)
{
    MultiModalImage im;
    im.channels.push_back(nifti::load_nifti(a.in));
    im.channel_names.push_back("input");
    if (!a.mask.empty())
        im.brain_mask = nifti::load_nifti(a.mask);
    im.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const ReflectiveResult r = reflective_register_detailed(im, "input", parse_mode(a.mode), load_params(a.params));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_symmetry(r.transform, a.out);
    nlohmann::json rep{{"mode", a.mode},
                       {"affine_metric", r.affine.metric},
                       {"seconds", secs},
                       {"converged", r.nonlinear ? r.nonlinear->converged : r.affine.converged}};
    if (r.nonlinear)
        rep["nonlinear_metric"] = r.nonlinear->metric;
    write_json(rep, fs::path(a.out) / "report.json");
    std::printf("%s registration written to %s (%.1f s)\n", a.mode.c_str(), a.out.c_str(), secs);
    return 0;
}

// ---------------------------------------------------------------------- sdi

struct SdiArgs {
    std::string in, transform, out, mask;
};

bool is_nifti(const fs::path& p)
{
    const std::string n = p.filename().string();
    return n.ends_with(".nii") || n.ends_with(".nii.gz");
}

std::string nifti_stem(const fs::path& p)
{
    std::string n = p.filename().string();
    for (const char* ext : {".nii.gz", ".nii"})
        if (n.ends_with(ext))
            return n.substr(0, n.size() - std::string(ext).size());
    return n;
}

int run_sdi(const SdiArgs& a)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.in))
        if (e.is_regular_file() && is_nifti(e.path())) {
            const std::string stem = nifti_stem(e.path());
            if (stem != "labels" && stem != "mask" && stem != "mirror_field" && !stem.starts_with("SDI_"))
                files.push_back(e.path());
        }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw UsageError("no channel volumes in " + a.in);
    MultiModalImage im;
    for (const auto& f : files) {
        im.channels.push_back(nifti::load_nifti(f));
        im.channel_names.push_back(nifti_stem(f));
    }
    fs::path mask = a.mask.empty() ? fs::path(a.in) / "mask.nii.gz" : fs::path(a.mask);
    if (!a.mask.empty())
        require_file(mask);
    if (fs::exists(mask))
        im.brain_mask = nifti::load_nifti(mask);
    const MultiModalImage std_im = standardize_channels(im);
    const SymmetryTransform t = load_symmetry(a.transform);
    const SymmetryFeatures f =
        build_sdi(std_im, t, t.field ? SymmetryMode::Nonlinear : SymmetryMode::Linear);
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < f.sdis.channels.size(); ++i)
        nifti::save_nifti(f.sdis.channels[i], fs::path(a.out) / (f.sdis.channel_names[i] + ".nii.gz"));
    std::printf("%zu SDI volumes written to %s\n", f.sdis.channels.size(), a.out.c_str());
    return 0;
}

// -------------------------------------------------------------------- train

struct TrainArgs {
    std::string preset = "twopathcnn", aug = "none", data, out, schedule, params, channel;
    int folds = 7;
    int fold = -1;
};

int run_train(const TrainArgs& a)
{
    const Arm arm = parse_arm(a.aug);
    const auto entries = load_manifest_checked(a.data);
    if (a.folds < 1 || std::size_t(a.folds) > entries.size())
        throw UsageError("--folds must be between 1 and the subject count " + std::to_string(entries.size()));
    if (a.fold >= a.folds)
        throw UsageError("--fold must be below --folds");
    const TrainingSchedule schedule = a.schedule.empty() ? schedule_for(a.preset)
                                                         : schedule_from_json(read_json(a.schedule));
    const auto images = prepare_images(entries, arm, a.channel, load_params(a.params));

    std::vector<std::string> ids;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        ids.push_back(entries[i].id);
        index[entries[i].id] = i;
    }
    std::vector<Fold> folds = a.folds == 1 ? std::vector<Fold>{{ids, {}}}
                                           : kfold_split(ids, a.folds, substream(g.seed, "folds"));
    const nnet::NetworkConfig cfg = nnet::preset(a.preset, int(images.front().channel_count()));
    fs::create_directories(a.out);
    write_json(to_json(schedule), fs::path(a.out) / "schedule.json");
    write_json(nnet::to_json(cfg), fs::path(a.out) / "network.json");
    {
        std::ofstream os(fs::path(a.out) / "folds.csv");
        os << "fold,subject,role\n";
        for (std::size_t f = 0; f < folds.size(); ++f) {
            for (const auto& id : folds[f].train)
                os << f << ',' << id << ",train\n";
            for (const auto& id : folds[f].validation)
                os << f << ',' << id << ",validation\n";
        }
    }
    for (std::size_t f = 0; f < folds.size(); ++f) {
        if (a.fold >= 0 && std::size_t(a.fold) != f)
            continue;
        std::vector<const MultiModalImage*> train_set;
        for (const auto& id : folds[f].train)
            train_set.push_back(&images[index.at(id)]);
        const PatchSampler sampler(train_set);
        auto net = nnet::init_network<float>(cfg, substream(g.seed, "init." + a.preset, f));
        const fs::path dir = fs::path(a.out) / ("fold" + std::to_string(f));
        TrainOptions opts;
        opts.dump_dir = dir / "diverged";
        opts.progress = [&](const LossRecord& r) {
            note("fold " + std::to_string(f) + " " + r.phase + " " + std::to_string(r.iteration) + " loss " +
                 std::to_string(r.loss));
        };
        const std::uint64_t seed = substream(g.seed, "train." + a.preset, f);
        const TrainResult tr = schedule.phases.front().segment > net.receptive_field()
                                   ? train_dense(net, sampler, schedule, seed, opts)
                                   : train(net, sampler, schedule, seed, opts);
        fs::create_directories(dir);
        nnet::save_network(net, dir / "network.bin");
        write_loss_csv(tr, dir / "loss.csv");
        std::ofstream(dir / "digest.txt") << tr.digest.hex() << '\n';
        std::printf("fold %zu: %zu samples, final loss %.4f, digest %s\n", f, tr.samples,
                    tr.trace.empty() ? 0.0 : tr.trace.back().loss, tr.digest.hex().c_str());
    }
    return 0;
}

// ------------------------------------------------------------------ segment

struct SegmentArgs {
    std::string net, data, aug = "none", out, params, channel;
    std::vector<std::string> ids;
    double threshold = 0.5;
};

int run_segment(const SegmentArgs& a)
{
    const auto net = nnet::load_network<float>(a.net);
    auto entries = load_manifest_checked(a.data);
    if (!a.ids.empty()) {
        std::vector<ManifestEntry> keep;
        for (const auto& id : a.ids) {
            auto it = std::find_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.id == id; });
            if (it == entries.end())
                throw UsageError("subject '" + id + "' not in " + a.data);
            keep.push_back(*it);
        }
        entries = keep;
    }
    const auto images = prepare_images(entries, parse_arm(a.aug), a.channel, load_params(a.params));
    fs::create_directories(a.out);
    parallel_for(images.size(), g.threads, [&](std::size_t i) {
        const SegmentationResult s = segment(net, images[i], a.threshold, entries[i].id);
        nifti::save_nifti(s.probability, fs::path(a.out) / (s.id + "_prob.nii.gz"));
        nifti::save_nifti(s.labels, fs::path(a.out) / (s.id + "_seg.nii.gz"), nifti::DataType::UInt8);
        note("segmented " + s.id);
    });
    std::printf("%zu subjects segmented into %s\n", images.size(), a.out.c_str());
    return 0;
}

// ----------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string pred, gt, out;
};

int run_evaluate(const EvaluateArgs& a)
{
    std::vector<fs::path> preds;
    for (const auto& e : fs::directory_iterator(a.pred))
        if (e.is_regular_file() && is_nifti(e.path()) && !nifti_stem(e.path()).ends_with("_prob"))
            preds.push_back(e.path());
    std::sort(preds.begin(), preds.end());
    if (preds.empty())
        throw UsageError("no prediction volumes in " + a.pred);
    std::vector<SubjectMetrics> rows;
    for (const auto& p : preds) {
        std::string id = nifti_stem(p);
        if (id.ends_with("_seg"))
            id.resize(id.size() - 4);
        fs::path gt;
        for (const fs::path& c : {fs::path(a.gt) / (id + ".nii.gz"), fs::path(a.gt) / (id + ".nii"),
                                 fs::path(a.gt) / id / "labels.nii.gz"})
            if (fs::exists(c)) {
                gt = c;
                break;
            }
        if (gt.empty())
            throw UsageError("no ground truth for " + id + " under " + a.gt);
        rows.push_back(evaluate_subject(id, nifti::load_nifti(p), nifti::load_nifti(gt)));
    }
    write_metrics_csv(rows, a.out);
    const MetricsReport r = aggregate(rows);
    std::printf("%zu subjects  Dice %s  Recall %s  Precision %s\n", rows.size(), format_mean_std(r.dice).c_str(),
                format_mean_std(r.recall).c_str(), format_mean_std(r.precision).c_str());
    return 0;
}

// ------------------------------------------------------------------ density

struct DensityArgs {
    std::string in, transform, labels, mask, out;
    std::size_t n = 2000;
};

int run_density(const DensityArgs& a)
{
    const Volume3D raw = nifti::load_nifti(a.in);
    std::optional<Volume3D> mask;
    if (!a.mask.empty())
        mask = nifti::load_nifti(a.mask);
    const Volume3D channel = standardize(raw, mask);
    const auto rows = density_profile(channel, load_symmetry(a.transform), nifti::load_nifti(a.labels),
                                      mask ? &*mask : nullptr, a.n, substream(g.seed, "density"));
    write_density_csv(rows, a.out);
    std::printf("%zu differences written to %s\n", rows.size(), a.out.c_str());
    return 0;
}

// ----------------------------------------------------------------- pipeline

struct PipelineArgs {
    std::string scale = "desk", out = "reflecta-pipeline";
};

int run_pipeline_cmd(const PipelineArgs& a)
{
    PipelineConfig cfg = pipeline_config(a.scale, g.seed);
    cfg.threads = g.threads;
    if (g.verbose)
        cfg.log = [](const std::string& m) { std::cerr << "reflecta: " << m << '\n'; };
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult res = run_pipeline(cfg);
    write_pipeline_outputs(res, a.out);
    std::ifstream md(fs::path(a.out) / "summary.md");
    std::cout << md.rdbuf();
    std::printf("batch digests identical across arms: %s\n", res.digests_match() ? "yes" : "NO");
    std::printf("elapsed %.0f s, outputs in %s\n",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), a.out.c_str());
    return res.digests_match() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"reflecta: symmetry-augmented lesion segmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--seed", g.seed, "root seed for every random stream")->capture_default_str();
    app.add_option("--threads", g.threads, "per-subject worker threads (results do not depend on it)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app.add_flag("-v,--verbose", g.verbose, "progress on stderr");

    PhantomArgs pa;
    auto* phantom = app.add_subcommand("phantom", "generate a phantom cohort with manifest");
    phantom->add_option("--spec", pa.spec, "phantom spec (JSON)")->check(CLI::ExistingFile);
    phantom->add_option("--n", pa.n, "number of subjects")->capture_default_str()->check(CLI::PositiveNumber);
    phantom->add_option("--out", pa.out, "output directory")->required();

    RegisterArgs ra;
    auto* reg = app.add_subcommand("register", "reflective registration of one volume");
    reg->add_option("--in", ra.in, "input volume")->required()->check(CLI::ExistingFile);
    reg->add_option("--mask", ra.mask, "brain mask")->check(CLI::ExistingFile);
    reg->add_option("--mode", ra.mode, "linear or nonlinear")
        ->capture_default_str()
        ->check(CLI::IsMember({"linear", "nonlinear"}));
    reg->add_option("--out-transform", ra.out, "output transform directory")->required();
    reg->add_option("--params", ra.params, "registration parameters (JSON)")->check(CLI::ExistingFile);

    SdiArgs sa;
    auto* sdi = app.add_subcommand("sdi", "symmetry difference images for a subject directory");
    sdi->add_option("--in", sa.in, "subject directory")->required()->check(CLI::ExistingDirectory);
    sdi->add_option("--transform", sa.transform, "symmetry transform directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sdi->add_option("--mask", sa.mask, "brain mask (default <in>/mask.nii.gz when present)");
    sdi->add_option("--out", sa.out, "output directory")->required();

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "cross-validated training");
    tr->add_option("--preset", ta.preset, "twopathcnn, wide2d, twopathcnn-desk or wide2d-desk")
        ->capture_default_str()
        ->check(CLI::IsMember({"twopathcnn", "wide2d", "twopathcnn-desk", "wide2d-desk"}));
    tr->add_option("--aug", ta.aug, "none, lsymm or nlsymm")
        ->capture_default_str()
        ->check(CLI::IsMember({"none", "lsymm", "nlsymm"}));
    tr->add_option("--data", ta.data, "manifest")->required()->check(CLI::ExistingFile);
    tr->add_option("--folds", ta.folds, "cross-validation folds (1 trains on everything)")->capture_default_str();
    tr->add_option("--fold", ta.fold, "train only this fold");
    tr->add_option("--schedule", ta.schedule, "training schedule (JSON)")->check(CLI::ExistingFile);
    tr->add_option("--params", ta.params, "registration parameters (JSON)")->check(CLI::ExistingFile);
    tr->add_option("--channel", ta.channel, "channel used for registration (default: first)");
    tr->add_option("--out", ta.out, "run directory")->required();

    SegmentArgs sga;
    auto* seg = app.add_subcommand("segment", "dense segmentation of manifest subjects");
    seg->add_option("--net", sga.net, "network file")->required()->check(CLI::ExistingFile);
    seg->add_option("--data", sga.data, "manifest")->required()->check(CLI::ExistingFile);
    seg->add_option("--ids", sga.ids, "subset of subject ids")->delimiter(',');
    seg->add_option("--aug", sga.aug, "none, lsymm or nlsymm (must match the network)")
        ->capture_default_str()
        ->check(CLI::IsMember({"none", "lsymm", "nlsymm"}));
    seg->add_option("--threshold", sga.threshold, "lesion probability threshold")->capture_default_str();
    seg->add_option("--params", sga.params, "registration parameters (JSON)")->check(CLI::ExistingFile);
    seg->add_option("--channel", sga.channel, "channel used for registration (default: first)");
    seg->add_option("--out", sga.out, "output directory")->required();

    EvaluateArgs ea;
    auto* ev = app.add_subcommand("evaluate", "Dice, recall and precision per subject");
    ev->add_option("--pred", ea.pred, "directory of <id>_seg.nii.gz or <id>.nii.gz")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--gt", ea.gt, "directory of <id>.nii.gz or <id>/labels.nii.gz")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--out", ea.out, "report CSV")->required();

    DensityArgs da;
    auto* den = app.add_subcommand("density", "sampled intensity-minus-mirror differences by class");
    den->add_option("--in", da.in, "channel volume")->required()->check(CLI::ExistingFile);
    den->add_option("--transform", da.transform, "symmetry transform directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    den->add_option("--labels", da.labels, "lesion labels")->required()->check(CLI::ExistingFile);
    den->add_option("--mask", da.mask, "brain mask")->check(CLI::ExistingFile);
    den->add_option("--n", da.n, "samples, split evenly between classes")->capture_default_str();
    den->add_option("--out", da.out, "output CSV")->required();

    PipelineArgs pla;
    auto* pipe = app.add_subcommand("pipeline", "baseline vs LSymm vs NLSymm cross-validation on phantoms");
    pipe->add_option("--scale", pla.scale, "desk or full")->capture_default_str()->check(CLI::IsMember({"desk", "full"}));
    pipe->add_option("--out", pla.out, "output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "reflecta: " << e.what() << '\n';
        return 2;
    }

    try {
        if (phantom->parsed())
            return run_phantom(pa);
        if (reg->parsed())
            return run_register(ra);
        if (sdi->parsed())
            return run_sdi(sa);
        if (tr->parsed())
            return run_train(ta);
        if (seg->parsed())
            return run_segment(sga);
        if (ev->parsed())
            return run_evaluate(ea);
        if (den->parsed())
            return run_density(da);
        if (pipe->parsed())
            return run_pipeline_cmd(pla);
    } catch (const UsageError& e) {
        std::cerr << "reflecta: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "reflecta: error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
