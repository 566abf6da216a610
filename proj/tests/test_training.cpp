#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "reflecta/phantom.hpp"
#include "reflecta/symmetry.hpp"
#include "reflecta/training.hpp"

using namespace reflecta;

namespace {

PhantomSpec small_spec(std::uint64_t seed)
{
    PhantomSpec s;
    s.dims = {40, 40, 32};
    s.lesion.radius_min = 3.5;
    s.lesion.radius_max = 4.5;
    s.structure_radius_min = 3.0;
    s.structure_radius_max = 4.0;
    s.structure_pairs = 3;
    s.seed = seed;
    return s;
}

MultiModalImage standardized(const PhantomSubject& s)
{
    MultiModalImage im = s.image;
    for (auto& c : im.channels)
        c = standardize(c, im.brain_mask);
    return im;
}

bool label_at(const MultiModalImage& im, const Center& c) { return (*im.labels)(c.x, c.y, c.z) > 0.5f; }

TrainingSchedule tiny_two_phase(int it1, int it2)
{
    TrainingSchedule s = twopathcnn_desk_schedule();
    s.phases[0].iterations = it1;
    s.phases[0].decay.clear();
    s.phases[1].iterations = it2;
    s.phases[1].decay.clear();
    return s;
}

} // namespace

TEST(Sampling, SpecValidation)
{
    SamplingSpec s;
    EXPECT_NO_THROW(s.validate());
    s.segment = 32;
    EXPECT_THROW(s.validate(), SamplingError);
    s.segment = 33;
    s.positive_fraction = 1.5;
    EXPECT_THROW(s.validate(), SamplingError);
    s.positive_fraction.reset();
    EXPECT_NO_THROW(s.validate());
}

TEST(Sampling, HalfPositiveBatchOfTenSplitsFiveFive)
{
    const auto im = standardized(generate_subject(small_spec(1)));
    const PatchSampler sampler({&im});
    Rng rng{3};
    const PatchBatch b = sample_batch(sampler, SamplingSpec{17, 0.5}, 10, 1, rng);
    ASSERT_EQ(b.centers.size(), 10u);
    int pos = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        pos += label_at(im, b.centers[i]);
        EXPECT_EQ(b.labels[i], int(label_at(im, b.centers[i])));
    }
    EXPECT_EQ(pos, 5);
    EXPECT_EQ(b.x.n, 10);
    EXPECT_EQ(b.x.h, 17);
}

TEST(Sampling, ZeroFractionWithoutLesionsIsAllBackground)
{
    PhantomSpec spec = small_spec(2);
    spec.lesion.count = 0;
    const auto im = standardized(generate_subject(spec));
    const PatchSampler sampler({&im});
    EXPECT_EQ(sampler.lesion_count(), 0u);
    Rng rng{1};
    const PatchBatch b = sample_batch(sampler, SamplingSpec{17, 0.0}, 50, 1, rng);
    for (int l : b.labels)
        EXPECT_EQ(l, 0);
    EXPECT_THROW(sample_batch(sampler, SamplingSpec{17, 0.5}, 10, 1, rng), SamplingError);
}

TEST(Sampling, UniformDrawsFollowPrevalence)
{
    const auto im = standardized(generate_subject(PhantomSpec{}));
    const PatchSampler sampler({&im});
    EXPECT_NEAR(sampler.prevalence(), 0.02, 0.01);
    Rng rng{11};
    const auto centers = sampler.draw(10000, std::nullopt, rng);
    int pos = 0;
    for (const auto& c : centers)
        pos += label_at(im, c);
    EXPECT_NEAR(pos / 10000.0, 0.02, 0.01);
}

TEST(Sampling, CentresStayInsideTheBrain)
{
    const auto im = standardized(generate_subject(small_spec(4)));
    const PatchSampler sampler({&im});
    Rng rng{2};
    for (const auto& c : sampler.draw(2000, std::nullopt, rng))
        EXPECT_GT((*im.brain_mask)(c.x, c.y, c.z), 0.5f);
    for (const auto& c : sampler.draw(2000, 0.5, rng))
        EXPECT_GT((*im.brain_mask)(c.x, c.y, c.z), 0.5f);
}

TEST(Sampling, SameSeedSameCentresWhateverTheChannels)
{
    const auto base = standardized(generate_subject(small_spec(5)));
    const SymmetryTransform t = SymmetryTransform::pure_reflection(base.dims()[0]);
    const auto aug = augment_channels(base, build_sdi(base, t));
    const PatchSampler a({&base}), b({&aug});
    Rng ra{7}, rb{7};
    BatchDigest da, db;
    for (int i = 0; i < 20; ++i) {
        da.update(sample_batch(a, SamplingSpec{17, 0.5}, 10, 1, ra).centers);
        db.update(sample_batch(b, SamplingSpec{17, 0.5}, 10, 1, rb).centers);
    }
    EXPECT_EQ(da.hex(), db.hex());
    Rng rc{8};
    BatchDigest dc;
    dc.update(sample_batch(a, SamplingSpec{17, 0.5}, 10, 1, rc).centers);
    EXPECT_NE(dc.hex(), da.hex());
}

TEST(Segment, InteriorMatchesDirectIndexing)
{
    const auto im = standardized(generate_subject(small_spec(6)));
    const Center c{0, 20, 18, 15};
    const auto [x, labels] = extract_segment(im, c, 9, 3);
    for (int ch = 0; ch < 2; ++ch)
        for (int i = 0; i < 9; ++i)
            for (int j = 0; j < 9; ++j)
                EXPECT_EQ(x(0, ch, i, j), im.channels[std::size_t(ch)](c.x - 4 + j, c.y - 4 + i, c.z));
    ASSERT_EQ(labels.size(), 9u);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            EXPECT_EQ(labels[std::size_t(3 * i + j)], int((*im.labels)(c.x - 1 + j, c.y - 1 + i, c.z) > 0.5f));
}

TEST(Segment, CornerIsZeroPadded)
{
    MultiModalImage im;
    Volume3D v({8, 8, 2}), l({8, 8, 2});
    for (auto& e : v.data())
        e = 3.0f;
    l(0, 0, 1) = 1.0f;
    im.channels = {v};
    im.channel_names = {"A"};
    im.labels = l;
    const auto [x, labels] = extract_segment(im, Center{0, 0, 0, 1}, 5, 3);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            EXPECT_EQ(x(0, 0, i, j), (i >= 2 && j >= 2) ? 3.0f : 0.0f);
    const std::vector<int> want{0, 0, 0, 0, 1, 0, 0, 0, 0};
    EXPECT_EQ(labels, want);
}

TEST(Segment, NeighbourhoodSizes)
{
    // Segment 43 on a receptive-field-17 network leaves a 27x27 label window.
    const auto desk = nnet::preset("twopathcnn-desk", 4);
    EXPECT_EQ(desk.receptive_field(), 17);
    EXPECT_EQ(desk.output_extent(43), 27);
    const auto wide = nnet::preset("wide2d", 4);
    const int out = wide.output_extent(75);
    EXPECT_EQ(out, 27);

    const auto im = standardized(generate_subject(small_spec(7)));
    const PatchSampler sampler({&im});
    Rng rng{1};
    const PatchBatch b = sample_batch(sampler, SamplingSpec{75, 0.5}, 12, out, rng);
    EXPECT_EQ(b.labels.size(), 12u * 27u * 27u);
}

TEST(Schedule, FullTwoPhaseCountsNineHundredThousandSamples)
{
    const TrainingSchedule s = twopathcnn_schedule();
    EXPECT_EQ(s.sample_count(), 900000u);
    EXPECT_EQ(s.phases[0].iterations, 50000);
    EXPECT_EQ(s.phases[1].iterations, 40000);
    EXPECT_EQ(s.phases[1].scope, nnet::Scope::FinalLayer);
    EXPECT_FALSE(s.phases[1].positive_fraction.has_value());
    // Decay from the third epoch on.
    EXPECT_DOUBLE_EQ(s.phases[0].lr_at(19999), 0.001);
    EXPECT_NEAR(s.phases[0].lr_at(20000), 1e-4, 1e-18);
    EXPECT_NEAR(s.phases[0].lr_at(49999), 1e-6, 1e-18);
}

TEST(Schedule, DenseDecayEvents)
{
    const TrainingSchedule s = wide2d_schedule();
    const TrainPhase& p = s.phases.at(0);
    EXPECT_EQ(p.iterations, 80000);
    EXPECT_EQ(p.batch, 12);
    EXPECT_DOUBLE_EQ(p.lr_at(24999), 0.001);
    EXPECT_DOUBLE_EQ(p.lr_at(25000), 0.0005);
    EXPECT_DOUBLE_EQ(p.lr_at(79999), 0.001 * std::pow(0.5, 6));
    EXPECT_DOUBLE_EQ(p.lr_at(79999), 1.5625e-5);
    EXPECT_EQ(s.optimizer, nnet::OptimizerKind::RmsProp);
}

TEST(Schedule, JsonRoundTripAndValidation)
{
    for (const std::string name : {"twopathcnn", "twopathcnn-desk", "wide2d", "wide2d-desk"}) {
        const TrainingSchedule s = schedule_for(name);
        const TrainingSchedule back = schedule_from_json(to_json(s));
        EXPECT_EQ(to_json(back), to_json(s)) << name;
    }
    EXPECT_THROW(schedule_for("resnet"), Error);
    TrainingSchedule bad = twopathcnn_desk_schedule();
    bad.phases[0].decay.emplace_back(10, 0.0);
    EXPECT_THROW(bad.validate(), Error);
    bad = twopathcnn_desk_schedule();
    bad.phases[1].iterations = 0;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Train, LearningRateTraceMatchesScheduleExactly)
{
    const auto im = standardized(generate_subject(small_spec(8)));
    const PatchSampler sampler({&im});
    TrainingSchedule s = tiny_two_phase(30, 20);
    s.phases[0].decay = {{10, 0.5}, {25, 0.1}};
    s.phases[1].decay = {{5, 0.5}};
    auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 1);
    const TrainResult r = train_two_phase(net, sampler, s, 5);
    ASSERT_EQ(r.lr_used.size(), 2u);
    EXPECT_EQ(r.lr_used[0], s.phases[0].lr_trace());
    EXPECT_EQ(r.lr_used[1], s.phases[1].lr_trace());
    EXPECT_EQ(r.samples, s.sample_count());
}

TEST(Train, PhaseTwoTouchesOnlyTheFinalLayer)
{
    const auto a = standardized(generate_subject(small_spec(9)));
    const auto b = standardized(generate_subject(small_spec(10)));
    const PatchSampler sampler({&a, &b});
    auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 3);
    nnet::ParamSet<float> after_phase1;
    TrainOptions opts;
    opts.log_every = 200;
    opts.progress = [&](const LossRecord& rec) {
        if (rec.phase == "phase1" && rec.iteration == 200)
            after_phase1 = net.params();
    };
    train_two_phase(net, sampler, tiny_two_phase(200, 200), 4, opts);
    ASSERT_EQ(after_phase1.size(), net.params().size());
    const std::size_t last = net.params().size() - 1;
    for (std::size_t i = 0; i < last; ++i) {
        EXPECT_EQ(after_phase1[i].w.data, net.params()[i].w.data) << "block " << i;
        EXPECT_EQ(after_phase1[i].b, net.params()[i].b) << "block " << i;
    }
    EXPECT_NE(after_phase1[last].w.data, net.params()[last].w.data);
}

TEST(Train, LossFallsFromLogTwo)
{
    const auto a = standardized(generate_subject(small_spec(11)));
    const auto b = standardized(generate_subject(small_spec(12)));
    const PatchSampler sampler({&a, &b});
    for (std::uint64_t seed : {1, 2, 3}) {
        auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), seed, nnet::InitScheme::Uniform);
        TrainingSchedule s = tiny_two_phase(600, 1);
        s.phases.pop_back();
        s.phases[0].lr = 0.005;
        TrainOptions opts;
        opts.log_every = 1;
        const TrainResult r = train(net, sampler, s, seed, opts);
        EXPECT_NEAR(r.trace.front().loss, std::log(2.0), 0.02) << "seed " << seed;
        double tail = 0;
        for (std::size_t i = r.trace.size() - 100; i < r.trace.size(); ++i)
            tail += r.trace[i].loss / 100.0;
        EXPECT_LT(tail, 0.5 * std::log(2.0)) << "seed " << seed;
    }
}

TEST(Train, DigestDependsOnlyOnSeedAndLabels)
{
    const auto base = standardized(generate_subject(small_spec(13)));
    const auto aug = augment_channels(base, build_sdi(base, SymmetryTransform::pure_reflection(base.dims()[0])));
    const PatchSampler a({&base}), b({&aug});
    auto na = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 1);
    auto nb = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 4), 1);
    const auto s = tiny_two_phase(20, 10);
    EXPECT_EQ(train(na, a, s, 9).digest.hex(), train(nb, b, s, 9).digest.hex());
}

TEST(Train, DivergenceAbortsWithDump)
{
    const auto im = standardized(generate_subject(small_spec(14)));
    const PatchSampler sampler({&im});
    auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 1);
    TrainingSchedule s = tiny_two_phase(200, 1);
    s.phases[0].lr = 1e6;
    const auto dir = std::filesystem::temp_directory_path() / "reflecta_divergence_dump";
    std::filesystem::remove_all(dir);
    TrainOptions opts;
    opts.dump_dir = dir;
    try {
        train(net, sampler, s, 1, opts);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("phase1 iteration"), std::string::npos);
    }
    EXPECT_TRUE(std::filesystem::exists(dir / "state.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "network.bin"));
    std::filesystem::remove_all(dir);
}

TEST(Train, ShapeChecks)
{
    const auto im = standardized(generate_subject(small_spec(15)));
    const PatchSampler sampler({&im});
    auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 3), 1);
    EXPECT_THROW(train(net, sampler, tiny_two_phase(1, 1), 1), ShapeError);
    auto ok = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 1);
    EXPECT_THROW(train_dense(ok, sampler, tiny_two_phase(1, 1), 1), Error);
    TrainingSchedule one = tiny_two_phase(1, 1);
    one.phases.pop_back();
    EXPECT_THROW(train_two_phase(ok, sampler, one, 1), Error);
}

TEST(Train, LossCsvHasOneRowPerRecord)
{
    const auto im = standardized(generate_subject(small_spec(16)));
    const PatchSampler sampler({&im});
    auto net = nnet::init_network<float>(nnet::preset("twopathcnn-desk", 2), 1);
    TrainOptions opts;
    opts.log_every = 10;
    const TrainResult r = train(net, sampler, tiny_two_phase(30, 15), 1, opts);
    ASSERT_EQ(r.trace.size(), 5u);  // 10, 20, 30 | 10, 15
    EXPECT_EQ(r.trace.back().iteration, 15);
    const auto path = std::filesystem::temp_directory_path() / "reflecta_loss.csv";
    write_loss_csv(r, path);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "phase,iteration,lr,loss");
    int rows = 0;
    while (std::getline(is, line))
        ++rows;
    EXPECT_EQ(rows, 5);
    std::filesystem::remove(path);
}

TEST(KFold, TwentyEightIntoSevenFoldsOfFour)
{
    std::vector<std::string> ids;
    for (int i = 0; i < 28; ++i)
        ids.push_back("s" + std::to_string(i));
    const auto folds = kfold_split(ids, 7, 42);
    ASSERT_EQ(folds.size(), 7u);
    std::multiset<std::string> seen;
    for (const auto& f : folds) {
        EXPECT_EQ(f.validation.size(), 4u);
        EXPECT_EQ(f.train.size(), 24u);
        seen.insert(f.validation.begin(), f.validation.end());
        for (const auto& v : f.validation)
            EXPECT_EQ(std::count(f.train.begin(), f.train.end(), v), 0);
    }
    EXPECT_EQ(seen, std::multiset<std::string>(ids.begin(), ids.end()));
    const auto again = kfold_split(ids, 7, 42);
    for (std::size_t i = 0; i < folds.size(); ++i)
        EXPECT_EQ(again[i].validation, folds[i].validation);
}

TEST(KFold, RemainderGoesToTheFirstFolds)
{
    const auto folds = kfold_split({"a", "b", "c", "d", "e"}, 2, 1);
    ASSERT_EQ(folds.size(), 2u);
    EXPECT_EQ(folds[0].validation.size(), 3u);
    EXPECT_EQ(folds[1].validation.size(), 2u);
    EXPECT_THROW(kfold_split({"a", "b"}, 0, 1), Error);
    EXPECT_THROW(kfold_split({"a", "b"}, 3, 1), Error);
}
