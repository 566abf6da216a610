#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "reflecta/nnet/gradcheck.hpp"
#include "reflecta/nnet/network.hpp"
#include "reflecta/nnet/optim.hpp"
#include "reflecta/nnet/serialize.hpp"

namespace fs = std::filesystem;
using namespace reflecta;
using namespace reflecta::nnet;

namespace {

template <class Real>
Tensor<Real> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double scale = 1.0)
{
    Rng rng{seed};
    Tensor<Real> t(n, c, h, w);
    for (auto& v : t.data)
        v = Real(scale * standard_normal(rng));
    return t;
}

Tensor<float> from_rows(const std::vector<std::vector<float>>& rows)
{
    Tensor<float> t(1, 1, int(rows.size()), int(rows[0].size()));
    for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
            t(0, 0, y, x) = rows[std::size_t(y)][std::size_t(x)];
    return t;
}

// Direct summation oracle for valid cross-correlation.
Tensor<double> conv_oracle(const Tensor<double>& in, const Tensor<double>& wt, const std::vector<double>& b)
{
    Tensor<double> out(in.n, wt.n, in.h - wt.h + 1, in.w - wt.w + 1);
    for (int n = 0; n < in.n; ++n)
        for (int o = 0; o < wt.n; ++o)
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x) {
                    double s = b[std::size_t(o)];
                    for (int c = 0; c < in.c; ++c)
                        for (int ky = 0; ky < wt.h; ++ky)
                            for (int kx = 0; kx < wt.w; ++kx)
                                s += in(n, c, y + ky, x + kx) * wt(o, c, ky, kx);
                    out(n, o, y, x) = s;
                }
    return out;
}

// Fan-in scaled weights keep logits moderate, so finite differences are not swamped by roundoff.
void randomize(Network<double>& net, std::uint64_t seed, double scale)
{
    Rng rng{seed};
    for (auto& p : net.params()) {
        const double sd = scale / std::sqrt(double(p.w.c) * p.w.h * p.w.w);
        for (auto& w : p.w.data)
            w = sd * standard_normal(rng);
        for (auto& b : p.b)
            b = 0.1 * standard_normal(rng);
    }
}

std::vector<int> random_labels(std::size_t n, std::uint64_t seed)
{
    Rng rng{seed};
    std::vector<int> l(n);
    for (auto& v : l)
        v = int(uniform_index(rng, 2));
    return l;
}

NetworkConfig single_path(std::vector<LayerSpec> layers, int in_channels, std::vector<LayerSpec> head)
{
    NetworkConfig c;
    c.name = "probe";
    c.in_channels = in_channels;
    c.pathways.push_back({"only", std::move(layers)});
    c.head = std::move(head);
    c.validate();
    return c;
}

double check_config(const NetworkConfig& cfg, int extent, std::uint64_t seed)
{
    Network<double> net(cfg);
    randomize(net, seed, 1.5);
    const auto x = random_tensor<double>(2, cfg.in_channels, extent, extent, seed + 1);
    const int out = cfg.output_extent(extent);
    const auto labels = random_labels(std::size_t(2 * out * out), seed + 2);
    const GradCheckResult r = gradient_check(net, x, labels, 1e-3, 1e-3, seed + 3);
    EXPECT_GT(r.checked, 10 * r.kinks) << cfg.name << ": too many parameters on kinks";
    return r.max_rel_error;
}

// Same topology as a preset with far fewer maps.
NetworkConfig small_twopath(std::uint64_t seed)
{
    Rng rng{seed};
    NetworkConfig c = twopathcnn_config(2);
    const int m1 = 2 * int(1 + uniform_index(rng, 2)), m2 = 2 * int(1 + uniform_index(rng, 2));
    c.pathways[0].layers[0].maps = m1;
    c.pathways[0].layers[4].maps = m1;
    c.pathways[1].layers[0].maps = m2;
    c.validate();
    return c;
}

NetworkConfig small_wide(std::uint64_t seed)
{
    Rng rng{seed};
    return wide2d_config(2, int(1 + uniform_index(rng, 2)), 2);
}

} // namespace

// ---- layers -----------------------------------------------------------------

TEST(Conv2d, IdentityKernel)
{
    const auto x = random_tensor<float>(2, 1, 5, 4, 1);
    Tensor<float> w(1, 1, 1, 1, 1.0f);
    const auto y = conv2d(x, w, {0.0f});
    EXPECT_EQ(y.data, x.data);
}

TEST(Conv2d, OnesKernelOnRamp)
{
    const auto x = from_rows({{0, 1, 2}, {3, 4, 5}, {6, 7, 8}});
    Tensor<float> w(1, 1, 2, 2, 1.0f);
    const auto y = conv2d(x, w, {0.0f});
    ASSERT_EQ(y.h, 2);
    EXPECT_EQ(y(0, 0, 0, 0), 8);
    EXPECT_EQ(y(0, 0, 0, 1), 12);
    EXPECT_EQ(y(0, 0, 1, 0), 20);
    EXPECT_EQ(y(0, 0, 1, 1), 24);
}

TEST(Conv2d, ZeroKernelGivesBias)
{
    const auto x = random_tensor<float>(1, 3, 6, 6, 2);
    const auto y = conv2d(x, Tensor<float>(2, 3, 3, 3), {1.5f, -2.0f});
    for (int y0 = 0; y0 < 4; ++y0)
        for (int x0 = 0; x0 < 4; ++x0) {
            EXPECT_EQ(y(0, 0, y0, x0), 1.5f);
            EXPECT_EQ(y(0, 1, y0, x0), -2.0f);
        }
}

TEST(Conv2d, MatchesDirectSummationIncludingBandedPath)
{
    // 16 * 25 * 124 * 124 > im2col budget, so this runs in row bands.
    const auto x = random_tensor<double>(1, 16, 128, 128, 3);
    const auto w = random_tensor<double>(3, 16, 5, 5, 4);
    const std::vector<double> b{0.1, -0.2, 0.3};
    ASSERT_GT(std::size_t(16 * 25) * 124 * 124, kIm2colBudget);
    const auto got = conv2d(x, w, b);
    const auto want = conv_oracle(x, w, b);
    ASSERT_TRUE(got.same_shape(want));
    for (std::size_t i = 0; i < got.size(); ++i)
        ASSERT_NEAR(got.data[i], want.data[i], 1e-9);
}

TEST(Conv2d, ShapeErrors)
{
    const auto x = random_tensor<float>(1, 2, 4, 4, 1);
    EXPECT_THROW(conv2d(x, Tensor<float>(1, 2, 5, 5), {0.0f}), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor<float>(1, 3, 3, 3), {0.0f}), ShapeError);
}

TEST(Maxout, GroupOneIsIdentity)
{
    const auto x = random_tensor<float>(2, 3, 4, 4, 5);
    EXPECT_EQ(maxout(x, 1).data, x.data);
}

TEST(Maxout, DuplicatedMapsAndElementwiseMax)
{
    auto one = random_tensor<float>(1, 1, 3, 3, 6);
    Tensor<float> dup(1, 2, 3, 3);
    std::copy(one.data.begin(), one.data.end(), dup.data.begin());
    std::copy(one.data.begin(), one.data.end(), dup.data.begin() + 9);
    EXPECT_EQ(maxout(dup, 2).data, one.data);

    Tensor<float> t(1, 2, 1, 2);
    t.data = {1, 5, 3, 2};  // map 0 = [1,5], map 1 = [3,2]
    const auto y = maxout(t, 2);
    EXPECT_EQ(y.data, (std::vector<float>{3, 5}));
    EXPECT_THROW(maxout(t, 3), ShapeError);
}

TEST(Maxpool, Oracles)
{
    const auto x = random_tensor<float>(1, 2, 5, 5, 7);
    EXPECT_EQ(maxpool(x, 1, 1).data, x.data);
    EXPECT_EQ(maxpool(from_rows({{1, 2}, {3, 4}}), 2, 1).data, std::vector<float>{4});
    EXPECT_THROW(maxpool(x, 6, 1), ShapeError);
}

TEST(Maxpool, WindowFourOn29GivesEnumeratedMax)
{
    const auto x = random_tensor<float>(1, 1, 29, 29, 8);
    const auto y = maxpool(x, 4, 1);
    ASSERT_EQ(y.h, 26);
    ASSERT_EQ(y.w, 26);
    for (int i = 0; i < 26; ++i)
        for (int j = 0; j < 26; ++j) {
            float m = x(0, 0, i, j);
            for (int dy = 0; dy < 4; ++dy)
                for (int dx = 0; dx < 4; ++dx)
                    m = std::max(m, x(0, 0, i + dy, j + dx));
            ASSERT_EQ(y(0, 0, i, j), m);
        }
}

TEST(Dropout, InvertedScalingAndRate)
{
    Tensor<float> x(1, 1, 100, 100, 1.0f);
    Rng rng{9};
    std::vector<float> mask;
    const auto y = dropout(x, 0.5, rng, mask);
    std::size_t kept = 0;
    for (float v : y.data) {
        ASSERT_TRUE(v == 0.0f || v == 2.0f);
        kept += v != 0.0f;
    }
    EXPECT_NEAR(double(kept) / 10000.0, 0.5, 0.03);
}

TEST(Resample, DownAndUp)
{
    Tensor<float> x(1, 1, 6, 6);
    for (int i = 0; i < 36; ++i)
        x.data[std::size_t(i)] = float(i);
    const auto d = downsample(x, 3);
    ASSERT_EQ(d.h, 2);
    EXPECT_FLOAT_EQ(d(0, 0, 0, 0), (0 + 1 + 2 + 6 + 7 + 8 + 12 + 13 + 14) / 9.0f);
    const auto u = upsample(d, 3);
    ASSERT_EQ(u.h, 6);
    EXPECT_EQ(u(0, 0, 5, 5), d(0, 0, 1, 1));
    EXPECT_EQ(u(0, 0, 2, 3), d(0, 0, 0, 1));
}

TEST(Concat, CropsLargerMapsCentrally)
{
    const auto a = random_tensor<float>(1, 1, 5, 5, 10);
    const auto b = random_tensor<float>(1, 2, 3, 3, 11);
    const auto c = concat<float>({a, b});
    ASSERT_EQ(c.c, 3);
    ASSERT_EQ(c.h, 3);
    EXPECT_EQ(c(0, 0, 0, 0), a(0, 0, 1, 1));
    EXPECT_EQ(c(0, 2, 2, 2), b(0, 1, 2, 2));
    EXPECT_THROW(concat<float>({random_tensor<float>(1, 1, 4, 4, 1), b}), ShapeError);
}

// ---- network ----------------------------------------------------------------

TEST(Network, TwoPathPresetMapsPatchToSingleOutput)
{
    const NetworkConfig cfg = preset("twopathcnn", 4);
    EXPECT_EQ(cfg.receptive_field(), 33);
    const auto net = init_network<float>(cfg, 1);
    const auto p = net.forward(random_tensor<float>(1, 4, 33, 33, 2));
    EXPECT_EQ(p.c, 2);
    EXPECT_EQ(p.h, 1);
    EXPECT_EQ(p.w, 1);
    EXPECT_NEAR(p.data[0] + p.data[1], 1.0, 1e-6);
    EXPECT_EQ(preset("twopathcnn", 8).in_channels, 8);
}

TEST(Network, PresetGeometry)
{
    EXPECT_EQ(preset("twopathcnn-desk", 4).receptive_field(), 17);
    const NetworkConfig wide = preset("wide2d", 8);
    EXPECT_EQ(wide.receptive_field(), 51);
    // Training segments: 43-pixel normal pathway inside a 75-pixel second pathway, 27x27 labelled outputs.
    EXPECT_EQ(NetworkConfig::propagate(wide.pathways[0].layers, 43), 27);
    EXPECT_EQ(NetworkConfig::propagate(wide.pathways[1].layers, 75), 27);
    EXPECT_EQ(wide.output_extent(75), 27);
    EXPECT_EQ(wide.conv_count(), 17u);  // 16 blocks plus the output layer
    EXPECT_THROW(preset("vgg", 4), Error);
}

TEST(Network, SoftmaxSumsToOneEverywhere)
{
    const auto net = init_network<float>(preset("wide2d-desk", 4), 3);
    const auto p = net.forward(random_tensor<float>(2, 4, 75, 75, 4));
    ASSERT_EQ(p.h, 27);
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < p.h; ++y)
            for (int x = 0; x < p.w; ++x)
                ASSERT_NEAR(p(b, 0, y, x) + p(b, 1, y, x), 1.0, 1e-6);
}

TEST(Network, ZeroFinalLayerGivesUniformOutput)
{
    auto net = init_network<float>(preset("twopathcnn-desk", 4), 5);
    auto& last = net.params()[net.final_layer()];
    std::fill(last.w.data.begin(), last.w.data.end(), 0.0f);
    const auto p = net.forward(random_tensor<float>(3, 4, 17, 17, 6));
    for (float v : p.data)
        EXPECT_EQ(v, 0.5f);
}

TEST(Network, InputChannelMismatchIsAnError)
{
    const auto net = init_network<float>(preset("twopathcnn-desk", 4), 5);
    EXPECT_THROW(net.forward(random_tensor<float>(1, 8, 17, 17, 1)), ShapeError);
    EXPECT_THROW(net.forward(random_tensor<float>(1, 4, 15, 15, 1)), ShapeError);
}

TEST(Network, ConfigValidation)
{
    NetworkConfig c = twopathcnn_desk_config(4);
    c.pathways[0].layers[1].group = 3;
    EXPECT_THROW(c.validate(), Error);
    c = twopathcnn_desk_config(4);
    c.head.back().maps = 3;
    EXPECT_THROW(c.validate(), Error);
    c = twopathcnn_desk_config(4);
    c.pathways[0].layers[0].kernel = 0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Network, ConfigJsonRoundTrip)
{
    const NetworkConfig a = preset("wide2d", 8);
    const NetworkConfig b = network_config_from_json(to_json(a));
    EXPECT_EQ(to_json(a), to_json(b));
    EXPECT_EQ(b.receptive_field(), 51);
}

// ---- loss and gradients -------------------------------------------------------

TEST(Loss, UniformPredictionsGiveLn2)
{
    auto net = init_network<double>(preset("twopathcnn-desk", 4), 7);
    auto& last = net.params()[net.final_layer()];
    std::fill(last.w.data.begin(), last.w.data.end(), 0.0);
    ParamSet<double> g;
    const double loss =
        net.loss_and_gradients(random_tensor<double>(4, 4, 17, 17, 8), {0, 1, 1, 0}, 0, 0, g, Mode::Infer);
    EXPECT_NEAR(loss, std::log(2.0), 1e-12);
}

TEST(Loss, ConfidentCorrectPredictionsGiveNearZero)
{
    auto net = init_network<double>(preset("twopathcnn-desk", 4), 7);
    auto& last = net.params()[net.final_layer()];
    std::fill(last.w.data.begin(), last.w.data.end(), 0.0);
    last.b = {-40.0, 40.0};
    ParamSet<double> g;
    const double loss = net.loss_and_gradients(random_tensor<double>(2, 4, 17, 17, 8), {1, 1}, 0, 0, g, Mode::Infer);
    EXPECT_LT(loss, 1e-12);
}

TEST(Loss, RegularisationTerms)
{
    auto net = init_network<double>(preset("twopathcnn-desk", 4), 9);
    double l1 = 0, l2 = 0;
    for (const auto& p : net.params())
        for (double w : p.w.data) {
            l1 += std::abs(w);
            l2 += w * w;
        }
    ParamSet<double> g;
    const auto x = random_tensor<double>(2, 4, 17, 17, 10);
    const double base = net.loss_and_gradients(x, {0, 1}, 0, 0, g, Mode::Infer);
    const double reg = net.loss_and_gradients(x, {0, 1}, 0.5, 0.25, g, Mode::Infer);
    EXPECT_NEAR(reg - base, 0.5 * l1 + 0.25 * l2, 1e-9);
}

TEST(Loss, LabelCountMismatchIsAnError)
{
    const auto net = init_network<double>(preset("twopathcnn-desk", 4), 9);
    ParamSet<double> g;
    EXPECT_THROW(net.loss_and_gradients(random_tensor<double>(2, 4, 17, 17, 1), {0}, 0, 0, g, Mode::Infer),
                 ShapeError);
}

TEST(GradientCheck, EveryLayerKind)
{
    const std::vector<std::pair<std::string, NetworkConfig>> cases = {
        {"conv", single_path({LayerSpec::conv(3, 3)}, 2, {LayerSpec::conv(2, 2)})},
        {"maxout", single_path({LayerSpec::conv(3, 4), LayerSpec::max_out(2)}, 2, {LayerSpec::conv(1, 2)})},
        {"maxpool", single_path({LayerSpec::conv(2, 3), LayerSpec::pool(3)}, 2, {LayerSpec::conv(2, 2)})},
        {"dropout", single_path({LayerSpec::conv(3, 3), LayerSpec::drop(0.5)}, 2, {LayerSpec::conv(1, 2)})},
        {"resample",
         single_path({LayerSpec::down(3), LayerSpec::conv(2, 3), LayerSpec::up(3)}, 2, {LayerSpec::conv(1, 2)})},
    };
    for (const auto& [name, cfg] : cases) {
        const double err = check_config(cfg, 9, 100);
        EXPECT_LT(err, 1e-4) << name;
    }
    // Concat merge of two pathways of different extent.
    NetworkConfig two;
    two.name = "concat";
    two.in_channels = 2;
    two.pathways = {{"a", {LayerSpec::conv(3, 2)}}, {"b", {LayerSpec::conv(5, 3)}}};
    two.head = {LayerSpec::conv(1, 2)};
    two.validate();
    EXPECT_LT(check_config(two, 9, 200), 1e-4);
}

TEST(GradientCheck, SmallTwoPathConfigurations)
{
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
        EXPECT_LT(check_config(small_twopath(seed), 33, seed), 1e-4) << "seed " << seed;
}

TEST(GradientCheck, SmallWideConfigurations)
{
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
        EXPECT_LT(check_config(small_wide(seed), 57, seed), 1e-4) << "seed " << seed;
}

TEST(GradientCheck, FinalLayerScopeLeavesOtherGradientsZero)
{
    Network<double> net(small_twopath(1));
    randomize(net, 3, 1.5);
    ParamSet<double> g;
    Rng rng{1};
    net.loss_and_gradients(random_tensor<double>(2, 2, 33, 33, 4), {0, 1}, 1e-3, 1e-3, g, Mode::Train, &rng,
                           Scope::FinalLayer);
    for (std::size_t i = 0; i + 1 < g.size(); ++i)
        for (double v : g[i].w.data)
            ASSERT_EQ(v, 0.0);
    double norm = 0;
    for (double v : g.back().w.data)
        norm += v * v;
    EXPECT_GT(norm, 0.0);
}

// ---- optimizers -----------------------------------------------------------------

namespace {

ParamSet<float> scalar_set(float w)
{
    ParamSet<float> p(1);
    p[0].w = Tensor<float>(1, 1, 1, 1, w);
    p[0].b = {0.0f};
    return p;
}

} // namespace

TEST(Sgd, SingleStepWithoutMomentum)
{
    auto p = scalar_set(1.0f);
    auto g = scalar_set(0.5f);
    SgdMomentum<float> opt(p, 0.0);
    opt.step(p, g, 0.1);
    EXPECT_FLOAT_EQ(p[0].w.data[0], 1.0f - 0.1f * 0.5f);
}

TEST(Sgd, ZeroGradientLeavesWeights)
{
    auto p = scalar_set(1.25f);
    SgdMomentum<float> opt(p, 0.6);
    for (int i = 0; i < 5; ++i)
        opt.step(p, scalar_set(0.0f), 0.1);
    EXPECT_EQ(p[0].w.data[0], 1.25f);
}

TEST(Sgd, TwoStepsByHand)
{
    auto p = scalar_set(1.0f);
    SgdMomentum<float> opt(p, 0.6);
    opt.step(p, scalar_set(1.0f), 0.1);  // v = -0.1,  w = 0.9
    opt.step(p, scalar_set(1.0f), 0.1);  // v = -0.16, w = 0.74
    EXPECT_NEAR(p[0].w.data[0], 0.74, 1e-6);
    EXPECT_NEAR(opt.velocity()[0].w.data[0], -0.16, 1e-6);
}

TEST(RmsProp, ZeroGradientLeavesWeights)
{
    auto p = scalar_set(2.0f);
    RmsProp<float> opt(p, 0.9, 1e-6);
    opt.step(p, scalar_set(0.0f), 0.01);
    EXPECT_EQ(p[0].w.data[0], 2.0f);
}

TEST(RmsProp, FirstStepByHand)
{
    auto p = scalar_set(1.0f);
    RmsProp<float> opt(p, 0.9, 1e-6);
    opt.step(p, scalar_set(2.0f), 0.01);
    EXPECT_NEAR(p[0].w.data[0], 1.0 - 0.01 * 2.0 / std::sqrt(0.1 * 4.0 + 1e-6), 1e-6);
}

TEST(RmsProp, StepApproachesLearningRate)
{
    auto p = scalar_set(0.0f);
    RmsProp<float> opt(p, 0.9, 1e-8);
    float prev = 0.0f;
    float step = 0.0f;
    for (int i = 0; i < 500; ++i) {
        opt.step(p, scalar_set(3.0f), 0.01);
        step = prev - p[0].w.data[0];
        prev = p[0].w.data[0];
        EXPECT_LE(step, 0.01f / std::sqrt(0.1f) + 1e-6f);
    }
    EXPECT_NEAR(step, 0.01, 1e-4);
}

// ---- initialisation ----------------------------------------------------------------

TEST(Init, UniformSchemeBoundsAndZeroBiases)
{
    const auto net = init_network<float>(preset("twopathcnn", 4), 11);
    float lo = 1, hi = -1;
    for (const auto& p : net.params()) {
        for (float w : p.w.data) {
            lo = std::min(lo, w);
            hi = std::max(hi, w);
        }
        for (float b : p.b)
            ASSERT_EQ(b, 0.0f);
    }
    EXPECT_GE(lo, -0.005f);
    EXPECT_LE(hi, 0.005f);
    EXPECT_LT(lo, -0.004f);
    EXPECT_GT(hi, 0.004f);
}

TEST(Init, HeSchemeStandardDeviation)
{
    // Global-pathway-like layer: 8 inputs, 13x13 kernel, 320 maps -> 432640 weights.
    const NetworkConfig cfg = single_path({LayerSpec::conv(13, 320), LayerSpec::max_out(2)}, 8, {LayerSpec::conv(1, 2)});
    const auto net = init_network<double>(cfg, 12, InitScheme::He);
    const auto& w = net.params()[0].w.data;
    ASSERT_GE(w.size(), 10000u);
    double s = 0, ss = 0;
    for (double v : w) {
        s += v;
        ss += v * v;
    }
    const double mean = s / double(w.size());
    const double sd = std::sqrt(ss / double(w.size()) - mean * mean);
    EXPECT_NEAR(sd, std::sqrt(2.0 / (8 * 169)), 0.05 * std::sqrt(2.0 / (8 * 169)));
}

TEST(Init, DeterministicGivenSeed)
{
    const auto a = init_network<float>(preset("wide2d-desk", 4), 13);
    const auto b = init_network<float>(preset("wide2d-desk", 4), 13);
    const auto c = init_network<float>(preset("wide2d-desk", 4), 14);
    for (std::size_t i = 0; i < a.params().size(); ++i)
        EXPECT_EQ(a.params()[i].w.data, b.params()[i].w.data);
    EXPECT_NE(a.params()[0].w.data, c.params()[0].w.data);
}

// ---- dense inference --------------------------------------------------------------

namespace {

float patch_forward_center(const Network<float>& net, const Tensor<float>& slice, int y, int x)
{
    const int rf = net.receptive_field(), r = (rf - 1) / 2;
    Tensor<float> patch(1, slice.c, rf, rf);
    for (int c = 0; c < slice.c; ++c)
        for (int dy = 0; dy < rf; ++dy)
            for (int dx = 0; dx < rf; ++dx)
                patch(0, c, dy, dx) = slice(0, c, y - r + dy, x - r + dx);
    const auto p = net.forward(patch);
    return p(0, 1, (p.h - 1) / 2, (p.w - 1) / 2);
}

void expect_dense_matches_patches(const Network<float>& net, int h, int w, std::uint64_t seed)
{
    const auto slice = random_tensor<float>(1, net.config().in_channels, h, w, seed);
    const auto dense = net.dense_forward(slice);
    const int rf = net.receptive_field(), r = (rf - 1) / 2;
    ASSERT_EQ(dense.h, h - rf + 1);
    ASSERT_EQ(dense.w, w - rf + 1);
    Rng rng{seed};
    for (int k = 0; k < 50; ++k) {
        const int i = int(uniform_index(rng, std::uint64_t(dense.h))), j = int(uniform_index(rng, std::uint64_t(dense.w)));
        ASSERT_NEAR(dense(0, 1, i, j), patch_forward_center(net, slice, i + r, j + r), 1e-6) << i << "," << j;
    }
}

Network<float> spread_network(const NetworkConfig& cfg, std::uint64_t seed)
{
    // He init gives outputs far from 0.5, so the comparison is not trivially tight.
    return init_network<float>(cfg, seed, InitScheme::He);
}

} // namespace

TEST(DenseInference, TwoPathMatchesPatchForward)
{
    expect_dense_matches_patches(spread_network(preset("twopathcnn-desk", 4), 1), 40, 37, 2);
}

TEST(DenseInference, WideMatchesPatchForwardAtEveryPhase)
{
    expect_dense_matches_patches(spread_network(preset("wide2d-desk", 4), 3), 64, 61, 4);
}

TEST(DenseInference, OutputExtentForRf33)
{
    NetworkConfig cfg = small_twopath(1);
    cfg.in_channels = 1;
    const auto net = init_network<float>(cfg, 1);
    const auto out = net.dense_forward(random_tensor<float>(1, 1, 230, 230, 5));
    EXPECT_EQ(out.h, 198);
    EXPECT_EQ(out.w, 198);
}

TEST(DenseInference, ConstantSliceGivesConstantMap)
{
    const auto net = spread_network(preset("wide2d-desk", 2), 6);
    const auto out = net.dense_forward(Tensor<float>(1, 2, 60, 60, 0.7f));
    for (int i = 0; i < out.h; ++i)
        for (int j = 0; j < out.w; ++j)
            ASSERT_NEAR(out(0, 1, i, j), out(0, 1, 0, 0), 1e-6);
}

TEST(DenseInference, SliceSmallerThanReceptiveFieldIsAnError)
{
    const auto net = init_network<float>(preset("twopathcnn-desk", 4), 1);
    EXPECT_THROW(net.dense_forward(random_tensor<float>(1, 4, 16, 40, 1)), ShapeError);
}

// ---- serialization ------------------------------------------------------------------

TEST(Serialize, RoundTripIsBitExact)
{
    const auto net = init_network<float>(preset("wide2d-desk", 8), 21, InitScheme::He);
    const auto path = fs::temp_directory_path() / "reflecta_net.bin";
    save_network(net, path);
    const auto back = load_network<float>(path);
    EXPECT_EQ(to_json(back.config()), to_json(net.config()));
    for (std::size_t i = 0; i < net.params().size(); ++i) {
        EXPECT_EQ(back.params()[i].w.data, net.params()[i].w.data);
        EXPECT_EQ(back.params()[i].b, net.params()[i].b);
    }
}

TEST(Serialize, RejectsForeignAndTruncatedFiles)
{
    const auto path = fs::temp_directory_path() / "reflecta_not_net.bin";
    std::ofstream(path) << "hello world, definitely not a network";
    EXPECT_THROW(load_network<float>(path), FormatError);
    const auto net = init_network<float>(preset("twopathcnn-desk", 4), 1);
    const auto good = fs::temp_directory_path() / "reflecta_trunc.bin";
    save_network(net, good);
    fs::resize_file(good, fs::file_size(good) / 2);
    EXPECT_THROW(load_network<float>(good), FormatError);
    EXPECT_THROW(load_network<float>("/nonexistent/net.bin"), IoError);
}
