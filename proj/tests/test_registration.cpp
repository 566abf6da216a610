#include <gtest/gtest.h>

#include <cmath>

#include "reflecta/filter.hpp"
#include "reflecta/phantom.hpp"
#include "reflecta/registration.hpp"
#include "reflecta/rng.hpp"
#include "reflecta/symmetry.hpp"

using namespace reflecta;

namespace {

// A few smooth anisotropic blobs: enough structure to pin down all 12 affine dofs.
Volume3D blobs(const Index3& dims, std::uint64_t seed)
{
    Rng rng{seed};
    Volume3D v(dims);
    for (int k = 0; k < 6; ++k) {
        const Vec3 c{uniform(rng, 0.3, 0.7) * dims[0], uniform(rng, 0.3, 0.7) * dims[1], uniform(rng, 0.3, 0.7) * dims[2]};
        const Vec3 s{uniform(rng, 2.5, 5.0), uniform(rng, 2.5, 5.0), uniform(rng, 2.5, 5.0)};
        const double amp = uniform(rng, 0.5, 1.5);
        for (int z = 0; z < dims[2]; ++z)
            for (int y = 0; y < dims[1]; ++y)
                for (int x = 0; x < dims[0]; ++x) {
                    const double dx = (x - c[0]) / s[0], dy = (y - c[1]) / s[1], dz = (z - c[2]) / s[2];
                    v(x, y, z) += float(amp * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz)));
                }
    }
    return v;
}

RegistrationParams fast_params()
{
    RegistrationParams p;
    p.pyramid_levels = {2, 1};
    p.affine_iterations = 60;
    p.nonlinear_iterations = 30;
    return p;
}

double max_corner_error(const SymmetryTransform& t, const std::function<Vec3(const Vec3&)>& truth, const Index3& d)
{
    double worst = 0;
    for (int cz : {0, d[2] - 1})
        for (int cy : {0, d[1] - 1})
            for (int cx : {0, d[0] - 1}) {
                const Vec3 p{double(cx), double(cy), double(cz)};
                worst = std::max(worst, norm(t(p) - truth(p)));
            }
    return worst;
}

double mean_mirror_error(const PhantomSubject& s, const SymmetryTransform& t)
{
    const auto& mask = *s.image.brain_mask;
    const auto& labels = *s.image.labels;
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.voxel_count(); ++i)
        if (mask[i] > 0.5f && labels[i] < 0.5f) {
            const Vec3 p = to_vec(mask.coords(i));
            sum += norm(t(p) - s.mirror(p));
            ++n;
        }
    return sum / double(n);
}

} // namespace

TEST(Similarity, IdenticalImagesScoreZero)
{
    const Volume3D v = blobs({12, 12, 12}, 1);
    EXPECT_NEAR(similarity(v, v, Metric::MSD), 0.0, 1e-12);
    EXPECT_NEAR(similarity(v, v, Metric::NCC), 0.0, 1e-9);
}

TEST(Similarity, NccIgnoresPositiveLinearRescaling)
{
    const Volume3D v = blobs({10, 10, 10}, 2);
    Volume3D w = v;
    for (auto& x : w.data())
        x = 3.0f * x - 2.0f;
    EXPECT_NEAR(similarity(v, w, Metric::NCC), 0.0, 1e-6);
    EXPECT_GT(similarity(v, w, Metric::MSD), 0.1);
}

TEST(Similarity, MatchesBruteForceOnTinyVolumes)
{
    Rng rng{3};
    for (int trial = 0; trial < 20; ++trial) {
        Volume3D a({2, 2, 2}), b({2, 2, 2}), mask({2, 2, 2});
        for (std::size_t i = 0; i < 8; ++i) {
            a[i] = float(standard_normal(rng));
            b[i] = float(standard_normal(rng));
            mask[i] = i % 3 == 0 ? 0.0f : 1.0f;
        }
        double sdd = 0, fa = 0, fb = 0, n = 0;
        for (std::size_t i = 0; i < 8; ++i)
            if (mask[i] > 0.5f) {
                sdd += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
                fa += a[i];
                fb += b[i];
                n += 1;
            }
        const double ma = fa / n, mb = fb / n;
        double cov = 0, va = 0, vb = 0;
        for (std::size_t i = 0; i < 8; ++i)
            if (mask[i] > 0.5f) {
                cov += (a[i] - ma) * (b[i] - mb);
                va += (a[i] - ma) * (a[i] - ma);
                vb += (b[i] - mb) * (b[i] - mb);
            }
        EXPECT_NEAR(similarity(a, b, Metric::MSD, &mask), sdd / n, 1e-9);
        EXPECT_NEAR(similarity(a, b, Metric::NCC, &mask), 1.0 - cov / std::sqrt(va * vb), 1e-9);
    }
}

TEST(Similarity, ConstantImageNccIsAnError)
{
    Volume3D a({4, 4, 4}), b = blobs({4, 4, 4}, 1);
    EXPECT_THROW(similarity(a, b, Metric::NCC), NumericError);
    EXPECT_THROW(similarity(a, Volume3D({4, 4, 5}), Metric::MSD), ShapeError);
}

TEST(Params, ValidationRejectsBadSettings)
{
    RegistrationParams p;
    p.pyramid_levels = {1, 2};
    EXPECT_THROW(p.validate(), Error);
    p = RegistrationParams{};
    p.sample_fraction = 0.0;
    EXPECT_THROW(p.validate(), Error);
    EXPECT_EQ(parse_metric("msd"), Metric::MSD);
    EXPECT_THROW(parse_metric("mi"), Error);
    EXPECT_EQ(parse_mode("nonlinear"), SymmetryMode::Nonlinear);
    p = RegistrationParams{};
    p.robust = -1.0;
    EXPECT_THROW(p.validate(), Error);
}

TEST(Params, JsonKeepsBaseForMissingKeys)
{
    const RegistrationParams r = reflective_params();
    const RegistrationParams back = registration_params_from_json(to_json(r));
    EXPECT_EQ(back.robust, r.robust);
    EXPECT_EQ(back.update_sigma, r.update_sigma);
    const RegistrationParams partial = registration_params_from_json({{"field_sigma", 1.0}}, r);
    EXPECT_EQ(partial.robust, r.robust);
    EXPECT_EQ(partial.field_sigma, 1.0);
    EXPECT_THROW(registration_params_from_json({{"sigma", 1.0}}), FormatError);
}

TEST(AffineRegistration, IdenticalImagesStayAtIdentity)
{
    const Volume3D v = blobs({24, 24, 24}, 4);
    const RegistrationResult r = register_affine(v, v, fast_params());
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j)
            EXPECT_NEAR(r.affine.linear[i][j], i == j ? 1.0 : 0.0, 1e-3);
        EXPECT_NEAR(r.affine.translation[i], 0.0, 0.05);
    }
}

TEST(AffineRegistration, RecoversTranslation)
{
    const Volume3D fixed = blobs({32, 32, 32}, 5);
    // moving(p) = fixed(p - t)  =>  the fixed-to-moving map is p + t.
    const Volume3D moving = warp(fixed, AffineTransform::translate({-3, 0, 0}));
    const RegistrationResult r = register_affine(fixed, moving, fast_params());
    const Vec3 c{15.5, 15.5, 15.5};
    const Vec3 got = r.affine(c);
    EXPECT_NEAR(got[0], c[0] + 3.0, 0.2);
    EXPECT_NEAR(got[1], c[1], 0.2);
    EXPECT_NEAR(got[2], c[2], 0.2);
}

TEST(AffineRegistration, RecoversSmallRotation)
{
    const Volume3D fixed = blobs({32, 32, 32}, 6);
    const double angle = 5.0 * 3.14159265358979323846 / 180.0;
    const AffineTransform rot = about_center(euler_rotation(0, 0, angle), {15.5, 15.5, 15.5}, {0, 0, 0});
    const Volume3D moving = warp(fixed, rot);
    RegistrationParams p = fast_params();
    p.metric = Metric::MSD;
    const double before = similarity(fixed, moving, Metric::MSD);
    const RegistrationResult r = register_affine(moving, fixed, p);
    EXPECT_LE(similarity(moving, warp(fixed, r.affine), Metric::MSD), 0.05 * before);
}

TEST(AffineRegistration, TraceIsMonotoneAndRunsAreDeterministic)
{
    const Volume3D fixed = blobs({24, 24, 24}, 7);
    const Volume3D moving = warp(fixed, AffineTransform::translate({1.5, -1, 0.5}));
    RegistrationParams p = fast_params();
    p.sample_fraction = 0.5;
    p.seed = 11;
    const RegistrationResult a = register_affine(fixed, moving, p);
    const RegistrationResult b = register_affine(fixed, moving, p);
    for (std::size_t i = 1; i < a.trace.size(); ++i)
        EXPECT_LE(a.trace[i], a.trace[i - 1]);
    EXPECT_EQ(a.affine.linear, b.affine.linear);
    EXPECT_EQ(a.affine.translation, b.affine.translation);
    EXPECT_EQ(a.trace, b.trace);
}

TEST(AffineRegistration, RejectsBadInput)
{
    const Volume3D v = blobs({8, 8, 8}, 1);
    EXPECT_THROW(register_affine(v, Volume3D({8, 8, 9}), fast_params()), ShapeError);
    Volume3D bad = v;
    bad[3] = std::nanf("");
    EXPECT_THROW(register_affine(v, bad, fast_params()), RegistrationError);
}

TEST(NonlinearRegistration, IdenticalImagesGiveNearZeroField)
{
    const Volume3D v = blobs({20, 20, 20}, 8);
    const RegistrationResult r = register_nonlinear(v, v, AffineTransform::identity(), fast_params());
    ASSERT_TRUE(r.field.has_value());
    EXPECT_LT(r.field->max_norm(), 0.05);
}

TEST(NonlinearRegistration, RecoversLocalBumpBetterThanAffine)
{
    const Index3 dims{32, 32, 32};
    const Volume3D fixed = blobs(dims, 9);
    // A localized smooth displacement that no affine map can express.
    DeformationField bump(dims);
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double r2 = (x - 12.0) * (x - 12.0) + (y - 16.0) * (y - 16.0) + (z - 16.0) * (z - 16.0);
                bump.set(x, y, z, {1.5 * std::exp(-r2 / 50.0), 0.0, 0.0});
            }
    const Volume3D moving = warp(fixed, exponentiate_velocity(bump, 6));
    const RegistrationParams p = fast_params();
    const RegistrationResult aff = register_affine(fixed, moving, p);
    const RegistrationResult nl = register_nonlinear(fixed, moving, aff.affine, p);
    const double msd_aff = similarity(fixed, warp(moving, aff.affine), Metric::MSD);
    const double msd_nl = similarity(fixed, detail::warp_composite(moving, aff.affine, *nl.field), Metric::MSD);
    EXPECT_LE(msd_nl, 0.7 * msd_aff);
    EXPECT_GT(min_jacobian_determinant(*nl.field), 0.0);
    for (std::size_t i = 1; i < nl.trace.size(); ++i)
        EXPECT_LE(nl.trace[i], nl.trace[i - 1]);
}

TEST(ReflectiveRegistration, SymmetricPhantomGivesPureReflection)
{
    const PhantomSubject s = gen_symmetric_brain(PhantomSpec{});
    const SymmetryTransform t = reflective_register(s.image, "FLAIR", SymmetryMode::Linear, RegistrationParams{});
    const auto pure = SymmetryTransform::pure_reflection(s.image.dims()[0]);
    EXPECT_LT(max_corner_error(t, pure, s.image.dims()), 0.2);
}

TEST(ReflectiveRegistration, FindsOffCenterMidPlane)
{
    PhantomSubject s = gen_symmetric_brain(PhantomSpec{});
    // Shift every channel 2 voxels toward +x: the mid-plane moves from 31.5 to 33.5.
    for (auto& ch : s.image.channels)
        ch = warp(ch, AffineTransform::translate({-2, 0, 0}));
    *s.image.brain_mask = warp(*s.image.brain_mask, AffineTransform::translate({-2, 0, 0}));
    const SymmetryTransform t = reflective_register(s.image, "FLAIR", SymmetryMode::Linear, RegistrationParams{});
    auto truth = [](const Vec3& p) { return Vec3{67.0 - p[0], p[1], p[2]}; };
    EXPECT_LT(max_corner_error(t, truth, s.image.dims()), 0.5);
}

TEST(ReflectiveRegistration, NonlinearBeatsLinearOnAsymmetricPhantom)
{
    PhantomSpec spec;
    spec.seed = 2;
    const PhantomSubject s = generate_subject(spec);
    for (const RegistrationParams& p : {RegistrationParams{}, reflective_params()}) {
        const ReflectiveResult r = reflective_register_detailed(s.image, "FLAIR", SymmetryMode::Nonlinear, p);
        const SymmetryTransform lin = symmetry_from_registration(r.affine, s.image.dims());
        const double e_nl = mean_mirror_error(s, r.transform);
        EXPECT_LT(e_nl, 1.0);
        EXPECT_LT(e_nl, mean_mirror_error(s, lin));
    }
}

TEST(ReflectiveRegistration, NonlinearCutsResidualOnAsymmetricPhantom)
{
    PhantomSpec spec;
    spec.seed = 3;
    spec.lesion.count = 0;
    const PhantomSubject s = generate_subject(spec);
    const ReflectiveResult r = reflective_register_detailed(s.image, "FLAIR", SymmetryMode::Nonlinear, reflective_params());
    const Volume3D fixed = registration_input(s.image.channel("FLAIR"), s.image.brain_mask);
    const Volume3D moving = reflect_x(fixed);
    const double aff = similarity(fixed, warp(moving, r.affine.affine), Metric::MSD);
    const double nl = similarity(fixed, detail::warp_composite(moving, r.affine.affine, *r.nonlinear->field), Metric::MSD);
    EXPECT_LE(nl, 0.7 * aff);
}

TEST(ReflectiveRegistration, DampedForceKeepsLesionContrast)
{
    PhantomSpec spec;
    spec.seed = 1;
    const PhantomSubject s = generate_subject(spec);
    const ReflectiveResult r = reflective_register_detailed(s.image, "FLAIR", SymmetryMode::Nonlinear, reflective_params());
    MultiModalImage z = s.image;
    for (auto& c : z.channels)
        c = standardize(c, z.brain_mask);
    const auto lin = build_sdi(z, symmetry_from_registration(r.affine, z.dims()), SymmetryMode::Linear).sdis.channels[0];
    const auto nl = build_sdi(z, r.transform, SymmetryMode::Nonlinear).sdis.channels[0];
    const auto& labels = *s.image.labels;
    double a = 0, b = 0;
    for (std::size_t i = 0; i < labels.voxel_count(); ++i)
        if (labels[i] > 0.5f) {
            a += std::abs(lin[i]);
            b += std::abs(nl[i]);
        }
    EXPECT_GT(b, 0.9 * a);
}

TEST(ReflectiveRegistration, SymmetryFromRegistrationIsReflectedResult)
{
    Rng rng{12};
    RegistrationResult reg;
    reg.affine = about_center(euler_rotation(0.02, -0.01, 0.03), {10, 8, 6}, {0.4, -0.3, 0.2});
    DeformationField f({20, 16, 12});
    for (int a = 0; a < 3; ++a)
        for (auto& x : f.component(a).data())
            x = float(uniform(rng, -0.5, 0.5));
    reg.field = f;
    const SymmetryTransform t = symmetry_from_registration(reg, {20, 16, 12});
    // T(p) = R(reg(p)) at grid points.
    for (int i = 0; i < 50; ++i) {
        const Vec3 p{double(uniform_index(rng, 20)), double(uniform_index(rng, 16)), double(uniform_index(rng, 12))};
        Vec3 expect = reg(p);
        expect[0] = 19.0 - expect[0];
        const Vec3 got = t(p);
        for (int a = 0; a < 3; ++a)
            EXPECT_NEAR(got[a], expect[a], 1e-9);
    }
}
