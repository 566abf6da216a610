#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
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

enum class Metric { MSD, NCC };

inline std::string to_string(Metric m) { return m == Metric::MSD ? "msd" : "ncc"; }

inline Metric parse_metric(const std::string& s)
{
    if (s == "msd" || s == "MSD")
        return Metric::MSD;
    if (s == "ncc" || s == "NCC")
        return Metric::NCC;
    throw Error("unknown metric '" + s + "' (expected msd or ncc)");
}

struct RegistrationParams {
    Metric metric = Metric::NCC;
    std::vector<int> pyramid_levels{4, 2, 1};
    int affine_iterations = 100;    // per level and stage
    int nonlinear_iterations = 50;  // per level
    double step_size = 1.0;         // initial optimizer step, voxels of the current level
    double min_step = 0.01;
    double fd_step = 0.1;           // central-difference step on parameters (voxel units)
    double update_sigma = 2.0;      // Gaussian smoothing of each demons update
    double field_sigma = 0.5;       // Gaussian smoothing of the accumulated field
    double robust = 0.0;            // demons force damping in residual-scale units; 0 disables
    int exp_steps = 6;              // scaling-and-squaring steps
    double tolerance = 1e-5;        // relative metric change over `window` accepted steps
    int window = 5;
    double sample_fraction = 1.0;   // share of voxels entering the affine metric
    std::uint64_t seed = 0;

    void validate() const
    {
        if (pyramid_levels.empty())
            throw Error("registration: pyramid_levels must be nonempty");
        for (std::size_t i = 0; i < pyramid_levels.size(); ++i) {
            if (pyramid_levels[i] < 1)
                throw Error("registration: pyramid factors must be >= 1");
            if (i > 0 && pyramid_levels[i] > pyramid_levels[i - 1])
                throw Error("registration: pyramid factors must be descending");
        }
        if (affine_iterations <= 0 || nonlinear_iterations <= 0)
            throw Error("registration: iteration counts must be positive");
        if (robust < 0.0)
            throw Error("registration: robust must be >= 0");
        if (update_sigma < 0.0 || field_sigma < 0.0)
            throw Error("registration: smoothing sigma must be >= 0");
        if (!(step_size > 0.0) || !(min_step > 0.0) || !(fd_step > 0.0))
            throw Error("registration: step sizes must be positive");
        if (!(sample_fraction > 0.0 && sample_fraction <= 1.0))
            throw Error("registration: sample_fraction must be in (0, 1]");
        if (exp_steps < 1)
            throw Error("registration: exp_steps must be >= 1");
    }
};

/// Settings for registering a lesioned brain to its reflection: smoother
/// updates and damped forces on large residuals, so the field follows the
/// anatomy rather than filling in one-sided lesions.
inline RegistrationParams reflective_params()
{
    RegistrationParams p;
    p.update_sigma = 4.0;
    p.robust = 1.0;
    return p;
}

inline nlohmann::json to_json(const RegistrationParams& p)
{
    return {{"metric", to_string(p.metric)},
            {"pyramid_levels", p.pyramid_levels},
            {"affine_iterations", p.affine_iterations},
            {"nonlinear_iterations", p.nonlinear_iterations},
            {"step_size", p.step_size},
            {"min_step", p.min_step},
            {"fd_step", p.fd_step},
            {"update_sigma", p.update_sigma},
            {"field_sigma", p.field_sigma},
            {"robust", p.robust},
            {"exp_steps", p.exp_steps},
            {"tolerance", p.tolerance},
            {"window", p.window},
            {"sample_fraction", p.sample_fraction},
            {"seed", p.seed}};
}

/// Missing keys keep the values of `base`; unknown keys are rejected.
inline RegistrationParams registration_params_from_json(const nlohmann::json& j,
                                                        const RegistrationParams& base = {})
{
    RegistrationParams p = base;
    const nlohmann::json known = to_json(p);
    try {
        for (const auto& [k, v] : j.items())
            if (!known.contains(k))
                throw FormatError("registration params: unknown key '" + k + "'");
        p.metric = parse_metric(j.value("metric", to_string(p.metric)));
        p.pyramid_levels = j.value("pyramid_levels", p.pyramid_levels);
        p.affine_iterations = j.value("affine_iterations", p.affine_iterations);
        p.nonlinear_iterations = j.value("nonlinear_iterations", p.nonlinear_iterations);
        p.step_size = j.value("step_size", p.step_size);
        p.min_step = j.value("min_step", p.min_step);
        p.fd_step = j.value("fd_step", p.fd_step);
        p.update_sigma = j.value("update_sigma", p.update_sigma);
        p.field_sigma = j.value("field_sigma", p.field_sigma);
        p.robust = j.value("robust", p.robust);
        p.exp_steps = j.value("exp_steps", p.exp_steps);
        p.tolerance = j.value("tolerance", p.tolerance);
        p.window = j.value("window", p.window);
        p.sample_fraction = j.value("sample_fraction", p.sample_fraction);
        p.seed = j.value("seed", p.seed);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("registration params: ") + e.what());
    }
    p.validate();
    return p;
}

/// Maps fixed-grid voxels to moving-grid locations: p -> affine(p + field(p)).
struct RegistrationResult {
    AffineTransform affine;
    std::optional<DeformationField> field;
    double metric = 0.0;
    std::vector<double> trace;  // metric after every accepted step
    bool converged = true;

    Vec3 operator()(const Vec3& p) const
    {
        return field ? affine(p + field->sample(p)) : affine(p);
    }
};

namespace detail {

// Running sums for MSD and NCC.
struct MetricAccumulator {
    double n = 0, sf = 0, sm = 0, sff = 0, smm = 0, sfm = 0, sdd = 0;

    void add(double f, double m)
    {
        n += 1;
        sf += f;
        sm += m;
        sff += f * f;
        smm += m * m;
        sfm += f * m;
        sdd += (f - m) * (f - m);
    }

    double value(Metric metric) const
    {
        if (n == 0)
            throw NumericError("similarity: empty region");
        if (metric == Metric::MSD)
            return sdd / n;
        const double vf = sff - sf * sf / n;
        const double vm = smm - sm * sm / n;
        const double cov = sfm - sf * sm / n;
        if (!(vf > 1e-12 * std::max(1.0, sff)) || !(vm > 1e-12 * std::max(1.0, smm)))
            throw NumericError("similarity: zero variance in region (NCC undefined)");
        return 1.0 - cov / std::sqrt(vf * vm);
    }
};

} // namespace detail

/// MSD (mean squared difference) or 1 - NCC over the mask (or all voxels).
/// Lower is better for both.
inline double similarity(const Volume3D& fixed, const Volume3D& moving_warped, Metric metric,
                         const Volume3D* mask = nullptr)
{
    require_same_grid(fixed, moving_warped, "similarity");
    if (mask)
        require_same_grid(fixed, *mask, "similarity");
    detail::MetricAccumulator acc;
    for (std::size_t i = 0; i < fixed.voxel_count(); ++i)
        if (!mask || (*mask)[i] > 0.5f)
            acc.add(fixed[i], moving_warped[i]);
    return acc.value(metric);
}

namespace detail {

// One pyramid level of a fixed/moving pair.
struct LevelPair {
    int factor = 1;
    Volume3D fixed;
    Volume3D moving;
    std::vector<std::size_t> samples;  // voxel indices entering the affine metric
};

inline std::vector<LevelPair> build_pyramid(const Volume3D& fixed, const Volume3D& moving,
                                            const RegistrationParams& params)
{
    std::vector<LevelPair> levels;
    Rng rng = make_rng(params.seed, "registration.samples");
    for (int f : params.pyramid_levels) {
        LevelPair lp;
        lp.factor = f;
        lp.fixed = downsample(fixed, f);
        lp.moving = downsample(moving, f);
        const std::size_t n = lp.fixed.voxel_count();
        if (params.sample_fraction >= 1.0) {
            lp.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i)
                lp.samples[i] = i;
        } else {
            for (std::size_t i = 0; i < n; ++i)
                if (uniform01(rng) < params.sample_fraction)
                    lp.samples.push_back(i);
        }
        levels.push_back(std::move(lp));
    }
    return levels;
}

inline double affine_metric(const LevelPair& lp, const AffineTransform& a, Metric metric)
{
    MetricAccumulator acc;
    for (std::size_t i : lp.samples) {
        const Index3 c = lp.fixed.coords(i);
        acc.add(lp.fixed[i], sample_trilinear(lp.moving, a(to_vec(c))));
    }
    const double v = acc.value(metric);
    if (!std::isfinite(v))
        throw RegistrationError("registration metric is not finite");
    return v;
}

// Regular-step gradient descent: move a fixed step along the normalized
// negative gradient; halve the step whenever the metric would go up.
struct DescentOutcome {
    std::vector<double> theta;
    double value = 0.0;
};

inline DescentOutcome regular_step_descent(const std::function<double(const std::vector<double>&)>& cost,
                                           std::size_t n_params, const RegistrationParams& params,
                                           std::vector<double>& trace)
{
    std::vector<double> theta(n_params, 0.0);
    double value = cost(theta);
    double step = params.step_size;
    std::vector<double> history{value};
    std::vector<double> grad(n_params), trial(n_params);
    for (int it = 0; it < params.affine_iterations; ++it) {
        double gnorm = 0.0;
        for (std::size_t k = 0; k < n_params; ++k) {
            trial = theta;
            trial[k] = theta[k] + params.fd_step;
            const double up = cost(trial);
            trial[k] = theta[k] - params.fd_step;
            const double down = cost(trial);
            grad[k] = (up - down) / (2.0 * params.fd_step);
            gnorm += grad[k] * grad[k];
        }
        gnorm = std::sqrt(gnorm);
        if (!(gnorm > 0.0))
            break;
        for (std::size_t k = 0; k < n_params; ++k)
            trial[k] = theta[k] - step * grad[k] / gnorm;
        const double v = cost(trial);
        if (v < value) {
            theta = trial;
            value = v;
            trace.push_back(v);
            history.push_back(v);
            const std::size_t w = std::size_t(params.window);
            if (history.size() > w) {
                const double old = history[history.size() - 1 - w];
                if (std::abs(old - value) <= params.tolerance * std::max(std::abs(old), 1e-12))
                    break;
            }
        } else {
            step *= 0.5;
            if (step < params.min_step)
                break;
        }
    }
    return {theta, value};
}

inline Vec3 grid_center(const Volume3D& v)
{
    return {0.5 * (v.dim(0) - 1), 0.5 * (v.dim(1) - 1), 0.5 * (v.dim(2) - 1)};
}

inline double grid_radius(const Volume3D& v)
{
    return std::max(1.0, (v.dim(0) + v.dim(1) + v.dim(2)) / 6.0);
}

// Rigid delta: Euler angles scaled so one unit moves a point at the grid
// radius by about one voxel; then translations.
inline AffineTransform rigid_delta(const std::vector<double>& th, const Vec3& c, double r)
{
    return about_center(euler_rotation(th[0] / r, th[1] / r, th[2] / r), c, {th[3], th[4], th[5]});
}

// Full affine delta: I + G / r about the centre, then translation.
inline AffineTransform affine_delta(const std::vector<double>& th, const Vec3& c, double r)
{
    Mat3 m = identity3();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            m[i][j] += th[3 * i + j] / r;
    return about_center(m, c, {th[9], th[10], th[11]});
}

} // namespace detail

/// Two-stage (rigid, then full affine) multi-resolution registration.
/// The result maps fixed voxels to moving voxels: warp(moving, result) ~ fixed.
inline RegistrationResult register_affine(const Volume3D& fixed, const Volume3D& moving,
                                          const RegistrationParams& params,
                                          const AffineTransform& init = AffineTransform::identity())
{
    params.validate();
    require_same_grid(fixed, moving, "register_affine");
    if (!fixed.all_finite() || !moving.all_finite())
        throw RegistrationError("register_affine: non-finite input intensities");

    const auto levels = detail::build_pyramid(fixed, moving, params);
    RegistrationResult result;
    AffineTransform current = init;  // fine-grid coordinates

    for (int stage = 0; stage < 2; ++stage) {
        const std::size_t n_params = stage == 0 ? 6 : 12;
        for (const auto& lp : levels) {
            const double f = lp.factor;
            const AffineTransform base = rescale_affine(current, 1.0 / f);
            const Vec3 c = detail::grid_center(lp.fixed);
            const double r = detail::grid_radius(lp.fixed);
            auto make = [&](const std::vector<double>& th) {
                const AffineTransform d = stage == 0 ? detail::rigid_delta(th, c, r) : detail::affine_delta(th, c, r);
                return compose_affine(d, base);
            };
            auto cost = [&](const std::vector<double>& th) { return detail::affine_metric(lp, make(th), params.metric); };
            // Only the finest level of the last stage shares one grid and one
            // starting point, so only its steps form a comparable trace.
            std::vector<double> scratch;
            const bool record = stage == 1 && &lp == &levels.back();
            const auto out = detail::regular_step_descent(cost, n_params, params, record ? result.trace : scratch);
            current = rescale_affine(make(out.theta), f);
        }
    }

    result.affine = current;
    if (!result.affine.is_finite())
        throw RegistrationError("register_affine: transform diverged");
    // Guarantee: never worse than the starting transform on the full grid.
    const double start = similarity(fixed, warp(moving, init), params.metric);
    result.metric = similarity(fixed, warp(moving, result.affine), params.metric);
    if (result.metric > start) {
        result.affine = init;
        result.metric = start;
    }
    return result;
}

namespace detail {

// moving sampled at affine(p + field(p)) for every voxel p of the grid.
inline Volume3D warp_composite(const Volume3D& moving, const AffineTransform& a, const DeformationField& d)
{
    const auto& dims = d.dims();
    Volume3D out(dims, moving.spacing());
    for (int z = 0; z < dims[2]; ++z)
        for (int y = 0; y < dims[1]; ++y)
            for (int x = 0; x < dims[0]; ++x) {
                const Vec3 u = d.at(x, y, z);
                out(x, y, z) = float(sample_trilinear(moving, a({x + u[0], y + u[1], z + u[2]})));
            }
    return out;
}

// Thirion demons force on the warped image, scaled by `scale`. With
// robust > 0 the force is damped by 1 / (1 + (r / (robust * s))^2), s being
// the rms of the residuals above 1% of the largest one, so large one-sided
// differences barely move the field.
inline DeformationField demons_update(const Volume3D& fixed, const Volume3D& warped, double scale,
                                      double robust = 0.0)
{
    const auto& d = fixed.dims();
    DeformationField u(d);
    double cutoff = 0.0;
    if (robust > 0.0) {
        double peak = 0.0;
        for (std::size_t i = 0; i < fixed.voxel_count(); ++i)
            peak = std::max(peak, std::abs(double(fixed[i]) - warped[i]));
        double ss = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < fixed.voxel_count(); ++i) {
            const double r = double(fixed[i]) - warped[i];
            if (std::abs(r) > 0.01 * peak) {
                ss += r * r;
                ++n;
            }
        }
        cutoff = n ? robust * std::sqrt(ss / double(n)) : 0.0;
    }
    auto diff = [&](int a, int x, int y, int z) {
        Index3 lo{x, y, z}, hi{x, y, z};
        lo[a] = std::max(0, lo[a] - 1);
        hi[a] = std::min(d[a] - 1, hi[a] + 1);
        const double span = hi[a] - lo[a];
        return span > 0 ? (warped(hi[0], hi[1], hi[2]) - double(warped(lo[0], lo[1], lo[2]))) / span : 0.0;
    };
    for (int z = 0; z < d[2]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[0]; ++x) {
                const double r = double(fixed(x, y, z)) - warped(x, y, z);
                const Vec3 g{diff(0, x, y, z), diff(1, x, y, z), diff(2, x, y, z)};
                const double denom = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + r * r;
                if (denom < 1e-12)
                    continue;
                const double w = cutoff > 0.0 ? 1.0 / (1.0 + (r / cutoff) * (r / cutoff)) : 1.0;
                u.set(x, y, z, (w * scale * r / denom) * g);
            }
    return u;
}

} // namespace detail

/// Diffeomorphic demons on top of an affine initialization. The returned
/// field lives on the fixed grid; the result maps p -> init(p + field(p)).
inline RegistrationResult register_nonlinear(const Volume3D& fixed, const Volume3D& moving,
                                             const AffineTransform& init, const RegistrationParams& params)
{
    params.validate();
    require_same_grid(fixed, moving, "register_nonlinear");
    if (!fixed.all_finite() || !moving.all_finite())
        throw RegistrationError("register_nonlinear: non-finite input intensities");

    RegistrationResult result;
    result.affine = init;
    const double affine_only = similarity(fixed, warp(moving, init), params.metric);

    std::optional<DeformationField> field;
    int prev_factor = 0;
    constexpr int kMaxRejections = 10;

    for (int f : params.pyramid_levels) {
        const Volume3D fl = downsample(fixed, f);
        const Volume3D ml = downsample(moving, f);
        const AffineTransform al = rescale_affine(init, 1.0 / f);
        DeformationField d = field ? upsample_field(*field, fl.dims(), double(prev_factor) / f) : DeformationField(fl.dims());

        Volume3D warped = detail::warp_composite(ml, al, d);
        double value = similarity(fl, warped, params.metric);
        std::vector<double> history{value};
        double scale = 1.0;
        int rejections = 0;
        for (int it = 0; it < params.nonlinear_iterations; ++it) {
            DeformationField u = smooth_field(detail::demons_update(fl, warped, scale, params.robust), params.update_sigma);
            DeformationField candidate = compose_fields(d, exponentiate_velocity(u, params.exp_steps));
            candidate = smooth_field(candidate, params.field_sigma);
            Volume3D cand_warped = detail::warp_composite(ml, al, candidate);
            const double v = similarity(fl, cand_warped, params.metric);
            if (!std::isfinite(v))
                throw RegistrationError("register_nonlinear: metric is not finite");
            if (v < value) {
                d = std::move(candidate);
                warped = std::move(cand_warped);
                value = v;
                rejections = 0;
                scale = std::min(1.0, scale * 1.5);
                if (f == params.pyramid_levels.back())
                    result.trace.push_back(v);
                history.push_back(v);
                const std::size_t w = std::size_t(params.window);
                if (history.size() > w) {
                    const double old = history[history.size() - 1 - w];
                    if (std::abs(old - value) <= params.tolerance * std::max(std::abs(old), 1e-12))
                        break;
                }
            } else {
                // No gain: retry with half the force. Only a run of
                // rejections ending on a diverging step counts as failure.
                const bool diverging = v > value + params.tolerance * std::abs(value);
                scale *= 0.5;
                if (++rejections >= kMaxRejections) {
                    if (diverging)
                        result.converged = false;
                    break;
                }
            }
        }
        field = std::move(d);
        prev_factor = f;
    }

    if (params.pyramid_levels.back() != 1)
        field = upsample_field(*field, fixed.dims(), double(prev_factor));
    result.field = std::move(field);
    result.metric = similarity(fixed, detail::warp_composite(moving, init, *result.field), params.metric);
    if (result.metric > affine_only) {
        // Never hand back something worse than the initialization.
        result.field = DeformationField(fixed.dims());
        result.metric = affine_only;
    }
    return result;
}

enum class SymmetryMode { Linear, Nonlinear };

inline SymmetryMode parse_mode(const std::string& s)
{
    if (s == "linear")
        return SymmetryMode::Linear;
    if (s == "nonlinear")
        return SymmetryMode::Nonlinear;
    throw Error("unknown registration mode '" + s + "' (expected linear or nonlinear)");
}

inline std::string to_string(SymmetryMode m) { return m == SymmetryMode::Linear ? "linear" : "nonlinear"; }

/// Turn a registration of reflect(I) (moving) onto I (fixed) into the
/// symmetry transform T(p) = reflect(result(p)) written as a correction
/// applied after the reflection.
inline SymmetryTransform symmetry_from_registration(const RegistrationResult& reg, const Index3& dims, int axis = 0)
{
    const int X = dims[axis];
    // Reflection R(p) = S p + e.
    Mat3 s = identity3();
    s[axis][axis] = -1.0;
    Vec3 e{0, 0, 0};
    e[axis] = double(X - 1);
    const AffineTransform refl{s, e};

    SymmetryTransform t = SymmetryTransform::pure_reflection(X, axis);
    t.correction = compose_affine(refl, compose_affine(reg.affine, refl));
    if (reg.field) {
        // field'(q) = S field(R q), an exact permutation of grid samples.
        DeformationField flipped(reg.field->dims());
        for (int z = 0; z < dims[2]; ++z)
            for (int y = 0; y < dims[1]; ++y)
                for (int x = 0; x < dims[0]; ++x) {
                    Index3 src{x, y, z};
                    src[axis] = X - 1 - src[axis];
                    Vec3 u = reg.field->at(src[0], src[1], src[2]);
                    u[axis] = -u[axis];
                    flipped.set(x, y, z, u);
                }
        t.field = std::move(flipped);
    }
    return t;
}

struct ReflectiveResult {
    SymmetryTransform transform;
    RegistrationResult affine;
    std::optional<RegistrationResult> nonlinear;
};

/// The channel divided by its standard deviation over the brain. No mean is
/// removed: a zero background stays zero and the brain edge keeps whatever
/// profile it has instead of gaining a step at the mask boundary.
inline Volume3D registration_input(const Volume3D& raw, const std::optional<Volume3D>& mask)
{
    const double inv_sd = 1.0 / region_stats(raw, standardization_region(raw, mask ? &*mask : nullptr)).sd;
    Volume3D out = raw;
    for (auto& v : out.data())
        v = float(v * inv_sd);
    return out;
}

/// Register a channel to its own left-right reflection. Template free:
/// the only input is the subject image itself.
inline ReflectiveResult reflective_register_detailed(const MultiModalImage& image, const std::string& channel,
                                                     SymmetryMode mode, const RegistrationParams& params)
{
    image.validate();
    const Volume3D fixed = registration_input(image.channel(channel), image.brain_mask);
    const Volume3D moving = reflect_x(fixed);
    ReflectiveResult out;
    out.affine = register_affine(fixed, moving, params);
    if (mode == SymmetryMode::Nonlinear) {
        out.nonlinear = register_nonlinear(fixed, moving, out.affine.affine, params);
        out.transform = symmetry_from_registration(*out.nonlinear, fixed.dims(), fixed.lr_axis());
    } else {
        out.transform = symmetry_from_registration(out.affine, fixed.dims(), fixed.lr_axis());
    }
    return out;
}

inline SymmetryTransform reflective_register(const MultiModalImage& image, const std::string& channel,
                                             SymmetryMode mode, const RegistrationParams& params)
{
    return reflective_register_detailed(image, channel, mode, params).transform;
}

} // namespace reflecta
