#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reflecta/error.hpp"
#include "reflecta/nnet/layers.hpp"
#include "reflecta/nnet/tensor.hpp"
#include "reflecta/rng.hpp"

namespace reflecta::nnet {

enum class LayerKind { Conv, Maxout, Maxpool, Dropout, Downsample, Upsample };

inline std::string to_string(LayerKind k)
{
    switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Maxout: return "maxout";
    case LayerKind::Maxpool: return "maxpool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Downsample: return "downsample";
    case LayerKind::Upsample: return "upsample";
    }
    return "?";
}

inline LayerKind parse_layer_kind(const std::string& s)
{
    for (auto k : {LayerKind::Conv, LayerKind::Maxout, LayerKind::Maxpool, LayerKind::Dropout, LayerKind::Downsample,
                   LayerKind::Upsample})
        if (to_string(k) == s)
            return k;
    throw FormatError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    int kernel = 1;  // conv kernel (square)
    int maps = 1;    // conv output maps
    int window = 1;  // maxpool
    int stride = 1;  // maxpool
    int group = 2;   // maxout
    double rate = 0.5;
    int factor = 1;  // down/upsample

    static LayerSpec conv(int k, int m) { return {LayerKind::Conv, k, m}; }
    static LayerSpec max_out(int g)
    {
        LayerSpec s{LayerKind::Maxout};
        s.group = g;
        return s;
    }
    static LayerSpec pool(int w, int st = 1)
    {
        LayerSpec s{LayerKind::Maxpool};
        s.window = w;
        s.stride = st;
        return s;
    }
    static LayerSpec drop(double r)
    {
        LayerSpec s{LayerKind::Dropout};
        s.rate = r;
        return s;
    }
    static LayerSpec down(int f)
    {
        LayerSpec s{LayerKind::Downsample};
        s.factor = f;
        return s;
    }
    static LayerSpec up(int f)
    {
        LayerSpec s{LayerKind::Upsample};
        s.factor = f;
        return s;
    }
};

struct PathwaySpec {
    std::string name;
    std::vector<LayerSpec> layers;
};

enum class InitScheme { Uniform, He };

inline std::string to_string(InitScheme s) { return s == InitScheme::Uniform ? "uniform_pm0005" : "he"; }
inline InitScheme parse_init(const std::string& s)
{
    if (s == "uniform_pm0005" || s == "uniform")
        return InitScheme::Uniform;
    if (s == "he")
        return InitScheme::He;
    throw FormatError("unknown init scheme '" + s + "'");
}

/// Two (or one) pathways over the same input, concatenated after central
/// cropping, followed by a head whose last layer is the 2-map output conv.
struct NetworkConfig {
    std::string name;
    int in_channels = 4;
    std::vector<PathwaySpec> pathways;
    std::vector<LayerSpec> head;
    InitScheme init = InitScheme::Uniform;
    int classes = 2;

    /// Spatial extent after a stride-1 layer list, or after down/inner/up.
    static int propagate(const std::vector<LayerSpec>& layers, int extent)
    {
        for (const auto& l : layers) {
            switch (l.kind) {
            case LayerKind::Conv: extent = extent - l.kernel + 1; break;
            case LayerKind::Maxpool: extent = extent < l.window ? 0 : (extent - l.window) / l.stride + 1; break;
            case LayerKind::Downsample: extent /= l.factor; break;
            case LayerKind::Upsample: extent *= l.factor; break;
            default: break;
            }
            if (extent < 1)
                return 0;
        }
        return extent;
    }

    static bool is_multiscale(const PathwaySpec& p) { return !p.layers.empty() && p.layers.front().kind == LayerKind::Downsample; }

    /// Input extent feeding one output position of a pathway at full resolution.
    static int pathway_rf(const PathwaySpec& p)
    {
        int span = 1, f = 1;
        for (const auto& l : p.layers) {
            if (l.kind == LayerKind::Conv)
                span += l.kernel - 1;
            else if (l.kind == LayerKind::Maxpool)
                span += l.window - 1;
            else if (l.kind == LayerKind::Downsample)
                f = l.factor;
        }
        return span * f;
    }

    int head_span() const
    {
        int span = 0;
        for (const auto& l : head)
            if (l.kind == LayerKind::Conv)
                span += l.kernel - 1;
        return span;
    }

    int receptive_field() const
    {
        int rf = 0;
        for (const auto& p : pathways)
            rf = std::max(rf, pathway_rf(p));
        return rf + head_span();
    }

    int output_extent(int input) const
    {
        int merged = -1;
        for (const auto& p : pathways) {
            const int e = propagate(p.layers, input);
            merged = merged < 0 ? e : std::min(merged, e);
        }
        return merged < 1 ? 0 : propagate(head, merged);
    }

    /// Number of parameterised (conv) layers; the last one is the output layer.
    std::size_t conv_count() const
    {
        std::size_t n = 0;
        for (const auto& p : pathways)
            for (const auto& l : p.layers)
                n += l.kind == LayerKind::Conv;
        for (const auto& l : head)
            n += l.kind == LayerKind::Conv;
        return n;
    }

    void validate() const
    {
        if (in_channels < 1)
            throw Error(name + ": in_channels must be >= 1");
        if (pathways.empty())
            throw Error(name + ": at least one pathway is required");
        auto check = [&](const std::vector<LayerSpec>& layers, int channels, const std::string& where) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                const auto& l = layers[i];
                switch (l.kind) {
                case LayerKind::Conv:
                    if (l.kernel < 1 || l.maps < 1)
                        throw Error(where + ": conv kernel and maps must be >= 1");
                    channels = l.maps;
                    break;
                case LayerKind::Maxout:
                    if (l.group < 1 || channels % l.group)
                        throw Error(where + ": maxout group " + std::to_string(l.group) + " does not divide " +
                                    std::to_string(channels) + " maps");
                    channels /= l.group;
                    break;
                case LayerKind::Maxpool:
                    if (l.window < 1 || l.stride != 1)
                        throw Error(where + ": maxpool needs window >= 1 and stride 1 for dense inference");
                    break;
                case LayerKind::Dropout:
                    if (!(l.rate >= 0.0 && l.rate < 1.0))
                        throw Error(where + ": dropout rate must be in [0, 1)");
                    break;
                case LayerKind::Downsample:
                case LayerKind::Upsample:
                    if (l.factor < 1 || l.factor % 2 == 0)
                        throw Error(where + ": resampling factor must be odd and >= 1");
                    break;
                }
            }
            return channels;
        };
        int merged = 0;
        for (const auto& p : pathways) {
            merged += check(p.layers, in_channels, name + "/" + p.name);
            for (std::size_t i = 0; i < p.layers.size(); ++i) {
                const auto k = p.layers[i].kind;
                if (k == LayerKind::Downsample && i != 0)
                    throw Error(name + "/" + p.name + ": downsample must be the first layer");
                if (k == LayerKind::Upsample &&
                    (i + 1 != p.layers.size() || !is_multiscale(p) || p.layers[i].factor != p.layers[0].factor))
                    throw Error(name + "/" + p.name + ": upsample must be last and undo the downsample");
            }
            if (is_multiscale(p) && p.layers.back().kind != LayerKind::Upsample)
                throw Error(name + "/" + p.name + ": downsampled pathway must end with upsample");
        }
        for (const auto& l : head)
            if (l.kind == LayerKind::Downsample || l.kind == LayerKind::Upsample)
                throw Error(name + ": resampling is only allowed inside a pathway");
        if (head.empty() || head.back().kind != LayerKind::Conv || head.back().maps != classes)
            throw Error(name + ": head must end with a conv producing " + std::to_string(classes) + " maps");
        check(head, merged, name + "/head");
        if (output_extent(receptive_field()) < 1)
            throw Error(name + ": receptive-field input produces no output");
    }
};

// ---- presets ---------------------------------------------------------------

/// Dual-pathway network with a 33x33 receptive field.
inline NetworkConfig twopathcnn_config(int in_channels)
{
    NetworkConfig c;
    c.name = "twopathcnn";
    c.in_channels = in_channels;
    c.pathways.push_back({"local",
                          {LayerSpec::conv(7, 128), LayerSpec::max_out(2), LayerSpec::pool(4), LayerSpec::drop(0.5),
                           LayerSpec::conv(3, 128), LayerSpec::max_out(2), LayerSpec::pool(2), LayerSpec::drop(0.5)}});
    c.pathways.push_back({"global", {LayerSpec::conv(13, 320), LayerSpec::max_out(2)}});
    c.head = {LayerSpec::conv(21, 2)};
    c.init = InitScheme::Uniform;
    return c;
}

/// Same topology scaled for a single CPU core: 17x17 receptive field, 8 maps per maxout unit.
/// With only 8 maps, rate-0.5 dropout ahead of the max layers shifts the
/// train-time activations far from the inference ones, hence 0.1.
inline NetworkConfig twopathcnn_desk_config(int in_channels)
{
    NetworkConfig c;
    c.name = "twopathcnn-desk";
    c.in_channels = in_channels;
    c.pathways.push_back({"local",
                          {LayerSpec::conv(5, 16), LayerSpec::max_out(2), LayerSpec::pool(3), LayerSpec::drop(0.1),
                           LayerSpec::conv(3, 16), LayerSpec::max_out(2), LayerSpec::pool(2), LayerSpec::drop(0.1)}});
    c.pathways.push_back({"global", {LayerSpec::conv(10, 16), LayerSpec::max_out(2)}});
    c.head = {LayerSpec::conv(8, 2)};
    c.init = InitScheme::He;
    return c;
}

namespace detail {

inline std::vector<LayerSpec> wide_stack(int maps)
{
    std::vector<LayerSpec> s;
    for (int i = 0; i < 6; ++i) {
        s.push_back(LayerSpec::conv(3, 2 * maps));
        s.push_back(LayerSpec::max_out(2));
    }
    s.push_back(LayerSpec::conv(5, 2 * maps));
    s.push_back(LayerSpec::max_out(2));
    return s;
}

} // namespace detail

/// Deeper dual-resolution network: a full-resolution pathway and a pathway
/// working on 3x averaged input, 7 conv blocks each, two 1x1 hidden blocks
/// with dropout and a 1x1 output layer (16 conv blocks before the output).
inline NetworkConfig wide2d_config(int in_channels, int maps = 30, int hidden = 150)
{
    NetworkConfig c;
    c.name = maps == 30 ? "wide2d" : "wide2d-desk";
    c.in_channels = in_channels;
    c.pathways.push_back({"normal", detail::wide_stack(maps)});
    auto low = detail::wide_stack(maps);
    low.insert(low.begin(), LayerSpec::down(3));
    low.push_back(LayerSpec::up(3));
    c.pathways.push_back({"lowres", low});
    c.head = {LayerSpec::conv(1, 2 * hidden), LayerSpec::max_out(2), LayerSpec::drop(0.5),
              LayerSpec::conv(1, 2 * hidden), LayerSpec::max_out(2), LayerSpec::drop(0.5), LayerSpec::conv(1, 2)};
    c.init = InitScheme::He;
    return c;
}

inline NetworkConfig wide2d_desk_config(int in_channels) { return wide2d_config(in_channels, 8, 16); }

inline NetworkConfig preset(const std::string& name, int in_channels)
{
    NetworkConfig c;
    if (name == "twopathcnn")
        c = twopathcnn_config(in_channels);
    else if (name == "twopathcnn-desk")
        c = twopathcnn_desk_config(in_channels);
    else if (name == "wide2d")
        c = wide2d_config(in_channels);
    else if (name == "wide2d-desk")
        c = wide2d_desk_config(in_channels);
    else
        throw Error("unknown network preset '" + name + "'");
    c.validate();
    return c;
}

// ---- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const LayerSpec& l)
{
    nlohmann::json j{{"kind", to_string(l.kind)}};
    switch (l.kind) {
    case LayerKind::Conv: j["kernel"] = l.kernel; j["maps"] = l.maps; break;
    case LayerKind::Maxout: j["group"] = l.group; break;
    case LayerKind::Maxpool: j["window"] = l.window; j["stride"] = l.stride; break;
    case LayerKind::Dropout: j["rate"] = l.rate; break;
    default: j["factor"] = l.factor; break;
    }
    return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j)
{
    LayerSpec l;
    l.kind = parse_layer_kind(j.at("kind").get<std::string>());
    l.kernel = j.value("kernel", 1);
    l.maps = j.value("maps", 1);
    l.window = j.value("window", 1);
    l.stride = j.value("stride", 1);
    l.group = j.value("group", 2);
    l.rate = j.value("rate", 0.5);
    l.factor = j.value("factor", 1);
    return l;
}

inline nlohmann::json to_json(const NetworkConfig& c)
{
    nlohmann::json j{{"name", c.name}, {"in_channels", c.in_channels}, {"init", to_string(c.init)},
                     {"classes", c.classes}};
    for (const auto& p : c.pathways) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : p.layers)
            layers.push_back(to_json(l));
        j["pathways"].push_back({{"name", p.name}, {"layers", layers}});
    }
    j["head"] = nlohmann::json::array();
    for (const auto& l : c.head)
        j["head"].push_back(to_json(l));
    return j;
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j)
{
    NetworkConfig c;
    try {
        c.name = j.value("name", std::string("custom"));
        c.in_channels = j.at("in_channels").get<int>();
        c.init = parse_init(j.value("init", std::string("uniform_pm0005")));
        c.classes = j.value("classes", 2);
        for (const auto& p : j.at("pathways")) {
            PathwaySpec ps{p.value("name", std::string("pathway")), {}};
            for (const auto& l : p.at("layers"))
                ps.layers.push_back(layer_from_json(l));
            c.pathways.push_back(ps);
        }
        for (const auto& l : j.at("head"))
            c.head.push_back(layer_from_json(l));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("network config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- network ---------------------------------------------------------------

template <class Real>
struct ParamBlock {
    Tensor<Real> w;  // (out, in, k, k)
    std::vector<Real> b;

    std::size_t size() const { return w.size() + b.size(); }
};

template <class Real>
using ParamSet = std::vector<ParamBlock<Real>>;

template <class Real>
ParamSet<Real> zeros_like(const ParamSet<Real>& p)
{
    ParamSet<Real> z(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        z[i].w = Tensor<Real>(p[i].w.n, p[i].w.c, p[i].w.h, p[i].w.w);
        z[i].b.assign(p[i].b.size(), Real(0));
    }
    return z;
}

enum class Mode { Train, Infer };
/// Which parameters receive gradients: everything, or only the output layer.
enum class Scope { All, FinalLayer };

template <class Real>
class Network {
public:
    Network() = default;
    explicit Network(NetworkConfig config) : config_(std::move(config))
    {
        config_.validate();
        build_params();
    }

    const NetworkConfig& config() const { return config_; }
    ParamSet<Real>& params() { return params_; }
    const ParamSet<Real>& params() const { return params_; }
    std::size_t final_layer() const { return params_.size() - 1; }
    int receptive_field() const { return config_.receptive_field(); }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_)
            n += p.size();
        return n;
    }

    /// Same configuration and weights in another precision.
    template <class Other>
    Network<Other> cast() const
    {
        Network<Other> o(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            o.params()[i].w = params_[i].w.template cast<Other>();
            o.params()[i].b.assign(params_[i].b.begin(), params_[i].b.end());
        }
        return o;
    }

    struct LayerCache {
        Tensor<Real> input;  // conv only
        std::vector<std::uint32_t> argmax;
        std::vector<Real> mask;
        int n = 0, c = 0, h = 0, w = 0;
    };

    struct Cache {
        std::vector<std::vector<LayerCache>> pathways;
        std::vector<LayerCache> head;
        std::vector<Tensor<Real>> pathway_out;  // shapes only are needed
        std::vector<int> out_h, out_w, out_c;
    };

    /// Class logits for a batch (N, C, S, S). Dropout is active only in Train mode.
    Tensor<Real> forward_logits(const Tensor<Real>& x, Mode mode, Rng* rng = nullptr, Cache* cache = nullptr) const
    {
        check_input(x);
        if (mode == Mode::Train && !rng)
            throw Error("forward: training mode needs a dropout generator");
        const int target = merged_extent(x.h);
        if (target < 1)
            throw ShapeError("forward: input " + x.shape_string() + " smaller than receptive field " +
                             std::to_string(receptive_field()));
        std::vector<Tensor<Real>> outs;
        if (cache) {
            cache->pathways.assign(config_.pathways.size(), {});
            cache->out_h.clear();
            cache->out_w.clear();
            cache->out_c.clear();
        }
        std::size_t pi = 0;
        for (std::size_t p = 0; p < config_.pathways.size(); ++p) {
            const auto& spec = config_.pathways[p];
            Tensor<Real> in = x;
            if (!NetworkConfig::is_multiscale(spec)) {
                // Stride-1 pathway: only the central part of the input reaches the merged output.
                const int excess = NetworkConfig::propagate(spec.layers, x.h) - target;
                const int excess_w = NetworkConfig::propagate(spec.layers, x.w) - merged_extent(x.w);
                if (excess > 0 || excess_w > 0)
                    in = center_crop(x, x.h - excess, x.w - excess_w);
            }
            Tensor<Real> y = run(spec.layers, in, mode, rng, cache ? &cache->pathways[p] : nullptr, pi);
            if (cache) {
                cache->out_h.push_back(y.h);
                cache->out_w.push_back(y.w);
                cache->out_c.push_back(y.c);
            }
            outs.push_back(std::move(y));
        }
        Tensor<Real> merged = outs.size() == 1 ? std::move(outs[0]) : concat(outs);
        if (cache)
            cache->head.clear();
        return run(config_.head, merged, mode, rng, cache ? &cache->head : nullptr, pi);
    }

    Tensor<Real> forward(const Tensor<Real>& x, Mode mode = Mode::Infer, Rng* rng = nullptr) const
    {
        return softmax(forward_logits(x, mode, rng));
    }

    /// Mean NLL over all output positions plus l1*sum|w| + l2*sum w^2 over
    /// conv weights (biases are not penalised). Gradients go to `grads`
    /// (overwritten); with Scope::FinalLayer only the output layer's entries are filled.
    double loss_and_gradients(const Tensor<Real>& x, const std::vector<int>& labels, double l1, double l2,
                              ParamSet<Real>& grads, Mode mode = Mode::Train, Rng* rng = nullptr,
                              Scope scope = Scope::All) const
    {
        Cache cache;
        const Tensor<Real> logits = forward_logits(x, mode, rng, &cache);
        Tensor<Real> g;
        double loss = nll_loss(logits, labels, g);
        grads = zeros_like(params_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const bool active = scope == Scope::All || i == final_layer();
            for (std::size_t k = 0; k < params_[i].w.size(); ++k) {
                const Real w = params_[i].w.data[k];
                loss += l1 * std::abs(double(w)) + l2 * double(w) * double(w);
                if (active)
                    grads[i].w.data[k] = Real(l1 * (w > 0 ? 1.0 : w < 0 ? -1.0 : 0.0) + 2.0 * l2 * double(w));
            }
        }
        if (!std::isfinite(loss))
            throw NumericError("loss is not finite");

        std::size_t pi = params_.size();
        g = back(config_.head, cache.head, g, grads, pi, scope, true);
        if (scope == Scope::FinalLayer)
            return loss;
        // Split the merged gradient back to the pathways.
        std::vector<Tensor<Real>> parts;
        int off = 0;
        for (std::size_t p = 0; p < config_.pathways.size(); ++p) {
            const int c = cache.out_c[p];
            Tensor<Real> part(g.n, c, g.h, g.w);
            for (int b = 0; b < g.n; ++b)
                std::copy_n(&g(b, off, 0, 0), part.item(), part.item_ptr(b));
            off += c;
            if (cache.out_h[p] != g.h || cache.out_w[p] != g.w)
                part = uncrop(part, cache.out_h[p], cache.out_w[p]);
            parts.push_back(std::move(part));
        }
        // Pathways own consecutive parameter ranges; walk them last to first.
        for (std::size_t p = config_.pathways.size(); p-- > 0;)
            back(config_.pathways[p].layers, cache.pathways[p], parts[p], grads, pi, scope, false);
        return loss;
    }

    /// Class probabilities for every valid position of one 2D input (1, C, H, W):
    /// output (1, classes, H - RF + 1, W - RF + 1), position (i, j) centred on input (i + r, j + r)
    /// with r = (RF - 1) / 2. Equal to the centre output of the network run on the
    /// RF x RF patch around that input position.
    Tensor<Real> dense_forward(const Tensor<Real>& slice) const
    {
        check_input(slice);
        if (slice.n != 1)
            throw ShapeError("dense_forward: expects a single slice");
        const int rf = receptive_field();
        if (slice.h < rf || slice.w < rf)
            throw ShapeError("dense_forward: slice " + std::to_string(slice.h) + "x" + std::to_string(slice.w) +
                             " smaller than receptive field " + std::to_string(rf));
        std::vector<Tensor<Real>> outs;
        std::size_t pi = 0;
        for (const auto& spec : config_.pathways) {
            if (!NetworkConfig::is_multiscale(spec)) {
                outs.push_back(run(spec.layers, slice, Mode::Infer, nullptr, nullptr, pi));
                continue;
            }
            // Run the coarse pathway once per sampling phase so every output
            // position sees blocks centred on itself, as a single patch would.
            const int f = spec.layers.front().factor;
            const std::vector<LayerSpec> inner(spec.layers.begin() + 1, spec.layers.end() - 1);
            const int span = NetworkConfig::pathway_rf(spec);
            Tensor<Real> dense;
            std::size_t after = pi;
            for (int a = 0; a < f; ++a)
                for (int b = 0; b < f; ++b) {
                    const int h = (slice.h - a) / f * f, w = (slice.w - b) / f * f;
                    Tensor<Real> part(1, slice.c, h, w);
                    for (int ch = 0; ch < slice.c; ++ch)
                        for (int y = 0; y < h; ++y)
                            std::copy_n(slice.data.data() + slice.index(0, ch, a + y, b), w, &part(0, ch, y, 0));
                    std::size_t q = pi;
                    const Tensor<Real> low = run(inner, downsample(part, f), Mode::Infer, nullptr, nullptr, q);
                    after = q;
                    if (dense.size() == 0)
                        dense = Tensor<Real>(1, low.c, slice.h - span + 1, slice.w - span + 1);
                    for (int ch = 0; ch < low.c; ++ch)
                        for (int i = 0; i < low.h; ++i)
                            for (int j = 0; j < low.w; ++j)
                                dense(0, ch, a + f * i, b + f * j) = low(0, ch, i, j);
                }
            pi = after;
            outs.push_back(std::move(dense));
        }
        Tensor<Real> merged = outs.size() == 1 ? std::move(outs[0]) : concat(outs);
        return softmax(run(config_.head, merged, Mode::Infer, nullptr, nullptr, pi));
    }

private:
    NetworkConfig config_;
    ParamSet<Real> params_;

    void check_input(const Tensor<Real>& x) const
    {
        if (x.c != config_.in_channels)
            throw ShapeError("network '" + config_.name + "' expects " + std::to_string(config_.in_channels) +
                             " input channels, got " + std::to_string(x.c));
        if (!x.all_finite())
            throw NumericError("network input contains non-finite values");
    }

    int merged_extent(int input) const
    {
        int merged = -1;
        for (const auto& p : config_.pathways) {
            const int e = NetworkConfig::propagate(p.layers, input);
            merged = merged < 0 ? e : std::min(merged, e);
        }
        return merged;
    }

    void build_params()
    {
        auto add = [&](const std::vector<LayerSpec>& layers, int channels) {
            for (const auto& l : layers) {
                if (l.kind == LayerKind::Conv) {
                    ParamBlock<Real> p;
                    p.w = Tensor<Real>(l.maps, channels, l.kernel, l.kernel);
                    p.b.assign(std::size_t(l.maps), Real(0));
                    params_.push_back(std::move(p));
                    channels = l.maps;
                } else if (l.kind == LayerKind::Maxout) {
                    channels /= l.group;
                }
            }
            return channels;
        };
        int merged = 0;
        for (const auto& p : config_.pathways)
            merged += add(p.layers, config_.in_channels);
        add(config_.head, merged);
    }

    Tensor<Real> run(const std::vector<LayerSpec>& layers, Tensor<Real> x, Mode mode, Rng* rng,
                     std::vector<LayerCache>* cache, std::size_t& pi) const
    {
        for (const auto& l : layers) {
            LayerCache lc;
            lc.n = x.n;
            lc.c = x.c;
            lc.h = x.h;
            lc.w = x.w;
            switch (l.kind) {
            case LayerKind::Conv: {
                const auto& p = params_[pi++];
                Tensor<Real> y = conv2d(x, p.w, p.b);
                if (cache)
                    lc.input = std::move(x);
                x = std::move(y);
                break;
            }
            case LayerKind::Maxout: x = maxout(x, l.group, cache ? &lc.argmax : nullptr); break;
            case LayerKind::Maxpool: x = maxpool(x, l.window, l.stride, cache ? &lc.argmax : nullptr); break;
            case LayerKind::Dropout:
                if (mode == Mode::Train)
                    x = dropout(x, l.rate, *rng, lc.mask);
                break;
            case LayerKind::Downsample: x = downsample(x, l.factor); break;
            case LayerKind::Upsample: x = upsample(x, l.factor); break;
            }
            if (cache)
                cache->push_back(std::move(lc));
        }
        return x;
    }

    // Walks layers backwards; `pi` counts conv layers down from the end.
    Tensor<Real> back(const std::vector<LayerSpec>& layers, std::vector<LayerCache>& cache, Tensor<Real> g,
                      ParamSet<Real>& grads, std::size_t& pi, Scope scope, bool is_head) const
    {
        for (std::size_t i = layers.size(); i-- > 0;) {
            const auto& l = layers[i];
            auto& lc = cache[i];
            switch (l.kind) {
            case LayerKind::Conv: {
                --pi;
                const bool last_needed = scope == Scope::FinalLayer && pi == final_layer();
                // No input gradient for the first layer of a pathway, nor once only the output layer trains.
                const bool want_input = !(last_needed) && (is_head || i > 0);
                g = conv2d_backward(lc.input, params_[pi].w, g, grads[pi].w, grads[pi].b, want_input);
                if (last_needed)
                    return g;
                break;
            }
            case LayerKind::Maxout:
            case LayerKind::Maxpool: g = route_backward(g, lc.argmax, lc.n, lc.c, lc.h, lc.w); break;
            case LayerKind::Dropout:
                if (!lc.mask.empty())
                    for (std::size_t k = 0; k < g.size(); ++k)
                        g.data[k] *= lc.mask[k];
                break;
            case LayerKind::Downsample:
                if (i > 0)
                    g = downsample_backward(g, l.factor, lc.h, lc.w);
                break;
            case LayerKind::Upsample: g = upsample_backward(g, l.factor); break;
            }
        }
        return g;
    }
};

/// Weights from the configured scheme; all biases zero.
template <class Real>
Network<Real> init_network(const NetworkConfig& config, std::uint64_t seed, std::optional<InitScheme> scheme = {})
{
    Network<Real> net(config);
    Rng rng{seed};
    const InitScheme s = scheme.value_or(config.init);
    for (auto& p : net.params()) {
        const double fan_in = double(p.w.c) * p.w.h * p.w.w;
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& w : p.w.data)
            w = s == InitScheme::Uniform ? Real(uniform(rng, -0.005, 0.005)) : Real(sd * standard_normal(rng));
        std::fill(p.b.begin(), p.b.end(), Real(0));
    }
    return net;
}

} // namespace reflecta::nnet
