#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "error.hpp"
#include "io.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace duetmatch {

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t n_classes = 2;
    std::size_t base_channels = 8;
    std::size_t depth = 3;

    void validate() const {
        if (depth < 2) throw ConfigError("model.depth must be >= 2, got " + std::to_string(depth));
        if (base_channels < 2) throw ConfigError("model.base_channels must be >= 2, got " + std::to_string(base_channels));
        if (n_classes < 2) throw ConfigError("model.n_classes must be >= 2, got " + std::to_string(n_classes));
        if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
    }

    /// Patch sides must survive depth-1 halvings.
    std::size_t side_multiple() const { return std::size_t{1} << (depth - 1); }

    std::size_t channels_at(std::size_t level) const { return base_channels << level; }

    /// Full-size backbone; the member defaults are the desk-scale model.
    static ModelConfig paper_scale() { return {1, 2, 16, 4}; }

    bool operator==(const ModelConfig&) const = default;
};

enum class Role { encoder, decoder };

inline const char* role_name(Role r) { return r == Role::encoder ? "encoder" : "decoder"; }

/// One half of a segmentation model: every tensor that produces the
/// bottleneck feature (encoder) or that consumes it (decoder).
template <class T>
struct ComponentParams {
    Role role = Role::encoder;
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor<T>>> tensors;

    const Tensor<T>& at(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::out_of_range("no tensor named " + name);
    }
    Tensor<T>& at(const std::string& name) {
        return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
    }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& [_, t] : tensors) n += t.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& [_, t] : tensors)
            if (!t.all_finite()) return false;
        return true;
    }

    /// Hash over names, shapes and raw values.
    std::uint64_t fingerprint() const {
        io::Fnv1a h;
        for (const auto& [name, t] : tensors) {
            h.update(name.data(), name.size());
            for (std::size_t d : t.shape()) {
                const auto d64 = static_cast<std::uint64_t>(d);
                h.update(&d64, sizeof d64);
            }
            h.update(t.data(), t.size() * sizeof(T));
        }
        return h.digest();
    }

    template <class U>
    ComponentParams<U> cast() const {
        ComponentParams<U> out{role, config, {}};
        for (const auto& [n, t] : tensors) out.tensors.emplace_back(n, t.template cast<U>());
        return out;
    }

    bool operator==(const ComponentParams&) const = default;
};

inline std::string fingerprint_hex(std::uint64_t f) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << f;
    return os.str();
}

namespace detail {

struct TensorSpec {
    std::string name;
    Shape shape;
    std::size_t fan_in;
};

inline std::vector<TensorSpec> layer_specs(const ModelConfig& cfg, Role role) {
    std::vector<TensorSpec> out;
    auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
        out.push_back({name + ".w", {cout, cin, k, k, k}, cin * k * k * k});
        out.push_back({name + ".b", {cout}, cin * k * k * k});
    };
    if (role == Role::encoder) {
        conv("enc.in", cfg.channels_at(0), cfg.in_channels, 3);
        for (std::size_t l = 1; l < cfg.depth; ++l) {
            conv("enc.down" + std::to_string(l), cfg.channels_at(l), cfg.channels_at(l - 1), 2);
            conv("enc.res" + std::to_string(l), cfg.channels_at(l), cfg.channels_at(l), 3);
        }
    } else {
        for (std::size_t l = cfg.depth - 1; l >= 1; --l) {
            const std::size_t cin = cfg.channels_at(l), cout = cfg.channels_at(l - 1);
            out.push_back({"dec.up" + std::to_string(l) + ".w", {cin, cout, 2, 2, 2}, cin * 8});
            out.push_back({"dec.up" + std::to_string(l) + ".b", {cout}, cin * 8});
            conv("dec.res" + std::to_string(l - 1), cout, cout, 3);
        }
        conv("dec.head", cfg.n_classes, cfg.channels_at(0), 1);
    }
    return out;
}

}  // namespace detail

/// Deterministic initialization. Every tensor (weights and biases) is drawn
/// from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = input channels x kernel volume.
template <class T>
std::pair<ComponentParams<T>, ComponentParams<T>> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto build = [&](Role role) {
        ComponentParams<T> p{role, cfg, {}};
        for (const auto& spec : detail::layer_specs(cfg, role)) {
            Tensor<T> t(spec.shape);
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
            for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
            p.tensors.emplace_back(spec.name, std::move(t));
        }
        return p;
    };
    auto enc = build(Role::encoder);
    auto dec = build(Role::decoder);
    return {std::move(enc), std::move(dec)};
}

/// Parameters entered into a graph, either tracked (learned) or constant (frozen).
template <class T>
struct BoundParams {
    const ComponentParams<T>* source = nullptr;
    bool tracked = false;
    std::map<std::string, Var<T>> vars;

    const Var<T>& operator[](const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::out_of_range("unbound tensor " + name);
        return it->second;
    }
};

template <class T>
BoundParams<T> bind(const ComponentParams<T>& p, bool track) {
    BoundParams<T> b{&p, track, {}};
    for (const auto& [name, t] : p.tensors) b.vars.emplace(name, track ? Var<T>::leaf(t, name) : Var<T>::constant(t));
    return b;
}

struct DropoutSpec {
    double ratio = 0.0;
    bool apply_to_input = false;
    bool apply_to_feature = false;
    std::uint64_t rng_seed = 0;

    static DropoutSpec none() { return {}; }
};

/// Inverted dropout mask: 0 with probability `ratio`, else 1/(1-ratio).
template <class T>
Tensor<T> dropout_mask(const Shape& shape, double ratio, Rng& rng) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("dropout ratio must be in [0, 1), got " + std::to_string(ratio));
    Tensor<T> m(shape, T{1});
    if (ratio == 0.0) return m;
    const T keep = static_cast<T>(1.0 / (1.0 - ratio));
    for (auto& v : m.vec()) v = rng.uniform() < ratio ? T{0} : keep;
    return m;
}

template <class T>
Tensor<T> apply_dropout(const Tensor<T>& t, double ratio, Rng& rng) {
    Tensor<T> m = dropout_mask<T>(t.shape(), ratio, rng);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] *= t[i];
    return m;
}

template <class T>
Var<T> apply_dropout(const Var<T>& t, double ratio, Rng& rng) {
    if (ratio == 0.0) {
        dropout_mask<T>(Shape{}, ratio, rng);  // validates only
        return t;
    }
    return ops::mul_const(t, dropout_mask<T>(t.shape(), ratio, rng));
}

template <class T>
struct EncoderOutput {
    Var<T> feature;           // bottleneck, [N, C_bottleneck, p/2^(depth-1), ...]
    std::vector<Var<T>> skips;  // one per decoder stage, finest first
};

namespace detail {
// Feature dropout uses a stream decorrelated from the input-dropout stream.
inline std::uint64_t feature_stream(std::uint64_t seed) { return seed ^ 0x5bd1e9955bd1e995ULL; }
}  // namespace detail

template <class T>
void check_input(const ModelConfig& cfg, const Shape& xs) {
    const std::size_t m = cfg.side_multiple();
    bool ok = xs.size() == 5 && xs[1] == cfg.in_channels;
    for (std::size_t i = 2; ok && i < 5; ++i) ok = xs[i] >= m && xs[i] % m == 0;
    if (!ok)
        throw ShapeError("encoder input: expected [N, " + std::to_string(cfg.in_channels) +
                         ", z, y, x] with spatial sides divisible by " + std::to_string(m) + ", got " + shape_str(xs));
}

template <class T>
EncoderOutput<T> forward_encoder(const BoundParams<T>& enc, const Var<T>& x, const DropoutSpec& d, bool train_mode) {
    const ModelConfig& cfg = enc.source->config;
    if (enc.source->role != Role::encoder) throw std::invalid_argument("forward_encoder needs encoder parameters");
    check_input<T>(cfg, x.shape());
    Var<T> h = x;
    if (train_mode && d.apply_to_input && d.ratio > 0.0) {
        Rng rng(d.rng_seed);
        h = apply_dropout(h, d.ratio, rng);
    }
    EncoderOutput<T> out;
    h = ops::relu(ops::conv3d(h, enc["enc.in.w"], enc["enc.in.b"], 1, 1));
    for (std::size_t l = 1; l < cfg.depth; ++l) {
        out.skips.push_back(h);
        const std::string ls = std::to_string(l);
        Var<T> down = ops::relu(ops::conv3d(h, enc["enc.down" + ls + ".w"], enc["enc.down" + ls + ".b"], 2, 0));
        h = ops::add_relu(ops::conv3d(down, enc["enc.res" + ls + ".w"], enc["enc.res" + ls + ".b"], 1, 1), down);
    }
    out.feature = h;
    return out;
}

template <class T>
EncoderOutput<T> forward_encoder(const BoundParams<T>& enc, const Tensor<T>& x, const DropoutSpec& d, bool train_mode) {
    return forward_encoder(enc, Var<T>::constant(x), d, train_mode);
}

/// Decode to per-voxel class probabilities [N, C, z, y, x].
/// Feature dropout perturbs only the bottleneck, never the skips.
template <class T>
Var<T> forward_decoder(const BoundParams<T>& dec, const Var<T>& feature, const std::vector<Var<T>>& skips,
                       const DropoutSpec& d, bool train_mode) {
    const ModelConfig& cfg = dec.source->config;
    if (dec.source->role != Role::decoder) throw std::invalid_argument("forward_decoder needs decoder parameters");
    if (skips.size() != cfg.depth - 1)
        throw std::invalid_argument("forward_decoder: missing skip-state (expected " + std::to_string(cfg.depth - 1) +
                                    " skip tensors, got " + std::to_string(skips.size()) + ")");
    Var<T> h = feature;
    if (train_mode && d.apply_to_feature && d.ratio > 0.0) {
        Rng rng(detail::feature_stream(d.rng_seed));
        h = apply_dropout(h, d.ratio, rng);
    }
    for (std::size_t l = cfg.depth - 1; l >= 1; --l) {
        const std::string ls = std::to_string(l), lm = std::to_string(l - 1);
        Var<T> up = ops::relu(ops::conv_transpose3d_2x(h, dec["dec.up" + ls + ".w"], dec["dec.up" + ls + ".b"]));
        Var<T> merged = ops::add(up, skips[l - 1]);
        h = ops::add_relu(ops::conv3d(merged, dec["dec.res" + lm + ".w"], dec["dec.res" + lm + ".b"], 1, 1), merged);
    }
    return ops::softmax_channels(ops::conv3d(h, dec["dec.head.w"], dec["dec.head.b"], 1, 0));
}

template <class T>
Var<T> forward_decoder(const BoundParams<T>& dec, const EncoderOutput<T>& enc_out, const DropoutSpec& d, bool train_mode) {
    return forward_decoder(dec, enc_out.feature, enc_out.skips, d, train_mode);
}

/// Eval-mode, gradient-free composition of an encoder and a decoder.
template <class T>
Tensor<T> predict(const ComponentParams<T>& enc, const ComponentParams<T>& dec, const Tensor<T>& x) {
    if (!(enc.config == dec.config)) throw std::invalid_argument("encoder/decoder come from different model configs");
    auto e = forward_encoder(bind(enc, false), x, DropoutSpec::none(), false);
    return forward_decoder(bind(dec, false), e, DropoutSpec::none(), false).value();
}

/// Exact reverse-mode derivatives of `loss` with respect to each tracked
/// component. Tensors the loss does not depend on get zero gradients.
template <class T>
std::vector<std::map<std::string, Tensor<T>>> gradients(const Var<T>& loss, const std::vector<const BoundParams<T>*>& wrt) {
    for (const auto* b : wrt)
        if (!b->tracked)
            throw DetachedError(std::string("gradient requested for a ") + role_name(b->source->role) +
                                " bound without gradient tracking");
    backward(loss);
    std::vector<std::map<std::string, Tensor<T>>> out;
    for (const auto* b : wrt) {
        auto& m = out.emplace_back();
        for (const auto& [name, v] : b->vars)
            m.emplace(name, v.grad().empty() ? Tensor<T>(v.shape(), T{0}) : v.grad());
    }
    return out;
}

// Checkpoint file: "DMCP" | u32le header length | JSON header | f32le payload.
template <class T>
void save_component(const ComponentParams<T>& p, const std::filesystem::path& path) {
    nlohmann::json hdr;
    hdr["role"] = role_name(p.role);
    hdr["dtype"] = "f32le";
    hdr["config"] = {{"in_channels", p.config.in_channels}, {"n_classes", p.config.n_classes},
                     {"base_channels", p.config.base_channels}, {"depth", p.config.depth}};
    hdr["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : p.tensors) hdr["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    const std::string h = hdr.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write("DMCP", 4);
    io::write_u32le(os, static_cast<std::uint32_t>(h.size()));
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [_, t] : p.tensors) io::write_f32le<T>(os, t.span());
}

template <class T>
ComponentParams<T> load_component(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "DMCP") throw MalformedHeaderError(path.string() + ": bad magic");
    const std::uint32_t len = io::read_u32le(is);
    std::string h(len, '\0');
    if (!is.read(h.data(), len)) throw MalformedHeaderError(path.string() + ": truncated header");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeaderError(path.string() + ": " + e.what());
    }
    if (hdr.value("dtype", "") != "f32le") throw UnknownDtypeError(path.string() + ": dtype " + hdr.value("dtype", "?"));
    ComponentParams<T> p;
    p.role = hdr.at("role") == "encoder" ? Role::encoder : Role::decoder;
    const auto& c = hdr.at("config");
    p.config = {c.at("in_channels"), c.at("n_classes"), c.at("base_channels"), c.at("depth")};
    const auto payload = io::read_all(is);
    std::size_t off = 0;
    for (const auto& t : hdr.at("tensors")) {
        Shape s = t.at("shape").get<Shape>();
        const std::size_t n = shape_numel(s);
        if (off + n * 4 > payload.size()) throw PayloadShapeError(path.string() + ": payload shorter than header shapes");
        auto vals = io::read_f32le(std::span<const char>(payload.data() + off, n * 4));
        off += n * 4;
        Tensor<T> tensor(s);
        std::transform(vals.begin(), vals.end(), tensor.data(), [](float v) { return static_cast<T>(v); });
        p.tensors.emplace_back(t.at("name").get<std::string>(), std::move(tensor));
    }
    if (off != payload.size()) throw PayloadShapeError(path.string() + ": payload longer than header shapes");
    return p;
}

}  // namespace duetmatch
