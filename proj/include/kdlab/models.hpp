#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kdlab/errors.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"

// Small differentiable architectures: an MLP and two plain CNNs with a
// capacity ordering tiny_cnn (~10k params) < mlp (~100k) < small_cnn (~300k).
//
// Initialization is fan-in-scaled uniform, U(-1/sqrt(fan_in), +1/sqrt(fan_in))
// for weights and biases alike, drawn in a fixed order from the build seed,
// so identical (spec, seed) builds are bitwise identical.

namespace kdlab::models {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct ModelSpec {
    std::string kind;           // "mlp" | "small_cnn" | "tiny_cnn"
    std::vector<int> channels;  // conv channel plan (cnn kinds only)
    std::vector<int> hidden;    // fully-connected hidden widths
    int num_classes = 10;
    Shape input_shape;          // {c,h,w} for cnn kinds, anything non-empty for mlp

    bool operator==(const ModelSpec&) const = default;

    static ModelSpec mlp(Shape input, int classes = 10, std::vector<int> hidden = {128}) {
        return {"mlp", {}, std::move(hidden), classes, std::move(input)};
    }
    static ModelSpec small_cnn(Shape input = {1, 28, 28}, int classes = 10) {
        return {"small_cnn", {10, 20}, {300}, classes, std::move(input)};
    }
    static ModelSpec tiny_cnn(Shape input = {1, 28, 28}, int classes = 10) {
        return {"tiny_cnn", {6, 12}, {16}, classes, std::move(input)};
    }
};

inline bool is_cnn(const ModelSpec& s) { return s.kind == "small_cnn" || s.kind == "tiny_cnn"; }

inline void validate(const ModelSpec& s) {
    if (s.kind != "mlp" && s.kind != "small_cnn" && s.kind != "tiny_cnn")
        throw ConfigError("unknown model kind '" + s.kind + "'");
    if (s.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    for (int w : s.hidden)
        if (w <= 0) throw ConfigError("model: hidden widths must be positive");
    for (int c : s.channels)
        if (c <= 0) throw ConfigError("model: channel counts must be positive");
    if (s.input_shape.empty()) throw ConfigError("model: input_shape must be non-empty");
    for (int d : s.input_shape)
        if (d <= 0) throw ConfigError("model: input extents must be positive");
    if (is_cnn(s)) {
        if (s.input_shape.size() != 3) throw ConfigError("model: cnn input_shape must be {c,h,w}");
        if (s.channels.empty()) throw ConfigError("model: cnn needs a channel plan");
        int h = s.input_shape[1], w = s.input_shape[2];
        for (size_t i = 0; i < s.channels.size(); ++i) {
            h /= 2;
            w /= 2;  // 3x3 conv pad 1 keeps extent, 2x2/2 pool halves
            if (h < 1 || w < 1) throw ConfigError("model: input too small for the conv/pool stack");
        }
    }
}

// --- spec <-> json (canonical field order; unknown keys rejected) -----------

inline nlohmann::ordered_json spec_to_json(const ModelSpec& s) {
    nlohmann::ordered_json j;
    j["kind"] = s.kind;
    j["channels"] = s.channels;
    j["hidden"] = s.hidden;
    j["num_classes"] = s.num_classes;
    j["input_shape"] = s.input_shape;
    return j;
}

inline void reject_unknown_keys(const nlohmann::ordered_json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

inline ModelSpec spec_from_json(const nlohmann::ordered_json& j) {
    reject_unknown_keys(j, {"kind", "channels", "hidden", "num_classes", "input_shape"}, "model spec");
    ModelSpec s;
    s.kind = j.at("kind").get<std::string>();
    s.channels = j.value("channels", std::vector<int>{});
    s.hidden = j.value("hidden", std::vector<int>{});
    s.num_classes = j.at("num_classes").get<int>();
    s.input_shape = j.at("input_shape").get<Shape>();
    validate(s);
    return s;
}

// --- layer plan --------------------------------------------------------------

namespace detail {
struct LayerDims {
    // conv stages: in_ch -> out_ch at (h x w) input extent
    struct Conv {
        int in_ch, out_ch, h, w;
    };
    std::vector<Conv> convs;
    int flat = 0;               // features entering the fc stack
    std::vector<int> fc_dims;   // flat, hidden..., num_classes
};

inline LayerDims plan(const ModelSpec& s) {
    LayerDims d;
    if (is_cnn(s)) {
        int ch = s.input_shape[0], h = s.input_shape[1], w = s.input_shape[2];
        for (int out : s.channels) {
            d.convs.push_back({ch, out, h, w});
            ch = out;
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
        d.flat = ch * h * w;
    } else {
        d.flat = static_cast<int>(shape_numel(s.input_shape));
    }
    d.fc_dims.push_back(d.flat);
    for (int hdim : s.hidden) d.fc_dims.push_back(hdim);
    d.fc_dims.push_back(s.num_classes);
    return d;
}
}  // namespace detail

inline size_t param_count(const ModelSpec& s) {
    validate(s);
    const auto d = detail::plan(s);
    size_t n = 0;
    for (const auto& c : d.convs) n += static_cast<size_t>(c.out_ch) * c.in_ch * 9 + c.out_ch;
    for (size_t i = 0; i + 1 < d.fc_dims.size(); ++i)
        n += static_cast<size_t>(d.fc_dims[i]) * d.fc_dims[i + 1] + d.fc_dims[i + 1];
    return n;
}

// --- model -------------------------------------------------------------------

enum class Mode { train, eval };

class Model {
public:
    Model() = default;

    ModelSpec spec;
    Mode mode = Mode::train;

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    Tensor& param(const std::string& name) {
        for (auto& [n, t] : params_)
            if (n == name) return t;
        throw ContractError("no parameter named '" + name + "'");
    }

    void set_mode(Mode m) { mode = m; }
    void set_trainable(bool trainable) {
        for (auto& [n, t] : params_) t.node().requires_grad = trainable;
    }
    bool trainable() const { return !params_.empty() && params_.front().second.requires_grad(); }

    void zero_grad() {
        for (auto& [n, t] : params_) t.zero_grad();
    }

    struct Parts {
        Tensor logits;
        Tensor embedding;  // activations entering the final fully-connected layer
    };

    Tensor forward(const Tensor& x) const { return forward_parts(x).logits; }

    Parts forward_parts(const Tensor& x) const {
        check_input(x);
        Tensor h = x;
        if (is_cnn(spec)) {
            for (size_t i = 0; i < spec.channels.size(); ++i) {
                h = conv2d(h, conv_w(i), 1, 1);
                h = add_channel_bias(h, conv_b(i));
                h = relu(h);
                h = max_pool2d(h, 2, 2);
            }
        }
        h = flatten(h);
        const size_t n_fc = spec.hidden.size() + 1;
        Tensor embedding = h;
        for (size_t i = 0; i < n_fc; ++i) {
            h = add_rowvec(matmul(h, fc_w(i)), fc_b(i));
            if (i + 1 < n_fc) {
                h = relu(h);
                embedding = h;
            }
        }
        return {h, embedding};
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : params_) {
            h = fnv1a(name, h);
            h = fnv1a(t.data().data(), t.data().size() * sizeof(double), h);
        }
        return h;
    }

    friend Model build(const ModelSpec& s, uint64_t seed);
    friend Model load(const std::string& path);

private:
    std::vector<std::pair<std::string, Tensor>> params_;

    const Tensor& conv_w(size_t i) const { return params_[2 * i].second; }
    const Tensor& conv_b(size_t i) const { return params_[2 * i + 1].second; }
    const Tensor& fc_w(size_t i) const {
        const size_t off = is_cnn(spec) ? 2 * spec.channels.size() : 0;
        return params_[off + 2 * i].second;
    }
    const Tensor& fc_b(size_t i) const {
        const size_t off = is_cnn(spec) ? 2 * spec.channels.size() : 0;
        return params_[off + 2 * i + 1].second;
    }

    void check_input(const Tensor& x) const {
        Shape want;
        if (is_cnn(spec)) {
            want = {x.shape().empty() ? 0 : x.shape()[0]};
            want.insert(want.end(), spec.input_shape.begin(), spec.input_shape.end());
            if (x.shape() != want)
                throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match spec input " +
                                     shape_str(spec.input_shape));
        } else {
            // mlp accepts any batched layout with the right element count per sample
            if (x.shape().size() < 2 ||
                x.numel() / static_cast<size_t>(x.shape()[0]) != shape_numel(spec.input_shape))
                throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match spec input " +
                                     shape_str(spec.input_shape));
        }
    }
};

inline Model build(const ModelSpec& s, uint64_t seed) {
    validate(s);
    const auto d = detail::plan(s);
    Model m;
    m.spec = s;
    Rng rng(derive_seed(seed, "model-init"));
    auto uniform_fill = [&rng](Tensor& t, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : t.data()) v = rng.uniform(-bound, bound);
    };
    for (size_t i = 0; i < d.convs.size(); ++i) {
        const auto& c = d.convs[i];
        Tensor w = Tensor::zeros({c.out_ch, c.in_ch, 3, 3}, true);
        Tensor b = Tensor::zeros({c.out_ch}, true);
        const int fan_in = c.in_ch * 9;
        uniform_fill(w, fan_in);
        uniform_fill(b, fan_in);
        m.params_.emplace_back("conv" + std::to_string(i + 1) + ".weight", std::move(w));
        m.params_.emplace_back("conv" + std::to_string(i + 1) + ".bias", std::move(b));
    }
    for (size_t i = 0; i + 1 < d.fc_dims.size(); ++i) {
        Tensor w = Tensor::zeros({d.fc_dims[i], d.fc_dims[i + 1]}, true);
        Tensor b = Tensor::zeros({d.fc_dims[i + 1]}, true);
        uniform_fill(w, d.fc_dims[i]);
        uniform_fill(b, d.fc_dims[i]);
        m.params_.emplace_back("fc" + std::to_string(i + 1) + ".weight", std::move(w));
        m.params_.emplace_back("fc" + std::to_string(i + 1) + ".bias", std::move(b));
    }
    return m;
}

// --- checkpoint i/o ----------------------------------------------------------
//
// Layout: magic "KDLABCK1", u32 version, u32 spec-json length, spec json,
// u32 param count, then per parameter: u32 name length, name, u32 ndim,
// i32 dims, raw little-endian f64 payload. Round-trips are bit-exact.

inline constexpr char kCheckpointMagic[8] = {'K', 'D', 'L', 'A', 'B', 'C', 'K', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    return v;
}
}  // namespace detail

inline void save(const Model& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod(os, kCheckpointVersion);
    const std::string spec_json = spec_to_json(m.spec).dump();
    detail::write_pod(os, static_cast<uint32_t>(spec_json.size()));
    os.write(spec_json.data(), static_cast<std::streamsize>(spec_json.size()));
    detail::write_pod(os, static_cast<uint32_t>(m.parameters().size()));
    for (const auto& [name, t] : m.parameters()) {
        detail::write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, static_cast<uint32_t>(t.shape().size()));
        for (int dim : t.shape()) detail::write_pod(os, static_cast<int32_t>(dim));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write failed for checkpoint: " + path);
}

inline Model load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw CheckpointError("bad checkpoint magic in " + path + " (expected KDLABCK1)");
    const auto version = detail::read_pod<uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " not supported (want " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto spec_len = detail::read_pod<uint32_t>(is, "spec length");
    std::string spec_json(spec_len, '\0');
    is.read(spec_json.data(), spec_len);
    if (!is) throw CheckpointError("checkpoint truncated while reading spec");
    Model m;
    try {
        m.spec = spec_from_json(nlohmann::ordered_json::parse(spec_json));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint spec is not valid json: ") + e.what());
    }
    const auto n_params = detail::read_pod<uint32_t>(is, "parameter count");
    for (uint32_t i = 0; i < n_params; ++i) {
        const auto name_len = detail::read_pod<uint32_t>(is, "parameter name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CheckpointError("checkpoint truncated while reading parameter name");
        const auto ndim = detail::read_pod<uint32_t>(is, "parameter rank");
        Shape shape(ndim);
        for (auto& dim : shape) dim = detail::read_pod<int32_t>(is, "parameter extent");
        std::vector<double> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw CheckpointError("checkpoint truncated while reading parameter payload");
        m.params_.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data), true));
    }
    return m;
}

}  // namespace kdlab::models
