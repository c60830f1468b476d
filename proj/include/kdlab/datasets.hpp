#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kdlab/errors.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"

// Data ingestion and generation: IDX image files (bit-exact round trips),
// Gaussian blob corpora, a procedural stroke-image corpus, stratified
// subsampling and normalization.
//
// Datasets keep inputs in their raw range ([0,1] for images); the recorded
// normalization constants are applied when batches are materialised for a
// model. That keeps file round-trips exact while models always see
// consistently normalised values.

namespace kdlab::datasets {

struct Dataset {
    Tensor inputs;  // [n, ...sample shape], raw values
    std::vector<int> labels;
    int num_classes = 0;
    std::string split;  // "train" | "test" | "synthetic"
    double norm_mean = 0.0;
    double norm_std = 1.0;

    size_t size() const { return labels.size(); }

    Shape sample_shape() const {
        Shape s(inputs.shape().begin() + 1, inputs.shape().end());
        return s;
    }

    // Normalised batch [k, ...sample shape] at the given dataset positions.
    Tensor batch_inputs(const std::vector<size_t>& idx) const {
        const size_t sample = shape_numel(sample_shape());
        Shape shape = {static_cast<int>(idx.size())};
        const Shape ss = sample_shape();
        shape.insert(shape.end(), ss.begin(), ss.end());
        std::vector<double> out(idx.size() * sample);
        const double inv = 1.0 / norm_std;
        for (size_t r = 0; r < idx.size(); ++r) {
            const double* src = inputs.data().data() + idx[r] * sample;
            double* dst = out.data() + r * sample;
            for (size_t i = 0; i < sample; ++i) dst[i] = (src[i] - norm_mean) * inv;
        }
        return Tensor::from_data(std::move(shape), std::move(out));
    }

    std::vector<int> batch_labels(const std::vector<size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
        return out;
    }

    std::vector<size_t> class_indices(int c) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) out.push_back(i);
        return out;
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a(inputs.data().data(), inputs.data().size() * sizeof(double));
        h = fnv1a(labels.data(), labels.size() * sizeof(int), h);
        h = fnv1a(&num_classes, sizeof(num_classes), h);
        h = fnv1a(&norm_mean, sizeof(norm_mean), h);
        h = fnv1a(&norm_std, sizeof(norm_std), h);
        return h;
    }
};

inline void validate(const Dataset& d) {
    if (d.size() == 0) throw DataError("dataset is empty");
    if (d.inputs.shape().empty() || d.inputs.shape()[0] != static_cast<int>(d.size()))
        throw DataError("dataset inputs/labels length mismatch");
    for (int y : d.labels)
        if (y < 0 || y >= d.num_classes) throw DataError("dataset label outside [0, num_classes)");
}

// --- IDX ---------------------------------------------------------------------

inline constexpr uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {
inline uint32_t read_be32(std::istream& is, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError(std::string("idx: truncated while reading ") + what);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}
inline void write_be32(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::vector<unsigned char> read_payload(std::istream& is, size_t want, const std::string& path) {
    std::vector<unsigned char> bytes(want);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(want));
    if (static_cast<size_t>(is.gcount()) != want)
        throw ParseError("idx: truncated payload in " + path + " (expected " + std::to_string(want) +
                         " bytes, got " + std::to_string(is.gcount()) + ")");
    is.peek();
    if (!is.eof()) throw ParseError("idx: trailing bytes after payload in " + path);
    return bytes;
}
}  // namespace detail

// Big-endian IDX pair: images (magic 0x00000803, dims n/h/w, u8 pixels) and
// labels (magic 0x00000801, dim n, u8 labels). Pixels scale to [0,1] by /255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& split = "train") {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw ParseError("idx: cannot open image file " + images_path);
    const uint32_t imagic = detail::read_be32(imgs, "image magic");
    if (imagic != kIdxImagesMagic) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "0x%08x (expected 0x%08x)", imagic, kIdxImagesMagic);
        throw ParseError("idx: bad image magic " + std::string(buf) + " in " + images_path);
    }
    const uint32_t n = detail::read_be32(imgs, "image count");
    const uint32_t h = detail::read_be32(imgs, "image rows");
    const uint32_t w = detail::read_be32(imgs, "image cols");
    const auto pixels =
        detail::read_payload(imgs, static_cast<size_t>(n) * h * w, images_path);

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw ParseError("idx: cannot open label file " + labels_path);
    const uint32_t lmagic = detail::read_be32(labs, "label magic");
    if (lmagic != kIdxLabelsMagic) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "0x%08x (expected 0x%08x)", lmagic, kIdxLabelsMagic);
        throw ParseError("idx: bad label magic " + std::string(buf) + " in " + labels_path);
    }
    const uint32_t ln = detail::read_be32(labs, "label count");
    if (ln != n)
        throw ParseError("idx: image/label count mismatch (" + std::to_string(n) + " images vs " +
                         std::to_string(ln) + " labels)");
    const auto label_bytes = detail::read_payload(labs, ln, labels_path);

    Dataset d;
    std::vector<double> values(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) values[i] = static_cast<double>(pixels[i]) / 255.0;
    d.inputs = Tensor::from_data({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)},
                                 std::move(values));
    d.labels.assign(label_bytes.begin(), label_bytes.end());
    int maxl = 0;
    for (int y : d.labels) maxl = std::max(maxl, y);
    d.num_classes = std::max(2, maxl + 1);
    d.split = split;
    return d;
}

inline void save_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    const Shape ss = d.sample_shape();
    if (ss.size() != 3 || ss[0] != 1) throw DataError("idx: only [n,1,h,w] datasets can be saved");
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw ParseError("idx: cannot open image file for writing " + images_path);
    detail::write_be32(imgs, kIdxImagesMagic);
    detail::write_be32(imgs, static_cast<uint32_t>(d.size()));
    detail::write_be32(imgs, static_cast<uint32_t>(ss[1]));
    detail::write_be32(imgs, static_cast<uint32_t>(ss[2]));
    for (double v : d.inputs.data()) {
        const long q = std::lround(v * 255.0);
        imgs.put(static_cast<char>(static_cast<unsigned char>(std::clamp(q, 0L, 255L))));
    }
    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw ParseError("idx: cannot open label file for writing " + labels_path);
    detail::write_be32(labs, kIdxLabelsMagic);
    detail::write_be32(labs, static_cast<uint32_t>(d.size()));
    for (int y : d.labels) labs.put(static_cast<char>(static_cast<unsigned char>(y)));
    if (!imgs || !labs) throw ParseError("idx: write failed");
}

// --- tensor files --------------------------------------------------------------
//
// "KDTF" magic, u32 version, u8 dtype (0 = f64, 1 = i32), u32 ndim, i32 dims,
// little-endian payload.

inline constexpr char kTensorMagic[4] = {'K', 'D', 'T', 'F'};
inline constexpr uint32_t kTensorVersion = 1;

inline void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("tensor file: cannot open for writing " + path);
    os.write(kTensorMagic, 4);
    const uint32_t version = kTensorVersion;
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.put(0);  // f64
    const uint32_t ndim = static_cast<uint32_t>(t.shape().size());
    os.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int dim : t.shape()) {
        const int32_t d32 = dim;
        os.write(reinterpret_cast<const char*>(&d32), 4);
    }
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    if (!os) throw ParseError("tensor file: write failed for " + path);
}

inline void save_labels(const std::vector<int>& labels, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("tensor file: cannot open for writing " + path);
    os.write(kTensorMagic, 4);
    const uint32_t version = kTensorVersion;
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.put(1);  // i32
    const uint32_t ndim = 1;
    os.write(reinterpret_cast<const char*>(&ndim), 4);
    const int32_t n = static_cast<int32_t>(labels.size());
    os.write(reinterpret_cast<const char*>(&n), 4);
    for (int y : labels) {
        const int32_t y32 = y;
        os.write(reinterpret_cast<const char*>(&y32), 4);
    }
    if (!os) throw ParseError("tensor file: write failed for " + path);
}

namespace detail {
inline void read_tensor_header(std::ifstream& is, const std::string& path, uint8_t expect_dtype,
                               Shape& shape) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw ParseError("tensor file: bad magic in " + path);
    uint32_t version = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    if (!is || version != kTensorVersion)
        throw ParseError("tensor file: unsupported version in " + path);
    const int dtype = is.get();
    if (dtype != expect_dtype) throw ParseError("tensor file: unexpected dtype in " + path);
    uint32_t ndim = 0;
    is.read(reinterpret_cast<char*>(&ndim), 4);
    if (!is) throw ParseError("tensor file: truncated header in " + path);
    shape.resize(ndim);
    for (auto& d : shape) {
        int32_t d32 = 0;
        is.read(reinterpret_cast<char*>(&d32), 4);
        if (!is) throw ParseError("tensor file: truncated dims in " + path);
        d = d32;
    }
}
}  // namespace detail

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("tensor file: cannot open " + path);
    Shape shape;
    detail::read_tensor_header(is, path, 0, shape);
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw ParseError("tensor file: truncated payload in " + path);
    return Tensor::from_data(std::move(shape), std::move(data));
}

inline std::vector<int> load_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("tensor file: cannot open " + path);
    Shape shape;
    detail::read_tensor_header(is, path, 1, shape);
    if (shape.size() != 1) throw ParseError("tensor file: labels must be rank 1 in " + path);
    std::vector<int> labels(shape[0]);
    for (auto& y : labels) {
        int32_t y32 = 0;
        is.read(reinterpret_cast<char*>(&y32), 4);
        if (!is) throw ParseError("tensor file: truncated payload in " + path);
        y = y32;
    }
    return labels;
}

// --- synthetic corpora ---------------------------------------------------------

// Gaussian clusters (unit sigma) at seeded centers with pairwise distance of
// at least `separation`.
inline Dataset synth_blobs(int classes, int per_class, int dim, double separation, uint64_t seed,
                           const std::string& split = "train") {
    if (classes < 2) throw ParameterError("synth_blobs: need at least 2 classes");
    if (per_class < 1) throw ParameterError("synth_blobs: per_class must be >= 1");
    if (dim < 1) throw ParameterError("synth_blobs: dim must be >= 1");
    if (separation <= 0.0) throw ParameterError("synth_blobs: separation must be > 0");

    Rng center_rng(derive_seed(seed, "blob-centers"));
    std::vector<std::vector<double>> centers;
    double box = separation * 2.0;
    while (static_cast<int>(centers.size()) < classes) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            std::vector<double> c(dim);
            for (double& v : c) v = center_rng.uniform(-box, box);
            bool ok = true;
            for (const auto& other : centers) {
                double d2 = 0.0;
                for (int i = 0; i < dim; ++i) d2 += (c[i] - other[i]) * (c[i] - other[i]);
                if (d2 < separation * separation) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                centers.push_back(std::move(c));
                placed = true;
            }
        }
        if (!placed) box *= 1.5;  // widen and retry
    }

    Dataset d;
    std::vector<double> values(static_cast<size_t>(classes) * per_class * dim);
    d.labels.resize(static_cast<size_t>(classes) * per_class);
    size_t row = 0;
    for (int c = 0; c < classes; ++c) {
        Rng rng(derive_seed(seed, split + "-blob-samples", static_cast<uint64_t>(c)));
        for (int i = 0; i < per_class; ++i, ++row) {
            for (int j = 0; j < dim; ++j)
                values[row * dim + j] = centers[c][j] + rng.normal(0.0, 1.0);
            d.labels[row] = c;
        }
    }
    d.inputs = Tensor::from_data({classes * per_class, dim}, std::move(values));
    d.num_classes = classes;
    d.split = split;
    return d;
}

// Procedural stroke-image corpus: each class is a fixed set of 2-3 quadratic
// Bezier strokes; samples jitter the control points, apply a random rotation /
// scale / shift, and add pixel noise. Values are quantised to the u8 grid so
// the dataset is identical to its IDX round trip.
struct ImageCorpusSpec {
    int classes = 10;
    int per_class = 200;
    int height = 28;
    int width = 28;
    double noise = 0.18;          // background pixel noise sigma
    double jitter = 1.1;          // control-point jitter sigma (pixels)
    double max_rotate = 0.40;     // radians
    double max_shift = 2.5;       // pixels
    double distractor_prob = 0.3;
    uint64_t seed = 0;
};

namespace detail {
struct Stroke {
    double px[3], py[3];  // control points
    double sigma;         // brush width
    double amp;           // brush intensity
};

inline void splat_stroke(std::vector<double>& canvas, int h, int w, const Stroke& s) {
    const int steps = 48;
    const double two_sigma2 = 2.0 * s.sigma * s.sigma;
    const int radius = static_cast<int>(std::ceil(s.sigma * 2.5));
    for (int t = 0; t <= steps; ++t) {
        const double u = static_cast<double>(t) / steps;
        const double a = (1 - u) * (1 - u), b = 2 * u * (1 - u), c = u * u;
        const double cx = a * s.px[0] + b * s.px[1] + c * s.px[2];
        const double cy = a * s.py[0] + b * s.py[1] + c * s.py[2];
        const int y0 = std::max(0, static_cast<int>(cy) - radius);
        const int y1 = std::min(h - 1, static_cast<int>(cy) + radius);
        const int x0 = std::max(0, static_cast<int>(cx) - radius);
        const int x1 = std::min(w - 1, static_cast<int>(cx) + radius);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double v = s.amp * std::exp(-d2 / two_sigma2);
                double& px = canvas[static_cast<size_t>(y) * w + x];
                px = std::max(px, v);
            }
    }
}
}  // namespace detail

inline Dataset synth_images(const ImageCorpusSpec& spec, const std::string& split) {
    if (spec.classes < 2 || spec.per_class < 1 || spec.height < 8 || spec.width < 8)
        throw ParameterError("synth_images: degenerate corpus spec");

    const int h = spec.height, w = spec.width;
    const double cx0 = (w - 1) / 2.0, cy0 = (h - 1) / 2.0;

    // Class prototypes depend only on (seed, class): train and test share them.
    struct Proto {
        std::vector<detail::Stroke> strokes;
    };
    std::vector<Proto> protos(spec.classes);
    for (int c = 0; c < spec.classes; ++c) {
        Rng rng(derive_seed(spec.seed, "image-proto", static_cast<uint64_t>(c)));
        const int n_strokes = 2 + static_cast<int>(rng.below(2));
        for (int s = 0; s < n_strokes; ++s) {
            detail::Stroke st;
            const double lo = 5.0, hix = w - 6.0, hiy = h - 6.0;
            for (int attempt = 0; attempt < 20; ++attempt) {
                for (int p = 0; p < 3; ++p) {
                    st.px[p] = rng.uniform(lo, hix);
                    st.py[p] = rng.uniform(lo, hiy);
                }
                const double span = std::hypot(st.px[2] - st.px[0], st.py[2] - st.py[0]);
                if (span >= 8.0) break;
            }
            st.sigma = rng.uniform(0.9, 1.4);
            st.amp = 1.0;
            protos[c].strokes.push_back(st);
        }
    }

    Dataset d;
    const size_t pixels = static_cast<size_t>(h) * w;
    std::vector<double> values(static_cast<size_t>(spec.classes) * spec.per_class * pixels);
    d.labels.resize(static_cast<size_t>(spec.classes) * spec.per_class);

    size_t row = 0;
    std::vector<double> canvas(pixels);
    for (int c = 0; c < spec.classes; ++c) {
        for (int i = 0; i < spec.per_class; ++i, ++row) {
            Rng rng(derive_seed(spec.seed, split + "-image-sample",
                                static_cast<uint64_t>(c) * 1000003ULL + static_cast<uint64_t>(i)));
            std::fill(canvas.begin(), canvas.end(), 0.0);

            const double theta = rng.uniform(-spec.max_rotate, spec.max_rotate);
            const double scale = rng.uniform(0.85, 1.15);
            const double dx = rng.uniform(-spec.max_shift, spec.max_shift);
            const double dy = rng.uniform(-spec.max_shift, spec.max_shift);
            const double ct = std::cos(theta) * scale, st_ = std::sin(theta) * scale;

            for (const auto& proto_stroke : protos[c].strokes) {
                detail::Stroke s = proto_stroke;
                for (int p = 0; p < 3; ++p) {
                    const double jx = s.px[p] + rng.normal(0.0, spec.jitter) - cx0;
                    const double jy = s.py[p] + rng.normal(0.0, spec.jitter) - cy0;
                    s.px[p] = ct * jx - st_ * jy + cx0 + dx;
                    s.py[p] = st_ * jx + ct * jy + cy0 + dy;
                }
                detail::splat_stroke(canvas, h, w, s);
            }
            if (rng.next_double() < spec.distractor_prob) {
                detail::Stroke s;
                const double ax = rng.uniform(3.0, w - 4.0), ay = rng.uniform(3.0, h - 4.0);
                const double bx = ax + rng.uniform(-6.0, 6.0), by = ay + rng.uniform(-6.0, 6.0);
                s.px[0] = ax;
                s.py[0] = ay;
                s.px[1] = (ax + bx) / 2;
                s.py[1] = (ay + by) / 2;
                s.px[2] = bx;
                s.py[2] = by;
                s.sigma = 1.0;
                s.amp = 0.6;
                detail::splat_stroke(canvas, h, w, s);
            }

            double* dst = values.data() + row * pixels;
            for (size_t p = 0; p < pixels; ++p) {
                const double noisy = canvas[p] + rng.normal(0.0, spec.noise);
                const double clipped = std::clamp(noisy, 0.0, 1.0);
                dst[p] = std::lround(clipped * 255.0) / 255.0;  // u8 grid
            }
            d.labels[row] = c;
        }
    }
    d.inputs = Tensor::from_data({spec.classes * spec.per_class, 1, h, w}, std::move(values));
    d.num_classes = spec.classes;
    d.split = split;
    return d;
}

// --- subsampling / normalization ------------------------------------------------

// Stratified, seed-stable subsample. The per-class selection is a prefix of a
// seeded permutation, so subsample(f1) is contained in subsample(f2) whenever
// f1 <= f2 under the same seed. fraction 1.0 returns the dataset unchanged.
inline Dataset subsample(const Dataset& d, double fraction, uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ParameterError("subsample: fraction must be in (0,1], got " + std::to_string(fraction));
    if (fraction == 1.0) return d;

    std::vector<size_t> keep;
    for (int c = 0; c < d.num_classes; ++c) {
        auto idx = d.class_indices(c);
        const auto want = static_cast<size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        if (want == 0)
            throw DataError("subsample: fraction " + std::to_string(fraction) +
                            " yields zero samples for class " + std::to_string(c));
        Rng rng(derive_seed(seed, "subsample", static_cast<uint64_t>(c)));
        rng.shuffle(idx);
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<long>(want));
    }
    std::sort(keep.begin(), keep.end());

    const size_t sample = shape_numel(d.sample_shape());
    Dataset out;
    std::vector<double> values(keep.size() * sample);
    out.labels.resize(keep.size());
    for (size_t r = 0; r < keep.size(); ++r) {
        std::copy_n(d.inputs.data().data() + keep[r] * sample, sample, values.data() + r * sample);
        out.labels[r] = d.labels[keep[r]];
    }
    Shape shape = {static_cast<int>(keep.size())};
    const Shape ss = d.sample_shape();
    shape.insert(shape.end(), ss.begin(), ss.end());
    out.inputs = Tensor::from_data(std::move(shape), std::move(values));
    out.num_classes = d.num_classes;
    out.split = d.split;
    out.norm_mean = d.norm_mean;
    out.norm_std = d.norm_std;
    return out;
}

// Scalar mean/std computed on the train split, recorded on both splits.
inline void normalize(Dataset& train, Dataset* test = nullptr) {
    double sum = 0.0;
    for (double v : train.inputs.data()) sum += v;
    const double mean = sum / static_cast<double>(train.inputs.numel());
    double var = 0.0;
    for (double v : train.inputs.data()) var += (v - mean) * (v - mean);
    const double stddev = std::sqrt(var / static_cast<double>(train.inputs.numel()));
    train.norm_mean = mean;
    train.norm_std = std::max(stddev, 1e-8);
    if (test) {
        test->norm_mean = train.norm_mean;
        test->norm_std = train.norm_std;
    }
}

}  // namespace kdlab::datasets
