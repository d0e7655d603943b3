#include "nctta/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "nctta/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset format is little-endian; big-endian hosts are unsupported");

namespace nctta {

namespace {

constexpr char kMagic[4] = {'N', 'C', 'D', 'S'};
constexpr uint32_t kVersion = 1;

constexpr double kNoiseSigma[5] = {0.25, 0.5, 1.0, 1.5, 2.0};
constexpr double kMeanDelta[5] = {0.5, 1.0, 1.5, 2.0, 2.5};
constexpr double kScaleFactor[5] = {1.25, 1.5, 2.0, 3.0, 4.0};
constexpr double kDropFraction[5] = {0.1, 0.2, 0.3, 0.4, 0.5};

} // namespace

const char* shift_kind_name(ShiftKind k) {
    switch (k) {
    case ShiftKind::None: return "none";
    case ShiftKind::GaussianNoise: return "gaussian_noise";
    case ShiftKind::MeanShift: return "mean_shift";
    case ShiftKind::Rotation: return "rotation";
    case ShiftKind::FeatureScale: return "feature_scale";
    case ShiftKind::FeatureDropout: return "feature_dropout";
    }
    return "unknown";
}

ShiftKind shift_kind_from_name(const std::string& name) {
    for (ShiftKind k : {ShiftKind::None, ShiftKind::GaussianNoise, ShiftKind::MeanShift,
                        ShiftKind::Rotation, ShiftKind::FeatureScale, ShiftKind::FeatureDropout}) {
        if (name == shift_kind_name(k)) return k;
    }
    throw InvalidArgument("unknown shift kind '" + name + "'");
}

void ShiftSpec::validate() const {
    if (kind == ShiftKind::None)
        throw InvalidArgument("shift spec: kind 'none' is not applicable; severity-0 data is "
                              "simply left unshifted");
    if (severity < 1 || severity > 5)
        throw InvalidArgument("shift spec: severity must be in [1, 5], got " +
                              std::to_string(severity));
}

double shift_magnitude(const ShiftSpec& spec, double spread) {
    spec.validate();
    const int s = spec.severity - 1;
    switch (spec.kind) {
    case ShiftKind::GaussianNoise: return kNoiseSigma[s] * spread;
    case ShiftKind::MeanShift: return kMeanDelta[s] * spread;
    case ShiftKind::Rotation: return spec.severity * std::numbers::pi / 20.0;
    case ShiftKind::FeatureScale: return kScaleFactor[s];
    case ShiftKind::FeatureDropout: return kDropFraction[s];
    case ShiftKind::None: break;
    }
    throw InvalidArgument("shift_magnitude: bad kind");
}

std::vector<double> mean_shift_vector(const ShiftSpec& spec, int dim, double spread) {
    Rng rng(spec.seed);
    auto dir = l2_normalized(rng.normal_vector(dim), "mean-shift direction");
    const double delta = kMeanDelta[spec.severity - 1] * spread;
    for (double& x : dir) x *= delta;
    return dir;
}

Dataset make_clusters(int num_classes, int dim, int n_per_class, double spread, uint64_t seed,
                      double imbalance) {
    if (num_classes < 2) throw InvalidArgument("make_clusters: need at least 2 classes");
    if (dim < 2) throw InvalidArgument("make_clusters: need dim >= 2");
    if (n_per_class < 1) throw InvalidArgument("make_clusters: need n_per_class >= 1");
    if (!(spread > 0.0)) throw InvalidArgument("make_clusters: spread must be positive");
    if (imbalance < 0.0 || imbalance >= 1.0)
        throw InvalidArgument("make_clusters: imbalance must be in [0, 1)");

    Rng rng(seed);
    const double radius = 4.0 * spread;
    const double min_separation = 4.0 * spread;

    // Centers uniform on the sphere, rejected until pairwise separated.
    Matrix centers(num_classes, dim);
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        for (int c = 0; c < num_classes; ++c) {
            auto v = l2_normalized(rng.normal_vector(dim), "cluster center");
            for (int j = 0; j < dim; ++j) centers(c, j) = radius * v[static_cast<size_t>(j)];
        }
        ok = true;
        for (int a = 0; a < num_classes && ok; ++a)
            for (int b = a + 1; b < num_classes && ok; ++b) {
                double d2 = 0.0;
                for (int j = 0; j < dim; ++j) {
                    const double d = centers(a, j) - centers(b, j);
                    d2 += d * d;
                }
                if (d2 < min_separation * min_separation) ok = false;
            }
    }
    if (!ok)
        throw InvalidArgument("make_clusters: could not place " + std::to_string(num_classes) +
                              " separated centers in " + std::to_string(dim) +
                              " dimensions after 1000 attempts");

    std::vector<int> counts(static_cast<size_t>(num_classes), n_per_class);
    for (int c = 0; c < num_classes; ++c) {
        const double scale = 1.0 - imbalance * c / (num_classes - 1);
        counts[static_cast<size_t>(c)] =
            std::max(1, static_cast<int>(std::lround(n_per_class * scale)));
    }

    Dataset d;
    int64_t n = 0;
    for (int c : counts) n += c;
    d.features = Matrix(static_cast<int>(n), dim);
    d.labels.resize(static_cast<size_t>(n));
    d.centers = centers;
    int64_t row = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i, ++row) {
            for (int j = 0; j < dim; ++j)
                d.features(static_cast<int>(row), j) = centers(c, j) + spread * rng.normal();
            d.labels[static_cast<size_t>(row)] = c;
        }
    }

    d.meta.seed = seed;
    d.meta.num_classes = num_classes;
    d.meta.dim = dim;
    d.meta.num_samples = n;
    d.meta.generator = std::string("clusters-v1 (") + Rng::kGeneratorName + ")";
    d.meta.spread = spread;
    d.meta.n_per_class = n_per_class;
    d.meta.radius = radius;
    d.meta.shift = ShiftKind::None;
    d.meta.severity = 0;
    d.meta.class_counts.assign(counts.begin(), counts.end());
    return d;
}

Dataset apply_shift(const Dataset& d, const ShiftSpec& spec) {
    spec.validate();
    if (d.meta.severity != 0 || d.meta.shift != ShiftKind::None)
        throw InvalidArgument("apply_shift: dataset already carries shift '" +
                              std::string(shift_kind_name(d.meta.shift)) + "' severity " +
                              std::to_string(d.meta.severity) +
                              "; shifts compose only through scenario scheduling");

    Dataset out = d;
    out.meta.shift = spec.kind;
    out.meta.severity = spec.severity;
    out.meta.shift_seed = spec.seed;

    const int n = out.features.rows;
    const int dim = out.features.cols;
    const double spread = d.meta.spread > 0.0 ? d.meta.spread : 1.0;
    Rng rng(spec.seed);
    const int s = spec.severity - 1;

    switch (spec.kind) {
    case ShiftKind::GaussianNoise: {
        const double sigma = kNoiseSigma[s] * spread;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dim; ++j) out.features(i, j) += sigma * rng.normal();
        break;
    }
    case ShiftKind::MeanShift: {
        const auto delta = mean_shift_vector(spec, dim, spread);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dim; ++j) out.features(i, j) += delta[static_cast<size_t>(j)];
        break;
    }
    case ShiftKind::Rotation: {
        // Orthonormal plane (u, v) from the seed, rotation by the schedule angle.
        auto u = l2_normalized(rng.normal_vector(dim), "rotation axis u");
        auto w = rng.normal_vector(dim);
        double proj = 0.0;
        for (int j = 0; j < dim; ++j) proj += w[static_cast<size_t>(j)] * u[static_cast<size_t>(j)];
        for (int j = 0; j < dim; ++j) w[static_cast<size_t>(j)] -= proj * u[static_cast<size_t>(j)];
        auto v = l2_normalized(w, "rotation axis v");
        const double theta = spec.severity * std::numbers::pi / 20.0;
        const double c = std::cos(theta), sn = std::sin(theta);
        for (int i = 0; i < n; ++i) {
            double a = 0.0, b = 0.0;
            for (int j = 0; j < dim; ++j) {
                a += out.features(i, j) * u[static_cast<size_t>(j)];
                b += out.features(i, j) * v[static_cast<size_t>(j)];
            }
            const double na = a * c - b * sn;
            const double nb = a * sn + b * c;
            for (int j = 0; j < dim; ++j)
                out.features(i, j) += (na - a) * u[static_cast<size_t>(j)] +
                                      (nb - b) * v[static_cast<size_t>(j)];
        }
        break;
    }
    case ShiftKind::FeatureScale: {
        const double factor = kScaleFactor[s];
        std::vector<int> mask;
        for (int j = 0; j < dim; ++j)
            if (rng.next_u64() & 1ull) mask.push_back(j);
        if (mask.empty()) mask.push_back(0);
        for (int i = 0; i < n; ++i)
            for (int j : mask) out.features(i, j) *= factor;
        break;
    }
    case ShiftKind::FeatureDropout: {
        const int m = std::max(1, static_cast<int>(std::lround(kDropFraction[s] * dim)));
        std::vector<int> coords(static_cast<size_t>(dim));
        for (int j = 0; j < dim; ++j) coords[static_cast<size_t>(j)] = j;
        for (int i = 0; i < n; ++i) {
            rng.shuffle(coords);
            for (int t = 0; t < m; ++t) out.features(i, coords[static_cast<size_t>(t)]) = 0.0;
        }
        break;
    }
    case ShiftKind::None:
        break; // unreachable, validate() rejected it
    }

    if (!all_finite(out.features)) throw NonFiniteError("apply_shift: produced non-finite features");
    return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& d, int n_first) {
    std::vector<int> taken(static_cast<size_t>(d.meta.num_classes), 0);
    Dataset a, b;
    a.meta = b.meta = d.meta;
    a.centers = b.centers = d.centers;
    std::vector<int> rows_a, rows_b;
    for (int i = 0; i < d.features.rows; ++i) {
        const int y = d.labels[static_cast<size_t>(i)];
        if (taken[static_cast<size_t>(y)] < n_first) {
            ++taken[static_cast<size_t>(y)];
            rows_a.push_back(i);
        } else {
            rows_b.push_back(i);
        }
    }
    auto build = [&](Dataset& out, const std::vector<int>& rows) {
        out.features = Matrix(static_cast<int>(rows.size()), d.features.cols);
        out.labels.resize(rows.size());
        out.meta.class_counts.assign(static_cast<size_t>(d.meta.num_classes), 0);
        for (size_t r = 0; r < rows.size(); ++r) {
            for (int j = 0; j < d.features.cols; ++j)
                out.features(static_cast<int>(r), j) = d.features(rows[r], j);
            out.labels[r] = d.labels[static_cast<size_t>(rows[r])];
            ++out.meta.class_counts[static_cast<size_t>(out.labels[r])];
        }
        out.meta.num_samples = static_cast<int64_t>(rows.size());
    };
    build(a, rows_a);
    build(b, rows_b);
    return {std::move(a), std::move(b)};
}

namespace {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("dataset file truncated");
}

void write_string(std::ostream& os, const std::string& s) {
    const uint32_t len = static_cast<uint32_t>(s.size());
    write_pod(os, len);
    os.write(s.data(), static_cast<std::streamsize>(len));
}

std::string read_string(std::istream& is) {
    uint32_t len = 0;
    read_pod(is, len);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("dataset file truncated inside string");
    return s;
}

nlohmann::json meta_to_json(const DatasetMeta& m) {
    return nlohmann::json{{"seed", m.seed},
                          {"num_classes", m.num_classes},
                          {"dim", m.dim},
                          {"num_samples", m.num_samples},
                          {"generator", m.generator},
                          {"spread", m.spread},
                          {"n_per_class", m.n_per_class},
                          {"radius", m.radius},
                          {"shift", shift_kind_name(m.shift)},
                          {"severity", m.severity},
                          {"shift_seed", m.shift_seed},
                          {"class_counts", m.class_counts}};
}

} // namespace

void save_dataset(const Dataset& d, const std::string& path) {
    if (d.meta.num_classes > 65535)
        throw IoError("dataset format stores uint16 labels; " +
                      std::to_string(d.meta.num_classes) + " classes exceed it");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    write_pod(os, static_cast<uint32_t>(d.meta.num_classes));
    write_pod(os, static_cast<uint32_t>(d.meta.dim));
    write_pod(os, static_cast<uint64_t>(d.meta.num_samples));
    write_pod(os, d.meta.seed);
    write_pod(os, d.meta.shift_seed);
    write_pod(os, d.meta.spread);
    write_pod(os, d.meta.radius);
    write_pod(os, static_cast<uint32_t>(d.meta.n_per_class));
    write_pod(os, static_cast<uint8_t>(d.meta.shift));
    write_pod(os, static_cast<uint8_t>(d.meta.severity));
    write_string(os, d.meta.generator);
    for (int64_t c : d.meta.class_counts) write_pod(os, static_cast<uint64_t>(c));
    os.write(reinterpret_cast<const char*>(d.features.data.data()),
             static_cast<std::streamsize>(d.features.data.size() * sizeof(double)));
    for (int label : d.labels) {
        const uint16_t y = static_cast<uint16_t>(label);
        write_pod(os, y);
    }
    if (!os) throw IoError("short write to '" + path + "'");
    os.close();

    std::ofstream js(path + ".json");
    if (!js) throw IoError("cannot open '" + path + ".json' for writing");
    js << meta_to_json(d.meta).dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("'" + path + "' is not a dataset file (bad magic)");
    uint32_t version = 0;
    read_pod(is, version);
    if (version != kVersion)
        throw IoError("dataset version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kVersion) + ")");

    Dataset d;
    uint32_t num_classes = 0, dim = 0, n_per_class = 0;
    uint64_t n = 0;
    uint8_t shift = 0, severity = 0;
    read_pod(is, num_classes);
    read_pod(is, dim);
    read_pod(is, n);
    read_pod(is, d.meta.seed);
    read_pod(is, d.meta.shift_seed);
    read_pod(is, d.meta.spread);
    read_pod(is, d.meta.radius);
    read_pod(is, n_per_class);
    read_pod(is, shift);
    read_pod(is, severity);
    d.meta.generator = read_string(is);
    d.meta.num_classes = static_cast<int>(num_classes);
    d.meta.dim = static_cast<int>(dim);
    d.meta.num_samples = static_cast<int64_t>(n);
    d.meta.n_per_class = static_cast<int>(n_per_class);
    d.meta.shift = static_cast<ShiftKind>(shift);
    d.meta.severity = static_cast<int>(severity);
    d.meta.class_counts.resize(num_classes);
    for (auto& c : d.meta.class_counts) {
        uint64_t v = 0;
        read_pod(is, v);
        c = static_cast<int64_t>(v);
    }

    d.features = Matrix(static_cast<int>(n), static_cast<int>(dim));
    is.read(reinterpret_cast<char*>(d.features.data.data()),
            static_cast<std::streamsize>(d.features.data.size() * sizeof(double)));
    if (!is) throw IoError("dataset file truncated in feature block");
    d.labels.resize(static_cast<size_t>(n));
    for (auto& label : d.labels) {
        uint16_t y = 0;
        read_pod(is, y);
        label = static_cast<int>(y);
        if (label >= d.meta.num_classes)
            throw IoError("dataset label " + std::to_string(label) + " out of range");
    }
    if (!all_finite(d.features)) throw IoError("dataset contains non-finite features");
    return d;
}

} // namespace nctta
