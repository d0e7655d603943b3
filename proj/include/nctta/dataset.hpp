#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nctta/matrix.hpp"

namespace nctta {

enum class ShiftKind : uint8_t {
    None = 0,
    GaussianNoise = 1,
    MeanShift = 2,
    Rotation = 3,
    FeatureScale = 4,
    FeatureDropout = 5,
};

const char* shift_kind_name(ShiftKind k);
ShiftKind shift_kind_from_name(const std::string& name);

// Severity knobs, one schedule per kind; all strictly increasing in severity.
// gaussian_noise: sigma = {0.25, 0.5, 1.0, 1.5, 2.0}[s-1] * spread
// mean_shift:     delta = {0.5, 1.0, 1.5, 2.0, 2.5}[s-1] * spread along a seeded unit vector
// rotation:       angle = s * pi/20 (9..45 degrees) in a seeded 2-D feature plane
// feature_scale:  factor = {1.25, 1.5, 2.0, 3.0, 4.0}[s-1] on a seeded coordinate subset
// feature_dropout: fraction = {0.1, 0.2, 0.3, 0.4, 0.5}[s-1] of coordinates zeroed per sample
struct ShiftSpec {
    ShiftKind kind{ShiftKind::GaussianNoise};
    int severity{1}; // 1..5
    uint64_t seed{0};

    void validate() const;
};

// Scalar shift magnitude, strictly increasing in severity for each kind.
// `spread` is the source dataset's cluster spread (schedules scale by it
// where the schedule is in feature units).
double shift_magnitude(const ShiftSpec& spec, double spread);

// The additive vector used by mean_shift, recomputable from the same ShiftSpec.
std::vector<double> mean_shift_vector(const ShiftSpec& spec, int dim, double spread);

struct DatasetMeta {
    uint64_t seed{0};
    int num_classes{0};
    int dim{0};
    int64_t num_samples{0};
    std::string generator; // e.g. "clusters-v1 (xoshiro256++/bm-v1)"
    double spread{0.0};
    int n_per_class{0};
    double radius{0.0}; // sphere radius the class centers were drawn on
    ShiftKind shift{ShiftKind::None};
    int severity{0}; // 0 = unshifted source distribution
    uint64_t shift_seed{0};
    std::vector<int64_t> class_counts;
};

struct Dataset {
    Matrix features;          // n x dim
    std::vector<int> labels;  // n, each in [0, num_classes)
    DatasetMeta meta;
    // Class centers as sampled by the generator; carried so tests and shift
    // analyses can reference the true means. Not part of the on-disk format.
    Matrix centers; // K x dim (empty for loaded datasets unless regenerated)

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

// K Gaussian clusters, centers uniform on the radius-(4*spread) sphere and
// resampled until every pairwise center distance is at least 4*spread,
// isotropic covariance spread^2 * I, class-major order. Fully determined
// by the seed. Classes are balanced by default; imbalance in [0, 1)
// shrinks class c to round(n_per_class * (1 - imbalance * c / (K - 1)))
// samples (the acceptance benchmarks always run balanced).
Dataset make_clusters(int num_classes, int dim, int n_per_class, double spread, uint64_t seed,
                      double imbalance = 0.0);

// Applies one shift to a severity-0 dataset. Labels are never touched.
// Shifting an already-shifted dataset throws (severity sequences belong to
// the scenario scheduler, not to composition here).
Dataset apply_shift(const Dataset& d, const ShiftSpec& spec);

// First `n_first` samples of each class vs the rest; both sides keep the
// source meta (train/test splits of one sampled distribution).
std::pair<Dataset, Dataset> split_per_class(const Dataset& d, int n_first);

// Versioned little-endian binary file plus a JSON sidecar at path + ".json".
// save/load round-trips bit-exactly.
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

} // namespace nctta
