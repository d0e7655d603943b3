#pragma once

#include <string>
#include <vector>

#include "nctta/config.hpp"
#include "nctta/dataset.hpp"
#include "nctta/metrics.hpp"
#include "nctta/model.hpp"
#include "nctta/tta.hpp"

namespace nctta {

inline constexpr const char* kToolVersion = "0.1.0";

// Everything a run derives from the config file.
struct Experiment {
    int num_classes{0};
    int dim{0};
    int train_per_class{0};
    int test_per_class{0};
    double spread{0.0};
    double imbalance{0.0};
    uint64_t data_seed{0};
    std::vector<int> hidden;
    TrainConfig train_cfg;
    AdaptConfig adapt_cfg;
    uint64_t model_seed{1};
};

// Parses and validates the [data]/[train]/[adapt] sections; unknown keys
// are errors.
Experiment experiment_from_config(const Config& cfg);

// Deterministic train/test pair: one sampled source distribution split
// per class.
std::pair<Dataset, Dataset> build_datasets(const Experiment& exp);

// Deterministic seed-free 2-D PCA projection. Component signs are fixed by
// making each component's largest-magnitude coordinate positive.
Matrix pca_project_2d(const Matrix& features);

// Mean silhouette over all samples: (b - a) / max(a, b) with squared-free
// Euclidean distances; classes with a single sample score 0.
double silhouette_score(const Matrix& points, const std::vector<int>& labels);

struct ProjectionRow {
    int64_t sample_id{0};
    std::string method;
    double x0{0.0};
    double x1{0.0};
    int y{0};
    int y_hat{0};
};

void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::string& path);
void write_train_trace_csv(const TrainTrace& trace, const std::string& path);

// Command entry points used by the CLI; each writes its artifacts under
// out_dir plus a manifest.json, and returns the manifest path.
struct CliOverrides {
    std::string method;     // empty = from config
    std::string variant;    // empty = from config
    std::string scenario{"mild"};
    std::string shift{"gaussian_noise"};
    int severity{3};
    std::vector<int> severities{1, 2, 3, 4, 5};
    uint64_t seed{0};       // stream seed
    std::string data_path;  // load a dataset file instead of regenerating
    bool save_data{false};
};

std::string cmd_train(const Config& cfg, const std::string& out_dir, const CliOverrides& opt);
std::string cmd_eval(const Config& cfg, const std::string& checkpoint, const std::string& out_dir,
                     const CliOverrides& opt);
std::string cmd_adapt(const Config& cfg, const std::string& checkpoint, const std::string& out_dir,
                      const CliOverrides& opt);
std::string cmd_metrics(const Config& cfg, const std::string& checkpoint,
                        const std::string& out_dir, const CliOverrides& opt);
std::string cmd_project(const Config& cfg, const std::vector<std::string>& checkpoints,
                        const std::vector<std::string>& tags, const std::string& out_dir,
                        const CliOverrides& opt);
std::string cmd_sweep(const Config& cfg, const std::string& checkpoint, const std::string& spec,
                      const std::string& out_dir, const CliOverrides& opt);

// "alpha=0:1:0.25,k=1:4" -> one (name, values) axis per comma-separated
// term; ranges are inclusive with a default step of 1.
std::vector<std::pair<std::string, std::vector<double>>> parse_sweep_spec(const std::string& spec);

} // namespace nctta
