#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nctta/matrix.hpp"

namespace nctta {

// Per-sample feature-to-classifier alignment distances, one entry per
// class: d_j = | h/|h| - w_j/|w_j| |, always in [0, 2].
struct FcaVector {
    std::vector<double> d;
};

// d_j for one feature vector against every classifier row. Throws
// DegenerateVectorError naming the offender when h or a row of w has norm
// below 1e-12.
FcaVector fca_distances(const std::vector<double>& h, const Matrix& classifier);

// Batched variant; `sample_tag` names the batch in error messages.
std::vector<FcaVector> fca_distances_batch(const Matrix& features, const Matrix& classifier,
                                           const std::string& sample_tag = "features");

double gfca(const FcaVector& d, int true_class);
// Distance to the argmax class of p; ties break to the lowest index.
double pfca(const FcaVector& d, const std::vector<double>& p);

struct GroupStats {
    double mean_gfca{0.0};
    double var_gfca{0.0};
    double mean_pfca{0.0};
    double var_pfca{0.0};
    int64_t count{0};
    bool defined{false};        // false when the group is empty
    bool low_confidence{false}; // fewer than 5 samples
};

struct MisalignmentStats {
    GroupStats correct;
    GroupStats wrong;
};

struct SampleMetricsRow {
    int64_t sample_id{0};
    int y{0};
    int y_hat{0};
    bool correct{false};
    double gfca{0.0};
    double pfca{0.0};
    double entropy{0.0};
};

// Group means/variances of G-FCA and P-FCA split by classification
// outcome, plus per-sample rows for histogram exports.
MisalignmentStats misalignment_stats(const Matrix& features, const Matrix& classifier,
                                     const std::vector<int>& labels, const Matrix& probs,
                                     std::vector<SampleMetricsRow>* rows = nullptr);

// | M/|M|_F - w/|w|_F |_F with Frobenius normalization on both sides.
double nc3_selfduality(const Matrix& centered_class_means, const Matrix& classifier);

struct NcReport {
    double nc1{0.0};     // trace(Sigma_W Sigma_B^+) / K
    double nc2{0.0};     // cosine spread + deviation from -1/(K-1)
    double nc2_etf{0.0}; // the deviation term alone
    double nc3{0.0};
    double nc4{0.0};     // nearest-class-mean vs classifier agreement rate
    double nc3plus{0.0}; // mean G-FCA
};

// Class-wise collapse metrics over a labeled feature batch. Throws
// InvalidArgument listing absent classes when some class has no samples.
NcReport nc_suite(const Matrix& features, const std::vector<int>& labels,
                  const Matrix& classifier);

// Class means (K x L), global mean, and the centered-mean matrix M.
struct ClassMeans {
    Matrix means;              // K x L
    std::vector<double> global; // L
    Matrix centered;           // K x L, rows mu_c - mu_G
};
ClassMeans class_means(const Matrix& features, const std::vector<int>& labels, int num_classes);

void write_sample_metrics_csv(const std::vector<SampleMetricsRow>& rows, const std::string& path);

} // namespace nctta
