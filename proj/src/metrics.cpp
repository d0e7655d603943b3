#include "nctta/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Dense>

namespace nctta {

FcaVector fca_distances(const std::vector<double>& h, const Matrix& classifier) {
    const auto hn = l2_normalized(h, "feature vector");
    FcaVector out;
    out.d.resize(static_cast<size_t>(classifier.rows));
    for (int j = 0; j < classifier.rows; ++j) {
        const auto wn = l2_normalized(classifier.row(j), "classifier row " + std::to_string(j));
        double s = 0.0;
        for (size_t t = 0; t < hn.size(); ++t) {
            const double diff = hn[t] - wn[t];
            s += diff * diff;
        }
        out.d[static_cast<size_t>(j)] = std::sqrt(s);
    }
    return out;
}

std::vector<FcaVector> fca_distances_batch(const Matrix& features, const Matrix& classifier,
                                           const std::string& sample_tag) {
    std::vector<FcaVector> out;
    out.reserve(static_cast<size_t>(features.rows));
    for (int i = 0; i < features.rows; ++i) {
        try {
            out.push_back(fca_distances(features.row(i), classifier));
        } catch (const DegenerateVectorError& e) {
            throw DegenerateVectorError(std::string(e.what()) + " (sample " + std::to_string(i) +
                                        " of " + sample_tag + ")");
        }
    }
    return out;
}

double gfca(const FcaVector& d, int true_class) {
    if (true_class < 0 || true_class >= static_cast<int>(d.d.size()))
        throw InvalidArgument("gfca: class " + std::to_string(true_class) + " out of range");
    return d.d[static_cast<size_t>(true_class)];
}

double pfca(const FcaVector& d, const std::vector<double>& p) {
    if (p.size() != d.d.size())
        throw InvalidArgument("pfca: probability vector length mismatch");
    return d.d[static_cast<size_t>(argmax(p))];
}

namespace {

GroupStats finalize(const std::vector<double>& g, const std::vector<double>& p) {
    GroupStats s;
    s.count = static_cast<int64_t>(g.size());
    if (g.empty()) return s;
    s.defined = true;
    s.low_confidence = g.size() < 5;
    auto mean_of = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        return m / static_cast<double>(v.size());
    };
    auto var_of = [](const std::vector<double>& v, double m) {
        double s2 = 0.0;
        for (double x : v) s2 += (x - m) * (x - m);
        return s2 / static_cast<double>(v.size());
    };
    s.mean_gfca = mean_of(g);
    s.var_gfca = var_of(g, s.mean_gfca);
    s.mean_pfca = mean_of(p);
    s.var_pfca = var_of(p, s.mean_pfca);
    return s;
}

double entropy_value(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

} // namespace

MisalignmentStats misalignment_stats(const Matrix& features, const Matrix& classifier,
                                     const std::vector<int>& labels, const Matrix& probs,
                                     std::vector<SampleMetricsRow>* rows) {
    if (features.rows != static_cast<int>(labels.size()) || features.rows != probs.rows)
        throw InvalidArgument("misalignment_stats: batch sizes disagree (features " +
                              features.shape_str() + ", labels " +
                              std::to_string(labels.size()) + ", probs " + probs.shape_str() + ")");
    std::vector<double> g_correct, p_correct, g_wrong, p_wrong;
    for (int i = 0; i < features.rows; ++i) {
        const auto d = fca_distances(features.row(i), classifier);
        const auto p = probs.row(i);
        const int y = labels[static_cast<size_t>(i)];
        const int y_hat = argmax(p);
        const double dg = gfca(d, y);
        const double dp = pfca(d, p);
        if (y_hat == y) {
            g_correct.push_back(dg);
            p_correct.push_back(dp);
        } else {
            g_wrong.push_back(dg);
            p_wrong.push_back(dp);
        }
        if (rows) {
            rows->push_back(SampleMetricsRow{i, y, y_hat, y_hat == y, dg, dp, entropy_value(p)});
        }
    }
    MisalignmentStats out;
    out.correct = finalize(g_correct, p_correct);
    out.wrong = finalize(g_wrong, p_wrong);
    return out;
}

namespace {

double frobenius(const Matrix& m) {
    double s = 0.0;
    for (double x : m.data) s += x * x;
    return std::sqrt(s);
}

} // namespace

double nc3_selfduality(const Matrix& centered_class_means, const Matrix& classifier) {
    if (!centered_class_means.same_shape(classifier))
        throw ShapeError("nc3_selfduality: shapes disagree, " + centered_class_means.shape_str() +
                         " vs " + classifier.shape_str());
    const double nm = frobenius(centered_class_means);
    const double nw = frobenius(classifier);
    if (nm < kDegenerateNorm || nw < kDegenerateNorm)
        throw DegenerateVectorError("nc3_selfduality: zero-norm operand");
    double s = 0.0;
    for (size_t i = 0; i < centered_class_means.data.size(); ++i) {
        const double diff = centered_class_means.data[i] / nm - classifier.data[i] / nw;
        s += diff * diff;
    }
    return std::sqrt(s);
}

ClassMeans class_means(const Matrix& features, const std::vector<int>& labels, int num_classes) {
    ClassMeans cm;
    cm.means = Matrix(num_classes, features.cols);
    cm.global.assign(static_cast<size_t>(features.cols), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (int i = 0; i < features.rows; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        ++counts[static_cast<size_t>(y)];
        for (int j = 0; j < features.cols; ++j) {
            cm.means(y, j) += features(i, j);
            cm.global[static_cast<size_t>(j)] += features(i, j);
        }
    }
    std::string missing;
    for (int c = 0; c < num_classes; ++c) {
        if (counts[static_cast<size_t>(c)] == 0) {
            missing += (missing.empty() ? "" : ", ") + std::to_string(c);
            continue;
        }
        for (int j = 0; j < features.cols; ++j)
            cm.means(c, j) /= static_cast<double>(counts[static_cast<size_t>(c)]);
    }
    if (!missing.empty())
        throw InvalidArgument("class_means: no samples for class(es) " + missing);
    for (auto& v : cm.global) v /= static_cast<double>(features.rows);
    cm.centered = cm.means;
    for (int c = 0; c < num_classes; ++c)
        for (int j = 0; j < features.cols; ++j)
            cm.centered(c, j) -= cm.global[static_cast<size_t>(j)];
    return cm;
}

NcReport nc_suite(const Matrix& features, const std::vector<int>& labels,
                  const Matrix& classifier) {
    const int K = classifier.rows;
    const int L = features.cols;
    const auto cm = class_means(features, labels, K);

    // Within- and between-class covariances.
    Eigen::MatrixXd sw = Eigen::MatrixXd::Zero(L, L);
    Eigen::MatrixXd sb = Eigen::MatrixXd::Zero(L, L);
    Eigen::VectorXd diff(L);
    for (int i = 0; i < features.rows; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        for (int j = 0; j < L; ++j) diff(j) = features(i, j) - cm.means(y, j);
        sw.noalias() += diff * diff.transpose();
    }
    sw /= static_cast<double>(features.rows);
    for (int c = 0; c < K; ++c) {
        for (int j = 0; j < L; ++j) diff(j) = cm.centered(c, j);
        sb.noalias() += diff * diff.transpose();
    }
    sb /= static_cast<double>(K);

    // Moore-Penrose pseudo-inverse through a symmetric eigendecomposition.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sb);
    const auto& vals = es.eigenvalues();
    const double cutoff = vals.cwiseAbs().maxCoeff() * 1e-12;
    Eigen::MatrixXd pinv = Eigen::MatrixXd::Zero(L, L);
    for (int t = 0; t < L; ++t) {
        if (std::abs(vals(t)) > cutoff && cutoff > 0.0)
            pinv.noalias() += es.eigenvectors().col(t) * es.eigenvectors().col(t).transpose() /
                              vals(t);
    }

    NcReport r;
    r.nc1 = (sw * pinv).trace() / static_cast<double>(K);

    // Pairwise cosines between centered class means.
    std::vector<double> cosines;
    for (int a = 0; a < K; ++a)
        for (int b = a + 1; b < K; ++b) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int j = 0; j < L; ++j) {
                dot += cm.centered(a, j) * cm.centered(b, j);
                na += cm.centered(a, j) * cm.centered(a, j);
                nb += cm.centered(b, j) * cm.centered(b, j);
            }
            cosines.push_back(dot / std::sqrt(std::max(na * nb, 1e-300)));
        }
    double mean_cos = 0.0;
    for (double c : cosines) mean_cos += c;
    mean_cos /= static_cast<double>(cosines.size());
    double var_cos = 0.0, etf_dev = 0.0;
    const double target = -1.0 / static_cast<double>(K - 1);
    for (double c : cosines) {
        var_cos += (c - mean_cos) * (c - mean_cos);
        etf_dev += std::abs(c - target);
    }
    var_cos /= static_cast<double>(cosines.size());
    etf_dev /= static_cast<double>(cosines.size());
    r.nc2_etf = etf_dev;
    r.nc2 = std::sqrt(var_cos) + etf_dev;

    r.nc3 = nc3_selfduality(cm.centered, classifier);

    // Agreement of the nearest-class-mean rule with the classifier argmax.
    int64_t agree = 0;
    for (int i = 0; i < features.rows; ++i) {
        int nearest = 0;
        double best = 0.0;
        for (int c = 0; c < K; ++c) {
            double d2 = 0.0;
            for (int j = 0; j < L; ++j) {
                const double d = features(i, j) - cm.means(c, j);
                d2 += d * d;
            }
            if (c == 0 || d2 < best) {
                best = d2;
                nearest = c;
            }
        }
        std::vector<double> z(static_cast<size_t>(K), 0.0);
        for (int c = 0; c < K; ++c) {
            double dot = 0.0;
            for (int j = 0; j < L; ++j) dot += features(i, j) * classifier(c, j);
            z[static_cast<size_t>(c)] = dot;
        }
        if (argmax(z) == nearest) ++agree;
    }
    r.nc4 = static_cast<double>(agree) / static_cast<double>(features.rows);

    // Mean G-FCA over samples with a nonzero feature vector; all-zero relu
    // outputs have no direction and are skipped here rather than aborting
    // a whole training trace.
    double mean_gfca = 0.0;
    int64_t counted = 0;
    for (int i = 0; i < features.rows; ++i) {
        if (l2_norm(features.row(i)) < kDegenerateNorm) continue;
        const auto d = fca_distances(features.row(i), classifier);
        mean_gfca += gfca(d, labels[static_cast<size_t>(i)]);
        ++counted;
    }
    r.nc3plus = counted > 0 ? mean_gfca / static_cast<double>(counted) : 0.0;
    return r;
}

void write_sample_metrics_csv(const std::vector<SampleMetricsRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "sample_id,y,y_hat,correct,gfca,pfca,entropy\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << r.sample_id << ',' << r.y << ',' << r.y_hat << ',' << (r.correct ? 1 : 0) << ','
           << r.gfca << ',' << r.pfca << ',' << r.entropy << '\n';
    }
    if (!os) throw IoError("short write to '" + path + "'");
}

} // namespace nctta
