#include "nctta/tta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nctta/rng.hpp"

namespace nctta {

const char* method_name(Method m) {
    switch (m) {
    case Method::NoAdapt: return "no_adapt";
    case Method::BnAdapt: return "bn_adapt";
    case Method::Tent: return "tent";
    case Method::Nctta: return "nctta";
    }
    return "unknown";
}

Method method_from_name(const std::string& s) {
    for (Method m : {Method::NoAdapt, Method::BnAdapt, Method::Tent, Method::Nctta})
        if (s == method_name(m)) return m;
    throw InvalidArgument("unknown method '" + s + "'");
}

const char* loss_variant_name(LossVariant v) {
    switch (v) {
    case LossVariant::InfoNce: return "infonce";
    case LossVariant::L2: return "l2";
    case LossVariant::Triplet: return "triplet";
    }
    return "unknown";
}

LossVariant loss_variant_from_name(const std::string& s) {
    for (LossVariant v : {LossVariant::InfoNce, LossVariant::L2, LossVariant::Triplet})
        if (s == loss_variant_name(v)) return v;
    throw InvalidArgument("unknown loss variant '" + s + "'");
}

const char* update_policy_name(UpdatePolicy p) {
    return p == UpdatePolicy::AffineOnly ? "affine_only" : "extractor_all";
}

UpdatePolicy update_policy_from_name(const std::string& s) {
    if (s == "affine_only") return UpdatePolicy::AffineOnly;
    if (s == "extractor_all") return UpdatePolicy::ExtractorAll;
    throw InvalidArgument("unknown update policy '" + s + "'");
}

const char* scenario_kind_name(ScenarioKind k) {
    switch (k) {
    case ScenarioKind::Mild: return "mild";
    case ScenarioKind::Ctta: return "ctta";
    case ScenarioKind::Bs1: return "bs1";
    }
    return "unknown";
}

ScenarioKind scenario_kind_from_name(const std::string& s) {
    for (ScenarioKind k : {ScenarioKind::Mild, ScenarioKind::Ctta, ScenarioKind::Bs1})
        if (s == scenario_kind_name(k)) return k;
    throw InvalidArgument("unknown scenario '" + s + "'");
}

AdaptConfig AdaptConfig::resolved(int num_classes) const {
    AdaptConfig c = *this;
    const double auto_threshold = 0.4 * std::log(static_cast<double>(num_classes));
    if (std::isnan(c.gamma_ent)) c.gamma_ent = auto_threshold;
    if (std::isnan(c.tau_ent)) c.tau_ent = auto_threshold;

    if (c.alpha < 0.0 || c.alpha > 1.0)
        throw InvalidArgument("adapt config: alpha must be in [0, 1]");
    if (!(c.epsilon > 0.0)) throw InvalidArgument("adapt config: epsilon must be positive");
    if (c.k < 1 || c.k > num_classes)
        throw InvalidArgument("adapt config: k must be in [1, " + std::to_string(num_classes) +
                              "], got " + std::to_string(c.k));
    if (!(c.gamma_ent > 0.0)) throw InvalidArgument("adapt config: gamma_ent must be positive");
    if (std::isnan(c.tau_ent)) throw InvalidArgument("adapt config: tau_ent must be a number");
    if (c.nu < 0.0) throw InvalidArgument("adapt config: nu must be >= 0");
    if (c.eta < 0.0) throw InvalidArgument("adapt config: eta must be >= 0");
    if (c.tau_margin < 0.0) throw InvalidArgument("adapt config: tau_margin must be >= 0");
    if (!(c.lr >= 0.0)) throw InvalidArgument("adapt config: lr must be >= 0");
    if (c.batch_size < 1) throw InvalidArgument("adapt config: batch_size must be >= 1");
    if (c.ent_weight < 0.0 || c.nc_weight < 0.0)
        throw InvalidArgument("adapt config: loss weights must be >= 0");
    if (c.nc_weight > 0.0 && c.variant != LossVariant::InfoNce && c.k == num_classes)
        throw InvalidArgument("adapt config: variant '" +
                              std::string(loss_variant_name(c.variant)) +
                              "' needs a nonempty negative set; k must be < K");
    return c;
}

double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

std::vector<bool> entropy_filter(const std::vector<double>& entropies, double gamma_ent) {
    if (!(gamma_ent > 0.0)) throw InvalidArgument("entropy_filter: gamma_ent must be positive");
    std::vector<bool> mask(entropies.size());
    for (size_t i = 0; i < entropies.size(); ++i) mask[i] = entropies[i] < gamma_ent;
    return mask;
}

HybridTarget hybrid_target(const FcaVector& d, const std::vector<double>& p, double alpha,
                           double epsilon, int k) {
    const int K = static_cast<int>(d.d.size());
    if (static_cast<int>(p.size()) != K)
        throw InvalidArgument("hybrid_target: probability length mismatch");
    if (k < 1 || k > K) throw InvalidArgument("hybrid_target: k out of range");
    HybridTarget t;
    t.y_tilde.resize(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j)
        t.y_tilde[static_cast<size_t>(j)] =
            (1.0 - alpha) * std::exp(-d.d[static_cast<size_t>(j)] / epsilon) +
            alpha * p[static_cast<size_t>(j)];
    t.order.resize(static_cast<size_t>(K));
    std::iota(t.order.begin(), t.order.end(), 0);
    std::stable_sort(t.order.begin(), t.order.end(), [&](int a, int b) {
        return t.y_tilde[static_cast<size_t>(a)] > t.y_tilde[static_cast<size_t>(b)];
    });
    t.target_set.assign(t.order.begin(), t.order.begin() + k);
    return t;
}

double sample_weight(double l_ent, double pfca, double tau_ent, double nu, double eta) {
    return std::exp(-(l_ent - tau_ent)) + nu / (1.0 + eta * pfca);
}

double loss_nc_value(const std::vector<double>& distances, const std::vector<double>& cosines,
                     const std::vector<int>& target_set, LossVariant variant, double tau_margin) {
    const int K = static_cast<int>(distances.size());
    const int k = static_cast<int>(target_set.size());
    if (k < 1 || k > K) throw InvalidArgument("loss_nc: target set size out of range");
    std::vector<bool> in_t(static_cast<size_t>(K), false);
    for (int j : target_set) in_t[static_cast<size_t>(j)] = true;
    if (variant != LossVariant::InfoNce && k == K)
        throw InvalidArgument("loss_nc: variant '" + std::string(loss_variant_name(variant)) +
                              "' needs a nonempty negative set");

    switch (variant) {
    case LossVariant::InfoNce: {
        double num = 0.0, den = 0.0;
        for (int j = 0; j < K; ++j) {
            const double e = std::exp(cosines[static_cast<size_t>(j)]);
            den += e;
            if (in_t[static_cast<size_t>(j)]) num += e;
        }
        return -std::log((num / k) / den);
    }
    case LossVariant::L2: {
        double pos = 0.0, neg = 0.0;
        for (int j = 0; j < K; ++j)
            (in_t[static_cast<size_t>(j)] ? pos : neg) += distances[static_cast<size_t>(j)];
        return pos / k - neg / (K - k);
    }
    case LossVariant::Triplet: {
        double pos = 0.0;
        double min_neg = std::numeric_limits<double>::infinity();
        for (int j = 0; j < K; ++j) {
            if (in_t[static_cast<size_t>(j)])
                pos += distances[static_cast<size_t>(j)];
            else
                min_neg = std::min(min_neg, distances[static_cast<size_t>(j)]);
        }
        return std::max(0.0, pos / k - min_neg + tau_margin);
    }
    }
    throw InvalidArgument("loss_nc: bad variant");
}

BatchPlan plan_batch(const Matrix& features, const Matrix& probs, const Matrix& classifier,
                     const AdaptConfig& cfg) {
    const int b = features.rows;
    const int num_classes = classifier.rows;

    BatchPlan out;
    out.pass.assign(static_cast<size_t>(b), true);
    out.degenerate.assign(static_cast<size_t>(b), false);
    out.y_hat.resize(static_cast<size_t>(b));
    out.entropies.resize(static_cast<size_t>(b));
    out.lambdas.assign(static_cast<size_t>(b), 1.0);
    out.pfca.assign(static_cast<size_t>(b), std::numeric_limits<double>::quiet_NaN());
    out.targets.resize(static_cast<size_t>(b));
    out.nc_values.assign(static_cast<size_t>(b), 0.0);

    for (int i = 0; i < b; ++i) {
        if (l2_norm(features.row(i)) < kDegenerateNorm)
            out.degenerate[static_cast<size_t>(i)] = true;
        const auto p = probs.row(i);
        out.y_hat[static_cast<size_t>(i)] = argmax(p);
        out.entropies[static_cast<size_t>(i)] = entropy(p);
    }
    if (cfg.use_filter) {
        const auto mask = entropy_filter(out.entropies, cfg.gamma_ent);
        for (int i = 0; i < b; ++i) out.pass[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)];
    }

    const Matrix wn = l2_normalized_rows(classifier, "classifier");
    for (int i = 0; i < b; ++i) {
        if (out.degenerate[static_cast<size_t>(i)]) continue;
        const auto hn = l2_normalized(features.row(i), "feature row");
        FcaVector d;
        d.d.resize(static_cast<size_t>(num_classes));
        std::vector<double> cosines(static_cast<size_t>(num_classes));
        for (int j = 0; j < num_classes; ++j) {
            double dot = 0.0;
            for (int c = 0; c < features.cols; ++c) dot += hn[static_cast<size_t>(c)] * wn(j, c);
            cosines[static_cast<size_t>(j)] = dot;
            d.d[static_cast<size_t>(j)] = std::sqrt(std::max(0.0, 2.0 - 2.0 * dot));
        }
        const auto p = probs.row(i);
        out.pfca[static_cast<size_t>(i)] = pfca(d, p);
        if (cfg.nc_weight > 0.0) {
            const auto t = hybrid_target(d, p, cfg.alpha, cfg.epsilon, cfg.k);
            out.targets[static_cast<size_t>(i)] = t.target_set;
            out.nc_values[static_cast<size_t>(i)] =
                loss_nc_value(d.d, cosines, t.target_set, cfg.variant, cfg.tau_margin);
        }
        if (cfg.use_lambda)
            out.lambdas[static_cast<size_t>(i)] =
                sample_weight(out.entropies[static_cast<size_t>(i)],
                              out.pfca[static_cast<size_t>(i)], cfg.tau_ent, cfg.nu, cfg.eta);
    }
    for (int i = 0; i < b; ++i) {
        if (out.pass[static_cast<size_t>(i)] && !out.degenerate[static_cast<size_t>(i)])
            ++out.contributing;
    }
    return out;
}

Var build_loss_from_plan(Tape& tape, const TapeModel& tm, const Matrix& classifier,
                         const AdaptConfig& cfg, const BatchPlan& plan, int normalizer) {
    const Matrix& h_val = tape.value(tm.features);
    const int b = h_val.rows;
    const int num_classes = classifier.rows;

    std::vector<int> skip_rows;
    Matrix weight_col(b, 1);
    int contributing = 0;
    for (int i = 0; i < b; ++i) {
        if (plan.degenerate[static_cast<size_t>(i)]) skip_rows.push_back(i);
        const bool contributes =
            plan.pass[static_cast<size_t>(i)] && !plan.degenerate[static_cast<size_t>(i)];
        if (contributes) {
            weight_col(i, 0) = plan.lambdas[static_cast<size_t>(i)] / normalizer;
            ++contributing;
        }
    }
    if (contributing == 0) return Var{}; // no-op step, logged by the caller

    // L_ENT from logits: lse(z) - sum_j p_j z_j, safe against log(0).
    Var term{};
    if (cfg.ent_weight > 0.0) {
        Var shift = tape.row_max(tm.logits);
        Var lse = tape.add(tape.log(tape.row_sum(tape.exp(tape.sub(tm.logits, shift)))), shift);
        Var ent_col = tape.sub(lse, tape.row_sum(tape.mul(tm.probs, tm.logits)));
        term = tape.scale(ent_col, cfg.ent_weight);
    }

    if (cfg.nc_weight > 0.0) {
        const Matrix wn = l2_normalized_rows(classifier, "classifier");
        Var hn_node = tape.l2_normalize_rows(tm.features, skip_rows);
        Var cos_node = tape.matmul(hn_node, tape.constant(transpose(wn))); // b x K

        // Positive/negative masks from the detached targets; degenerate rows
        // get a dummy positive in column 0 so every row stays finite (their
        // weight is zero).
        Matrix pos_mask(b, num_classes);
        for (int i = 0; i < b; ++i) {
            if (plan.degenerate[static_cast<size_t>(i)]) {
                pos_mask(i, 0) = 1.0;
                continue;
            }
            for (int j : plan.targets[static_cast<size_t>(i)]) pos_mask(i, j) = 1.0;
        }
        Var pos = tape.constant(pos_mask);

        Var nc_col{};
        switch (cfg.variant) {
        case LossVariant::InfoNce: {
            Var ec = tape.exp(cos_node);
            Var num = tape.row_sum(tape.mul(ec, pos));
            Var den = tape.row_sum(ec);
            nc_col = tape.add(tape.sub(tape.log(den), tape.log(num)),
                              tape.constant(Matrix::full(b, 1, std::log(double(cfg.k)))));
            break;
        }
        case LossVariant::L2:
        case LossVariant::Triplet: {
            Var two = tape.constant(Matrix::full(b, num_classes, 2.0));
            Var dist = tape.sqrt(tape.relu(tape.sub(two, tape.scale(cos_node, 2.0))));
            Var mean_pos = tape.scale(tape.row_sum(tape.mul(dist, pos)), 1.0 / cfg.k);
            if (cfg.variant == LossVariant::L2) {
                Matrix neg_mask(b, num_classes);
                for (int i = 0; i < b; ++i) {
                    if (plan.degenerate[static_cast<size_t>(i)]) continue;
                    for (int j = 0; j < num_classes; ++j) neg_mask(i, j) = 1.0 - pos_mask(i, j);
                }
                Var mean_neg = tape.scale(tape.row_sum(tape.mul(dist, tape.constant(neg_mask))),
                                          1.0 / (num_classes - cfg.k));
                nc_col = tape.sub(mean_pos, mean_neg);
            } else {
                // min over negatives via a detached argmin per row.
                const Matrix& dval = tape.value(dist);
                std::vector<int> argmin_idx(static_cast<size_t>(b), 0);
                for (int i = 0; i < b; ++i) {
                    if (plan.degenerate[static_cast<size_t>(i)]) continue;
                    int best = -1;
                    for (int j = 0; j < num_classes; ++j) {
                        if (pos_mask(i, j) != 0.0) continue;
                        if (best < 0 || dval(i, j) < dval(i, best)) best = j;
                    }
                    argmin_idx[static_cast<size_t>(i)] = best;
                }
                Var min_neg = tape.index_select(dist, argmin_idx);
                nc_col = tape.relu(tape.add(tape.sub(mean_pos, min_neg),
                                            tape.constant(Matrix::full(b, 1, cfg.tau_margin))));
            }
            break;
        }
        }
        Var nc_term = tape.scale(nc_col, cfg.nc_weight);
        term = term.valid() ? tape.add(term, nc_term) : nc_term;
    }

    if (!term.valid()) return Var{}; // both loss terms disabled; nothing to optimize
    return tape.sum(tape.mul(term, tape.constant(weight_col)));
}

BatchLoss build_total_loss(Tape& tape, const TapeModel& tm, const Matrix& classifier,
                           const AdaptConfig& cfg, int normalizer) {
    BatchLoss out;
    out.plan = plan_batch(tape.value(tm.features), tape.value(tm.probs), classifier, cfg);
    out.loss = build_loss_from_plan(tape, tm, classifier, cfg, out.plan, normalizer);
    return out;
}

namespace {

ForwardMode mode_for(Method method, int batch_rows) {
    // Only bn_adapt re-estimates normalization statistics from the test
    // batch; the gradient methods keep the running statistics so their
    // behavior is identical across batch sizes (including B=1 streaming).
    if (method == Method::BnAdapt && batch_rows >= 2) return ForwardMode::BatchStat;
    return ForwardMode::Eval;
}

ParamSelection selection_for(const AdaptConfig& cfg) {
    ParamSelection sel;
    sel.affine = true;
    sel.extractor_weights = cfg.policy == UpdatePolicy::ExtractorAll;
    sel.classifier = false; // the alignment target never moves
    return sel;
}

} // namespace

StepLog adapt_step(ModelParams& params, NormState& norm, const Matrix& x,
                   const std::vector<int>& y_true, const AdaptConfig& cfg, ForwardMode mode,
                   int step_index) {
    StepLog log;
    log.step = step_index;
    log.batch_size = x.rows;

    const bool updates = cfg.method == Method::Tent || cfg.method == Method::Nctta;
    Tape tape;
    const ParamSelection sel = updates ? selection_for(cfg) : ParamSelection{};
    const TapeModel tm = build_forward_tape(tape, params, norm, x, mode, sel);

    AdaptConfig loss_cfg = cfg;
    if (cfg.method == Method::Tent) {
        loss_cfg.nc_weight = 0.0;
        loss_cfg.ent_weight = 1.0;
        loss_cfg.use_filter = false;
        loss_cfg.use_lambda = false;
    }
    // Per-sample diagnostics come from the same pre-update forward whether
    // or not this method takes a gradient step.
    BatchLoss bl = build_total_loss(tape, tm, params.classifier, loss_cfg, x.rows);
    const BatchPlan& plan = bl.plan;

    int64_t correct = 0;
    double ent_sum = 0.0, lam_sum = 0.0, nc_sum = 0.0, gfca_sum = 0.0, pfca_sum = 0.0;
    int passed = 0, contributing = 0, non_degenerate = 0;
    const Matrix& h_val = tape.value(tm.features);
    for (int i = 0; i < x.rows; ++i) {
        if (plan.y_hat[static_cast<size_t>(i)] == y_true[static_cast<size_t>(i)]) ++correct;
        ent_sum += plan.entropies[static_cast<size_t>(i)];
        if (plan.pass[static_cast<size_t>(i)]) ++passed;
        if (plan.degenerate[static_cast<size_t>(i)]) continue;
        ++non_degenerate;
        nc_sum += plan.nc_values[static_cast<size_t>(i)];
        pfca_sum += plan.pfca[static_cast<size_t>(i)];
        const auto d = fca_distances(h_val.row(i), params.classifier);
        gfca_sum += gfca(d, y_true[static_cast<size_t>(i)]);
        if (plan.pass[static_cast<size_t>(i)]) {
            lam_sum += plan.lambdas[static_cast<size_t>(i)];
            ++contributing;
        }
    }
    log.accuracy = static_cast<double>(correct) / x.rows;
    log.pass_count = passed;
    log.skipped_degenerate = x.rows - non_degenerate;
    log.mean_ent = ent_sum / x.rows;
    log.mean_lambda = contributing > 0 ? lam_sum / contributing : 0.0;
    log.mean_nc = non_degenerate > 0 ? nc_sum / non_degenerate : 0.0;
    log.mean_gfca = non_degenerate > 0 ? gfca_sum / non_degenerate : 0.0;
    log.mean_pfca = non_degenerate > 0 ? pfca_sum / non_degenerate : 0.0;

    if (!updates || !bl.loss.valid()) return log;

    const GradMap grads = tape.backward(bl.loss);
    for (const auto& [id, g] : grads) {
        if (!all_finite(g)) return log; // skip the update, keep streaming
    }

    auto apply = [&](Var leaf, auto& value) {
        if (!leaf.valid()) return;
        const Matrix& g = grads.at(leaf.id);
        for (size_t i = 0; i < g.data.size(); ++i) value[i] -= cfg.lr * g.data[i];
    };
    for (size_t li = 0; li < params.layers.size(); ++li) {
        apply(tm.gammas[li], params.layers[li].gamma);
        apply(tm.betas[li], params.layers[li].beta);
        apply(tm.weights[li], params.layers[li].weight.data);
    }
    log.update_applied = true;
    return log;
}

uint64_t scenario_shift_seed(uint64_t stream_seed, size_t segment) {
    return Rng(stream_seed).fork(100 + segment).seed();
}

RunLog run_scenario(ModelParams& params, NormState& norm, const Dataset& source,
                    const ScenarioSpec& spec, const AdaptConfig& cfg_in, uint64_t stream_seed) {
    AdaptConfig cfg = cfg_in.resolved(source.meta.num_classes);
    if (spec.kind == ScenarioKind::Bs1) cfg.batch_size = 1;
    if (spec.kind == ScenarioKind::Ctta && spec.severities.empty())
        throw InvalidArgument("run_scenario: ctta needs a severity sequence");

    std::vector<int> severities =
        spec.kind == ScenarioKind::Ctta ? spec.severities : std::vector<int>{spec.severity};

    Rng stream_rng(stream_seed);
    RunLog log;
    int step_index = 0;
    for (size_t seg = 0; seg < severities.size(); ++seg) {
        const int severity = severities[seg];
        ShiftSpec shift{spec.shift, severity, scenario_shift_seed(stream_seed, seg)};
        const Dataset shifted = apply_shift(source, shift);

        std::vector<int> order(static_cast<size_t>(shifted.size()));
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng = stream_rng.fork(200 + seg);
        order_rng.shuffle(order);

        SegmentSummary summary;
        summary.severity = severity;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const int b = static_cast<int>(
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - start));
            Matrix xb(b, shifted.features.cols);
            std::vector<int> yb(static_cast<size_t>(b));
            for (int i = 0; i < b; ++i) {
                const int src = order[start + static_cast<size_t>(i)];
                for (int j = 0; j < shifted.features.cols; ++j)
                    xb(i, j) = shifted.features(src, j);
                yb[static_cast<size_t>(i)] = shifted.labels[static_cast<size_t>(src)];
            }
            const ForwardMode mode = mode_for(cfg.method, b);
            const StepLog s = adapt_step(params, norm, xb, yb, cfg, mode, step_index++);
            summary.samples += b;
            summary.correct += static_cast<int64_t>(std::lround(s.accuracy * b));
            log.steps.push_back(s);
        }
        summary.accuracy = summary.samples > 0
                               ? static_cast<double>(summary.correct) / summary.samples
                               : 0.0;
        log.segments.push_back(summary);
        log.total_samples += summary.samples;
        log.total_correct += summary.correct;
    }
    log.stream_accuracy =
        log.total_samples > 0 ? static_cast<double>(log.total_correct) / log.total_samples : 0.0;
    log.final_mean_gfca = log.steps.empty() ? 0.0 : log.steps.back().mean_gfca;
    return log;
}

void write_steplog_csv(const RunLog& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "step,batch_size,accuracy,pass_count,skipped_degenerate,mean_lambda,mean_ent,"
          "mean_nc,mean_gfca,mean_pfca,update_applied\n";
    os.precision(17);
    for (const auto& s : log.steps) {
        os << s.step << ',' << s.batch_size << ',' << s.accuracy << ',' << s.pass_count << ','
           << s.skipped_degenerate << ',' << s.mean_lambda << ',' << s.mean_ent << ','
           << s.mean_nc << ',' << s.mean_gfca << ',' << s.mean_pfca << ','
           << (s.update_applied ? 1 : 0) << '\n';
    }
    if (!os) throw IoError("short write to '" + path + "'");
}

} // namespace nctta
