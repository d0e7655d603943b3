// Acceptance suite for the desk-scale alignment lab. Runs every criterion
// at its pinned tolerance and prints one PASS/FAIL line each; exits
// nonzero if any fail.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "nctta/report.hpp"
#include "nctta/rng.hpp"
#include "nctta/tta.hpp"

using namespace nctta;

namespace {

int g_failures = 0;

void report(int number, const std::string& what, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", number, what.c_str(),
                detail.c_str());
    if (!pass) ++g_failures;
}

double rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
}

// ---------------------------------------------------------------- fixtures

struct ReferenceLab {
    Dataset train;
    Dataset test;
    ModelParams params;
    NormState norm;
    TrainTrace trace;

    // Benchmark adaptation configuration calibrated for the desk datasets.
    AdaptConfig bench;
    AdaptConfig bench_bs1;

    ReferenceLab() {
        Dataset full = make_clusters(4, 16, 1050, 0.5, 7);
        auto [tr, te] = split_per_class(full, 50);
        train = std::move(tr);
        test = std::move(te);
        params = init_model(16, {32, 32}, 4, 1);
        norm = init_norm_state(params);
        TrainConfig cfg; // defaults are the reference configuration
        trace = train_to_tpt(params, norm, train, cfg);

        bench.method = Method::Nctta;
        bench.variant = LossVariant::InfoNce;
        bench.alpha = 0.5;
        bench.k = 1;
        bench.lr = 0.3;
        bench.batch_size = 64;

        bench_bs1 = bench;
        bench_bs1.lr = 0.01;
    }

    RunLog run(Method method, ScenarioKind kind, int severity, uint64_t seed) const {
        ModelParams p = params;
        NormState n = norm;
        AdaptConfig cfg = kind == ScenarioKind::Bs1 ? bench_bs1 : bench;
        cfg.method = method;
        ScenarioSpec spec;
        spec.kind = kind;
        spec.shift = ShiftKind::GaussianNoise;
        spec.severity = severity;
        return run_scenario(p, n, test, spec, cfg, seed);
    }
};

// ------------------------------------------------------------ criterion 1

void criterion_gradients(const ReferenceLab&) {
    double worst = 0.0;
    std::string worst_what;
    bool pass = true;

    struct Case {
        const char* name;
        AdaptConfig cfg;
    };
    std::vector<Case> cases;
    {
        AdaptConfig ent;
        ent.nc_weight = 0.0;
        ent.use_filter = false;
        ent.use_lambda = false;
        cases.push_back({"L_ENT", ent});
        for (LossVariant v : {LossVariant::InfoNce, LossVariant::L2, LossVariant::Triplet}) {
            AdaptConfig nc;
            nc.ent_weight = 0.0;
            nc.variant = v;
            nc.use_filter = false;
            nc.use_lambda = false;
            nc.k = 2;
            cases.push_back({loss_variant_name(v), nc});
        }
        AdaptConfig total; // full objective: filter, lambda, both losses
        total.k = 2;
        cases.push_back({"L_total", total});
    }

    for (uint64_t seed = 0; seed < 100 && pass; ++seed) {
        Rng rng(seed);
        ModelParams model = init_model(6, {8, 8}, 4, seed + 1000);
        NormState norm = init_norm_state(model);
        Matrix x(3, 6);
        for (double& v : x.data) v = rng.normal();

        for (const auto& c : cases) {
            const AdaptConfig cfg = c.cfg.resolved(4);
            Tape tape;
            ParamSelection sel;
            sel.affine = true;
            const TapeModel tm = build_forward_tape(tape, model, norm, x, ForwardMode::Eval, sel);
            const BatchLoss bl = build_total_loss(tape, tm, model.classifier, cfg, x.rows);
            if (!bl.loss.valid()) continue; // everything filtered; nothing to check
            const GradMap grads = tape.backward(bl.loss);

            auto value_at = [&](const std::vector<Matrix>& affine) {
                ModelParams probe = model;
                for (size_t li = 0; li < probe.layers.size(); ++li) {
                    probe.layers[li].gamma = affine[2 * li].data;
                    probe.layers[li].beta = affine[2 * li + 1].data;
                }
                NormState ns = norm;
                Tape t2;
                const TapeModel m2 =
                    build_forward_tape(t2, probe, ns, x, ForwardMode::Eval, ParamSelection{});
                return t2.scalar_value(
                    build_loss_from_plan(t2, m2, probe.classifier, cfg, bl.plan, x.rows));
            };
            std::vector<Matrix> affine;
            for (const auto& layer : model.layers) {
                affine.push_back(Matrix::row_vector(layer.gamma));
                affine.push_back(Matrix::row_vector(layer.beta));
            }
            const auto fd = finite_diff_grad(value_at, affine, 1e-5);
            for (size_t li = 0; li < model.layers.size() && pass; ++li) {
                const Matrix& ga = grads.at(tm.gammas[li].id);
                const Matrix& gb = grads.at(tm.betas[li].id);
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    const double e = std::max(rel_err(ga.data[i], fd[2 * li].data[i]),
                                              rel_err(gb.data[i], fd[2 * li + 1].data[i]));
                    if (e > worst) {
                        worst = e;
                        worst_what = std::string(c.name) + " seed " + std::to_string(seed);
                    }
                    if (e > 1e-5) pass = false;
                }
            }
        }
    }
    report(1, "analytic gradients match central finite differences (rel err <= 1e-5, 100 seeds)",
           pass, "worst " + std::to_string(worst) + " at " + worst_what);
}

// ------------------------------------------------------------ criterion 2

void criterion_collapse(const ReferenceLab& lab) {
    const TrainTrace& trace = lab.trace;
    int first_zero = -1;
    for (const auto& r : trace)
        if (r.train_accuracy == 1.0) {
            first_zero = r.epoch;
            break;
        }
    const double final_gfca = trace.back().mean_gfca;
    const double first_gfca = trace.front().mean_gfca;
    double worst_rise = 0.0;
    if (first_zero > 0)
        for (size_t i = static_cast<size_t>(first_zero); i + 1 < trace.size(); ++i)
            worst_rise = std::max(worst_rise, trace[i + 1].mean_gfca - trace[i].mean_gfca);

    const bool pass = trace.back().train_accuracy == 1.0 && final_gfca < 0.3 &&
                      final_gfca < 0.5 * first_gfca && first_zero > 0 && worst_rise <= 0.02 &&
                      static_cast<int>(trace.size()) - first_zero >= 100;
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "acc=%.4f gfca final=%.4f epoch1=%.4f zero-error@%d rise=%.4f epochs=%zu",
                  trace.back().train_accuracy, final_gfca, first_gfca, first_zero, worst_rise,
                  trace.size());
    report(2, "reference training reaches TPT and per-sample alignment collapses", pass, detail);
}

// ------------------------------------------------------------ criterion 3

void criterion_misalignment(const ReferenceLab& lab) {
    const Dataset shifted = apply_shift(lab.test, ShiftSpec{ShiftKind::GaussianNoise, 3, 0});
    NormState scratch = lab.norm;
    const ForwardResult fr = forward(lab.params, scratch, shifted.features, ForwardMode::Eval);
    const MisalignmentStats stats =
        misalignment_stats(fr.features, lab.params.classifier, shifted.labels, fr.probs);

    bool pass = stats.wrong.count >= 20;
    pass = pass && stats.correct.mean_gfca == stats.correct.mean_pfca; // same index, exact
    pass = pass && stats.correct.mean_gfca < stats.wrong.mean_pfca;
    pass = pass && stats.wrong.mean_pfca + 0.05 <= stats.wrong.mean_gfca;
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "wrong n=%lld mu_correct=%.4f mu_hat_wrong=%.4f mu_wrong=%.4f margin=%.4f",
                  static_cast<long long>(stats.wrong.count), stats.correct.mean_gfca,
                  stats.wrong.mean_pfca, stats.wrong.mean_gfca,
                  stats.wrong.mean_gfca - stats.wrong.mean_pfca);
    report(3, "misalignment ordering mu_correct < mu_hat_wrong << mu_wrong at severity 3", pass,
           detail);
}

// ------------------------------------------------------------ criterion 4

void criterion_severity_trend(const ReferenceLab& lab) {
    std::vector<double> gap(6, 0.0); // gap[0] = unshifted baseline, defined as 0
    for (int severity = 1; severity <= 5; ++severity) {
        for (uint64_t seed = 0; seed < 5; ++seed) {
            const Dataset shifted =
                apply_shift(lab.test, ShiftSpec{ShiftKind::GaussianNoise, severity, seed});
            NormState scratch = lab.norm;
            const ForwardResult fr =
                forward(lab.params, scratch, shifted.features, ForwardMode::Eval);
            const MisalignmentStats stats = misalignment_stats(
                fr.features, lab.params.classifier, shifted.labels, fr.probs);
            gap[static_cast<size_t>(severity)] +=
                (stats.wrong.mean_gfca - stats.wrong.mean_pfca) / 5.0;
        }
    }
    int non_decreasing = 0;
    for (int s = 1; s <= 5; ++s)
        if (gap[static_cast<size_t>(s)] >= gap[static_cast<size_t>(s - 1)]) ++non_decreasing;
    const bool pass = non_decreasing >= 4;
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "gaps: %.4f %.4f %.4f %.4f %.4f, non-decreasing steps %d/5", gap[1], gap[2],
                  gap[3], gap[4], gap[5], non_decreasing);
    report(4, "wrong-group G-FCA/P-FCA gap widens with severity (>= 4 of 5 steps)", pass, detail);
}

// ------------------------------------------------------------ criterion 5

void criterion_efficacy(const ReferenceLab& lab) {
    double acc_none = 0.0, acc_tent = 0.0, acc_nctta = 0.0;
    double gfca_tent = 0.0, gfca_nctta = 0.0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        acc_none += lab.run(Method::NoAdapt, ScenarioKind::Mild, 3, seed).stream_accuracy / 5.0;
        const RunLog tent = lab.run(Method::Tent, ScenarioKind::Mild, 3, seed);
        acc_tent += tent.stream_accuracy / 5.0;
        gfca_tent += tent.final_mean_gfca / 5.0;
        const RunLog nctta = lab.run(Method::Nctta, ScenarioKind::Mild, 3, seed);
        acc_nctta += nctta.stream_accuracy / 5.0;
        gfca_nctta += nctta.final_mean_gfca / 5.0;
    }
    const bool pass = acc_nctta >= acc_tent && gfca_nctta <= gfca_tent &&
                      acc_tent >= acc_none + 0.01 && acc_nctta >= acc_none + 0.01;
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "acc no_adapt=%.4f tent=%.4f nctta=%.4f | final gfca tent=%.4f nctta=%.4f",
                  acc_none, acc_tent, acc_nctta, gfca_tent, gfca_nctta);
    report(5, "nctta >= tent and both beat no_adapt by >= 1pp at severity 3 (seeds 0-4)", pass,
           detail);
}

// ------------------------------------------------------------ criterion 6

void criterion_degeneracy(const ReferenceLab& lab) {
    AdaptConfig tent;
    tent.method = Method::Tent;
    tent.nc_weight = 0.0;
    tent.use_filter = false;
    tent.use_lambda = false;
    AdaptConfig degenerate;
    degenerate.method = Method::Nctta;
    degenerate.alpha = 1.0;
    degenerate.k = 1;
    degenerate.nu = 0.0;
    degenerate.gamma_ent = std::numeric_limits<double>::infinity();
    degenerate.tau_ent = 0.0;
    degenerate.nc_weight = 0.0;
    degenerate.use_lambda = false;

    Rng rng(123);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Matrix x(16, 16);
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                x(i, j) = lab.test.features(static_cast<int>(rng.next_below(
                              static_cast<uint64_t>(lab.test.size()))), j);
        NormState s1 = lab.norm, s2 = lab.norm;
        Tape t1, t2;
        const TapeModel m1 =
            build_forward_tape(t1, lab.params, s1, x, ForwardMode::BatchStat, ParamSelection{});
        const TapeModel m2 =
            build_forward_tape(t2, lab.params, s2, x, ForwardMode::BatchStat, ParamSelection{});
        const BatchLoss l1 =
            build_total_loss(t1, m1, lab.params.classifier, tent.resolved(4), x.rows);
        const BatchLoss l2 =
            build_total_loss(t2, m2, lab.params.classifier, degenerate.resolved(4), x.rows);
        worst = std::max(worst, std::abs(t1.scalar_value(l1.loss) - t2.scalar_value(l2.loss)));
    }

    bool targets_ok = true;
    Rng trng(321);
    for (int trial = 0; trial < 1000 && targets_ok; ++trial) {
        FcaVector d;
        d.d.resize(4);
        for (auto& v : d.d) v = trng.uniform(0.0, 2.0);
        std::vector<double> z(4);
        for (double& v : z) v = trng.uniform(-6.0, 6.0);
        const auto p = softmax(z);
        const auto t = hybrid_target(d, p, 1.0, 1.0, 1);
        targets_ok = t.target_set.size() == 1 && t.target_set[0] == argmax(p);
    }

    const bool pass = worst <= 1e-12 && targets_ok;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "loss diff max=%.2e, argmax targets %s", worst,
                  targets_ok ? "exact on 1000 draws" : "MISMATCH");
    report(6, "degenerate nctta config reproduces the tent loss; alpha=1,k=1 targets argmax",
           pass, detail);
}

// ------------------------------------------------------------ criterion 7

void criterion_sign_contract(const ReferenceLab&) {
    bool pass = true;
    Rng rng(77);
    for (int trial = 0; trial < 100 && pass; ++trial) {
        const int K = 2 + static_cast<int>(rng.next_below(5));
        std::vector<double> d(static_cast<size_t>(K));
        for (auto& x : d) x = rng.uniform(0.05, 1.95);
        const int k = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(K - 1)));
        std::vector<int> idx(static_cast<size_t>(K));
        for (int j = 0; j < K; ++j) idx[static_cast<size_t>(j)] = j;
        Rng shuffler = rng.fork(static_cast<uint64_t>(trial));
        shuffler.shuffle(idx);
        const std::vector<int> target(idx.begin(), idx.begin() + k);
        const double margin = rng.uniform(0.0, 1.5);

        auto cosines_of = [](const std::vector<double>& dist) {
            std::vector<double> c(dist.size());
            for (size_t j = 0; j < dist.size(); ++j) c[j] = 1.0 - dist[j] * dist[j] / 2.0;
            return c;
        };
        for (LossVariant variant : {LossVariant::InfoNce, LossVariant::L2, LossVariant::Triplet}) {
            const double base = loss_nc_value(d, cosines_of(d), target, variant, margin);
            for (int j = 0; j < K && pass; ++j) {
                std::vector<double> bumped = d;
                bumped[static_cast<size_t>(j)] += 1e-4;
                const double moved =
                    loss_nc_value(bumped, cosines_of(bumped), target, variant, margin);
                const bool in_target =
                    std::find(target.begin(), target.end(), j) != target.end();
                if (in_target && moved < base - 1e-12) pass = false;
                if (!in_target && moved > base + 1e-12) pass = false;
            }
        }
    }
    report(7, "alignment losses prefer closer positives and farther negatives (100 configs)",
           pass, pass ? "all perturbation signs consistent" : "sign violation found");
}

// ------------------------------------------------------------ criterion 8

void criterion_scenarios(const ReferenceLab& lab) {
    // CTTA: five severity segments on one continuously adapted model.
    ModelParams p = lab.params;
    NormState n = lab.norm;
    AdaptConfig cfg = lab.bench;
    ScenarioSpec spec;
    spec.kind = ScenarioKind::Ctta;
    spec.shift = ShiftKind::GaussianNoise;
    spec.severities = {1, 2, 3, 4, 5};
    const RunLog ctta = run_scenario(p, n, lab.test, spec, cfg, 0);
    bool pass = ctta.segments.size() == 5;
    bool params_moved = false;
    for (size_t li = 0; li < p.layers.size(); ++li)
        if (p.layers[li].gamma != lab.params.layers[li].gamma) params_moved = true;
    pass = pass && params_moved; // no reset: the same state flows across segments

    // bs1: strictly sequential single-sample stream on running statistics.
    double acc_none = 0.0, acc_nctta = 0.0;
    bool bs1_ok = true;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        acc_none += lab.run(Method::NoAdapt, ScenarioKind::Bs1, 3, seed).stream_accuracy / 5.0;
        ModelParams pb = lab.params;
        NormState nb = lab.norm;
        const NormState nb_before = nb;
        AdaptConfig cb = lab.bench_bs1;
        ScenarioSpec sb;
        sb.kind = ScenarioKind::Bs1;
        sb.shift = ShiftKind::GaussianNoise;
        sb.severity = 3;
        const RunLog r = run_scenario(pb, nb, lab.test, sb, cb, seed);
        acc_nctta += r.stream_accuracy / 5.0;
        if (r.steps.size() != static_cast<size_t>(lab.test.size())) bs1_ok = false;
        for (size_t s = 0; s < r.steps.size(); ++s) {
            if (r.steps[s].batch_size != 1 || r.steps[s].step != static_cast<int>(s))
                bs1_ok = false;
        }
        for (size_t li = 0; li < nb.layers.size(); ++li)
            if (nb.layers[li].running_mean != nb_before.layers[li].running_mean) bs1_ok = false;
    }
    pass = pass && bs1_ok && acc_nctta >= acc_none;
    char detail[256];
    std::snprintf(detail, sizeof(detail),
                  "ctta segments=%zu params_moved=%d | bs1 acc no_adapt=%.4f nctta=%.4f",
                  ctta.segments.size(), params_moved ? 1 : 0, acc_none, acc_nctta);
    report(8, "ctta streams 5 segments with no reset; bs1 adapts at batch size 1", pass, detail);
}

// ------------------------------------------------------------ criterion 9

void criterion_metric_identities(const ReferenceLab& lab) {
    Rng rng(55);
    double worst_identity = 0.0;
    bool range_ok = true;
    for (int trial = 0; trial < 100000; ++trial) {
        std::vector<double> h(8), w(8);
        for (auto& x : h) x = rng.normal();
        for (auto& x : w) x = rng.normal();
        const auto hn = l2_normalized(h);
        const auto wn = l2_normalized(w);
        double cos = 0.0, s = 0.0;
        for (size_t j = 0; j < hn.size(); ++j) {
            cos += hn[j] * wn[j];
            const double diff = hn[j] - wn[j];
            s += diff * diff;
        }
        const double direct = std::sqrt(s);
        const double via_cos = std::sqrt(std::max(0.0, 2.0 - 2.0 * cos));
        worst_identity = std::max(worst_identity, std::abs(direct - via_cos));
        if (direct < 0.0 || direct > 2.0) range_ok = false;
    }

    const double self_dual = nc3_selfduality(lab.params.classifier, lab.params.classifier);

    // An adaptation run must leave the classifier bit-identical.
    ModelParams p = lab.params;
    NormState n = lab.norm;
    AdaptConfig cfg = lab.bench;
    ScenarioSpec spec;
    spec.kind = ScenarioKind::Mild;
    spec.shift = ShiftKind::GaussianNoise;
    spec.severity = 3;
    run_scenario(p, n, lab.test, spec, cfg, 0);
    const bool classifier_frozen =
        std::memcmp(p.classifier.data.data(), lab.params.classifier.data.data(),
                    p.classifier.data.size() * sizeof(double)) == 0;

    const bool pass = worst_identity <= 1e-10 && range_ok && self_dual == 0.0 && classifier_frozen;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "identity worst=%.2e range ok=%d selfdual(M=w)=%.1e classifier frozen=%d",
                  worst_identity, range_ok ? 1 : 0, self_dual, classifier_frozen ? 1 : 0);
    report(9, "fca identities on 1e5 pairs; self-duality zero; classifier immutable", pass,
           detail);
}

} // namespace

int main() {
    std::printf("nctta acceptance suite\n");
    const ReferenceLab lab;
    std::printf("reference model trained: %zu epochs, clean test accuracy %.4f\n",
                lab.trace.size(), evaluate_accuracy(lab.params, lab.norm, lab.test));

    criterion_gradients(lab);
    criterion_collapse(lab);
    criterion_misalignment(lab);
    criterion_severity_trend(lab);
    criterion_efficacy(lab);
    criterion_degeneracy(lab);
    criterion_sign_contract(lab);
    criterion_scenarios(lab);
    criterion_metric_identities(lab);

    if (g_failures == 0) {
        std::printf("all 9 criteria passed\n");
        return 0;
    }
    std::printf("%d criterion(s) FAILED\n", g_failures);
    return 1;
}
